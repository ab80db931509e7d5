//! Confusable-phrase mining: phonetic neighbours by phoneme edit distance,
//! semantic neighbours by embedding cosine, and word permutations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::edit_distance::{bounded_edit_distance, edit_distance, BkTree};
use super::lexicon::{split_phrase, Lexicon};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Most permutations returned by [`permute_words`].
pub const PERMUTATION_CAP: usize = 24;

/// Result of a neighbour query; `exhausted` is set when fewer than `k`
/// candidates existed.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors<T> {
    pub items: Vec<(String, T)>,
    pub exhausted: bool,
}

/// Word → fixed-dimension vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl SemanticTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn insert(&mut self, word: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector for {word:?} has {} dims, table has {}", v.len(), self.dim)));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::Invalid(format!("zero vector for {word:?}")));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite vector for {word:?}")));
        }
        self.vectors.insert(word.to_string(), v);
        Ok(())
    }

    /// Parses `word v1 v2 ... vm` lines; `m` is taken from the first line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let v = fields
                .map(|f| f.parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
                .collect::<Result<Vec<_>>>()?;
            let t = table.get_or_insert_with(|| Self::new(v.len()));
            t.insert(word, v).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        table.ok_or(Error::EmptyInput)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn cosine<S: Scalar>(u: &[S], v: &[S]) -> S {
    let dot: S = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu: S = u.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nv: S = v.iter().map(|&a| a * a).sum::<S>().sqrt();
    dot / (nu * nv)
}

fn phrase_key(lexicon: &Lexicon, phrase: &str) -> Result<Vec<usize>> {
    Ok(lexicon.phrase_g2p(&split_phrase(phrase))?.ids)
}

fn canonical(phrase: &str) -> String {
    split_phrase(phrase).join(" ")
}

/// The `k` corpus phrases phonetically closest to `target` (edit distance on
/// concatenated phoneme sequences, ties broken lexicographically), target
/// excluded. Candidates are scanned with a banded DP bounded by the current
/// `k`-th best distance.
pub fn mine_phonetic_neighbors(target: &str, corpus: &[String], k: usize, lexicon: &Lexicon) -> Result<Neighbors<usize>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let target_text = canonical(target);
    let target_key = phrase_key(lexicon, target)?;
    let candidates: BTreeSet<String> =
        corpus.iter().map(|p| canonical(p)).filter(|p| !p.is_empty() && *p != target_text).collect();

    let mut best: Vec<(usize, String)> = Vec::new();
    for phrase in candidates {
        let key = phrase_key(lexicon, &phrase)?;
        let d = if best.len() < k {
            edit_distance(&target_key, &key)
        } else {
            match bounded_edit_distance(&target_key, &key, best[k - 1].0) {
                Some(d) => d,
                None => continue,
            }
        };
        let at = best.partition_point(|(bd, bp)| (*bd, bp.as_str()) < (d, phrase.as_str()));
        if at < k {
            best.insert(at, (d, phrase));
            best.truncate(k);
        }
    }
    let exhausted = best.len() < k;
    Ok(Neighbors { items: best.into_iter().map(|(d, p)| (p, d)).collect(), exhausted })
}

/// BK-tree over a phrase list for repeated phonetic queries.
#[derive(Clone, Debug, Default)]
pub struct PhoneticIndex {
    tree: BkTree,
    len: usize,
}

impl PhoneticIndex {
    pub fn build<P: AsRef<str>>(phrases: &[P], lexicon: &Lexicon) -> Result<Self> {
        let mut tree = BkTree::new();
        let unique: BTreeSet<String> = phrases.iter().map(|p| canonical(p.as_ref())).filter(|p| !p.is_empty()).collect();
        let len = unique.len();
        for p in unique {
            tree.insert(phrase_key(lexicon, &p)?, p);
        }
        Ok(Self { tree, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Same contract as [`mine_phonetic_neighbors`].
    pub fn nearest(&self, target: &str, k: usize, lexicon: &Lexicon) -> Result<Neighbors<usize>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let target_text = canonical(target);
        let key = phrase_key(lexicon, target)?;
        let items = self.tree.nearest(&key, k, |l| l != target_text);
        let exhausted = items.len() < k;
        Ok(Neighbors { items, exhausted })
    }

    /// Every indexed phrase within `radius`, target excluded, sorted.
    pub fn within(&self, target: &str, radius: usize, lexicon: &Lexicon) -> Result<Vec<(String, usize)>> {
        let target_text = canonical(target);
        let key = phrase_key(lexicon, target)?;
        let mut out: Vec<(String, usize)> =
            self.tree.within(&key, radius).into_iter().filter(|(p, _)| *p != target_text).collect();
        out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }
}

/// Top-`k` words by cosine similarity to `target`, target excluded.
pub fn mine_semantic_neighbors(target: &str, table: &SemanticTable, k: usize) -> Result<Vec<(String, f64)>> {
    let tv = table.get(target).ok_or_else(|| Error::MissingWord(target.to_string()))?;
    let mut scored: Vec<(String, f64)> =
        table.vectors.iter().filter(|(w, _)| w.as_str() != target).map(|(w, v)| (w.clone(), cosine(tv, v))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

fn next_permutation<T: Ord>(v: &mut [T]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Distinct reorderings of `words` other than the original, in
/// lexicographic order, at most [`PERMUTATION_CAP`].
pub fn permute_words<W: AsRef<str>>(words: &[W]) -> Vec<Vec<String>> {
    let original: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
    if original.len() < 2 {
        return Vec::new();
    }
    let mut cur = original.clone();
    cur.sort();
    let mut out = Vec::new();
    loop {
        if cur != original {
            out.push(cur.clone());
            if out.len() == PERMUTATION_CAP {
                break;
            }
        }
        if !next_permutation(&mut cur) {
            break;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusableKind {
    Phonetic,
    Semantic,
    Permutation,
}

/// Mined hard negatives for one target phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusableSet {
    pub target: String,
    /// `(phrase, phoneme edit distance)`, ascending.
    pub phonetic: Vec<(String, usize)>,
    /// `(phrase, cosine)`, descending.
    pub semantic: Vec<(String, f64)>,
    /// `(phrase, phoneme edit distance to target)`, lexicographic by words.
    pub permutations: Vec<(String, usize)>,
}

/// One JSON line of a confusable-set file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusableRecord {
    pub target: String,
    pub kind: ConfusableKind,
    pub candidate: String,
    pub score: f64,
}

impl ConfusableSet {
    pub fn records(&self) -> Vec<ConfusableRecord> {
        let rec = |kind, candidate: &str, score: f64| ConfusableRecord {
            target: self.target.clone(),
            kind,
            candidate: candidate.to_string(),
            score,
        };
        let mut out = Vec::new();
        out.extend(self.phonetic.iter().map(|(p, d)| rec(ConfusableKind::Phonetic, p, *d as f64)));
        out.extend(self.semantic.iter().map(|(p, c)| rec(ConfusableKind::Semantic, p, *c)));
        out.extend(self.permutations.iter().map(|(p, d)| rec(ConfusableKind::Permutation, p, *d as f64)));
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Semantic confusables for a phrase: for a single word its nearest words;
/// for several words, the phrase with one word swapped for a neighbour.
/// Words missing from the table are reported in the returned warnings.
pub fn semantic_phrase_neighbors(target: &str, table: &SemanticTable, k: usize) -> (Vec<(String, f64)>, Vec<String>) {
    let words = split_phrase(target);
    let mut warnings = Vec::new();
    let mut out: Vec<(String, f64)> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        match mine_semantic_neighbors(w, table, k) {
            Ok(neigh) => {
                for (n, c) in neigh {
                    let mut swapped = words.clone();
                    swapped[i] = n;
                    out.push((swapped.join(" "), c));
                }
            }
            Err(_) => warnings.push(format!("{w:?} not in semantic table")),
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.dedup_by(|a, b| a.0 == b.0);
    out.truncate(k);
    (out, warnings)
}

/// All three confusable kinds for `target`. Returns warnings alongside.
pub fn mine_confusables(
    target: &str,
    corpus: &[String],
    k: usize,
    lexicon: &Lexicon,
    table: Option<&SemanticTable>,
) -> Result<(ConfusableSet, Vec<String>)> {
    let target_text = canonical(target);
    let target_key = phrase_key(lexicon, &target_text)?;
    let phonetic = mine_phonetic_neighbors(&target_text, corpus, k, lexicon)?;
    let mut warnings = Vec::new();
    if phonetic.exhausted {
        warnings.push(format!("corpus has fewer than {k} candidates"));
    }
    let semantic = match table {
        Some(t) => {
            let (s, w) = semantic_phrase_neighbors(&target_text, t, k);
            warnings.extend(w);
            s
        }
        None => {
            warnings.push("no semantic table given".into());
            Vec::new()
        }
    };
    let permutations = permute_words(&split_phrase(&target_text))
        .into_iter()
        .map(|words| {
            let key = lexicon.phrase_g2p(&words)?.ids;
            Ok((words.join(" "), edit_distance(&target_key, &key)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ConfusableSet { target: target_text, phonetic: phonetic.items, semantic, permutations }, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::lexicon::INVENTORY;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lexicon(rng: &mut ChaCha8Rng, n: usize) -> Lexicon {
        let mut text = String::new();
        for i in 0..n {
            let len = rng.random_range(1..4);
            let ph: Vec<&str> = (0..len).map(|_| INVENTORY[rng.random_range(0..6)]).collect();
            text.push_str(&format!("w{i}\t{}\n", ph.join(" ")));
        }
        Lexicon::parse(&text).unwrap()
    }

    fn random_corpus(rng: &mut ChaCha8Rng, lex: &Lexicon, n: usize) -> Vec<String> {
        let words: Vec<&str> = lex.words().collect();
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..4);
                (0..len).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect()
    }

    fn exhaustive(target: &str, corpus: &[String], k: usize, lex: &Lexicon) -> Vec<(String, usize)> {
        let tk = lex.phrase_g2p(&split_phrase(target)).unwrap().ids;
        let mut all: Vec<(usize, String)> = corpus
            .iter()
            .filter(|p| p.as_str() != target)
            .map(|p| (edit_distance(&tk, &lex.phrase_g2p(&split_phrase(p)).unwrap().ids), p.clone()))
            .collect();
        all.sort();
        all.dedup();
        all.into_iter().take(k).map(|(d, p)| (p, d)).collect()
    }

    #[test]
    fn homophone_ranks_first() {
        let lex = Lexicon::parse("read\tR EH D\nred\tR EH D\nbed\tB EH D\nbird\tB ER D\n").unwrap();
        let corpus: Vec<String> = ["bird", "red", "bed", "read"].map(String::from).to_vec();
        let n = mine_phonetic_neighbors("read", &corpus, 2, &lex).unwrap();
        assert_eq!(n.items, vec![("red".to_string(), 0), ("bed".to_string(), 1)]);
        assert!(!n.exhausted);
        let all = mine_phonetic_neighbors("read", &corpus, corpus.len() - 1, &lex).unwrap();
        assert_eq!(all.items.len(), 3);
        let over = mine_phonetic_neighbors("read", &corpus, 10, &lex).unwrap();
        assert!(over.exhausted);
        assert_eq!(over.items.len(), 3);
    }

    #[test]
    fn pruned_and_indexed_mining_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let lex = random_lexicon(&mut rng, 80);
        let corpus = random_corpus(&mut rng, &lex, 1000);
        let index = PhoneticIndex::build(&corpus, &lex).unwrap();
        for q in 0..20 {
            let target = corpus[rng.random_range(0..corpus.len())].clone();
            let k = 1 + q % 12;
            let expected = exhaustive(&target, &corpus, k, &lex);
            assert_eq!(mine_phonetic_neighbors(&target, &corpus, k, &lex).unwrap().items, expected);
            assert_eq!(index.nearest(&target, k, &lex).unwrap().items, expected);
        }
    }

    fn table() -> SemanticTable {
        SemanticTable::parse("cat 1 0 0\ndog 0.9 0.1 0\nfeline 2 0 0\ncar 0 1 0\nplane 0 0 1\n").unwrap()
    }

    #[test]
    fn semantic_neighbors_ordering() {
        let t = table();
        let n = mine_semantic_neighbors("cat", &t, 4).unwrap();
        assert_eq!(n[0], ("feline".to_string(), 1.0));
        assert_eq!(n[1].0, "dog");
        // car and plane are both orthogonal to cat: lexicographic tie-break
        assert_eq!(n[2], ("car".to_string(), 0.0));
        assert_eq!(n[3], ("plane".to_string(), 0.0));
        assert!(matches!(mine_semantic_neighbors("emu", &t, 2), Err(Error::MissingWord(_))));
    }

    #[test]
    fn semantic_table_rejects_bad_rows() {
        assert!(SemanticTable::parse("a 0 0\n").is_err());
        assert!(SemanticTable::parse("a 1 0\nb 1\n").is_err());
    }

    #[test]
    fn semantic_neighbors_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = SemanticTable::new(6);
        for i in 0..500 {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.insert(&format!("w{i:03}"), v).unwrap();
        }
        let target = "w042";
        let tv = t.get(target).unwrap().to_vec();
        let mut oracle: Vec<(String, f64)> = (0..500)
            .map(|i| format!("w{i:03}"))
            .filter(|w| w != target)
            .map(|w| {
                let v = t.get(&w).unwrap();
                let dot: f64 = tv.iter().zip(v).map(|(a, b)| a * b).sum();
                let n1 = tv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let n2 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                (w, dot / (n1 * n2))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(10);
        assert_eq!(mine_semantic_neighbors(target, &t, 10).unwrap(), oracle);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let u: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = u.iter().map(|x| a * x).collect();
            assert!((cosine(&scaled, &v) - cosine(&u, &v)).abs() <= 1e-12);
        }
    }

    #[test]
    fn permutations() {
        assert_eq!(permute_words(&["good", "boy"]), vec![vec!["boy".to_string(), "good".to_string()]]);
        assert!(permute_words(&["a", "a"]).is_empty());
        assert!(permute_words(&["solo"]).is_empty());

        let perms = permute_words(&["b", "c", "a"]);
        let mut expected = Vec::new();
        for x in ["a", "b", "c"] {
            for y in ["a", "b", "c"] {
                for z in ["a", "b", "c"] {
                    let p = vec![x.to_string(), y.to_string(), z.to_string()];
                    let mut s = p.clone();
                    s.sort();
                    if s == ["a", "b", "c"] && p != ["b", "c", "a"] {
                        expected.push(p);
                    }
                }
            }
        }
        assert_eq!(perms, expected);
        assert_eq!(perms.len(), 5);
        assert_eq!(permute_words(&["a", "b", "c", "d", "e"]).len(), PERMUTATION_CAP);
    }

    #[test]
    fn confusable_records_cover_all_kinds() {
        let lex = Lexicon::parse("good\tG UH D\nboy\tB OY\nwood\tW UH D\ntoy\tT OY\n").unwrap();
        let corpus: Vec<String> = ["wood boy", "good toy", "toy wood"].map(String::from).to_vec();
        let t = SemanticTable::parse("good 1 0\nwood 0.5 0.5\nboy 0 1\ntoy 0.1 1\n").unwrap();
        let (set, warnings) = mine_confusables("good boy", &corpus, 1, &lex, Some(&t)).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(set.phonetic, vec![("good toy".to_string(), 1)]);
        assert_eq!(set.semantic.len(), 1);
        assert_eq!(set.permutations, vec![("boy good".to_string(), 4)]);
        let jsonl = set.to_jsonl().unwrap();
        assert_eq!(jsonl.lines().count(), 3);
        let first: ConfusableRecord = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first.kind, ConfusableKind::Phonetic);

        let (set, warnings) = mine_confusables("good boy", &corpus, 1, &lex, Some(&SemanticTable::parse("cat 1\n").unwrap())).unwrap();
        assert!(set.semantic.is_empty());
        assert_eq!(warnings.len(), 2);
        assert_eq!(set.phonetic.len(), 1);
    }
}
