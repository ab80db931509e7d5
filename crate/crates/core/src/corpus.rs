//! Synthetic keyword corpora following the easy/hard pair protocol, plus
//! open/closed-set multiclass episodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{edit_distance, split_phrase, Lexicon, PhoneticIndex, PrototypeBank, RenderProfile, INVENTORY};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, PhonemeSequence, SubwordSequence};
use crate::model::hash_json;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// A registered keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct Enrollment<S> {
    pub text: Vec<String>,
    pub subwords: SubwordSequence,
    pub phonemes: PhonemeSequence,
    pub templates: Vec<FeatureMatrix<S>>,
}

impl<S: Scalar> Enrollment<S> {
    /// Phonemes come from [`Lexicon::phrase_g2p`], subwords from `vocab`.
    pub fn new(text: &str, lexicon: &Lexicon, vocab: &Vocabulary, templates: Vec<FeatureMatrix<S>>) -> Result<Self> {
        let words = split_phrase(text);
        if words.is_empty() {
            return Err(Error::EmptyInput);
        }
        let phonemes = lexicon.phrase_g2p(&words)?;
        let subwords = vocab.encode(&words)?;
        Ok(Self { text: words, subwords, phonemes, templates })
    }

    pub fn text_string(&self) -> String {
        self.text.join(" ")
    }

    pub fn without_templates(&self) -> Self {
        Self { templates: Vec::new(), ..self.clone() }
    }

    pub fn with_templates(&self, n: usize) -> Self {
        Self { templates: self.templates.iter().take(n).cloned().collect(), ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Easy,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Positive,
    Hard,
    Easy,
}

/// Query utterance paired with an enrollment (by index).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair<S> {
    pub pair_id: usize,
    pub query: FeatureMatrix<S>,
    pub query_text: Vec<String>,
    pub enrollment: usize,
    pub label: u8,
    pub split: Split,
    pub kind: PairKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Largest phoneme edit distance of a hard negative.
    pub d_hard: usize,
    pub train_positives: usize,
    pub train_hard: usize,
    pub train_easy: usize,
    /// Positives and negatives per test keyword, in each of the two splits.
    pub test_per_split: usize,
    pub n_templates: usize,
    /// Include phonetic confusables among the training negatives.
    pub confusables: bool,
    pub feat_dim: usize,
    pub render: RenderProfile,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 60,
            min_words: 2,
            max_words: 6,
            d_hard: 2,
            train_positives: 5,
            train_hard: 5,
            train_easy: 5,
            test_per_split: 5,
            n_templates: 1,
            confusables: true,
            feat_dim: 40,
            render: RenderProfile::default(),
        }
    }
}

impl CorpusConfig {
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug)]
pub struct Corpus<S> {
    pub config: CorpusConfig,
    pub seed: u64,
    pub enrollments: Vec<Enrollment<S>>,
    /// Enrollment indices per partition.
    pub train_keywords: Vec<usize>,
    pub test_keywords: Vec<usize>,
    pub train: Vec<EvalPair<S>>,
    pub test: Vec<EvalPair<S>>,
}

/// Stream ids for derived rendering seeds.
const TEMPLATE_STREAM: u64 = 1;
const QUERY_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Builder<'a> {
    config: &'a CorpusConfig,
    lexicon: &'a Lexicon,
    words: Vec<String>,
    word_index: PhoneticIndex,
}

impl Builder<'_> {
    fn phonemes(&self, words: &[String]) -> Result<Vec<usize>> {
        Ok(self.lexicon.phrase_phonemes(words)?.ids)
    }

    fn distance(&self, a: &[String], b: &[String]) -> Result<usize> {
        Ok(edit_distance(&self.phonemes(a)?, &self.phonemes(b)?))
    }

    fn draw_keywords<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<Vec<String>>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Constraint(format!(
                    "could not draw {n} distinct keywords of {}..={} words from {} lexicon words",
                    self.config.min_words,
                    self.config.max_words,
                    self.words.len()
                )));
            }
            let len = rng.random_range(self.config.min_words..=self.config.max_words);
            let phrase: Vec<String> = self.words.choose_multiple(rng, len).cloned().collect();
            if phrase.len() == len && seen.insert(phrase.join(" ")) {
                out.push(phrase);
            }
        }
        Ok(out)
    }

    /// Up to `n` distinct phrases within `d_hard` of `phrase`, each made by
    /// swapping one word for a phonetic neighbour.
    fn hard_negatives<R: Rng>(&self, rng: &mut R, phrase: &[String], n: usize, forbidden: &BTreeSet<String>) -> Result<Vec<Vec<String>>> {
        let mut options: Vec<Vec<String>> = Vec::new();
        for (i, w) in phrase.iter().enumerate() {
            for (neighbor, d) in self.word_index.within(w, self.config.d_hard, self.lexicon)? {
                if d == 0 {
                    continue;
                }
                let mut swapped = phrase.to_vec();
                swapped[i] = neighbor;
                let text = swapped.join(" ");
                let dist = self.distance(phrase, &swapped)?;
                if (1..=self.config.d_hard).contains(&dist) && !forbidden.contains(&text) {
                    options.push(swapped);
                }
            }
        }
        options.sort();
        options.dedup();
        options.shuffle(rng);
        options.truncate(n);
        if options.is_empty() && n > 0 {
            return Err(Error::Constraint(format!(
                "no hard negative within D_hard = {} for keyword {:?}",
                self.config.d_hard,
                phrase.join(" ")
            )));
        }
        Ok(options)
    }

    /// `n` keywords from `pool` at distance greater than `d_hard`.
    fn easy_negatives<R: Rng>(&self, rng: &mut R, phrase: &[String], pool: &[Vec<String>], n: usize) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 50 * n + 100 {
                return Err(Error::Constraint(format!(
                    "no easy negative beyond D_hard = {} for keyword {:?}",
                    self.config.d_hard,
                    phrase.join(" ")
                )));
            }
            let cand = pool.choose(rng).expect("pool is nonempty");
            if cand.as_slice() != phrase && self.distance(phrase, cand)? > self.config.d_hard {
                out.push(cand.clone());
            }
        }
        Ok(out)
    }
}

pub fn build_corpus<S: Scalar>(config: &CorpusConfig, lexicon: &Lexicon, vocab: &Vocabulary, seed: u64) -> Result<Corpus<S>> {
    if config.min_words == 0 || config.min_words > config.max_words {
        return Err(Error::Invalid("need 1 <= min_words <= max_words".into()));
    }
    if config.n_train == 0 || config.n_test == 0 {
        return Err(Error::Constraint("train and test keyword sets must be nonempty".into()));
    }
    if config.train_positives == 0 || config.test_per_split == 0 {
        return Err(Error::Constraint("every keyword needs at least one positive pair".into()));
    }
    let words: Vec<String> = lexicon.words().map(str::to_string).collect();
    if words.len() < config.max_words {
        return Err(Error::Constraint(format!(
            "lexicon has {} words, fewer than the {} a keyword may need",
            words.len(),
            config.max_words
        )));
    }
    let word_index = PhoneticIndex::build(&words, lexicon)?;
    let builder = Builder { config, lexicon, words, word_index };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = PrototypeBank::new(INVENTORY.len(), config.feat_dim, seed);

    let keywords = builder.draw_keywords(&mut rng, config.n_train + config.n_test)?;
    let (train_kw, test_kw) = keywords.split_at(config.n_train);
    let test_texts: BTreeSet<String> = test_kw.iter().map(|k| k.join(" ")).collect();
    let train_texts: BTreeSet<String> = train_kw.iter().map(|k| k.join(" ")).collect();

    let mut enrollments = Vec::with_capacity(keywords.len());
    for (i, kw) in keywords.iter().enumerate() {
        let phon = lexicon.phrase_phonemes(kw)?;
        let templates = (0..config.n_templates)
            .map(|t| bank.render(&phon, derive_seed(seed, TEMPLATE_STREAM, (i * 64 + t) as u64), &config.render))
            .collect::<Result<Vec<_>>>()?;
        enrollments.push(Enrollment::new(&kw.join(" "), lexicon, vocab, templates)?);
    }

    let mut pair_id = 0usize;
    let mut make_pair = |text: &[String], enrollment: usize, label: u8, split: Split, kind: PairKind| -> Result<EvalPair<S>> {
        let phon = lexicon.phrase_phonemes(text)?;
        let query = bank.render(&phon, derive_seed(seed, QUERY_STREAM, pair_id as u64), &config.render)?;
        let p = EvalPair { pair_id, query, query_text: text.to_vec(), enrollment, label, split, kind };
        pair_id += 1;
        Ok(p)
    };

    let mut train = Vec::new();
    for (i, kw) in train_kw.iter().enumerate() {
        for _ in 0..config.train_positives {
            train.push(make_pair(kw, i, 1, Split::Train, PairKind::Positive)?);
        }
        if config.confusables {
            for neg in builder.hard_negatives(&mut rng, kw, config.train_hard, &test_texts)? {
                train.push(make_pair(&neg, i, 0, Split::Train, PairKind::Hard)?);
            }
        }
        for neg in builder.easy_negatives(&mut rng, kw, train_kw, config.train_easy)? {
            train.push(make_pair(&neg, i, 0, Split::Train, PairKind::Easy)?);
        }
    }

    let mut test = Vec::new();
    for (j, kw) in test_kw.iter().enumerate() {
        let e = config.n_train + j;
        for split in [Split::Easy, Split::Hard] {
            for _ in 0..config.test_per_split {
                test.push(make_pair(kw, e, 1, split, PairKind::Positive)?);
            }
        }
        let easy = builder.easy_negatives(&mut rng, kw, test_kw, config.test_per_split)?;
        for neg in easy {
            test.push(make_pair(&neg, e, 0, Split::Easy, PairKind::Easy)?);
        }
        let hard = builder.hard_negatives(&mut rng, kw, config.test_per_split, &train_texts)?;
        for neg in hard {
            test.push(make_pair(&neg, e, 0, Split::Hard, PairKind::Hard)?);
        }
    }

    Ok(Corpus {
        config: config.clone(),
        seed,
        enrollments,
        train_keywords: (0..config.n_train).collect(),
        test_keywords: (config.n_train..config.n_train + config.n_test).collect(),
        train,
        test,
    })
}

/// Pseudo-word lexicon: CV, CVC and CVCC shapes spelled by concatenating
/// lowercase phoneme symbols; homophones and spelling collisions dropped.
pub fn generate_lexicon(n_words: usize, seed: u64) -> Lexicon {
    const VOWELS: [&str; 15] = ["AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"];
    let consonants: Vec<&str> = INVENTORY.iter().copied().filter(|p| !VOWELS.contains(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lex = Lexicon::new();
    let mut prons = BTreeSet::new();
    let mut attempts = 0;
    while lex.len() < n_words && attempts < 100 * n_words + 100 {
        attempts += 1;
        let shape: &[bool] = match rng.random_range(0..4) {
            0 => &[false, true],
            1 | 2 => &[false, true, false],
            _ => &[false, true, false, false],
        };
        let syms: Vec<&str> =
            shape.iter().map(|&v| if v { *VOWELS.choose(&mut rng).unwrap() } else { *consonants.choose(&mut rng).unwrap() }).collect();
        let spelling: String = syms.iter().map(|s| s.to_lowercase()).collect();
        let ids: Vec<usize> = syms.iter().map(|s| crate::augmentation::lexicon::phoneme_id(s).unwrap()).collect();
        if lex.contains(&spelling) || !prons.insert(ids.clone()) {
            continue;
        }
        lex.insert(&spelling, PhonemeSequence { ids }).expect("inventory ids");
    }
    lex
}

/// Open/closed-set multiclass episode over `n_targets + n_unknown` keywords.
#[derive(Clone, Debug)]
pub struct Episode<S> {
    /// Enrollment indices of the enrolled targets.
    pub targets: Vec<usize>,
    pub unknowns: Vec<usize>,
    pub queries: Vec<EpisodeQuery<S>>,
}

#[derive(Clone, Debug)]
pub struct EpisodeQuery<S> {
    pub query: FeatureMatrix<S>,
    pub text: Vec<String>,
    /// Index into `targets`, `None` for unknown keywords.
    pub label: Option<usize>,
}

pub fn build_multiclass_episode<S: Scalar>(
    corpus: &Corpus<S>,
    lexicon: &Lexicon,
    n_targets: usize,
    n_unknown: usize,
    queries_per_keyword: usize,
    seed: u64,
) -> Result<Episode<S>> {
    let pool = &corpus.test_keywords;
    if pool.len() < n_targets + n_unknown || n_targets == 0 {
        return Err(Error::Constraint(format!(
            "episode needs {} keywords, corpus has {} test keywords",
            n_targets + n_unknown,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = pool.choose_multiple(&mut rng, n_targets + n_unknown).copied().collect();
    let (targets, unknowns) = chosen.split_at(n_targets);
    let bank = PrototypeBank::new(INVENTORY.len(), corpus.config.feat_dim, corpus.seed);
    let mut queries = Vec::new();
    for (k, &e) in chosen.iter().enumerate() {
        let text = &corpus.enrollments[e].text;
        let phon = lexicon.phrase_phonemes(text)?;
        for q in 0..queries_per_keyword {
            let s = derive_seed(seed, EPISODE_STREAM, (k * 1000 + q) as u64);
            queries.push(EpisodeQuery {
                query: bank.render(&phon, s, &corpus.config.render)?,
                text: text.clone(),
                label: (k < n_targets).then_some(k),
            });
        }
    }
    Ok(Episode { targets: targets.to_vec(), unknowns: unknowns.to_vec(), queries })
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u8 = 1;

/// Magic `FEAT`, version byte, u32 LE `T` and `F`, f64 LE frame rate, then
/// `T·F` f64 LE values row-major.
pub fn write_features<S: Scalar, W: Write>(f: &FeatureMatrix<S>, mut w: W) -> Result<()> {
    w.write_all(FEAT_MAGIC)?;
    w.write_all(&[FEAT_VERSION])?;
    w.write_all(&(f.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(f.num_bins() as u32).to_le_bytes())?;
    w.write_all(&f.frame_rate_hz().to_le_bytes())?;
    for v in f.frames().data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<S: Scalar, R: Read>(mut r: R) -> Result<FeatureMatrix<S>> {
    let mut head = [0u8; 17];
    r.read_exact(&mut head)?;
    if &head[..4] != FEAT_MAGIC {
        return Err(Error::BadHeader("feature file"));
    }
    if head[4] != FEAT_VERSION {
        return Err(Error::Version { kind: "feature file", version: u32::from(head[4]) });
    }
    let t = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
    let mut rate = [0u8; 8];
    rate[..4].copy_from_slice(&head[13..17]);
    r.read_exact(&mut rate[4..])?;
    let mut buf = vec![0u8; t * f * 8];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
    FeatureMatrix::new(Tensor::matrix(t, f, data)?, f64::from_le_bytes(rate))
}

/// Where a feature matrix lives in a manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatRef {
    Path(String),
    Inline { frames: Vec<Vec<f64>>, frame_rate_hz: f64 },
}

impl FeatRef {
    pub fn load<S: Scalar>(&self, dir: &Path) -> Result<FeatureMatrix<S>> {
        match self {
            FeatRef::Path(p) => read_features(std::io::BufReader::new(fs::File::open(dir.join(p))?)),
            FeatRef::Inline { frames, frame_rate_hz } => {
                let rows: Vec<Vec<S>> = frames.iter().map(|r| r.iter().map(|&v| S::of(v)).collect()).collect();
                FeatureMatrix::new(Tensor::from_rows(&rows)?, *frame_rate_hz)
            }
        }
    }
}

/// One line of `train.jsonl` / `test.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: usize,
    pub query_feat: FeatRef,
    pub query_text: String,
    pub enroll_text: String,
    pub n_templates: usize,
    pub template_feats: Vec<FeatRef>,
    pub label: u8,
    pub split: Split,
    pub kind: PairKind,
    pub config_hash: String,
}

/// `meta.json` of a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    pub config: CorpusConfig,
    pub config_hash: String,
    pub n_train_keywords: usize,
    pub n_test_keywords: usize,
    pub train_keywords: Vec<String>,
    pub test_keywords: Vec<String>,
}

pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

impl<S: Scalar> Corpus<S> {
    pub fn config_hash(&self) -> String {
        let v = serde_json::json!({ "corpus": self.config, "seed": self.seed });
        hash_json(&v)
    }

    pub fn meta(&self) -> CorpusMeta {
        let texts = |ids: &[usize]| ids.iter().map(|&i| self.enrollments[i].text_string()).collect();
        CorpusMeta {
            seed: self.seed,
            config: self.config.clone(),
            config_hash: self.config_hash(),
            n_train_keywords: self.train_keywords.len(),
            n_test_keywords: self.test_keywords.len(),
            train_keywords: texts(&self.train_keywords),
            test_keywords: texts(&self.test_keywords),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = &EvalPair<S>> {
        self.train.iter().chain(&self.test)
    }

    /// Writes `meta.json`, `train.jsonl`, `test.jsonl`, the lexicon and
    /// vocabulary, and one FEAT file per query and template under `feats/`.
    pub fn write(&self, dir: &Path, lexicon: &Lexicon, vocab: &Vocabulary) -> Result<()> {
        let feats = dir.join("feats");
        fs::create_dir_all(&feats)?;
        let write_feat = |name: &str, f: &FeatureMatrix<S>| -> Result<FeatRef> {
            let mut buf = Vec::new();
            write_features(f, &mut buf)?;
            fs::write(feats.join(name), buf)?;
            Ok(FeatRef::Path(format!("feats/{name}")))
        };
        let mut template_refs = Vec::with_capacity(self.enrollments.len());
        for (i, e) in self.enrollments.iter().enumerate() {
            let refs = e
                .templates
                .iter()
                .enumerate()
                .map(|(t, f)| write_feat(&format!("k{i:05}_t{t}.feat"), f))
                .collect::<Result<Vec<_>>>()?;
            template_refs.push(refs);
        }
        let hash = self.config_hash();
        for (name, pairs) in [("train.jsonl", &self.train), ("test.jsonl", &self.test)] {
            let mut out = String::new();
            for p in pairs {
                let rec = ManifestRecord {
                    pair_id: p.pair_id,
                    query_feat: write_feat(&format!("q{:06}.feat", p.pair_id), &p.query)?,
                    query_text: p.query_text.join(" "),
                    enroll_text: self.enrollments[p.enrollment].text_string(),
                    n_templates: template_refs[p.enrollment].len(),
                    template_feats: template_refs[p.enrollment].clone(),
                    label: p.label,
                    split: p.split,
                    kind: p.kind,
                    config_hash: hash.clone(),
                };
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
            fs::write(dir.join(name), out)?;
        }
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta())? + "\n")?;
        fs::write(dir.join(LEXICON_FILE), lexicon.to_tsv())?;
        fs::write(dir.join(VOCAB_FILE), vocab.to_text())?;
        Ok(())
    }

    /// Reads a directory written by [`Corpus::write`].
    pub fn load(dir: &Path) -> Result<(Self, Lexicon, Vocabulary)> {
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let lexicon = Lexicon::load(&dir.join(LEXICON_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let mut enrollments: Vec<Enrollment<S>> = Vec::new();
        let mut by_text: BTreeMap<String, usize> = BTreeMap::new();
        let mut partition = |texts: &[String], enrollments: &mut Vec<Enrollment<S>>| -> Result<Vec<usize>> {
            let mut ids = Vec::new();
            for t in texts {
                let e = Enrollment::new(t, &lexicon, &vocab, Vec::new())?;
                by_text.insert(t.clone(), enrollments.len());
                ids.push(enrollments.len());
                enrollments.push(e);
            }
            Ok(ids)
        };
        let train_keywords = partition(&meta.train_keywords, &mut enrollments)?;
        let test_keywords = partition(&meta.test_keywords, &mut enrollments)?;
        let read = |name: &str, enrollments: &mut Vec<Enrollment<S>>| -> Result<Vec<EvalPair<S>>> {
            let text = fs::read_to_string(dir.join(name))?;
            let mut pairs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let rec: ManifestRecord =
                    serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
                let e = *by_text
                    .get(&rec.enroll_text)
                    .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("unknown keyword {:?}", rec.enroll_text) })?;
                if enrollments[e].templates.len() != rec.template_feats.len() {
                    enrollments[e].templates = rec.template_feats.iter().map(|f| f.load(dir)).collect::<Result<_>>()?;
                }
                pairs.push(EvalPair {
                    pair_id: rec.pair_id,
                    query: rec.query_feat.load(dir)?,
                    query_text: split_phrase(&rec.query_text),
                    enrollment: e,
                    label: rec.label,
                    split: rec.split,
                    kind: rec.kind,
                });
            }
            Ok(pairs)
        };
        let train = read("train.jsonl", &mut enrollments)?;
        let test = read("test.jsonl", &mut enrollments)?;
        let corpus = Corpus { config: meta.config, seed: meta.seed, enrollments, train_keywords, test_keywords, train, test };
        Ok((corpus, lexicon, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_train: 20,
            n_test: 8,
            train_positives: 2,
            train_hard: 2,
            train_easy: 2,
            test_per_split: 2,
            feat_dim: 6,
            ..CorpusConfig::default()
        }
    }

    fn setup() -> (Lexicon, Vocabulary) {
        let lex = generate_lexicon(200, 3);
        let vocab = Vocabulary::from_words(lex.words());
        (lex, vocab)
    }

    #[test]
    fn generated_lexicon_is_deterministic() {
        let a = generate_lexicon(100, 1);
        assert_eq!(a.len(), 100);
        assert_eq!(a, generate_lexicon(100, 1));
        assert!(a.entries().all(|(_, p)| (2..=4).contains(&p.len())));
    }

    #[test]
    fn splits_are_disjoint_and_respect_d_hard() {
        let (lex, vocab) = setup();
        let c: Corpus<f64> = build_corpus(&small_config(), &lex, &vocab, 7).unwrap();
        let train_texts: BTreeSet<String> = c.train_keywords.iter().map(|&i| c.enrollments[i].text_string()).collect();
        let test_texts: BTreeSet<String> = c.test_keywords.iter().map(|&i| c.enrollments[i].text_string()).collect();
        assert!(train_texts.is_disjoint(&test_texts));
        for p in &c.train {
            assert!(!test_texts.contains(&p.query_text.join(" ")));
            assert!(c.train_keywords.contains(&p.enrollment));
        }
        for p in &c.test {
            let e = &c.enrollments[p.enrollment];
            let d = edit_distance(&lex.phrase_phonemes(&p.query_text).unwrap().ids, &e.phonemes.ids);
            match (p.label, p.split) {
                (1, _) => assert_eq!(p.query_text, e.text),
                (0, Split::Hard) => assert!((1..=2).contains(&d)),
                (0, Split::Easy) => assert!(d > 2),
                other => panic!("{other:?}"),
            }
        }
        for &k in &c.test_keywords {
            for (split, kind) in [(Split::Easy, PairKind::Positive), (Split::Easy, PairKind::Easy), (Split::Hard, PairKind::Hard)] {
                assert!(c.test.iter().any(|p| p.enrollment == k && p.split == split && p.kind == kind));
            }
        }
        assert!(c.enrollments.iter().all(|e| e.templates.len() == 1));
    }

    #[test]
    fn templates_are_not_query_renderings() {
        let (lex, vocab) = setup();
        let c: Corpus<f64> = build_corpus(&small_config(), &lex, &vocab, 7).unwrap();
        for p in c.pairs().filter(|p| p.label == 1) {
            assert!(c.enrollments[p.enrollment].templates.iter().all(|t| *t != p.query));
        }
    }

    #[test]
    fn too_small_vocabulary_names_constraint() {
        let lex = Lexicon::parse("ab\tAA B\ncd\tK D\n").unwrap();
        let vocab = Vocabulary::from_words(lex.words());
        let err = build_corpus::<f64>(&small_config(), &lex, &vocab, 1).unwrap_err();
        assert!(matches!(err, Error::Constraint(_)), "{err}");
    }

    #[test]
    fn write_load_round_trip_and_determinism() {
        let (lex, vocab) = setup();
        let cfg = small_config();
        let c: Corpus<f64> = build_corpus(&cfg, &lex, &vocab, 7).unwrap();
        let base = std::env::temp_dir().join(format!("mmkws-corpus-{}", std::process::id()));
        let (a, b) = (base.join("a"), base.join("b"));
        c.write(&a, &lex, &vocab).unwrap();
        build_corpus::<f64>(&cfg, &lex, &vocab, 7).unwrap().write(&b, &lex, &vocab).unwrap();
        for name in ["train.jsonl", "test.jsonl", "meta.json", "feats/q000003.feat"] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
        let (loaded, _, _) = Corpus::<f64>::load(&a).unwrap();
        assert_eq!(loaded.train, c.train);
        assert_eq!(loaded.test, c.test);
        assert_eq!(loaded.enrollments, c.enrollments);
        fs::remove_dir_all(&base).unwrap();
    }

    #[test]
    fn feature_file_round_trip() {
        let f = FeatureMatrix::<f64>::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_features(&f, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FEAT");
        assert_eq!(read_features::<f64, _>(&buf[..]).unwrap(), f);
        buf[0] = b'X';
        assert!(matches!(read_features::<f64, _>(&buf[..]), Err(Error::BadHeader(_))));
    }

    #[test]
    fn episode_counts() {
        let (lex, vocab) = setup();
        let cfg = CorpusConfig { n_test: 30, ..small_config() };
        let c: Corpus<f64> = build_corpus(&cfg, &lex, &vocab, 7).unwrap();
        let ep = build_multiclass_episode(&c, &lex, 10, 20, 2, 5).unwrap();
        assert_eq!(ep.targets.len(), 10);
        assert_eq!(ep.unknowns.len(), 20);
        assert!(ep.targets.iter().all(|t| !ep.unknowns.contains(t)));
        assert_eq!(ep.queries.len(), 60);
        assert_eq!(ep.queries.iter().filter(|q| q.label.is_none()).count(), 40);
        let again = build_multiclass_episode(&c, &lex, 10, 20, 2, 5).unwrap();
        assert_eq!(again.targets, ep.targets);
        assert!(ep.queries.iter().zip(&again.queries).all(|(a, b)| a.query == b.query));
        assert!(build_multiclass_episode(&c, &lex, 10, 21, 1, 5).is_err());
    }
}
