//! Pronunciation lexicon with a per-letter fallback for unknown words.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::PhonemeSequence;

/// ARPAbet phoneme inventory without stress marks; a phoneme's id is its
/// index here.
pub const INVENTORY: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY",
    "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y",
    "Z", "ZH",
];

/// Fallback pronunciation of each letter `a..=z`.
const LETTER_RULES: [&[&str]; 26] = [
    &["AE"],
    &["B"],
    &["K"],
    &["D"],
    &["EH"],
    &["F"],
    &["G"],
    &["HH"],
    &["IH"],
    &["JH"],
    &["K"],
    &["L"],
    &["M"],
    &["N"],
    &["AA"],
    &["P"],
    &["K"],
    &["R"],
    &["S"],
    &["T"],
    &["AH"],
    &["V"],
    &["W"],
    &["K", "S"],
    &["Y"],
    &["Z"],
];

pub fn phoneme_id(symbol: &str) -> Option<usize> {
    let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
    INVENTORY.iter().position(|&p| p == base)
}

pub fn phoneme_symbol(id: usize) -> Option<&'static str> {
    INVENTORY.get(id).copied()
}

/// Lowercases and drops everything except letters, digits and apostrophes.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'')
        .flat_map(char::to_lowercase)
        .collect()
}

pub fn split_phrase(phrase: &str) -> Vec<String> {
    phrase.split_whitespace().map(normalize_word).filter(|w| !w.is_empty()).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, PhonemeSequence>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inventory_size(&self) -> usize {
        INVENTORY.len()
    }

    pub fn insert(&mut self, word: &str, phonemes: PhonemeSequence) -> Result<()> {
        let word = normalize_word(word);
        if word.is_empty() {
            return Err(Error::EmptyInput);
        }
        PhonemeSequence::new(phonemes.ids.clone(), INVENTORY.len())?;
        self.entries.insert(word, phonemes);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn lookup(&self, word: &str) -> Option<&PhonemeSequence> {
        self.entries.get(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &PhonemeSequence)> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p))
    }

    /// Parses `word<TAB>PH1 PH2 ...` lines; blank lines and `#` comments are
    /// skipped, trailing stress digits are dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, pron) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse { line: line_no, msg: "expected word<TAB>phonemes".into() })?;
            let ids = pron
                .split_whitespace()
                .map(|p| phoneme_id(p).ok_or_else(|| Error::UnknownPhoneme { phoneme: p.to_string(), line: line_no }))
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(Error::Parse { line: line_no, msg: format!("no phonemes for {word:?}") });
            }
            let word = normalize_word(word);
            if word.is_empty() {
                return Err(Error::Parse { line: line_no, msg: "empty word".into() });
            }
            lex.entries.insert(word, PhonemeSequence { ids });
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (word, p) in &self.entries {
            let syms: Vec<&str> = p.ids.iter().map(|&id| INVENTORY[id]).collect();
            let _ = writeln!(out, "{word}\t{}", syms.join(" "));
        }
        out
    }

    /// Dictionary lookup, else per-letter rules.
    pub fn g2p(&self, word: &str) -> Result<PhonemeSequence> {
        let word = normalize_word(word);
        if word.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(p) = self.entries.get(&word) {
            return Ok(p.clone());
        }
        let ids: Vec<usize> = word
            .chars()
            .filter(char::is_ascii_lowercase)
            .flat_map(|c| LETTER_RULES[(c as u8 - b'a') as usize].iter())
            .map(|s| phoneme_id(s).expect("rule phonemes are in the inventory"))
            .collect();
        if ids.is_empty() {
            return Err(Error::Invalid(format!("no pronounceable letters in {word:?}")));
        }
        Ok(PhonemeSequence { ids })
    }

    /// Strict lookup of every word, concatenated.
    pub fn phrase_phonemes<W: AsRef<str>>(&self, words: &[W]) -> Result<PhonemeSequence> {
        if words.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut ids = Vec::new();
        for w in words {
            let p = self.lookup(w.as_ref()).ok_or_else(|| Error::MissingWord(w.as_ref().to_string()))?;
            ids.extend_from_slice(&p.ids);
        }
        Ok(PhonemeSequence { ids })
    }

    /// Like [`Lexicon::phrase_phonemes`] but falls back to [`Lexicon::g2p`].
    pub fn phrase_g2p<W: AsRef<str>>(&self, words: &[W]) -> Result<PhonemeSequence> {
        if words.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut ids = Vec::new();
        for w in words {
            ids.extend(self.g2p(w.as_ref())?.ids);
        }
        Ok(PhonemeSequence { ids })
    }
}
