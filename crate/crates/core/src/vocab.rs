//! Whitespace-word subword vocabulary with a reserved unknown id 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::augmentation::lexicon::normalize_word;
use crate::error::{Error, Result};
use crate::features::SubwordSequence;

pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// `<unk>` followed by the distinct words in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<String> =
            words.into_iter().map(normalize_word).filter(|w| !w.is_empty() && w != UNK).collect();
        sorted.sort();
        sorted.dedup();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(sorted);
        Self::from_tokens(tokens).expect("tokens are distinct")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate token {t:?}") });
            }
        }
        Ok(Self { tokens, index })
    }

    /// One token per line; the zero-based line index is the id. The first
    /// line must be `<unk>`.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Parse { line: 1, msg: format!("first token must be {UNK}") });
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::Parse { line: i + 1, msg: "tokens must be nonempty single words".into() });
        }
        Self::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&normalize_word(word)).copied().unwrap_or(0)
    }

    pub fn encode<W: AsRef<str>>(&self, words: &[W]) -> Result<SubwordSequence> {
        SubwordSequence::new(words.iter().map(|w| self.id(w.as_ref())).collect(), self.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_words_map_to_zero() {
        let v = Vocabulary::from_words(["good", "boy", "good"]);
        assert_eq!(v.tokens(), ["<unk>", "boy", "good"]);
        assert_eq!(v.encode(&["good", "girl"]).unwrap().ids, vec![2, 0]);
        assert!(v.encode::<&str>(&[]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::from_words(["x", "y"]);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::parse("a\n<unk>\n").is_err());
        assert!(Vocabulary::parse("<unk>\na\na\n").is_err());
    }
}
