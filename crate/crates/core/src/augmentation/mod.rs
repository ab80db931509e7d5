//! Confusable-keyword generation and the synthetic speech renderer.

pub mod edit_distance;
pub mod lexicon;
pub mod mining;
pub mod render;

pub use edit_distance::{bounded_edit_distance, edit_distance, BkTree};
pub use lexicon::{normalize_word, split_phrase, Lexicon, INVENTORY};
pub use mining::{
    cosine, mine_confusables, mine_phonetic_neighbors, mine_semantic_neighbors, permute_words, ConfusableKind,
    ConfusableRecord, ConfusableSet, Neighbors, PhoneticIndex, SemanticTable,
};
pub use render::{PrototypeBank, RenderProfile};
