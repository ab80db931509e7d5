//! Multi-modal user-defined keyword spotting.
//!
//! A spoken query is matched against a keyword enrolled as text (phonemes
//! and subwords) and, optionally, speech templates. Everything numeric is
//! generic over [`Scalar`]; the aliases at the crate root fix it to `f64`.

pub mod augmentation;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod nn;
pub mod pattern;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use augmentation::{Lexicon, SemanticTable};
pub use corpus::{CorpusConfig, Split};
pub use error::{Error, Result};
pub use model::ModelConfig;
pub use scalar::Scalar;
pub use training::{Labels, TrainConfig};
pub use vocab::Vocabulary;

pub type Tensor = tensor::Tensor<f64>;
pub type FeatureMatrix = features::FeatureMatrix<f64>;
pub type Enrollment = corpus::Enrollment<f64>;
pub type EvalPair = corpus::EvalPair<f64>;
pub type Corpus = corpus::Corpus<f64>;
pub type Episode = corpus::Episode<f64>;
pub type Model = model::KwsModel<f64>;
pub type MatchResult = discriminator::MatchResult<f64>;
pub type AttentionMap = pattern::AttentionMap<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type TrainingSet = training::TrainingSet<f64>;
