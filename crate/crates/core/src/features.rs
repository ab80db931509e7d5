//! Query-branch audio encoder and the support-branch phoneme, subword and
//! speech embedders, each ending in a mapper to the common width `d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, ConvModule, LayerNorm, Linear, ParamId, ParamStore, Tape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_FRAME_RATE_HZ: f64 = 100.0;

/// `T × F` acoustic feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<S> {
    frames: Tensor<S>,
    frame_rate_hz: f64,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn new(frames: Tensor<S>, frame_rate_hz: f64) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::Invalid(format!("frame rate must be positive, got {frame_rate_hz}")));
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        Self::new(Tensor::from_rows(rows)?, DEFAULT_FRAME_RATE_HZ)
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }
}

/// Ids into a phoneme inventory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, inventory_size: usize) -> Result<Self> {
        validate_ids(&ids, inventory_size)?;
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ids into a subword vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubwordSequence {
    pub ids: Vec<usize>,
}

impl SubwordSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        validate_ids(&ids, vocab_size)?;
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn validate_ids(ids: &[usize], size: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(Error::IdOutOfRange { id, size }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    QueryAudio,
    SupportPhoneme,
    SupportText,
    SupportAudio,
}

/// `T × d` embedding rows tagged with where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence<S> {
    pub rows: Tensor<S>,
    pub kind: SourceKind,
}

/// Which of the three support-side mappers to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mapper {
    Phoneme,
    Text,
    Speech,
}

/// Architecture of one audio encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioEncoderShape {
    pub feat_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub subsample: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub out_dim: usize,
}

/// Reduced conformer-style encoder: frame stacking by the subsampling
/// factor, then `layers` blocks of {depthwise convolution module,
/// self-attention block}, a final norm, and a projection to `out_dim`.
///
/// The projection is kept separate from the body so the body can be frozen
/// while the projection (a mapper) keeps training.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub shape: AudioEncoderShape,
    input: Linear,
    blocks: Vec<(ConvModule, AttentionBlock)>,
    norm: LayerNorm,
    pub projection: Linear,
}

impl AudioEncoder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        shape: AudioEncoderShape,
        frozen_body: bool,
    ) -> Self {
        let input = Linear::new(
            store,
            rng,
            &format!("{name}.input"),
            shape.subsample * shape.feat_dim,
            shape.width,
            frozen_body,
        );
        let blocks = (0..shape.layers)
            .map(|i| {
                let conv = ConvModule::new(
                    store,
                    rng,
                    &format!("{name}.block{i}.conv"),
                    shape.width,
                    shape.conv_kernel,
                    frozen_body,
                );
                let attn = AttentionBlock::new(
                    store,
                    rng,
                    &format!("{name}.block{i}.attn"),
                    shape.width,
                    shape.heads,
                    shape.ff_mult,
                    frozen_body,
                );
                (conv, attn)
            })
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), shape.width, frozen_body);
        let projection =
            Linear::new(store, rng, &format!("{name}.projection"), shape.width, shape.out_dim, false);
        Self { shape, input, blocks, norm, projection }
    }

    /// Rows produced for an input of `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.shape.subsample)
    }

    /// Encoder body without the final projection.
    pub fn body<S: Scalar>(&self, tape: &mut Tape<'_, S>, feats: &FeatureMatrix<S>) -> Result<Var> {
        if feats.num_bins() != self.shape.feat_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} feature bins, got {}",
                self.shape.feat_dim,
                feats.num_bins()
            )));
        }
        let x = tape.constant(feats.frames().clone());
        let x = tape.graph.stack_frames(x, self.shape.subsample)?;
        let mut x = self.input.forward(tape, x)?;
        for (conv, attn) in &self.blocks {
            x = conv.forward(tape, x)?;
            x = attn.forward(tape, x)?.output;
        }
        self.norm.forward(tape, x)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, feats: &FeatureMatrix<S>) -> Result<Var> {
        let h = self.body(tape, feats)?;
        self.projection.forward(tape, h)
    }
}

/// Table lookup followed by a mapper to width `d`.
#[derive(Clone, Debug)]
pub struct LookupEmbedder {
    pub table: ParamId,
    pub vocab: usize,
    pub raw_dim: usize,
    pub mapper: Linear,
}

impl LookupEmbedder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        vocab: usize,
        raw_dim: usize,
        out_dim: usize,
    ) -> Self {
        let table = store.add(format!("{name}.table"), crate::nn::normal(rng, vocab, raw_dim, 1.0), false);
        let mapper = Linear::new(store, rng, &format!("{name}.mapper"), raw_dim, out_dim, false);
        Self { table, vocab, raw_dim, mapper }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::IdOutOfRange { id, size: self.vocab });
        }
        let table = tape.param(self.table);
        let raw = tape.graph.gather(table, ids)?;
        self.mapper.forward(tape, raw)
    }
}

/// The whole feature-extraction stage.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub query: AudioEncoder,
    pub support_speech: AudioEncoder,
    pub phonemes: LookupEmbedder,
    pub subwords: LookupEmbedder,
}

impl FeatureExtractor {
    pub fn encode_query_audio<S: Scalar>(&self, tape: &mut Tape<'_, S>, f: &FeatureMatrix<S>) -> Result<Var> {
        self.query.forward(tape, f)
    }

    pub fn encode_support_speech<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        f: &FeatureMatrix<S>,
    ) -> Result<Var> {
        self.support_speech.forward(tape, f)
    }

    pub fn embed_phonemes<S: Scalar>(&self, tape: &mut Tape<'_, S>, p: &PhonemeSequence) -> Result<Var> {
        self.phonemes.forward(tape, &p.ids)
    }

    pub fn embed_subwords<S: Scalar>(&self, tape: &mut Tape<'_, S>, t: &SubwordSequence) -> Result<Var> {
        self.subwords.forward(tape, &t.ids)
    }

    pub fn mapper(&self, which: Mapper) -> Linear {
        match which {
            Mapper::Phoneme => self.phonemes.mapper,
            Mapper::Text => self.subwords.mapper,
            Mapper::Speech => self.support_speech.projection,
        }
    }

    pub fn map_to_common<S: Scalar>(&self, tape: &mut Tape<'_, S>, raw: Var, which: Mapper) -> Result<Var> {
        self.mapper(which).forward(tape, raw)
    }
}
