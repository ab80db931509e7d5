//! Cross-modal matching by self-attention over time-concatenated segments.
//!
//! Each segment gets a sinusoidal position code (restarting at 0 per
//! segment) and a learned type code before concatenation. The text module
//! joins `[query audio; phonemes; subwords]`, the audio module joins
//! `[query audio; support audio]`.

use std::io::{Read, Write};

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{normal, AttentionBlock, LayerNorm, ParamId, ParamStore, Tape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Segment roles that carry their own type-code vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TypeCode {
    TextQuery = 0,
    TextPhoneme = 1,
    TextSubword = 2,
    AudioQuery = 3,
    AudioSupport = 4,
}

/// `e_pos[t, 2i] = sin(t / 10000^(2i/d))`, `e_pos[t, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for c in 0..d {
            let i2 = (c - c % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            data.push(S::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(len, d, data).expect("positional shape")
}

/// Joint rows plus the lengths of the segments they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding<S> {
    pub rows: Tensor<S>,
    pub boundaries: Vec<usize>,
}

/// Attention matrices indexed `[layer][head]`, each `L × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S> {
    pub layers: Vec<Vec<Tensor<S>>>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn joint_len(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map(Tensor::rows).unwrap_or(0)
    }

    /// Final layer averaged over heads.
    pub fn final_layer_mean(&self) -> Option<Tensor<S>> {
        let last = self.layers.last()?;
        let first = last.first()?;
        let mut acc = vec![S::zero(); first.numel()];
        for head in last {
            for (a, &v) in acc.iter_mut().zip(head.data()) {
                *a = *a + v;
            }
        }
        let n = S::of_usize(last.len());
        Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v / n).collect()).ok()
    }
}

/// Joint output of one attention module while it is still on the tape.
pub struct JointVar {
    pub rows: Var,
    pub boundaries: Vec<usize>,
    /// `[layer][head]` attention matrices.
    pub maps: Vec<Vec<Var>>,
}

impl JointVar {
    pub fn materialize<S: Scalar>(&self, tape: &Tape<'_, S>) -> (JointEmbedding<S>, AttentionMap<S>) {
        let joint = JointEmbedding { rows: tape.value(self.rows).clone(), boundaries: self.boundaries.clone() };
        let layers = self
            .maps
            .iter()
            .map(|heads| heads.iter().map(|&m| tape.value(m).clone()).collect())
            .collect();
        (joint, AttentionMap { layers })
    }
}

/// Stack of attention blocks closed by a norm.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
}

impl AttentionModule {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| AttentionBlock::new(store, rng, &format!("{name}.layer{i}"), d, heads, ff_mult, false))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d, false);
        Self { blocks, norm }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut x = x;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, x)?;
            x = out.output;
            maps.push(out.head_maps);
        }
        Ok((self.norm.forward(tape, x)?, maps))
    }
}

#[derive(Clone, Debug)]
pub struct PatternExtractor {
    pub d: usize,
    pub type_codes: [ParamId; 5],
    pub text_module: AttentionModule,
    pub audio_module: AttentionModule,
    /// Adds sinusoidal position codes when set.
    pub positional: bool,
}

impl PatternExtractor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        d: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
        positional: bool,
    ) -> Self {
        let names = ["text.query", "text.phoneme", "text.subword", "audio.query", "audio.support"];
        let type_codes = names.map(|n| store.add(format!("type_code.{n}"), normal(rng, 1, d, 0.1), false));
        let text_module = AttentionModule::new(store, rng, "qtam", d, layers, heads, ff_mult);
        let audio_module = AttentionModule::new(store, rng, "qaam", d, layers, heads, ff_mult);
        Self { d, type_codes, text_module, audio_module, positional }
    }

    /// `E + e_pos + e_type`, positions counted from 0 within this segment.
    pub fn add_pos_type<S: Scalar>(&self, tape: &mut Tape<'_, S>, e: Var, code: TypeCode) -> Result<Var> {
        let (rows, cols) = (tape.value(e).rows(), tape.value(e).cols());
        if cols != self.d {
            return Err(Error::Shape(format!("segment has {cols} columns, expected {}", self.d)));
        }
        let mut x = e;
        if self.positional {
            let pos = tape.constant(sinusoidal_positions(rows, self.d));
            x = tape.graph.add(x, pos)?;
        }
        let ty = tape.param(self.type_codes[code as usize]);
        tape.graph.add_row(x, ty)
    }

    /// Query-by-text matching over `[query; phonemes; subwords]`.
    pub fn qtam<S: Scalar>(&self, tape: &mut Tape<'_, S>, query: Var, phonemes: Var, subwords: Var) -> Result<JointVar> {
        let parts = [(query, TypeCode::TextQuery), (phonemes, TypeCode::TextPhoneme), (subwords, TypeCode::TextSubword)];
        if parts.iter().any(|(v, _)| tape.value(*v).numel() == 0) {
            return Err(Error::Invalid("QTAM requires all three segments".into()));
        }
        self.joint(tape, &parts, &self.text_module)
    }

    /// Query-by-audio matching over `[query; support audio]`; `None` when no
    /// template was enrolled.
    pub fn qaam<S: Scalar>(&self, tape: &mut Tape<'_, S>, query: Var, support: Option<Var>) -> Result<Option<JointVar>> {
        if tape.value(query).numel() == 0 {
            return Err(Error::EmptyInput);
        }
        let Some(support) = support else { return Ok(None) };
        let parts = [(query, TypeCode::AudioQuery), (support, TypeCode::AudioSupport)];
        self.joint(tape, &parts, &self.audio_module).map(Some)
    }

    fn joint<S: Scalar>(&self, tape: &mut Tape<'_, S>, parts: &[(Var, TypeCode)], module: &AttentionModule) -> Result<JointVar> {
        let mut coded = Vec::with_capacity(parts.len());
        let mut boundaries = Vec::with_capacity(parts.len());
        for &(v, code) in parts {
            boundaries.push(tape.value(v).rows());
            coded.push(self.add_pos_type(tape, v, code)?);
        }
        let concat = tape.graph.concat_rows(&coded)?;
        let (rows, maps) = module.forward(tape, concat)?;
        Ok(JointVar { rows, boundaries, maps })
    }
}

const ATTN_MAGIC: &[u8; 4] = b"ATTN";
const ATTN_VERSION: u8 = 1;

/// Writes an attention map as: magic `ATTN`, version byte, then u32 LE
/// `layers`, `heads`, `L`, then for each (layer, head) a u32 LE header
/// `(layer, head, L)` followed by `L·L` f64 LE values in row-major order.
pub fn write_attention_map<S: Scalar, W: Write>(map: &AttentionMap<S>, mut w: W) -> Result<()> {
    let layers = map.layers.len();
    let heads = map.layers.first().map(Vec::len).unwrap_or(0);
    let l = map.joint_len();
    w.write_all(ATTN_MAGIC)?;
    w.write_all(&[ATTN_VERSION])?;
    for n in [layers, heads, l] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for (li, layer) in map.layers.iter().enumerate() {
        if layer.len() != heads {
            return Err(Error::Shape("ragged head count across layers".into()));
        }
        for (hi, m) in layer.iter().enumerate() {
            if m.rows() != l || m.cols() != l {
                return Err(Error::Shape(format!("attention map {li}/{hi} is not {l}x{l}")));
            }
            for n in [li, hi, l] {
                w.write_all(&(n as u32).to_le_bytes())?;
            }
            for v in m.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_attention_map<S: Scalar, R: Read>(mut r: R) -> Result<AttentionMap<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ATTN_MAGIC {
        return Err(Error::BadHeader("attention map"));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != ATTN_VERSION {
        return Err(Error::Version { kind: "attention map", version: u32::from(version[0]) });
    }
    let (layers, heads, l) = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
    let mut out = Vec::with_capacity(layers);
    for li in 0..layers {
        let mut row = Vec::with_capacity(heads);
        for hi in 0..heads {
            let header = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
            if header != (li, hi, l) {
                return Err(Error::BadHeader("attention map block"));
            }
            let values = (0..l * l).map(|_| read_f64(&mut r).map(S::of)).collect::<Result<Vec<_>>>()?;
            row.push(Tensor::matrix(l, l, values)?);
        }
        out.push(row);
    }
    Ok(AttentionMap { layers: out })
}
