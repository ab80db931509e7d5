//! Parameter storage and the learnable building blocks shared by the
//! extractor, pattern and discriminator stages.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub frozen: bool,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, frozen });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} vs {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// A forward pass in progress: the computation record plus lazily bound
/// parameter leaves.
pub struct Tape<'a, S> {
    pub graph: Graph<S>,
    store: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    /// Leaf for a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), !p.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.graph.value(v)
    }

    /// Gradient per parameter, zero for parameters the output did not touch
    /// and for frozen parameters.
    pub fn param_gradients(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.store
            .iter()
            .map(|(id, p)| match self.bound[id.0] {
                Some(v) if !p.frozen => grads.wrt(v),
                _ => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }
}

/// Glorot-uniform matrix.
pub fn glorot<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| S::of(rng.random_range(-a..a))).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

pub fn normal<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, data).expect("normal shape")
}

/// Affine map `x · W + b` applied per row.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        frozen: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out), frozen);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]), frozen);
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.fan_in {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {}",
                self.fan_in,
                tape.value(x).cols()
            )));
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.graph.matmul(x, w)?;
        tape.graph.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize, frozen: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[1, width], S::one()), frozen);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, width]), frozen);
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.graph.layer_norm_rows(x)?;
        let y = tape.graph.mul_row(y, g)?;
        tape.graph.add_row(y, b)
    }
}

/// Pre-norm multi-head self-attention followed by a position-wise
/// feedforward, both residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub width: usize,
    norm_attn: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Output of [`AttentionBlock::forward`]: the block output and one
/// row-stochastic `L × L` attention matrix per head.
pub struct AttentionOutput {
    pub output: Var,
    pub head_maps: Vec<Var>,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        frozen: bool,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            heads,
            width,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width, frozen),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), width, 3 * width, frozen),
            out: Linear::new(store, rng, &format!("{name}.out"), width, width, frozen),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width, frozen),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), width, ff_mult * width, frozen),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), ff_mult * width, width, frozen),
        }
    }

    pub fn qkv(&self) -> Linear {
        self.qkv
    }

    pub fn out_proj(&self) -> Linear {
        self.out
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<AttentionOutput> {
        let dh = self.width / self.heads;
        let scale = S::one() / S::of_usize(dh).sqrt();

        let h = self.norm_attn.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut head_maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.graph.slice_cols(qkv, head * dh, dh)?;
            let k = tape.graph.slice_cols(qkv, self.width + head * dh, dh)?;
            let v = tape.graph.slice_cols(qkv, 2 * self.width + head * dh, dh)?;
            let logits = tape.graph.matmul_t(q, k)?;
            let logits = tape.graph.affine(logits, scale, S::zero())?;
            let attn = tape.graph.softmax_rows(logits)?;
            head_outputs.push(tape.graph.matmul(attn, v)?);
            head_maps.push(attn);
        }
        let merged = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.graph.concat_cols(&head_outputs)?
        };
        let attended = self.out.forward(tape, merged)?;
        let x = tape.graph.add(x, attended)?;

        let h = self.norm_ff.forward(tape, x)?;
        let h = self.ff_in.forward(tape, h)?;
        let h = tape.graph.silu(h)?;
        let h = self.ff_out.forward(tape, h)?;
        let output = tape.graph.add(x, h)?;
        Ok(AttentionOutput { output, head_maps })
    }
}

/// Residual convolution module: `x + W_p · silu(dwconv(norm(x)) + b)`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    norm: LayerNorm,
    kernel: ParamId,
    kernel_bias: ParamId,
    pointwise: Linear,
}

impl ConvModule {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        width: usize,
        kernel_size: usize,
        frozen: bool,
    ) -> Self {
        let std = (1.0 / kernel_size as f64).sqrt();
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width, frozen),
            kernel: store.add(format!("{name}.kernel"), normal(rng, kernel_size, width, std), frozen),
            kernel_bias: store.add(format!("{name}.kernel_bias"), Tensor::zeros(&[1, width]), frozen),
            pointwise: Linear::new(store, rng, &format!("{name}.pointwise"), width, width, frozen),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, x)?;
        let k = tape.param(self.kernel);
        let kb = tape.param(self.kernel_bias);
        let h = tape.graph.depthwise_conv(h, k)?;
        let h = tape.graph.add_row(h, kb)?;
        let h = tape.graph.silu(h)?;
        let h = self.pointwise.forward(tape, h)?;
        tape.graph.add(x, h)
    }
}

/// Unidirectional GRU returning the final hidden state.
///
/// Gate layout along columns is `[reset | update | candidate]`:
/// `r = σ(x W_r + h U_r)`, `z = σ(x W_z + h U_z)`,
/// `n = tanh(x W_n + r ⊙ (h U_n))`, `h' = (1 - z) ⊙ n + z ⊙ h`,
/// with a bias on each of the six products.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), input, 3 * hidden, false),
            recurrent: Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 3 * hidden, false),
            hidden,
        }
    }

    /// One step of the cell on a `1 × input` row.
    pub fn cell<S: Scalar>(&self, tape: &mut Tape<'_, S>, x_proj: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let hh = self.recurrent.forward(tape, h)?;
        let g = &mut tape.graph;
        let (xr, xz, xn) = (g.slice_cols(x_proj, 0, n)?, g.slice_cols(x_proj, n, n)?, g.slice_cols(x_proj, 2 * n, n)?);
        let (hr, hz, hn) = (g.slice_cols(hh, 0, n)?, g.slice_cols(hh, n, n)?, g.slice_cols(hh, 2 * n, n)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, hn)?;
        let cand = g.add(xn, gated)?;
        let cand = g.tanh(cand)?;
        let keep = g.affine(z, -S::one(), S::one())?;
        let a = g.mul(keep, cand)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }

    /// Runs over every row of `seq` from a zero state.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, seq: Var) -> Result<Var> {
        let steps = tape.value(seq).rows();
        if steps == 0 {
            return Err(Error::EmptyInput);
        }
        let projected = self.input.forward(tape, seq)?;
        let (w, b) = (tape.param(self.recurrent.weight), tape.param(self.recurrent.bias));
        let states = tape.graph.gru_seq(projected, w, b)?;
        tape.graph.slice_rows(states, steps - 1, 1)
    }

    /// Same recurrence as [`Gru::forward`], one [`Gru::cell`] per row.
    pub fn forward_unrolled<S: Scalar>(&self, tape: &mut Tape<'_, S>, seq: Var) -> Result<Var> {
        let steps = tape.value(seq).rows();
        if steps == 0 {
            return Err(Error::EmptyInput);
        }
        let projected = self.input.forward(tape, seq)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        for t in 0..steps {
            let x = tape.graph.slice_rows(projected, t, 1)?;
            h = self.cell(tape, x, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_params_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let frozen = Linear::new(&mut store, &mut rng, "a", 3, 3, true);
        let live = Linear::new(&mut store, &mut rng, "b", 3, 1, false);
        let mut tape = Tape::new(&store);
        let x = tape.constant(normal(&mut rng, 4, 3, 1.0));
        let h = frozen.forward(&mut tape, x).unwrap();
        let y = live.forward(&mut tape, h).unwrap();
        let loss = tape.graph.sum(y).unwrap();
        let grads = tape.graph.backward(loss).unwrap();
        let per_param = tape.param_gradients(&grads);
        assert!(per_param[frozen.weight.index()].data().iter().all(|&g| g == 0.0));
        assert!(per_param[live.weight.index()].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, &mut rng, "blk", 8, 2, 2, false);
        let mut tape = Tape::new(&store);
        let x = tape.constant(normal(&mut rng, 6, 8, 1.0));
        let out = block.forward(&mut tape, x).unwrap();
        assert_eq!(out.head_maps.len(), 2);
        for m in out.head_maps {
            let m = tape.value(m);
            assert_eq!(m.shape(), &[6, 6]);
            for r in 0..6 {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_single_step_matches_hand_computation() {
        // 2-dim input, hidden 1, all recurrent weights zero, biases zero
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let gru = Gru::new(&mut store, &mut rng, "gru", 2, 1);
        store
            .set(gru.input.weight, Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.25, 0.5, -0.5]).unwrap())
            .unwrap();
        store.set(gru.recurrent.weight, Tensor::zeros(&[1, 3])).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let h = gru.forward(&mut tape, x).unwrap();
        // x·W = [1, 0, 1]: r = σ(1), z = σ(0), n = tanh(1 + r·0) with h0 = 0
        let z = 1.0 / (1.0 + (0.0f64).exp());
        let n = 1.0f64.tanh();
        let expected = (1.0 - z) * n;
        assert!((tape.value(h).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn fused_gru_matches_unrolled_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let gru = Gru::new(&mut store, &mut rng, "gru", 3, 4);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set(id, normal(&mut rng, shape[0], shape[1], 0.7)).unwrap();
        }
        let seq = normal(&mut rng, 7, 3, 1.0);
        let weights = normal(&mut rng, 7, 4, 1.0);
        let run = |fused: bool| {
            let mut tape = Tape::new(&store);
            let x = tape.graph.leaf(seq.clone(), true);
            let h = if fused { gru.forward(&mut tape, x) } else { gru.forward_unrolled(&mut tape, x) }.unwrap();
            let w = tape.constant(Tensor::from_f64(&[4, 1], weights.row(0)).unwrap());
            let y = tape.graph.matmul(h, w).unwrap();
            let grads = tape.graph.backward(y).unwrap();
            let mut all = tape.param_gradients(&grads);
            all.push(grads.wrt(x));
            (tape.value(h).clone(), all)
        };
        let (h1, g1) = run(true);
        let (h2, g2) = run(false);
        for (a, b) in h1.data().iter().zip(h2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ga, gb) in g1.iter().zip(&g2) {
            assert!(gb.data().iter().any(|&v| v != 0.0));
            for (a, b) in ga.data().iter().zip(gb.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
