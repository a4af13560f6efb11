//! Neural-network building blocks on top of the tape: a named parameter
//! store, two-layer SiLU MLPs, pre-norm multi-head attention blocks, and the
//! Adam optimizer with global-norm gradient clipping.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tape::{Gradients, Tape, VarId};

/// Index of a tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PIdx(pub usize);

/// An ordered collection of named parameter matrices. Order is the checkpoint
/// and optimizer-state order, so it must be construction-deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    vals: Vec<Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, val: Array2<f64>) -> PIdx {
        self.names.push(name.into());
        self.vals.push(val);
        PIdx(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn get(&self, idx: PIdx) -> &Array2<f64> {
        &self.vals[idx.0]
    }

    pub fn get_mut(&mut self, idx: PIdx) -> &mut Array2<f64> {
        &mut self.vals[idx.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.vals[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.vals.iter())
    }

    pub fn set_by_name(&mut self, name: &str, val: Array2<f64>) -> bool {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            assert_eq!(self.vals[i].dim(), val.dim(), "shape change for {name}");
            self.vals[i] = val;
            true
        } else {
            false
        }
    }

    /// Insert every tensor into the tape. `trainable` controls whether
    /// gradients flow to them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .vals
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect();
        Bound { ids }
    }

    /// Collect gradients for every tensor, zeros where unused.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Array2<f64>> {
        self.vals
            .iter()
            .zip(&bound.ids)
            .map(|(v, &id)| grads.get_or_zeros(id, v.dim()))
            .collect()
    }

    /// Deterministic content hash, used by the alternation contract tests.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a over the raw bits
        for (name, val) in self.iter() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for &x in val.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Tape bindings for a parameter store, parallel to its tensor order.
pub struct Bound {
    ids: Vec<VarId>,
}

impl Bound {
    pub fn var(&self, idx: PIdx) -> VarId {
        self.ids[idx.0]
    }
}

/// Xavier-uniform weight initialization.
pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn zeros_row(cols: usize) -> Array2<f64> {
    Array2::zeros((1, cols))
}

pub fn gaussian_row<R: Rng>(cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((1, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Two-layer MLP with SiLU after the first layer and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    w1: PIdx,
    b1: PIdx,
    w2: PIdx,
    b2: PIdx,
}

impl Mlp {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: params.add(format!("{prefix}.w1"), xavier(d_in, d_hidden, rng)),
            b1: params.add(format!("{prefix}.b1"), zeros_row(d_hidden)),
            w2: params.add(format!("{prefix}.w2"), xavier(d_hidden, d_out, rng)),
            b2: params.add(format!("{prefix}.b2"), zeros_row(d_out)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: VarId) -> VarId {
        let h = tape.matmul(x, bound.var(self.w1));
        let h = tape.add_row(h, bound.var(self.b1));
        let h = tape.silu(h);
        let y = tape.matmul(h, bound.var(self.w2));
        tape.add_row(y, bound.var(self.b2))
    }
}

/// Single linear layer with bias.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    w: PIdx,
    b: PIdx,
}

impl Affine {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.add(format!("{prefix}.w"), xavier(d_in, d_out, rng)),
            b: params.add(format!("{prefix}.b"), zeros_row(d_out)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: VarId) -> VarId {
        let y = tape.matmul(x, bound.var(self.w));
        tape.add_row(y, bound.var(self.b))
    }
}

/// Single linear map without bias (the shared projections in the GNNs).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: PIdx,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.add(name.to_string(), xavier(d_in, d_out, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: VarId) -> VarId {
        tape.matmul(x, bound.var(self.w))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: PIdx,
    beta: PIdx,
}

impl LayerNorm {
    pub fn new(params: &mut Params, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{prefix}.gamma"), Array2::ones((1, dim))),
            beta: params.add(format!("{prefix}.beta"), zeros_row(dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: VarId) -> VarId {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta))
    }
}

/// Multi-head self-attention over token rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: PIdx,
    bq: PIdx,
    wk: PIdx,
    bk: PIdx,
    wv: PIdx,
    bv: PIdx,
    wo: PIdx,
    bo: PIdx,
    num_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim % num_heads == 0, "hidden_dim must divide by num_heads");
        let wq = params.add(format!("{prefix}.wq"), xavier(dim, dim, rng));
        let wk = params.add(format!("{prefix}.wk"), xavier(dim, dim, rng));
        let wv = params.add(format!("{prefix}.wv"), xavier(dim, dim, rng));
        let wo = params.add(format!("{prefix}.wo"), xavier(dim, dim, rng));
        let bq = params.add(format!("{prefix}.bq"), zeros_row(dim));
        let bk = params.add(format!("{prefix}.bk"), zeros_row(dim));
        let bv = params.add(format!("{prefix}.bv"), zeros_row(dim));
        let bo = params.add(format!("{prefix}.bo"), zeros_row(dim));
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            num_heads,
            head_dim: dim / num_heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: VarId) -> VarId {
        let q = tape.matmul(tokens, bound.var(self.wq));
        let q = tape.add_row(q, bound.var(self.bq));
        let k = tape.matmul(tokens, bound.var(self.wk));
        let k = tape.add_row(k, bound.var(self.bk));
        let v = tape.matmul(tokens, bound.var(self.wv));
        let v = tape.add_row(v, bound.var(self.bv));

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let mut cat = heads[0];
        for &h in &heads[1..] {
            cat = tape.concat_cols(cat, h);
        }
        let out = tape.matmul(cat, bound.var(self.wo));
        tape.add_row(out, bound.var(self.bo))
    }
}

/// Pre-norm transformer block: attention and a feed-forward sublayer of
/// width `2 * dim`, both with residual connections.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(params, &format!("{prefix}.attn"), dim, num_heads, rng),
            ln2: LayerNorm::new(params, &format!("{prefix}.ln2"), dim),
            ff: Mlp::new(params, &format!("{prefix}.ff"), dim, 2 * dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: VarId) -> VarId {
        let normed = self.ln1.forward(tape, bound, tokens);
        let attended = self.attn.forward(tape, bound, normed);
        let tokens = tape.add(tokens, attended);
        let normed = self.ln2.forward(tape, bound, tokens);
        let ffed = self.ff.forward(tape, bound, normed);
        tape.add(tokens, ffed)
    }
}

/// Adam with L2 weight decay folded into the gradient (the `torch.optim.Adam`
/// convention) and moments stored per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: params.vals.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.vals.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len());
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in params
            .vals
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + self.weight_decay * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn state(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, m: Vec<Array2<f64>>, v: Vec<Array2<f64>>, step_count: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

/// Global gradient norm over a set of tensors.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let x = params.add("x", xavier(3, 3, &mut rng));
        let mut adam = Adam::new(&params, 0.05, 0.0);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let sq = tape.square(bound.var(x));
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            let g = params.grads(&bound, &grads);
            adam.step(&mut params, &g);
        }
        assert!(params.get(x).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut grads = vec![
            Array2::from_elem((2, 2), 3.0),
            Array2::from_elem((1, 2), -4.0),
        ];
        let norm = global_norm(&grads);
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - norm).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-9);
        assert!(grads[0][(0, 0)] > 0.0 && grads[1][(0, 0)] < 0.0);
    }

    #[test]
    fn attention_block_gradients_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let block = TransformerBlock::new(&mut params, "blk", 8, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(xavier(5, 8, &mut rng));
        let y = block.forward(&mut tape, &bound, x);
        let sq = tape.square(y);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let g = params.grads(&bound, &grads);
        assert_eq!(g.len(), params.len());
        let total: f64 = g.iter().map(|m| m.iter().map(|v| v.abs()).sum::<f64>()).sum();
        assert!(total > 0.0);
    }

    #[test]
    fn params_hash_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::new();
        let x = params.add("x", xavier(2, 2, &mut rng));
        let h1 = params.content_hash();
        params.get_mut(x)[(0, 0)] += 1e-12;
        assert_ne!(h1, params.content_hash());
    }
}
