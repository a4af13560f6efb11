//! Encoder and decoder GNNs.
//!
//! The encoder is a mean-field Gaussian with fixed variance: its mean comes
//! from a message-passing network run on the fully connected graph (non-edges
//! are an extra edge type and pass messages too), with Gaussian noise columns
//! appended to the node features to break symmetry between structurally
//! identical nodes.
//!
//! The decoder maps latent node vectors to three factorized heads: a
//! Bernoulli over edge non-existence, a categorical over edge types, and a
//! categorical over node types. Pair inputs are the element-wise squared
//! differences of node vectors, so everything is permutation-equivariant by
//! construction.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSample;
use crate::nn::{Affine, Bound, Linear, Mlp, Params};
use crate::sde::standard_normal;
use crate::tape::{Tape, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub noise_dim: usize,
    /// Fixed posterior standard deviation (the hyperparameter tables list the
    /// variance).
    pub sigma: f64,
    pub k_v: usize,
    pub k_e: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.sigma <= 0.0 {
            errs.push(format!("encoder.sigma: must be > 0, got {}", self.sigma));
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("k_v", self.k_v),
        ] {
            if v == 0 {
                errs.push(format!("encoder.{name}: must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub k_v: usize,
    pub k_e: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("k_v", self.k_v),
        ] {
            if v == 0 {
                errs.push(format!("decoder.{name}: must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Ordered pair index lists for an `n`-node fully connected graph without
/// self-pairs, plus the gathers needed to symmetrize and to restrict to the
/// upper triangle.
pub(crate) struct PairIndex {
    /// Source node of each ordered pair row.
    pub idx_i: Rc<Vec<usize>>,
    /// Target node of each ordered pair row.
    pub idx_j: Rc<Vec<usize>>,
    /// Row of ordered pair (i, j) for each unordered pair i < j.
    pub upper_ij: Rc<Vec<usize>>,
    /// Row of ordered pair (j, i) for each unordered pair i < j.
    pub upper_ji: Rc<Vec<usize>>,
    /// Unordered pairs (i, j), i < j, in row order of `upper_ij`.
    pub upper_pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(n: usize) -> Self {
        // ordered pair (i, j), i != j, sits at row i*(n-1) + (j - (j > i))
        let row_of = |i: usize, j: usize| i * (n - 1) + j - usize::from(j > i);
        let mut idx_i = Vec::with_capacity(n * n.saturating_sub(1));
        let mut idx_j = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    idx_i.push(i);
                    idx_j.push(j);
                }
            }
        }
        let mut upper_ij = Vec::new();
        let mut upper_ji = Vec::new();
        let mut upper_pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                upper_ij.push(row_of(i, j));
                upper_ji.push(row_of(j, i));
                upper_pairs.push((i, j));
            }
        }
        Self {
            idx_i: Rc::new(idx_i),
            idx_j: Rc::new(idx_j),
            upper_ij: Rc::new(upper_ij),
            upper_ji: Rc::new(upper_ji),
            upper_pairs,
        }
    }

    pub fn num_ordered(&self) -> usize {
        self.idx_i.len()
    }
}

/// One-hot edge slices for every ordered pair row of `PairIndex`.
fn edge_onehot_rows(g: &GraphSample, pairs: &PairIndex) -> Array2<f64> {
    let c = g.k_e() + 1;
    let mut out = Array2::zeros((pairs.num_ordered(), c));
    for (row, (&i, &j)) in pairs.idx_i.iter().zip(pairs.idx_j.iter()).enumerate() {
        out[(row, g.edge_channel(i, j))] = 1.0;
    }
    out
}

/// `Z^0 = mean + std * noise`.
pub fn reparameterize(mean: &Array2<f64>, std: f64, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if mean.dim() != noise.dim() {
        return Err(Error::dim(format!(
            "mean is {:?} but noise is {:?}",
            mean.dim(),
            noise.dim()
        )));
    }
    Ok(mean + &(noise * std))
}

/// Pairwise element-wise squared differences, `E[i,j,:] = (z_i - z_j)^2`.
pub fn pair_features(z: &Array2<f64>) -> Array3<f64> {
    let (n, d) = z.dim();
    let mut out = Array3::zeros((n, n, d));
    for i in 0..n {
        for j in 0..n {
            for k in 0..d {
                let diff = z[(i, k)] - z[(j, k)];
                out[(i, j, k)] = diff * diff;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: Params,
    in_proj: Affine,
    shared_w: Linear,
    layers: Vec<(Mlp, Mlp)>, // (mlp_e, mlp_v)
    out_proj: Affine,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let h = cfg.hidden_dim;
        let in_proj = Affine::new(&mut params, "in", cfg.k_v + cfg.noise_dim, h, rng);
        let shared_w = Linear::new(&mut params, "w_shared", h, h, rng);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let mlp_e = Mlp::new(
                    &mut params,
                    &format!("layer{l}.mlp_e"),
                    cfg.k_e + 1 + h,
                    h,
                    h,
                    rng,
                );
                let mlp_v = Mlp::new(&mut params, &format!("layer{l}.mlp_v"), 2 * h, h, h, rng);
                (mlp_e, mlp_v)
            })
            .collect();
        let out_proj = Affine::new(&mut params, "out", h, cfg.latent_dim, rng);
        Ok(Self {
            cfg,
            params,
            in_proj,
            shared_w,
            layers,
            out_proj,
        })
    }

    /// Tape forward pass; `eps_in` is the symmetry-breaking noise block
    /// (`N x noise_dim`, may have zero columns).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        g: &GraphSample,
        eps_in: &Array2<f64>,
    ) -> Result<VarId> {
        let n = g.num_nodes();
        if g.k_v() != self.cfg.k_v || g.k_e() != self.cfg.k_e {
            return Err(Error::dim(format!(
                "graph has (k_v, k_e) = ({}, {}), encoder expects ({}, {})",
                g.k_v(),
                g.k_e(),
                self.cfg.k_v,
                self.cfg.k_e
            )));
        }
        if eps_in.dim() != (n, self.cfg.noise_dim) {
            return Err(Error::dim(format!(
                "noise block is {:?}, expected ({n}, {})",
                eps_in.dim(),
                self.cfg.noise_dim
            )));
        }
        let pairs = PairIndex::new(n);
        let x0 = if self.cfg.noise_dim > 0 {
            ndarray::concatenate![ndarray::Axis(1), g.node_features().view(), eps_in.view()]
        } else {
            g.node_features().clone()
        };
        let x0 = tape.constant(x0);
        let edge_rows = tape.constant(edge_onehot_rows(g, &pairs));
        let mut m = self.in_proj.forward(tape, bound, x0);
        for (mlp_e, mlp_v) in &self.layers {
            let wm = self.shared_w.forward(tape, bound, m);
            let wi = tape.gather_rows(wm, pairs.idx_i.clone());
            let wj = tape.gather_rows(wm, pairs.idx_j.clone());
            let wsum = tape.add(wi, wj);
            let pair_in = tape.concat_cols(edge_rows, wsum);
            let msg = mlp_e.forward(tape, bound, pair_in);
            let agg = tape.segment_sum_rows(msg, pairs.idx_i.clone(), n);
            let node_in = tape.concat_cols(m, agg);
            let update = mlp_v.forward(tape, bound, node_in);
            m = tape.add(m, update);
        }
        Ok(self.out_proj.forward(tape, bound, m))
    }

    /// Posterior mean and (fixed) standard deviation; draws fresh noise
    /// columns from `rng`.
    pub fn encode<R: Rng>(&self, g: &GraphSample, rng: &mut R) -> Result<(Array2<f64>, f64)> {
        let eps_in = standard_normal(g.num_nodes(), self.cfg.noise_dim, rng);
        self.encode_with_noise(g, &eps_in)
    }

    pub fn encode_with_noise(
        &self,
        g: &GraphSample,
        eps_in: &Array2<f64>,
    ) -> Result<(Array2<f64>, f64)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mean = self.forward(&mut tape, &bound, g, eps_in)?;
        Ok((tape.value(mean).clone(), self.cfg.sigma))
    }
}

/// Symmetrized decoder head outputs on the tape. Pair rows follow
/// `PairIndex::upper_pairs` (unordered, i < j).
pub(crate) struct DecoderHeads {
    /// Logit of the non-edge probability per unordered pair (`P x 1`).
    pub noedge_logits: VarId,
    /// Edge-type logits per unordered pair (`P x k_e`).
    pub type_logits: VarId,
    /// Node-type logits (`N x k_v`).
    pub node_logits: VarId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub params: Params,
    // per-layer: (w_e, mlp_e, w_v, mlp_v)
    layers: Vec<(Linear, Mlp, Linear, Mlp)>,
    head_noedge: Mlp,
    head_type: Mlp,
    head_node: Mlp,
}

impl Decoder {
    pub fn new<R: Rng>(cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let h = cfg.hidden_dim;
        let d = cfg.latent_dim;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            // the first layer consumes the raw latent widths
            let (s_in, r_in) = if l == 0 { (d, d) } else { (h, h) };
            let w_e = Linear::new(&mut params, &format!("layer{l}.w_e"), s_in, h, rng);
            let mlp_e = Mlp::new(&mut params, &format!("layer{l}.mlp_e"), h + r_in, h, h, rng);
            let w_v = Linear::new(&mut params, &format!("layer{l}.w_v"), h, h, rng);
            let mlp_v = Mlp::new(&mut params, &format!("layer{l}.mlp_v"), h + s_in, h, h, rng);
            layers.push((w_e, mlp_e, w_v, mlp_v));
        }
        let head_noedge = Mlp::new(&mut params, "head_noedge", h, h, 1, rng);
        let head_type = Mlp::new(&mut params, "head_type", h, h, cfg.k_e, rng);
        let head_node = Mlp::new(&mut params, "head_node", h, h, cfg.k_v, rng);
        // near-zero head outputs at init keep the first updates off the
        // saturated loss region
        for i in 0..params.len() {
            if params.name(i).starts_with("head_") && params.name(i).ends_with(".w2") {
                params.get_mut(crate::nn::PIdx(i)).mapv_inplace(|v| v * 0.01);
            }
        }
        Ok(Self {
            cfg,
            params,
            layers,
            head_noedge,
            head_type,
            head_node,
        })
    }

    /// Run the message-passing stack and heads on the tape.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: VarId,
        pairs: &PairIndex,
    ) -> DecoderHeads {
        let n = tape.shape(z).0;
        // pair features: (z_i - z_j)^2 over ordered pairs
        let zi = tape.gather_rows(z, pairs.idx_i.clone());
        let zj = tape.gather_rows(z, pairs.idx_j.clone());
        let diff = tape.sub(zi, zj);
        let mut r = tape.square(diff);
        let mut s = z;
        for (w_e, mlp_e, w_v, mlp_v) in &self.layers {
            let ws = w_e.forward(tape, bound, s);
            let wi = tape.gather_rows(ws, pairs.idx_i.clone());
            let wj = tape.gather_rows(ws, pairs.idx_j.clone());
            let wsum = tape.add(wi, wj);
            let pair_in = tape.concat_cols(wsum, r);
            let r_new = mlp_e.forward(tape, bound, pair_in);
            let wr = w_v.forward(tape, bound, r_new);
            let agg = tape.segment_sum_rows(wr, pairs.idx_i.clone(), n);
            let node_in = tape.concat_cols(agg, s);
            s = mlp_v.forward(tape, bound, node_in);
            r = r_new;
        }
        let noedge_all = self.head_noedge.forward(tape, bound, r);
        let type_all = self.head_type.forward(tape, bound, r);
        // average the (i,j) and (j,i) logits
        let sym = |tape: &mut Tape, x: VarId| {
            let ij = tape.gather_rows(x, pairs.upper_ij.clone());
            let ji = tape.gather_rows(x, pairs.upper_ji.clone());
            let sum = tape.add(ij, ji);
            tape.scale(sum, 0.5)
        };
        let noedge_logits = sym(tape, noedge_all);
        let type_logits = sym(tape, type_all);
        let node_logits = self.head_node.forward(tape, bound, s);
        DecoderHeads {
            noedge_logits,
            type_logits,
            node_logits,
        }
    }

    /// Probabilities of all three heads as dense arrays. The diagonal of
    /// `p_noedge` is fixed at 1 and diagonal type slices are uniform; both
    /// sit outside the likelihood.
    pub fn decode_distributions(&self, z: &Array2<f64>) -> Result<DecodedDistributions> {
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                message: "non-finite decoder input".into(),
                checkpoint: None,
            });
        }
        if z.ncols() != self.cfg.latent_dim {
            return Err(Error::dim(format!(
                "z has {} columns, decoder expects {}",
                z.ncols(),
                self.cfg.latent_dim
            )));
        }
        let n = z.nrows();
        let pairs = PairIndex::new(n);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let heads = self.forward(&mut tape, &bound, zv, &pairs);
        let noedge_sig = tape.sigmoid(heads.noedge_logits);
        let type_soft = tape.softmax_rows(heads.type_logits);
        let node_soft = tape.softmax_rows(heads.node_logits);

        let mut p_noedge = Array2::from_elem((n, n), 1.0);
        let mut p_edgetype = Array3::from_elem((n, n, self.cfg.k_e), 1.0 / self.cfg.k_e as f64);
        let noedge_vals = tape.value(noedge_sig);
        let type_vals = tape.value(type_soft);
        for (row, &(i, j)) in pairs.upper_pairs.iter().enumerate() {
            p_noedge[(i, j)] = noedge_vals[(row, 0)];
            p_noedge[(j, i)] = noedge_vals[(row, 0)];
            for c in 0..self.cfg.k_e {
                p_edgetype[(i, j, c)] = type_vals[(row, c)];
                p_edgetype[(j, i, c)] = type_vals[(row, c)];
            }
        }
        Ok(DecodedDistributions {
            p_noedge,
            p_edgetype,
            p_nodetype: tape.value(node_soft).clone(),
        })
    }

    /// Log-likelihood `log p(A, X | Z)` on the tape: categorical node terms,
    /// Bernoulli edge-existence terms over the triangle, and categorical
    /// edge-type terms gated by the true existence indicator.
    pub(crate) fn log_likelihood_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        g: &GraphSample,
        z: VarId,
        pairs: &PairIndex,
    ) -> VarId {
        let heads = self.forward(tape, bound, z, pairs);

        // node term: sum over nodes of log softmax at the true type
        let node_ls = tape.log_softmax_rows(heads.node_logits);
        let node_mask = tape.constant(g.node_features().clone());
        let node_terms = tape.mul(node_ls, node_mask);
        let node_sum = tape.sum_all(node_terms);

        let p = pairs.upper_pairs.len();
        if p == 0 {
            return node_sum;
        }

        let mut exist = Array2::zeros((p, 1));
        let mut type_mask = Array2::zeros((p, self.cfg.k_e));
        for (row, &(i, j)) in pairs.upper_pairs.iter().enumerate() {
            if g.has_edge(i, j) {
                exist[(row, 0)] = 1.0;
                type_mask[(row, g.edge_channel(i, j) - 1)] = 1.0;
            }
        }
        // existence log-probability via softplus: with x the non-edge logit,
        // log p(edge) = -softplus(x) and log p(non-edge) = -softplus(-x)
        let e_mask = tape.constant(exist.clone());
        let not_e = tape.constant(1.0 - &exist);
        let sp_pos = tape.softplus(heads.noedge_logits);
        let neg = tape.scale(heads.noedge_logits, -1.0);
        let sp_neg = tape.softplus(neg);
        let term_edge = tape.mul(e_mask, sp_pos);
        let term_noedge = tape.mul(not_e, sp_neg);
        let exist_sum_neg = tape.add(term_edge, term_noedge);
        let exist_sum_neg = tape.sum_all(exist_sum_neg);
        let exist_sum = tape.scale(exist_sum_neg, -1.0);

        // edge-type term, teacher-forced by the true existence mask
        let type_ls = tape.log_softmax_rows(heads.type_logits);
        let type_mask = tape.constant(type_mask);
        let type_terms = tape.mul(type_ls, type_mask);
        let type_sum = tape.sum_all(type_terms);

        let partial = tape.add(node_sum, exist_sum);
        tape.add(partial, type_sum)
    }

    /// Log-likelihood of `g` under the decoded distributions at `z`.
    pub fn log_likelihood(&self, g: &GraphSample, z: &Array2<f64>) -> Result<f64> {
        if g.num_nodes() != z.nrows() {
            return Err(Error::dim(format!(
                "graph has {} nodes but z has {} rows",
                g.num_nodes(),
                z.nrows()
            )));
        }
        let pairs = PairIndex::new(g.num_nodes());
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let ll = self.log_likelihood_tape(&mut tape, &bound, g, zv, &pairs);
        Ok(tape.value(ll)[(0, 0)])
    }

    /// Discretize the decoded distributions into a graph. `Argmax` thresholds
    /// edge existence at 1/2 and takes modal types; `Sample` draws.
    pub fn sample_graph<R: Rng>(
        &self,
        z: &Array2<f64>,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<GraphSample> {
        let dist = self.decode_distributions(z)?;
        let n = z.nrows();
        let mut channels = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let p_edge = 1.0 - dist.p_noedge[(i, j)];
                let exists = match mode {
                    DecodeMode::Argmax => p_edge > 0.5,
                    DecodeMode::Sample => rng.gen_bool(p_edge.clamp(0.0, 1.0)),
                };
                if exists {
                    let slice: Vec<f64> = (0..self.cfg.k_e)
                        .map(|c| dist.p_edgetype[(i, j, c)])
                        .collect();
                    let ty = match mode {
                        DecodeMode::Argmax => argmax(&slice),
                        DecodeMode::Sample => sample_categorical(&slice, rng),
                    };
                    channels[(i, j)] = ty + 1;
                }
            }
        }
        let node_types: Vec<usize> = (0..n)
            .map(|i| {
                let row: Vec<f64> = dist.p_nodetype.row(i).to_vec();
                match mode {
                    DecodeMode::Argmax => argmax(&row),
                    DecodeMode::Sample => sample_categorical(&row, rng),
                }
            })
            .collect();
        GraphSample::from_indices(&node_types, self.cfg.k_v, &channels, self.cfg.k_e)
    }

    /// Fraction of unordered node pairs whose predicted edge existence
    /// (argmax decoding) matches the target graph.
    pub fn edge_existence_accuracy(&self, g: &GraphSample, z: &Array2<f64>) -> Result<f64> {
        let dist = self.decode_distributions(z)?;
        let n = g.num_nodes();
        if n < 2 {
            return Ok(1.0);
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                let predicted = (1.0 - dist.p_noedge[(i, j)]) > 0.5;
                if predicted == g.has_edge(i, j) {
                    correct += 1;
                }
                total += 1;
            }
        }
        Ok(correct as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Argmax,
    Sample,
}

#[derive(Debug, Clone)]
pub struct DecodedDistributions {
    /// `P(a_ij = 0)`; symmetric, diagonal fixed at 1.
    pub p_noedge: Array2<f64>,
    /// Edge-type probabilities given existence; slices sum to 1.
    pub p_edgetype: Array3<f64>,
    /// Node-type probabilities; rows sum to 1.
    pub p_nodetype: Array2<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}


/// Test-only hook exposing the tape log-likelihood.
#[doc(hidden)]
pub fn debug_ll(
    dec: &Decoder,
    tape: &mut Tape,
    bound: &Bound,
    g: &GraphSample,
    z: VarId,
) -> VarId {
    let pairs = PairIndex::new(g.num_nodes());
    dec.log_likelihood_tape(tape, bound, g, z, &pairs)
}
