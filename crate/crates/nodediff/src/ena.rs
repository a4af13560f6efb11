//! Direct node-plus-edge diffusion through edge-node attention.
//!
//! Instead of diffusing latent node vectors, this variant diffuses the raw
//! one-hot tensors: the edge tensor `N x N x (K^e + 1)` and the node matrix
//! `N x K^v` are noised jointly and a stack of edge-node attention blocks
//! predicts both noises. Each block attends over `[g ; H^v]`, folds edge
//! states into the nodes, and refreshes edge states from the fresh node
//! pair sums; edge states are re-symmetrized after every block. The state is
//! `O(N^2 * hidden)`, which is exactly why the node-vector model samples so
//! much faster at scale.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSample, NON_EDGE};
use crate::nn::{gaussian_row, Bound, Linear, Mlp, PIdx, Params, TransformerBlock};
use crate::score_net::{broadcast_rows, time_embedding};
use crate::sde::VpsdeConfig;
use crate::tape::{Tape, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnaConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub time_emb_dim: usize,
    pub k_v: usize,
    pub k_e: usize,
}

impl EnaConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden_dim % self.num_heads != 0 {
            errs.push(format!(
                "ena.hidden_dim: {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.time_emb_dim % 2 != 0 {
            errs.push(format!("ena.time_emb_dim: {} must be even", self.time_emb_dim));
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("k_v", self.k_v),
        ] {
            if v == 0 {
                errs.push(format!("ena.{name}: must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn channels(&self) -> usize {
        self.k_e + 1
    }
}

/// Full-pair index lists over all ordered pairs including the diagonal; row
/// `i * n + j` holds pair `(i, j)`. Aggregation masks exclude the diagonal.
struct FullPairIndex {
    idx_i: Rc<Vec<usize>>,
    idx_j: Rc<Vec<usize>>,
    /// Segment ids (= i) for off-diagonal rows only.
    offdiag_seg: Rc<Vec<usize>>,
    /// Row positions of off-diagonal pairs, aligned with `offdiag_seg`.
    offdiag_rows: Rc<Vec<usize>>,
    /// Row of the transposed pair (j, i) for every row (i, j).
    swap: Rc<Vec<usize>>,
}

impl FullPairIndex {
    fn new(n: usize) -> Self {
        let mut idx_i = Vec::with_capacity(n * n);
        let mut idx_j = Vec::with_capacity(n * n);
        let mut offdiag_seg = Vec::new();
        let mut offdiag_rows = Vec::new();
        let mut swap = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                idx_i.push(i);
                idx_j.push(j);
                swap.push(j * n + i);
                if i != j {
                    offdiag_seg.push(i);
                    offdiag_rows.push(i * n + j);
                }
            }
        }
        Self {
            idx_i: Rc::new(idx_i),
            idx_j: Rc::new(idx_j),
            offdiag_seg: Rc::new(offdiag_seg),
            offdiag_rows: Rc::new(offdiag_rows),
            swap: Rc::new(swap),
        }
    }
}

/// Flatten `N x N x C` to `(N*N) x C` in pair-row order.
pub fn flatten_edges(a: &Array3<f64>) -> Array2<f64> {
    let (n, _, c) = a.dim();
    let mut out = Array2::zeros((n * n, c));
    for i in 0..n {
        for j in 0..n {
            for k in 0..c {
                out[(i * n + j, k)] = a[(i, j, k)];
            }
        }
    }
    out
}

pub fn unflatten_edges(m: &Array2<f64>, n: usize) -> Array3<f64> {
    let c = m.ncols();
    let mut out = Array3::zeros((n, n, c));
    for i in 0..n {
        for j in 0..n {
            for k in 0..c {
                out[(i, j, k)] = m[(i * n + j, k)];
            }
        }
    }
    out
}

/// Edge-node attention score network predicting the noise of the joint
/// (edge tensor, node matrix) diffusion.
#[derive(Debug, Clone)]
pub struct EnaScoreNet {
    pub cfg: EnaConfig,
    pub params: Params,
    in_mlp_e: Mlp,
    in_mlp_v: Mlp,
    blocks: Vec<EnaBlock>,
    out_mlp_e: Mlp,
    out_mlp_v: Mlp,
    g0: PIdx,
}

#[derive(Debug, Clone)]
struct EnaBlock {
    attn: TransformerBlock,
    w_v: Linear,
    w_e: Linear,
    mlp_e: Mlp,
}

impl EnaScoreNet {
    pub fn new<R: Rng>(cfg: EnaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let h = cfg.hidden_dim;
        let in_mlp_e = Mlp::new(&mut params, "in_e", cfg.channels() + cfg.time_emb_dim, h, h, rng);
        let in_mlp_v = Mlp::new(&mut params, "in_v", cfg.k_v + cfg.time_emb_dim, h, h, rng);
        let blocks = (0..cfg.num_layers)
            .map(|l| EnaBlock {
                attn: TransformerBlock::new(
                    &mut params,
                    &format!("block{l}.attn"),
                    h,
                    cfg.num_heads,
                    rng,
                ),
                w_v: Linear::new(&mut params, &format!("block{l}.w_v"), h, h, rng),
                w_e: Linear::new(&mut params, &format!("block{l}.w_e"), h, h, rng),
                mlp_e: Mlp::new(&mut params, &format!("block{l}.mlp_e"), 2 * h, h, h, rng),
            })
            .collect();
        let out_mlp_e = Mlp::new(&mut params, "out_e", h, h, cfg.channels(), rng);
        let out_mlp_v = Mlp::new(&mut params, "out_v", h, h, cfg.k_v, rng);
        for i in 0..params.len() {
            let name = params.name(i);
            if name == "out_e.w2" || name == "out_v.w2" {
                params.get_mut(PIdx(i)).mapv_inplace(|v| v * 0.01);
            }
        }
        let g0 = params.add("g0", gaussian_row(h, 0.02, rng));
        Ok(Self {
            cfg,
            params,
            in_mlp_e,
            in_mlp_v,
            blocks,
            out_mlp_e,
            out_mlp_v,
            g0,
        })
    }

    /// Tape forward pass over flattened edge rows (`(N*N) x C`) and node rows.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        a_flat: VarId,
        x: VarId,
        t: f64,
        n: usize,
    ) -> Result<(VarId, VarId)> {
        let pairs = FullPairIndex::new(n);
        let temb = time_embedding(t, self.cfg.time_emb_dim)?;
        let temb_nodes = tape.constant(broadcast_rows(&temb, n));
        let temb_pairs = tape.constant(broadcast_rows(&temb, n * n));

        let ein = tape.concat_cols(a_flat, temb_pairs);
        let mut h_e = self.in_mlp_e.forward(tape, bound, ein);
        let vin = tape.concat_cols(x, temb_nodes);
        let mut h_v = self.in_mlp_v.forward(tape, bound, vin);
        let mut g = bound.var(self.g0);

        for block in &self.blocks {
            // attention over [g ; H^v]
            let tokens = tape.concat_rows(g, h_v);
            let tokens = block.attn.forward(tape, bound, tokens);
            g = tape.slice_rows(tokens, 0, 1);
            let attended = tape.slice_rows(tokens, 1, n + 1);
            // fold off-diagonal edge states into their source nodes
            let we = block.w_v.forward(tape, bound, h_e);
            let offdiag = tape.gather_rows(we, pairs.offdiag_rows.clone());
            let agg = tape.segment_sum_rows(offdiag, pairs.offdiag_seg.clone(), n);
            h_v = tape.add(attended, agg);
            // refresh edges from fresh node states and the previous edges
            let wv = block.w_e.forward(tape, bound, h_v);
            let wi = tape.gather_rows(wv, pairs.idx_i.clone());
            let wj = tape.gather_rows(wv, pairs.idx_j.clone());
            let wsum = tape.add(wi, wj);
            let ein = tape.concat_cols(wsum, h_e);
            let updated = block.mlp_e.forward(tape, bound, ein);
            // keep the edge states symmetric
            let swapped = tape.gather_rows(updated, pairs.swap.clone());
            let summed = tape.add(updated, swapped);
            h_e = tape.scale(summed, 0.5);
        }
        let eps_e = self.out_mlp_e.forward(tape, bound, h_e);
        let swapped = tape.gather_rows(eps_e, pairs.swap.clone());
        let summed = tape.add(eps_e, swapped);
        let eps_e = tape.scale(summed, 0.5);
        let eps_v = self.out_mlp_v.forward(tape, bound, h_v);
        Ok((eps_e, eps_v))
    }

    /// Inference on plain arrays: predicted noises for the edge tensor and
    /// node matrix. `a_t` must be symmetric in its first two indices.
    pub fn score_forward(
        &self,
        a_t: &Array3<f64>,
        x_t: &Array2<f64>,
        t: f64,
    ) -> Result<(Array3<f64>, Array2<f64>)> {
        let n = self.check_inputs(a_t, x_t, t)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let a_flat = tape.constant(flatten_edges(a_t));
        let x = tape.constant(x_t.clone());
        let (eps_e, eps_v) = self.forward(&mut tape, &bound, a_flat, x, t, n)?;
        Ok((
            unflatten_edges(tape.value(eps_e), n),
            tape.value(eps_v).clone(),
        ))
    }

    fn check_inputs(&self, a_t: &Array3<f64>, x_t: &Array2<f64>, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::range(format!("t = {t} outside [0, 1]")));
        }
        let (n, n2, c) = a_t.dim();
        if n != n2 || c != self.cfg.channels() || x_t.dim() != (n, self.cfg.k_v) {
            return Err(Error::dim(format!(
                "edge tensor {:?} / node matrix {:?} inconsistent with config (k_e + 1 = {}, k_v = {})",
                a_t.dim(),
                x_t.dim(),
                self.cfg.channels(),
                self.cfg.k_v
            )));
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..c {
                    if (a_t[(i, j, k)] - a_t[(j, i, k)]).abs() > 1e-9 {
                        return Err(Error::InvalidGraph(format!(
                            "edge input asymmetric at ({i},{j},{k})"
                        )));
                    }
                }
            }
        }
        if !a_t.iter().chain(x_t.iter()).all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                message: "non-finite edge-node score input".into(),
                checkpoint: None,
            });
        }
        Ok(n)
    }

    /// Peak tape footprint (total stored elements) of one forward pass;
    /// used by the memory-scaling check.
    pub fn forward_footprint(&self, n: usize) -> Result<usize> {
        let a = Array3::zeros((n, n, self.cfg.channels()));
        let x = Array2::zeros((n, self.cfg.k_v));
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let a_flat = tape.constant(flatten_edges(&a));
        let xv = tape.constant(x);
        let _ = self.forward(&mut tape, &bound, a_flat, xv, 0.5, n)?;
        Ok(tape.total_elements())
    }
}

/// Symmetric standard-normal edge noise (upper triangle mirrored; diagonal
/// drawn too, it is forced to non-edge only at discretization).
pub fn symmetric_edge_noise<R: Rng>(n: usize, channels: usize, rng: &mut R) -> Array3<f64> {
    let mut out = Array3::zeros((n, n, channels));
    for i in 0..n {
        for k in 0..channels {
            let v: f64 = rng.sample(StandardNormal);
            out[(i, i, k)] = v;
        }
        for j in (i + 1)..n {
            for k in 0..channels {
                let v: f64 = rng.sample(StandardNormal);
                out[(i, j, k)] = v;
                out[(j, i, k)] = v;
            }
        }
    }
    out
}

/// Discretize a diffused (edge, node) state into a valid graph: average the
/// two orientations, take per-slice argmax, force the diagonal to non-edge.
pub fn discretize(a0: &Array3<f64>, x0: &Array2<f64>, k_e: usize, k_v: usize) -> Result<GraphSample> {
    let n = a0.dim().0;
    let mut channels = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut best = NON_EDGE;
            let mut best_val = f64::NEG_INFINITY;
            for c in 0..=k_e {
                let v = 0.5 * (a0[(i, j, c)] + a0[(j, i, c)]);
                if v > best_val {
                    best_val = v;
                    best = c;
                }
            }
            channels[(i, j)] = best;
        }
    }
    let node_types: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 0..k_v {
                if x0[(i, c)] > x0[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect();
    GraphSample::from_indices(&node_types, k_v, &channels, k_e)
}

/// Draw one graph by reversing the diffusion directly in (edge, node) space
/// with Euler-Maruyama, then discretizing by argmax.
pub fn sample_graph_direct<R: Rng>(
    net: &EnaScoreNet,
    sde_cfg: &VpsdeConfig,
    n: usize,
    num_steps: usize,
    rng: &mut R,
) -> Result<GraphSample> {
    if n == 0 || num_steps == 0 {
        return Err(Error::range("n and num_steps must be positive"));
    }
    let channels = net.cfg.channels();
    let mut a = symmetric_edge_noise(n, channels, rng);
    let mut x = crate::sde::standard_normal(n, net.cfg.k_v, rng);
    let t_end = sde_cfg.eps_t;
    let dt = (1.0 - t_end) / num_steps as f64;
    let mut t = 1.0;
    for step in 0..num_steps {
        let (eps_e, eps_v) = net.score_forward(&a, &x, t)?;
        let (_, sigma) = sde_cfg.marginal_params(t)?;
        let f = sde_cfg.drift_coeff(t)?;
        let g2 = sde_cfg.beta(t)?;
        let g = g2.sqrt();
        // score in epsilon parameterization: grad log q = -eps / sigma
        let last = step + 1 == num_steps;
        let noise_a = if last {
            Array3::zeros(a.raw_dim())
        } else {
            symmetric_edge_noise(n, channels, rng)
        };
        let noise_x = if last {
            Array2::zeros(x.raw_dim())
        } else {
            crate::sde::standard_normal(n, net.cfg.k_v, rng)
        };
        ndarray::Zip::from(&mut a)
            .and(&eps_e)
            .and(&noise_a)
            .for_each(|za, &e, &w| {
                let score = -e / sigma;
                *za = *za - (f * *za - g2 * score) * dt + g * dt.sqrt() * w;
            });
        ndarray::Zip::from(&mut x)
            .and(&eps_v)
            .and(&noise_x)
            .for_each(|zx, &e, &w| {
                let score = -e / sigma;
                *zx = *zx - (f * *zx - g2 * score) * dt + g * dt.sqrt() * w;
            });
        if !a.iter().chain(x.iter()).all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                message: format!("edge-node sampler diverged at t = {t}"),
                checkpoint: None,
            });
        }
        t -= dt;
    }
    discretize(&a, &x, net.cfg.k_e, net.cfg.k_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Permutation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EnaConfig {
        EnaConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            time_emb_dim: 4,
            k_v: 2,
            k_e: 2,
        }
    }

    fn symmetric_inputs(n: usize, cfg: &EnaConfig, rng: &mut ChaCha8Rng) -> (Array3<f64>, Array2<f64>) {
        (
            symmetric_edge_noise(n, cfg.channels(), rng),
            crate::sde::standard_normal(n, cfg.k_v, rng),
        )
    }

    #[test]
    fn output_shapes_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny_cfg();
        let net = EnaScoreNet::new(cfg, &mut rng).unwrap();
        let (a, x) = symmetric_inputs(5, &cfg, &mut rng);
        let (eps_e, eps_v) = net.score_forward(&a, &x, 0.5).unwrap();
        assert_eq!(eps_e.dim(), (5, 5, 3));
        assert_eq!(eps_v.dim(), (5, 2));
        for i in 0..5 {
            for j in 0..5 {
                for c in 0..3 {
                    assert_eq!(eps_e[(i, j, c)], eps_e[(j, i, c)]);
                }
            }
        }
    }

    #[test]
    fn asymmetric_input_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_cfg();
        let net = EnaScoreNet::new(cfg, &mut rng).unwrap();
        let (mut a, x) = symmetric_inputs(4, &cfg, &mut rng);
        a[(0, 1, 0)] += 0.5;
        assert!(net.score_forward(&a, &x, 0.5).is_err());
    }

    #[test]
    fn minimal_two_node_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg();
        let net = EnaScoreNet::new(cfg, &mut rng).unwrap();
        let (a, x) = symmetric_inputs(2, &cfg, &mut rng);
        let (eps_e, eps_v) = net.score_forward(&a, &x, 0.9).unwrap();
        assert!(eps_e.iter().all(|v| v.is_finite()));
        assert!(eps_v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn joint_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg();
        let net = EnaScoreNet::new(cfg, &mut rng).unwrap();
        for trial in 0..20 {
            let n = 2 + (trial % 7);
            let (a, x) = symmetric_inputs(n, &cfg, &mut rng);
            let p = Permutation::random(n, &mut rng);
            let (eps_e, eps_v) = net.score_forward(&a, &x, 0.4).unwrap();
            let mut a_p = Array3::zeros(a.raw_dim());
            for i in 0..n {
                for j in 0..n {
                    for c in 0..cfg.channels() {
                        a_p[(p.apply(i), p.apply(j), c)] = a[(i, j, c)];
                    }
                }
            }
            let x_p = p.permute_rows(&x);
            let (eps_e_p, eps_v_p) = net.score_forward(&a_p, &x_p, 0.4).unwrap();
            let mut dev = 0.0f64;
            for i in 0..n {
                for c in 0..cfg.k_v {
                    dev = dev.max((eps_v_p[(p.apply(i), c)] - eps_v[(i, c)]).abs());
                }
                for j in 0..n {
                    for c in 0..cfg.channels() {
                        dev = dev
                            .max((eps_e_p[(p.apply(i), p.apply(j), c)] - eps_e[(i, j, c)]).abs());
                    }
                }
            }
            assert!(dev <= 1e-5, "joint equivariance deviation {dev}");
        }
    }

    #[test]
    fn untrained_single_step_sampling_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let net = EnaScoreNet::new(cfg, &mut rng).unwrap();
        let sde = VpsdeConfig::default();
        let g = sample_graph_direct(&net, &sde, 6, 1, &mut rng).unwrap();
        g.validate().unwrap();
        assert_eq!(g.num_nodes(), 6);
        let g1 = sample_graph_direct(&net, &sde, 1, 1, &mut rng).unwrap();
        assert_eq!(g1.num_nodes(), 1);
    }

    #[test]
    fn state_memory_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EnaConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            time_emb_dim: 4,
            k_v: 1,
            k_e: 1,
        };
        let net = EnaScoreNet::new(cfg, &mut rng).unwrap();
        let small = net.forward_footprint(50).unwrap();
        let large = net.forward_footprint(400).unwrap();
        let ratio = large as f64 / small as f64;
        // (400/50)^2 = 64 up to the linear-in-N part
        assert!(
            (40.0..=80.0).contains(&ratio),
            "footprint ratio {ratio} not O(N^2)"
        );
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = symmetric_edge_noise(4, 3, &mut rng);
        assert_eq!(unflatten_edges(&flatten_edges(&a), 4), a);
    }
}
