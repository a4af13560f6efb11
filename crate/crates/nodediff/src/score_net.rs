//! Attention score network over latent node vectors.
//!
//! Each node row of `Z^t` becomes a token; a learnable contextual vector is
//! prepended as an extra token and attended jointly with the nodes, so it
//! accumulates graph-level information across the attention stack. The node
//! outputs are the predicted noise; the final contextual row is exposed for
//! the probe experiments. Self-attention acts on the node rows as a set, so
//! outputs are row-equivariant and the context is permutation-invariant.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gaussian_row, Bound, Mlp, PIdx, Params, TransformerBlock};
use crate::tape::{Tape, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub time_emb_dim: usize,
    pub latent_dim: usize,
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden_dim % self.num_heads != 0 {
            errs.push(format!(
                "score.hidden_dim: {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.time_emb_dim % 2 != 0 {
            errs.push(format!(
                "score.time_emb_dim: {} must be even",
                self.time_emb_dim
            ));
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                errs.push(format!("score.{name}: must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Sinusoidal embedding of a scalar time: component `2k` is
/// `sin(t * w_k)`, `2k+1` is `cos(t * w_k)` with `w_k = 1000^(2k/dim)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Array2<f64>> {
    if dim % 2 != 0 {
        return Err(Error::range(format!("time embedding dim {dim} is odd")));
    }
    let mut out = Array2::zeros((1, dim));
    for k in 0..dim / 2 {
        let omega = 1000f64.powf(2.0 * k as f64 / dim as f64);
        out[(0, 2 * k)] = (t * omega).sin();
        out[(0, 2 * k + 1)] = (t * omega).cos();
    }
    Ok(out)
}

/// The score network: input MLP over `[Z^t ; pe(t)]` rows, a stack of
/// attention blocks over the `(1 + N)`-token sequence `[g ; H]`, and an
/// output MLP over the node rows.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    pub cfg: ScoreNetConfig,
    pub params: Params,
    in_mlp: Mlp,
    blocks: Vec<TransformerBlock>,
    out_mlp: Mlp,
    g0: PIdx,
}

impl ScoreNet {
    pub fn new<R: Rng>(cfg: ScoreNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let h = cfg.hidden_dim;
        let in_mlp = Mlp::new(
            &mut params,
            "in",
            cfg.latent_dim + cfg.time_emb_dim,
            h,
            h,
            rng,
        );
        let blocks = (0..cfg.num_layers)
            .map(|l| TransformerBlock::new(&mut params, &format!("block{l}"), h, cfg.num_heads, rng))
            .collect();
        let out_mlp = Mlp::new(&mut params, "out", h, h, cfg.latent_dim, rng);
        // near-zero predicted noise at init
        for i in 0..params.len() {
            if params.name(i) == "out.w2" {
                params.get_mut(crate::nn::PIdx(i)).mapv_inplace(|v| v * 0.01);
            }
        }
        let g0 = params.add("g0", gaussian_row(h, 0.02, rng));
        Ok(Self {
            cfg,
            params,
            in_mlp,
            blocks,
            out_mlp,
            g0,
        })
    }

    /// Tape forward pass. Returns (predicted noise `N x d`, context `1 x h`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_t: VarId,
        t: f64,
    ) -> Result<(VarId, VarId)> {
        let n = tape.shape(z_t).0;
        let temb_row = time_embedding(t, self.cfg.time_emb_dim)?;
        let temb = tape.constant(broadcast_rows(&temb_row, n));
        let x = tape.concat_cols(z_t, temb);
        let h0 = self.in_mlp.forward(tape, bound, x);
        let mut tokens = tape.concat_rows(bound.var(self.g0), h0);
        for block in &self.blocks {
            tokens = block.forward(tape, bound, tokens);
        }
        let context = tape.slice_rows(tokens, 0, 1);
        let nodes = tape.slice_rows(tokens, 1, n + 1);
        let eps = self.out_mlp.forward(tape, bound, nodes);
        Ok((eps, context))
    }

    /// Inference entry point on plain arrays.
    pub fn score_forward(&self, z_t: &Array2<f64>, t: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::range(format!("t = {t} outside [0, 1]")));
        }
        if z_t.ncols() != self.cfg.latent_dim {
            return Err(Error::dim(format!(
                "z_t has {} columns, score net expects {}",
                z_t.ncols(),
                self.cfg.latent_dim
            )));
        }
        if !z_t.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                message: "non-finite score-net input".into(),
                checkpoint: None,
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let (eps, ctx) = self.forward(&mut tape, &bound, z, t)?;
        Ok((tape.value(eps).clone(), tape.value(ctx).clone()))
    }
}

pub fn broadcast_rows(row: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, row.ncols()));
    for mut r in out.rows_mut() {
        r.assign(&row.row(0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Permutation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ScoreNetConfig {
        ScoreNetConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            time_emb_dim: 4,
            latent_dim: 3,
        }
    }

    #[test]
    fn time_embedding_basics() {
        let pe = time_embedding(0.0, 16).unwrap();
        assert_eq!(pe.dim(), (1, 16));
        for k in 0..8 {
            assert_eq!(pe[(0, 2 * k)], 0.0);
            assert_eq!(pe[(0, 2 * k + 1)], 1.0);
        }
        assert!(time_embedding(0.5, 7).is_err());

        // first pair has period 2*pi (omega_0 = 1)
        let a = time_embedding(0.3, 8).unwrap();
        let b = time_embedding(0.3 + 2.0 * std::f64::consts::PI, 8).unwrap();
        assert!((a[(0, 0)] - b[(0, 0)]).abs() < 1e-12);
        assert!((a[(0, 1)] - b[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ScoreNet::new(tiny_cfg(), &mut rng).unwrap();
        let z = crate::sde::standard_normal(5, 3, &mut rng);
        let (eps1, ctx1) = net.score_forward(&z, 0.4).unwrap();
        let (eps2, ctx2) = net.score_forward(&z, 0.4).unwrap();
        assert_eq!(eps1.dim(), (5, 3));
        assert_eq!(ctx1.dim(), (1, 8));
        assert_eq!(eps1, eps2);
        assert_eq!(ctx1, ctx2);
        assert!(eps1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_node_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ScoreNet::new(tiny_cfg(), &mut rng).unwrap();
        let z = crate::sde::standard_normal(1, 3, &mut rng);
        let (eps, _) = net.score_forward(&z, 0.9).unwrap();
        assert_eq!(eps.dim(), (1, 3));
        assert!(eps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn row_equivariance_and_context_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ScoreNet::new(tiny_cfg(), &mut rng).unwrap();
        for trial in 0..20 {
            let n = 2 + (trial % 19);
            let z = crate::sde::standard_normal(n, 3, &mut rng);
            let p = Permutation::random(n, &mut rng);
            let (eps, ctx) = net.score_forward(&z, 0.37).unwrap();
            let (eps_p, ctx_p) = net.score_forward(&p.permute_rows(&z), 0.37).unwrap();
            let expected = p.permute_rows(&eps);
            let dev = (&eps_p - &expected)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dev <= 1e-5, "equivariance deviation {dev}");
            let cdev = (&ctx_p - &ctx).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(cdev <= 1e-5, "context deviation {cdev}");
        }
    }

    #[test]
    fn out_of_range_time_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ScoreNet::new(tiny_cfg(), &mut rng).unwrap();
        let z = crate::sde::standard_normal(2, 3, &mut rng);
        assert!(net.score_forward(&z, 1.2).is_err());
        let mut bad = z.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(net.score_forward(&bad, 0.5).is_err());
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        // residual loss ||eps_const - net(z)||^2 on a tiny config
        let cfg = ScoreNetConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            time_emb_dim: 4,
            latent_dim: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = ScoreNet::new(cfg, &mut rng).unwrap();
        let z = crate::sde::standard_normal(3, 2, &mut rng);
        let target = crate::sde::standard_normal(3, 2, &mut rng);
        let t = 0.6;

        let loss_of = |net: &ScoreNet| -> f64 {
            let (eps, _) = net.score_forward(&z, t).unwrap();
            (&eps - &target).mapv(|v| v * v).sum()
        };

        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, true);
        let zv = tape.constant(z.clone());
        let (eps, _) = net.forward(&mut tape, &bound, zv, t).unwrap();
        let tv = tape.constant(target.clone());
        let resid = tape.sub(eps, tv);
        let sq = tape.square(resid);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let analytic = net.params.grads(&bound, &grads);

        let h = 1e-5;
        for pi in 0..net.params.len() {
            let dims = net.params.get(PIdx(pi)).dim();
            for r in 0..dims.0 {
                for c in 0..dims.1.min(3) {
                    let orig = net.params.get(PIdx(pi))[(r, c)];
                    net.params.get_mut(PIdx(pi))[(r, c)] = orig + h;
                    let up = loss_of(&net);
                    net.params.get_mut(PIdx(pi))[(r, c)] = orig - h;
                    let down = loss_of(&net);
                    net.params.get_mut(PIdx(pi))[(r, c)] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[pi][(r, c)];
                    let denom = a.abs().max(numeric.abs()).max(1e-4);
                    assert!(
                        (a - numeric).abs() / denom < 1e-3,
                        "param {} ({r},{c}): analytic {a} vs numeric {numeric}",
                        net.params.name(pi)
                    );
                }
            }
        }
    }
}
