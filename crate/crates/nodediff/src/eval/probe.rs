//! Contextual-vector probe: freeze a trained model, push every corpus graph
//! to diffusion time `t`, record the score network's contextual row, and fit
//! a small MLP from contexts to structural labels. The curve of probe
//! quality over `t` shows how much graph information the context carries at
//! each noise level.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSample;
use crate::nn::{Adam, Mlp, Params};
use crate::sde::standard_normal;
use crate::tape::Tape;
use crate::training::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTask {
    /// Binary classification: does the graph contain a cycle?
    CycleDetect,
    /// Regression on the graph diameter.
    Diameter,
    /// Regression on the node counts per degree class (1, 2, 3, >= 4).
    DegreeClassCount,
}

impl ProbeTask {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cycle-detect" | "cycle_detect" => Ok(Self::CycleDetect),
            "diameter" => Ok(Self::Diameter),
            "degree-class-count" | "degree_class_count" => Ok(Self::DegreeClassCount),
            other => Err(Error::Config(vec![format!(
                "probe.task: unknown task {other:?}"
            )])),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::CycleDetect => "cycle-detect",
            Self::Diameter => "diameter",
            Self::DegreeClassCount => "degree-class-count",
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Self::CycleDetect)
    }

    fn labels(&self, g: &GraphSample) -> Vec<f64> {
        match self {
            Self::CycleDetect => vec![if g.has_cycle() { 1.0 } else { 0.0 }],
            Self::Diameter => vec![g.diameter() as f64],
            Self::DegreeClassCount => {
                let mut counts = [0.0; 4];
                for d in g.degrees() {
                    match d {
                        0 => {}
                        1 => counts[0] += 1.0,
                        2 => counts[1] += 1.0,
                        3 => counts[2] += 1.0,
                        _ => counts[3] += 1.0,
                    }
                }
                counts.to_vec()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbePoint {
    pub t: f64,
    /// Accuracy for classification tasks, mean absolute error otherwise.
    pub metric: f64,
    /// Majority-class accuracy (classification) or train-mean MAE
    /// (regression) on the same test split.
    pub baseline: f64,
}

/// The appendix grid: 21 times from 0 to 1 in steps of 0.05.
pub fn default_t_grid() -> Vec<f64> {
    (0..21).map(|i| i as f64 * 0.05).collect()
}

/// Record contexts at each grid time and fit a fresh probe per time.
pub fn probe_contextual(
    trainer: &Trainer,
    corpus: &[GraphSample],
    t_grid: &[f64],
    task: ProbeTask,
    seed: u64,
) -> Result<Vec<ProbePoint>> {
    if corpus.is_empty() {
        return Err(Error::range("probe corpus is empty"));
    }
    let labels: Vec<Vec<f64>> = corpus.iter().map(|g| task.labels(g)).collect();
    if task.is_classification() {
        let positives = labels.iter().filter(|l| l[0] > 0.5).count();
        if positives == 0 || positives == corpus.len() {
            return Err(Error::DegenerateLabels(format!(
                "task {}: all {} graphs share one class",
                task.name(),
                corpus.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = trainer.encoder.cfg.sigma;
    let mut points = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::range(format!("probe time {t} outside [0, 1]")));
        }
        // contexts at this diffusion time
        let (mean_scale, sigma_t) = trainer.sde_cfg.marginal_params(t)?;
        let mut contexts = Vec::with_capacity(corpus.len());
        for g in corpus {
            let (mean, _) = trainer.encoder.encode(g, &mut rng)?;
            let rep = standard_normal(mean.nrows(), mean.ncols(), &mut rng);
            let z0 = &mean + &(&rep * sigma);
            let zn = trainer.normalizer.normalize(&z0);
            let noise = standard_normal(zn.nrows(), zn.ncols(), &mut rng);
            let z_t = &zn * mean_scale + &noise * sigma_t;
            let (_, ctx) = trainer.score.score_forward(&z_t, t)?;
            contexts.push(ctx.row(0).to_vec());
        }
        let point = fit_probe(&contexts, &labels, task, &mut rng)?;
        points.push(ProbePoint {
            t,
            metric: point.0,
            baseline: point.1,
        });
    }
    Ok(points)
}

/// Train a 3-layer MLP on a 90/10 split; returns (metric, baseline).
fn fit_probe<R: Rng>(
    contexts: &[Vec<f64>],
    labels: &[Vec<f64>],
    task: ProbeTask,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let n = contexts.len();
    let d_in = contexts[0].len();
    let d_out = labels[0].len();
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(rng);
    let cut = ((0.9 * n as f64).floor() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = idx.split_at(cut);

    let to_matrix = |rows: &[usize], src: &[Vec<f64>]| {
        let mut m = Array2::zeros((rows.len(), src[0].len()));
        for (r, &i) in rows.iter().enumerate() {
            for c in 0..src[i].len() {
                m[(r, c)] = src[i][c];
            }
        }
        m
    };
    let x_train = to_matrix(train_idx, contexts);
    let y_train = to_matrix(train_idx, labels);
    let x_test = to_matrix(test_idx, contexts);
    let y_test = to_matrix(test_idx, labels);

    // 3-layer MLP: in -> 64 -> 64 -> out
    let mut params = Params::new();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let l1 = Mlp::new(&mut params, "l12", d_in, 64, 64, &mut probe_rng);
    let l3 = crate::nn::Affine::new(&mut params, "l3", 64, d_out, &mut probe_rng);
    let mut adam = Adam::new(&params, 1e-3, 0.0);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(x_train.clone());
        let h = l1.forward(&mut tape, &bound, x);
        let h = tape.silu(h);
        let out = l3.forward(&mut tape, &bound, h);
        let loss = if task.is_classification() {
            // binary cross-entropy via softplus on the logit
            let y = tape.constant(y_train.clone());
            let not_y = tape.constant(1.0 - &y_train);
            let neg = tape.scale(out, -1.0);
            let sp_pos = tape.softplus(neg);
            let sp_neg = tape.softplus(out);
            let a = tape.mul(y, sp_pos);
            let b = tape.mul(not_y, sp_neg);
            let s = tape.add(a, b);
            tape.mean_all(s)
        } else {
            let y = tape.constant(y_train.clone());
            let diff = tape.sub(out, y);
            let sq = tape.square(diff);
            tape.mean_all(sq)
        };
        let grads = tape.backward(loss);
        let g = params.grads(&bound, &grads);
        adam.step(&mut params, &g);
    }

    // evaluate on the held-out rows
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(x_test.clone());
    let h = l1.forward(&mut tape, &bound, x);
    let h = tape.silu(h);
    let out = l3.forward(&mut tape, &bound, h);
    let pred = tape.value(out);

    if task.is_classification() {
        let correct = (0..x_test.nrows())
            .filter(|&r| (pred[(r, 0)] > 0.0) == (y_test[(r, 0)] > 0.5))
            .count();
        let accuracy = correct as f64 / x_test.nrows() as f64;
        // majority class of the train split, scored on the test split
        let train_pos = (0..y_train.nrows())
            .filter(|&r| y_train[(r, 0)] > 0.5)
            .count();
        let majority = if 2 * train_pos >= y_train.nrows() { 1.0 } else { 0.0 };
        let baseline = (0..y_test.nrows())
            .filter(|&r| (y_test[(r, 0)] > 0.5) == (majority > 0.5))
            .count() as f64
            / y_test.nrows() as f64;
        Ok((accuracy, baseline))
    } else {
        let mae = |a: &Array2<f64>, b: &Array2<f64>| {
            (a - b).iter().map(|v| v.abs()).sum::<f64>() / (a.len() as f64)
        };
        let metric = mae(pred, &y_test);
        let mean_row = y_train.mean_axis(ndarray::Axis(0)).unwrap();
        let mut mean_pred = Array2::zeros(y_test.dim());
        for mut r in mean_pred.rows_mut() {
            r.assign(&mean_row);
        }
        Ok((metric, mae(&mean_pred, &y_test)))
    }
}

pub fn write_probe_csv(points: &[ProbePoint], task: ProbeTask, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "task,t,metric,baseline").map_err(|e| Error::io(path, e))?;
    for p in points {
        writeln!(f, "{},{},{},{}", task.name(), p.t, p.metric, p.baseline)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
