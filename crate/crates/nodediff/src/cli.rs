//! Command implementations behind the thin binary: corpus generation,
//! training runs with reproducible run directories, sampling, evaluation,
//! the contextual probe, and the sampling-speed scaling benchmark.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::Digest;

use crate::config::ExperimentConfig;
use crate::ena::EnaScoreNet;
use crate::error::{Error, Result};
use crate::eval::{evaluate, probe_contextual, write_probe_csv, EvalOptions, ProbeTask};
use crate::graph::{
    deserialize_corpus, generate_corpus, serialize_corpus, split_corpus, write_manifest,
    DatasetKind, DatasetSpec, GraphSample,
};
use crate::sampling::{
    integrate_reverse_sde, sample_graphs, write_trajectory_csv, SampleOptions, SolverConfig,
};
use crate::sde::standard_normal;
use crate::training::{load_ena_checkpoint, save_ena_checkpoint, Trainer};
use crate::vae::DecodeMode;

/// Environment variable overriding the root for relative output paths.
pub const OUT_ROOT_ENV: &str = "NODEDIFF_OUT_ROOT";

/// Resolve a possibly relative output path under the configured root.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

pub fn cmd_gen_data(
    spec_name: &str,
    out_dir: &Path,
    count: Option<usize>,
    seed: u64,
) -> Result<()> {
    let kind = DatasetKind::parse(spec_name)?;
    let mut spec = kind.default_spec(seed);
    if let Some(c) = count {
        spec = DatasetSpec { count: c, ..spec };
    }
    spec.validate()?;
    let out_dir = resolve_out(out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let corpus = generate_corpus(&spec, &mut rng)?;
    let path = out_dir.join(format!("{}.bin", kind.name()));
    serialize_corpus(&corpus, &path)?;
    let manifest = write_manifest(&spec, &path)?;
    println!(
        "gen-data ok dataset={} count={} path={} manifest={}",
        kind.name(),
        corpus.len(),
        path.display(),
        manifest.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_steps: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(data) = &args.data {
        cfg.data_path = Some(data.clone());
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    cfg.validate()?;
    let data_path = cfg.data_path.clone().ok_or_else(|| {
        Error::Config(vec![
            "data_path: set it in the config or pass --data <corpus.bin>".into(),
        ])
    })?;
    let corpus = deserialize_corpus(&data_path)?;
    let (train_split, _test_split) = split_corpus(&corpus, cfg.train_frac, cfg.seed);

    let run_dir = resolve_out(&cfg.out_dir);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let resolved = run_dir.join("config.json");
    std::fs::write(&resolved, cfg.to_json()).map_err(|e| Error::io(&resolved, e))?;

    let mut trainer = Trainer::new(cfg.encoder, cfg.decoder, cfg.score, cfg.sde, cfg.train)?;
    let history = trainer.train(&train_split, Some(&run_dir))?;
    let final_ckpt = run_dir.join("checkpoint_final.bin");
    write_run_manifest(&run_dir)?;
    let last = history.last();
    println!(
        "train ok steps={} loss_vae={:.4} loss_sgm={:.4} checkpoint={}",
        trainer.step,
        last.map_or(f64::NAN, |m| m.loss_vae),
        last.map_or(f64::NAN, |m| m.loss_sgm),
        final_ckpt.display()
    );
    Ok(())
}

/// Hash every artifact in a run directory into `manifest.json`.
pub fn write_run_manifest(run_dir: &Path) -> Result<PathBuf> {
    let mut entries = std::collections::BTreeMap::new();
    let listing = std::fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "manifest.json" || !entry.path().is_file() {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let digest = sha2::Sha256::digest(&bytes);
        entries.insert(name, format!("sha256:{digest:x}"));
    }
    let manifest = run_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    std::fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub count: usize,
    pub solver: SolverConfig,
    pub mode: DecodeMode,
    pub out: PathBuf,
    pub trajectory: Option<PathBuf>,
    pub trajectory_points: usize,
    pub seed: u64,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let trainer = Trainer::load_checkpoint(&args.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let opts = SampleOptions {
        count: args.count,
        solver: args.solver,
        mode: args.mode,
        trajectory_points: args.trajectory.as_ref().map(|_| args.trajectory_points),
    };
    let output = sample_graphs(&trainer, &opts, &mut rng)?;
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    serialize_corpus(&output.graphs, &out)?;
    let timing_path = out.with_extension("timing.json");
    let timing_json =
        serde_json::to_string_pretty(&output.seconds_by_size).expect("timing serializes");
    std::fs::write(&timing_path, timing_json).map_err(|e| Error::io(&timing_path, e))?;
    if let Some(traj) = &args.trajectory {
        let traj = resolve_out(traj);
        write_trajectory_csv(&output.trajectories, &traj)?;
    }
    let total_secs: f64 = output.seconds_by_size.values().sum();
    println!(
        "sample ok count={} path={} seconds={:.3} timing={}",
        output.graphs.len(),
        out.display(),
        total_secs,
        timing_path.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub samples: PathBuf,
    pub test: PathBuf,
    pub train_corpus: Option<PathBuf>,
    pub largest_component: bool,
    pub timing: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let samples = deserialize_corpus(&args.samples)?;
    let test = deserialize_corpus(&args.test)?;
    let train = args
        .train_corpus
        .as_ref()
        .map(|p| deserialize_corpus(p))
        .transpose()?;
    let opts = EvalOptions {
        use_largest_component: args.largest_component,
        ..EvalOptions::default()
    };
    let mut report = evaluate(&samples, &test, train.as_deref(), &opts)?;
    if let Some(timing) = &args.timing {
        let text = std::fs::read_to_string(timing).map_err(|e| Error::io(timing, e))?;
        report.sampling_seconds = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: timing.clone(),
            offset: 0,
            message: e.to_string(),
        })?;
    }
    if let Some(out) = &args.out {
        let out = resolve_out(out);
        std::fs::write(&out, report.to_json()).map_err(|e| Error::io(&out, e))?;
        report.write_csv(&out.with_extension("csv"))?;
    }
    println!(
        "eval ok mmd_degree={:.6} mmd_cluster={:.6} mmd_orbit={:.6} uniqueness={:.4} novelty={:.4}",
        report.mmd_degree, report.mmd_cluster, report.mmd_orbit, report.uniqueness, report.novelty
    );
    Ok(())
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub task: ProbeTask,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let trainer = Trainer::load_checkpoint(&args.checkpoint)?;
    let corpus = deserialize_corpus(&args.corpus)?;
    let grid = crate::eval::default_t_grid();
    match probe_contextual(&trainer, &corpus, &grid, args.task, args.seed) {
        Ok(points) => {
            if let Some(out) = &args.out {
                let out = resolve_out(out);
                write_probe_csv(&points, args.task, &out)?;
            }
            let first = points.first().expect("non-empty grid");
            let last = points.last().expect("non-empty grid");
            println!(
                "probe ok task={} points={} metric_t0={:.4} metric_t1={:.4} baseline_t1={:.4}",
                args.task.name(),
                points.len(),
                first.metric,
                last.metric,
                last.baseline
            );
            Ok(())
        }
        Err(Error::DegenerateLabels(msg)) => {
            println!("probe skipped task={}: {msg}", args.task.name());
            Ok(())
        }
        Err(e) => Err(e),
    }
}

pub struct BenchArgs {
    pub ckpt_node: PathBuf,
    pub ckpt_node_edge: PathBuf,
    pub sizes: Vec<usize>,
    pub steps_per_size: usize,
    pub out: Option<PathBuf>,
}

pub struct BenchReport {
    pub rows: Vec<(usize, f64, f64)>,
    pub slope_node: f64,
    pub slope_node_edge: f64,
}

/// Median-of-repetitions wall-clock per reverse step for both samplers, and
/// fitted log-log slopes of time against graph size.
pub fn bench_speed(
    node: &Trainer,
    node_edge: &EnaScoreNet,
    sde: &crate::sde::VpsdeConfig,
    sizes: &[usize],
    steps_per_size: usize,
) -> Result<BenchReport> {
    if sizes.len() < 2 {
        return Err(Error::Config(vec![
            "bench.sizes: need at least two sizes for a slope".into(),
        ]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let d = node.encoder.cfg.latent_dim;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        // latent node-vector sampler
        let score_fn = |z: &ndarray::Array2<f64>, t: f64| -> Result<ndarray::Array2<f64>> {
            let (_, sigma_t) = sde.marginal_params(t)?;
            let (eps, _) = node.score.score_forward(z, t)?;
            Ok(eps.mapv(|e| -e / sigma_t))
        };
        let mut node_secs = f64::INFINITY;
        for _ in 0..3 {
            let start = standard_normal(n, d, &mut rng);
            let began = std::time::Instant::now();
            integrate_reverse_sde(start, sde, steps_per_size, &score_fn, &mut rng, None)?;
            node_secs = node_secs.min(began.elapsed().as_secs_f64() / steps_per_size as f64);
        }
        let mut edge_secs = f64::INFINITY;
        for _ in 0..3 {
            let began = std::time::Instant::now();
            crate::ena::sample_graph_direct(node_edge, sde, n, steps_per_size, &mut rng)?;
            edge_secs = edge_secs.min(began.elapsed().as_secs_f64() / steps_per_size as f64);
        }
        rows.push((n, node_secs, edge_secs));
    }
    let slope = |col: usize| -> f64 {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| ((r.0 as f64).ln(), if col == 0 { r.1 } else { r.2 }.ln()))
            .collect();
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    };
    Ok(BenchReport {
        slope_node: slope(0),
        slope_node_edge: slope(1),
        rows,
    })
}

pub fn cmd_bench_speed(args: &BenchArgs) -> Result<()> {
    let node = Trainer::load_checkpoint(&args.ckpt_node)?;
    let (node_edge, sde) = load_ena_checkpoint(&args.ckpt_node_edge)?;
    let report = bench_speed(&node, &node_edge, &sde, &args.sizes, args.steps_per_size)?;
    if let Some(out) = &args.out {
        let out = resolve_out(out);
        use std::io::Write;
        let mut f = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
        writeln!(f, "n,seconds_node_vector,seconds_node_edge").map_err(|e| Error::io(&out, e))?;
        for (n, a, b) in &report.rows {
            writeln!(f, "{n},{a},{b}").map_err(|e| Error::io(&out, e))?;
        }
        writeln!(f, "slope,{},{}", report.slope_node, report.slope_node_edge)
            .map_err(|e| Error::io(&out, e))?;
    }
    let largest = report.rows.last().expect("at least two sizes");
    println!(
        "bench-speed ok slope_node={:.3} slope_node_edge={:.3} node_faster_at_n{}={}",
        report.slope_node,
        report.slope_node_edge,
        largest.0,
        largest.1 < largest.2
    );
    Ok(())
}

pub struct InitModelArgs {
    pub config: PathBuf,
    pub kind: InitKind,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Node,
    NodeEdge,
}

/// Write an untrained checkpoint (for the speed benchmark and smoke tests).
pub fn cmd_init_model(args: &InitModelArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    cfg.validate()?;
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let size_hist = args
        .data
        .as_ref()
        .map(|p| -> Result<_> {
            let corpus = deserialize_corpus(p)?;
            crate::graph::size_histogram(&corpus)
        })
        .transpose()?;
    match args.kind {
        InitKind::Node => {
            let mut trainer =
                Trainer::new(cfg.encoder, cfg.decoder, cfg.score, cfg.sde, cfg.train)?;
            trainer.size_hist = size_hist;
            trainer.save_checkpoint(&out)?;
        }
        InitKind::NodeEdge => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let net = EnaScoreNet::new(cfg.ena_config(), &mut rng)?;
            save_ena_checkpoint(&net, cfg.sde, size_hist, &out)?;
        }
    }
    println!("init-model ok kind={:?} path={}", args.kind, out.display());
    Ok(())
}

/// Parse a `--solver` specification: `em[:steps]` or `ode[:tol]`.
pub fn parse_solver(spec: &str, steps: Option<usize>, tol: Option<f64>) -> Result<SolverConfig> {
    match spec {
        "em" | "euler-maruyama" => Ok(SolverConfig::EulerMaruyama {
            num_steps: steps.unwrap_or(1000),
        }),
        "ode" | "probability-flow" => {
            let tol = tol.unwrap_or(1e-4);
            Ok(SolverConfig::ProbabilityFlowOde {
                abs_tol: tol,
                rel_tol: tol,
            })
        }
        other => Err(Error::Config(vec![format!(
            "solver: unknown kind {other:?} (expected em or ode)"
        )])),
    }
}

/// Build the mixed probe corpus used by the cycle-detection experiment:
/// half community graphs (cyclic), half uniform trees (acyclic), sizes in
/// the community-small range.
pub fn build_probe_corpus(count: usize, seed: u64) -> Result<Vec<GraphSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = DatasetSpec {
        count: count / 2,
        ..DatasetKind::CommunitySmall.default_spec(seed)
    };
    let mut corpus = generate_corpus(&spec, &mut rng)?;
    corpus.extend(crate::graph::generate_trees(
        count - count / 2,
        (12, 20),
        &mut rng,
    )?);
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solver_parsing() {
        assert_eq!(
            parse_solver("em", Some(250), None).unwrap(),
            SolverConfig::EulerMaruyama { num_steps: 250 }
        );
        assert_eq!(
            parse_solver("ode", None, Some(1e-5)).unwrap(),
            SolverConfig::ProbabilityFlowOde {
                abs_tol: 1e-5,
                rel_tol: 1e-5
            }
        );
        assert!(parse_solver("rk4", None, None).is_err());
    }

    #[test]
    fn probe_corpus_is_mixed() {
        let corpus = build_probe_corpus(20, 3).unwrap();
        assert_eq!(corpus.len(), 20);
        let cyclic = corpus.iter().filter(|g| g.has_cycle()).count();
        assert_eq!(cyclic, 10);
    }
}
