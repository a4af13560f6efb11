//! Thin command-line front end over the library; every subcommand delegates
//! to `nodediff::cli`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nodediff::cli;
use nodediff::eval::ProbeTask;
use nodediff::vae::DecodeMode;

#[derive(Parser)]
#[command(
    name = "nodediff",
    about = "Graph generation by diffusing latent node vectors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    GenData {
        /// Dataset name: community-small, community, ego-small, ego.
        spec: String,
        #[arg(short, long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON config (supports "preset" inheritance).
    Train {
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many optimization steps (smoke runs).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Sample graphs from a trained checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        count: usize,
        /// Solver kind: em or ode.
        #[arg(long, default_value = "ode")]
        solver: String,
        /// Euler-Maruyama step count.
        #[arg(long)]
        steps: Option<usize>,
        /// ODE error tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
        mode: ModeArg,
        #[arg(short, long, default_value = "samples.bin")]
        out: PathBuf,
        /// Export latent trajectories to this CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        traj_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a sample corpus against a test corpus.
    Eval {
        samples: PathBuf,
        test: PathBuf,
        /// Corpus for the novelty reference (defaults to the test corpus).
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        /// Evaluate samples on their largest connected component.
        #[arg(long)]
        largest_component: bool,
        /// Timing JSON emitted by `sample`, merged into the report.
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Fit probes from contextual vectors to structural labels over a time grid.
    Probe {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::CycleDetect)]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Per-reverse-step wall-clock scaling of the two samplers.
    BenchSpeed {
        ckpt_node: PathBuf,
        ckpt_node_edge: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,400")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write an untrained checkpoint for a config (used by bench-speed).
    InitModel {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Node)]
        model: KindArg,
        #[arg(short, long)]
        out: PathBuf,
        /// Corpus whose size histogram seeds the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Argmax,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    CycleDetect,
    Diameter,
    DegreeClassCount,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Node,
    NodeEdge,
}

fn run() -> nodediff::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            spec,
            out,
            count,
            seed,
        } => cli::cmd_gen_data(&spec, &out, count, seed),
        Command::Train {
            config,
            data,
            out,
            max_steps,
        } => cli::cmd_train(&cli::TrainArgs {
            config,
            data,
            out,
            max_steps,
        }),
        Command::Sample {
            checkpoint,
            count,
            solver,
            steps,
            tol,
            mode,
            out,
            trajectory,
            traj_points,
            seed,
        } => {
            let solver = cli::parse_solver(&solver, steps, tol)?;
            cli::cmd_sample(&cli::SampleArgs {
                checkpoint,
                count,
                solver,
                mode: match mode {
                    ModeArg::Argmax => DecodeMode::Argmax,
                    ModeArg::Sample => DecodeMode::Sample,
                },
                out,
                trajectory,
                trajectory_points: traj_points,
                seed,
            })
        }
        Command::Eval {
            samples,
            test,
            train_corpus,
            largest_component,
            timing,
            out,
        } => cli::cmd_eval(&cli::EvalArgs {
            samples,
            test,
            train_corpus,
            largest_component,
            timing,
            out,
        }),
        Command::Probe {
            checkpoint,
            corpus,
            task,
            seed,
            out,
        } => cli::cmd_probe(&cli::ProbeArgs {
            checkpoint,
            corpus,
            task: match task {
                TaskArg::CycleDetect => ProbeTask::CycleDetect,
                TaskArg::Diameter => ProbeTask::Diameter,
                TaskArg::DegreeClassCount => ProbeTask::DegreeClassCount,
            },
            seed,
            out,
        }),
        Command::BenchSpeed {
            ckpt_node,
            ckpt_node_edge,
            sizes,
            steps,
            out,
        } => cli::cmd_bench_speed(&cli::BenchArgs {
            ckpt_node,
            ckpt_node_edge,
            sizes,
            steps_per_size: steps,
            out,
        }),
        Command::InitModel {
            config,
            model,
            out,
            data,
        } => cli::cmd_init_model(&cli::InitModelArgs {
            config,
            kind: match model {
                KindArg::Node => cli::InitKind::Node,
                KindArg::NodeEdge => cli::InitKind::NodeEdge,
            },
            out,
            data,
        }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
