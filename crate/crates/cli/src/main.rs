//! Command-line entry point: data synthesis, source pretraining, per-task
//! teacher/student training, sample generation, evaluation, and the
//! ablation grids.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 consistency/audit, 5 io/format.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::error;

use commands::Grid;
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "contigan", version, about = "Continual few-shot image generation with task adapters and teacher-student distillation")]
struct Cli {
    /// Emit a one-line JSON summary on stdout
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct ConfigFlags {
    /// JSON config file (flags override file; CONTIGAN_SEED overrides both)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Image resolution (power of two, >= 8)
    #[arg(long)]
    res: Option<usize>,
    /// Image channels (1 or 3)
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shape corpus: a diverse source set plus tight
    /// few-shot task sets with a task manifest
    MakeData {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Images per source class
        #[arg(long, default_value_t = 240)]
        per_class: usize,
        /// Images per few-shot task
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the source generator/discriminator on a large dataset
    Pretrain {
        /// Directory of source images
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Pretraining steps
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        force: bool,
    },
    /// Train the teacher stage then the student adapter bank for one task,
    /// followed by the forgetting audit
    TrainTask {
        /// Run directory holding the source checkpoint
        #[arg(long, visible_alias = "run")]
        source: PathBuf,
        /// Directory of task images
        #[arg(long)]
        task_dir: PathBuf,
        /// Task identifier (also names the adapter bank)
        #[arg(long)]
        task_id: String,
        /// Few-shot count taken from the task directory
        #[arg(long, default_value_t = 10)]
        shots: usize,
        /// Teacher-stage similarity-loss weight
        #[arg(long)]
        wt: Option<f64>,
        /// Student-stage similarity-loss weight
        #[arg(long)]
        ws: Option<f64>,
        /// Student-stage distillation weight
        #[arg(long)]
        alpha: Option<f64>,
        /// Trainable suffix of the student discriminator
        #[arg(long)]
        freeze_k: Option<usize>,
        #[arg(long)]
        steps_teacher: Option<usize>,
        #[arg(long)]
        steps_student: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        force: bool,
    },
    /// Generate samples from a trained task bank (or the source path)
    Generate {
        #[arg(long)]
        run: PathBuf,
        /// Task id, or "source" for the adapter-free source generator
        #[arg(long)]
        task_id: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate trained tasks: fidelity and diversity scores per task plus
    /// the average row
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, conflicts_with = "all")]
        task_id: Option<String>,
        /// Evaluate every completed task
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 60)]
        n_samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Sweep a hyperparameter grid and emit a CSV
    Ablate {
        #[arg(long)]
        run: PathBuf,
        /// Which grid: wt, ws-alpha, or freeze
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        task_dir: PathBuf,
        #[arg(long)]
        task_id: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 60)]
        n_samples: usize,
        #[arg(long)]
        steps_teacher: Option<usize>,
        #[arg(long)]
        steps_student: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        force: bool,
    },
}

fn init_logging() {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    builder
        .format(|buf, record| {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            writeln!(
                buf,
                "{} {}.{:03} {} {}",
                record.level().to_string().to_lowercase(),
                ts.as_secs(),
                ts.subsec_millis(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn resolve(flags: &ConfigFlags, over: Overrides) -> contigan::error::Result<RunConfig> {
    let merged = Overrides {
        seed: over.seed.or(flags.seed),
        resolution: flags.res,
        channels: flags.channels,
        ..over
    };
    RunConfig::resolve(flags.config.as_deref(), &merged)
}

/// For commands that operate on an existing run: defaults come from the
/// run's stored config.json unless --config points elsewhere.
fn resolve_for_run(run: &std::path::Path, flags: &ConfigFlags, over: Overrides) -> contigan::error::Result<RunConfig> {
    let file = flags.config.clone().or_else(|| {
        let p = run.join("config.json");
        p.exists().then_some(p)
    });
    let merged = Overrides {
        seed: over.seed.or(flags.seed),
        resolution: flags.res,
        channels: flags.channels,
        ..over
    };
    RunConfig::resolve(file.as_deref(), &merged)
}

fn run(cli: Cli) -> contigan::error::Result<serde_json::Value> {
    match cli.command {
        Command::MakeData {
            out,
            per_class,
            shots,
            seed,
            res,
            force,
        } => commands::cmd_make_data(&out, res, per_class, shots, seed, force),
        Command::Pretrain {
            data,
            out,
            steps,
            cfg,
            force,
        } => {
            let rc = resolve(
                &cfg,
                Overrides {
                    steps_source: steps,
                    ..Default::default()
                },
            )?;
            commands::cmd_pretrain(&data, &out, &rc, force)
        }
        Command::TrainTask {
            source,
            task_dir,
            task_id,
            shots,
            wt,
            ws,
            alpha,
            freeze_k,
            steps_teacher,
            steps_student,
            cfg,
            force,
        } => {
            let rc = resolve_for_run(
                &source,
                &cfg,
                Overrides {
                    wt,
                    ws,
                    alpha,
                    freeze_k,
                    steps_teacher,
                    steps_student,
                    ..Default::default()
                },
            )?;
            commands::cmd_train_task(&source, &task_dir, &task_id, &rc, shots, force)
        }
        Command::Generate {
            run,
            task_id,
            n,
            seed,
            out,
            force,
        } => commands::cmd_generate(&run, &task_id, n, seed, &out, force),
        Command::Eval {
            run,
            task_id,
            all,
            n_samples,
            seed,
        } => commands::cmd_eval(&run, task_id.as_deref(), all, n_samples, seed),
        Command::Ablate {
            run,
            grid,
            task_dir,
            task_id,
            out,
            shots,
            n_samples,
            steps_teacher,
            steps_student,
            cfg,
            force,
        } => {
            let rc = resolve_for_run(
                &run,
                &cfg,
                Overrides {
                    steps_teacher,
                    steps_student,
                    ..Default::default()
                },
            )?;
            commands::cmd_ablate(&run, grid, &task_dir, &task_id, &out, &rc, shots, n_samples, force)
        }
    }
}

fn main() {
    init_logging();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(summary) => {
            if json {
                println!("{summary}");
            }
        }
        Err(e) => {
            error!(target: "contigan", "{e}");
            std::process::exit(e.exit_code());
        }
    }
}
