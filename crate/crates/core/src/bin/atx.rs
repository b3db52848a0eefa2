//! `atx` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, invalid or
//! incomplete spec), 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atx_core::data::worker_count;
use atx_core::experiment::{
    cmd_beta_search, cmd_gen_data, cmd_size_sweep, cmd_train, compare_runs, load_teacher, prepare_data, ExperimentSpec, RunContext,
};
use atx_core::metrics::CiMethod;
use atx_core::train::TrainMode;
use atx_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atx", version, about = "Attention-transfer training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Frozen teacher checkpoint; overrides `teacher_checkpoint` in the spec.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Base seed; repetition k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train `reps` seeded students and summarise them.
    Train(Common),
    /// Attention-transfer grid search over beta on the validation split.
    BetaSearch(Common),
    /// Test metric as a function of the number of training patients.
    SizeSweep(Common),
    /// Align and summarise validation curves of finished runs.
    Compare {
        /// Run directories (each holding epochs.csv or rep<k>/epochs.csv).
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic dataset described by the spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `dataset.synthetic_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    ExperimentSpec::from_file(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn run_experiment(cmd: &Command, c: &Common) -> Result<(), Failure> {
    let mut spec = load_spec(&c.spec)?;
    if let Some(s) = c.seed {
        spec.train.seed = s;
    }
    if let Some(r) = c.reps {
        if r == 0 {
            return Err(Failure::Usage("--reps must be at least 1".into()));
        }
        spec.train.repetitions = r;
    }
    let teacher_path = c.teacher.clone().or_else(|| spec.teacher_checkpoint.clone());
    let needs_teacher = matches!(cmd, Command::BetaSearch(_))
        || (matches!(cmd, Command::Train(_)) && spec.train.mode == TrainMode::AttentionTransfer);
    if needs_teacher && teacher_path.is_none() {
        return Err(Failure::Usage("attention transfer needs --teacher <ckpt>".into()));
    }
    if let Some(p) = &teacher_path {
        if !p.is_file() {
            return Err(Failure::Usage(format!("teacher checkpoint {} does not exist", p.display())));
        }
    }
    match cmd {
        Command::BetaSearch(_) if spec.sweep.betas.is_empty() => return Err(Failure::Usage("beta grid is empty".into())),
        Command::SizeSweep(_) if spec.sweep.sizes.is_empty() => return Err(Failure::Usage("sweep.sizes is empty".into())),
        _ => {}
    }
    let workers = worker_count()?;
    let teacher = teacher_path.as_deref().map(load_teacher).transpose()?;
    let data = prepare_data(&spec, workers)?;
    let ctx = RunContext { spec: &spec, data: &data, teacher: teacher.as_ref(), workers };
    match cmd {
        Command::Train(_) => {
            let s = cmd_train(&ctx, &c.out)?;
            println!("validation {:.4} ± {:.4}", s.validation.mean, s.validation.half_width);
            if let Some(t) = s.test {
                println!("test {:.4} ± {:.4}", t.mean, t.half_width);
            }
        }
        Command::BetaSearch(_) => {
            let r = cmd_beta_search(&ctx, &c.out)?;
            for (b, m) in &r.table {
                println!("beta {b}: {m:.4}");
            }
            println!("best beta {}", r.best_beta);
        }
        Command::SizeSweep(_) => {
            let r = cmd_size_sweep(&ctx, &c.out)?;
            for (tag, rows) in [("tl", Some(&r.transfer_learning)), ("at", r.attention_transfer.as_ref())] {
                for row in rows.into_iter().flatten() {
                    println!("{tag} size {}: {:.4} ± {:.4}", row.size, row.metric, row.ci);
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train(c) | Command::BetaSearch(c) | Command::SizeSweep(c) => run_experiment(&cli.command, c),
        Command::Compare { runs, out } => {
            let cmp = compare_runs(runs, CiMethod::default())?;
            cmp.write(out)?;
            print!("{}", cmp.summary_markdown());
            Ok(())
        }
        Command::GenData { spec, out, seed } => {
            let mut spec = load_spec(spec)?;
            if let Some(s) = seed {
                spec.dataset.synthetic_seed = *s;
            }
            let g = cmd_gen_data(&spec, out)?;
            println!("{} records written to {} (probe AUC {:.3})", g.manifest.len(), g.manifest_path.display(), g.probe_auc);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
