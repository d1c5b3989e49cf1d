use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use softbody::hwbnn::InputMode;
use softbody::rlenv::{EnvMode, TaskKind};
use softbody_cli::pipeline::{self, TrainModelSummary};
use softbody_cli::{Run, RunConfig, UsageError};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "softbody", version, about = "Soft-robot hysteresis modelling and policy training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// INI configuration file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides [output] dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate the plant hysteresis and write train/val/test splits.
    GenData {
        #[arg(long)]
        steps_per_axis: Option<usize>,
        /// Dataset stem; defaults to <out>/data/dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the body model, or run the architecture ablation.
    TrainModel {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_input_mode)]
        input_mode: Option<InputMode>,
        /// Hidden layers x width, e.g. 4x128.
        #[arg(long)]
        architecture: Option<String>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Train all six architectures with and without direction inputs.
        #[arg(long)]
        ablation: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train a tracking policy against the learned model.
    TrainPolicy {
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Model checkpoint; defaults to the run's model for the configured input mode.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run deterministic episodes and write metrics, trajectories and an X-Y plot.
    Evaluate {
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Surrogate,
    Deploy,
    Both,
}

fn parse_input_mode(s: &str) -> Result<InputMode, String> {
    s.parse::<InputMode>().map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

fn load_config(common: &Common) -> Result<RunConfig, UsageError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { steps_per_axis, data, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = steps_per_axis {
                cfg.dataset.steps_per_axis = n;
            }
            let run = start(cfg, &common)?;
            let s = pipeline::gen_data(&run, data.as_deref())?;
            run_done(&run, s.seconds);
        }
        Command::TrainModel {
            data,
            input_mode,
            architecture,
            max_epochs,
            ablation,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = input_mode {
                cfg.model.input_mode = m.to_string();
            }
            if let Some(a) = architecture {
                cfg.model.architecture = a;
            }
            if let Some(n) = max_epochs {
                if ablation {
                    cfg.model.ablation_max_epochs = n;
                } else {
                    cfg.model.max_epochs = n;
                }
            }
            let run = start(cfg, &common)?;
            let seconds = match pipeline::train_model(&run, data.as_deref(), ablation)? {
                TrainModelSummary::Single { seconds, .. } | TrainModelSummary::Ablation { seconds, .. } => seconds,
            };
            run_done(&run, seconds);
        }
        Command::TrainPolicy { task, steps, model, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = task {
                cfg.task.name = t.to_string();
            }
            if let Some(n) = steps {
                cfg.ppo.total_steps = n;
            }
            let run = start(cfg, &common)?;
            let s = pipeline::train_policy(&run, model.as_deref())?;
            run_done(&run, s.seconds);
        }
        Command::Evaluate {
            task,
            mode,
            policy,
            model,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = task {
                cfg.task.name = t.to_string();
            }
            let run = start(cfg, &common)?;
            let modes: &[EnvMode] = match mode {
                ModeArg::Surrogate => &[EnvMode::Surrogate],
                ModeArg::Deploy => &[EnvMode::Deploy],
                ModeArg::Both => &[EnvMode::Surrogate, EnvMode::Deploy],
            };
            pipeline::evaluate(&run, policy.as_deref(), model.as_deref(), modes)?;
        }
    }
    Ok(())
}

fn start(cfg: RunConfig, common: &Common) -> Result<Run, UsageError> {
    let run = Run::new(cfg)?;
    Ok(if common.quiet { run.quiet() } else { run })
}

fn run_done(run: &Run, seconds: f64) {
    if !run.quiet {
        println!("done in {seconds:.2} s");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

/// The error chain on one line, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
