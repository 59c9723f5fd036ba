//! `modelab`: train, compose and evaluate modular domain experts, and
//! simulate their sharded training steps.

mod ckpt;
mod commands;
mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modelab_core::{Domain, Split};

const REPORT_HELP: &str = "\
Reports:
  report.csv, table1.csv, lab table1 CSVs
      method,setting,math,code,english,average,total_params,trainable_params
  simulate.csv, fig4a.csv, fig4b.csv, fig4c.csv
      plan,meshes,expert_layers,merges,latency_s,compute_s,allreduce_s,reshard_s,idle_s
  comparison.csv
      plan,latency_s,spmd_latency_s,speedup
  losses.csv
      step,loss

Every run writes workdir/<command>/<timestamp>-<seed>/manifest.json.

Configuration layers, lowest first: built-in defaults, --config FILE,
MODELAB__SECTION__KEY environment variables, --set section.key=value.

Exit codes: 0 ok, 2 configuration error, 3 artifact error, 4 training divergence.";

#[derive(Parser)]
#[command(name = "modelab", version, about = "Modular domain experts on a frozen transformer backbone", after_long_help = REPORT_HELP)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "MODELAB_WORKDIR", default_value = "runs", global = true)]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Replace every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantArg {
    Standard,
    Frozen,
    Uninitialized,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepArg {
    Size,
    Merges,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisArg {
    Parameters,
    Examples,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on all three domains.
    PretrainBackbone {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: train one expert on a domain over a frozen backbone.
    TrainExpert {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        domain: Domain,
    },
    /// Stage 2: compose experts and fine-tune on the math+code mixture.
    Compose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backbone: PathBuf,
        /// Expert checkpoint. Repeat once per expert.
        #[arg(long = "expert")]
        experts: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "standard")]
        variant: VariantArg,
        /// Number of fresh experts for `--variant uninitialized`.
        #[arg(long, default_value_t = 1)]
        n_experts: usize,
    },
    /// Baseline: fine-tune every backbone parameter.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, default_value = "mixed")]
        data: Domain,
    },
    /// Baseline: low-rank adapters on the frozen backbone.
    Lora {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, default_value = "mixed")]
        data: Domain,
    },
    /// Collect the latest backbone, baseline and composition reports under
    /// the workdir into the comparison table.
    Table1,
    /// Run a whole experiment in one process.
    #[command(subcommand)]
    Lab(LabCommand),
    /// Simulate SPMD and MPMD training steps.
    Simulate(SimArgs),
    /// Fit the simulator's cost model to measured latencies.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSON list of `{plan, model, latency}` observations.
        #[arg(long)]
        observations: PathBuf,
    },
    /// Synthetic corpora.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Subcommand)]
pub enum LabCommand {
    /// Every method of the comparison table, per seed and averaged.
    Table1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// One-expert MoDE against LoRA on code, by parameters or examples.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "parameters")]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        points: Vec<usize>,
    },
    /// Code experts over blocks × layers per block.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        blocks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        layers: Vec<usize>,
    },
    /// LoRA on code over ranks, attention only and with FFN adapters.
    LoraRanks {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "8,64,512")]
        ranks: Vec<usize>,
    },
    /// Composition with limited mixture data.
    Mixture {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,100,1000")]
        budgets: Vec<usize>,
    },
}

#[derive(Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `spmd`, `mpmd` (three meshes), `mpmd3`, `mpmd5` or a TOML plan file.
    /// Repeatable.
    #[arg(long = "plan")]
    pub plans: Vec<String>,
    #[arg(long, value_enum)]
    pub sweep: Option<SweepArg>,
    /// Also write the three reference data files fig4a/b/c.csv.
    #[arg(long)]
    pub figures: bool,
}

#[derive(Subcommand)]
pub enum DataCommand {
    /// Write a synthetic corpus as whitespace-separated token ids.
    Dump {
        #[arg(long)]
        domain: Domain,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 33)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print to stdout instead of creating a run.
        #[arg(long)]
        stdout: bool,
    },
}

/// Failures raised by the CLI itself, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Artifact(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Artifact(m) => write!(f, "artifact error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use modelab_core::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Artifact(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Usage(_) | E::Plan(_) | E::Calibration(_) | E::Input(_) | E::Json(_) => 2,
                E::Checkpoint(_) | E::Composition(_) | E::Io(_) => 3,
                E::Diverged { .. } => 4,
                E::Dimension(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let work = cli.workdir;
    let result = match cli.command {
        Command::PretrainBackbone { cfg } => commands::train::pretrain(&work, &cfg),
        Command::TrainExpert { cfg, backbone, domain } => commands::train::expert(&work, &cfg, &backbone, domain),
        Command::Compose { cfg, backbone, experts, variant, n_experts } => {
            commands::train::compose(&work, &cfg, &backbone, &experts, variant, n_experts)
        }
        Command::Finetune { cfg, backbone, data } => commands::train::finetune(&work, &cfg, &backbone, data),
        Command::Lora { cfg, backbone, data } => commands::train::lora(&work, &cfg, &backbone, data),
        Command::Table1 => commands::table1::run(&work),
        Command::Lab(lab) => commands::lab::run(&work, lab),
        Command::Simulate(args) => commands::simulate::run(&work, &args),
        Command::Calibrate { cfg, observations } => commands::simulate::calibrate(&work, &cfg, &observations),
        Command::Data(DataCommand::Dump { domain, split, n, seq_len, seed, stdout }) => {
            commands::data::dump(&work, domain, split, n, seq_len, seed, stdout)
        }
    };
    match result {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
