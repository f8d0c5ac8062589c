//! `casunext`: generate phantoms, train the two cascade stages, segment,
//! evaluate and run ablations.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use casunext::train::Role;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Run;
use crate::config::{Ablation, RunConfig, Scale};

#[derive(Parser)]
#[command(name = "casunext", version, about = "Coarse-to-fine cascade segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file overriding the scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Override the epoch count of the trained role(s).
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset.
    GenPhantoms {
        #[arg(long)]
        out: PathBuf,
        /// Number of phantoms (overrides the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the localization or fine network.
    Train {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Ablation::None)]
        ablation: Ablation,
    },
    /// Segment one image or every image in a directory.
    Segment {
        /// Localization checkpoint; not needed for full-frame networks.
        #[arg(long)]
        loc: Option<PathBuf>,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted masks with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Loc,
    Seg,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Loc => Role::Loc,
            RoleArg::Seg => Role::Seg,
        }
    }
}

fn resolve(common: &Common, command: &Option<Command>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.scale, common.config.as_deref(), common.seed)?;
    if let Some(Command::GenPhantoms { count: Some(n), .. }) = command {
        cfg.phantom.count = *n;
        cfg.validate()?;
    }
    if let Some(e) = common.epochs {
        let role = match command {
            Some(Command::Train { role, .. }) => Some(Role::from(*role)),
            _ => None,
        };
        cfg.set_epochs(role, e)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.common, &cli.command)?;
    if cli.common.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        anyhow::bail!("no subcommand given (see --help)");
    };
    match command {
        Command::GenPhantoms { out, .. } => commands::gen_phantoms(Run::new("gen-phantoms", cfg, &out)),
        Command::Train {
            role,
            data,
            out,
            ablation,
        } => commands::train(Run::new("train", cfg, &out), &data, role.into(), ablation),
        Command::Segment { loc, seg, data, out } => {
            commands::segment(Run::new("segment", cfg, &out), loc.as_deref(), &seg, &data)
        }
        Command::Eval { pred, truth, out } => commands::eval(Run::new("eval", cfg, &out), &pred, &truth),
        Command::Ablate { data, out } => commands::ablate(Run::new("ablate", cfg, &out), &data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
