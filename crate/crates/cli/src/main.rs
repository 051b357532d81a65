use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_mera::experiment::{
    cmd_analyze, cmd_anneal, cmd_noisy_optimize, cmd_optimize, cmd_protocol_study, cmd_shadows_sample,
    ExperimentConfig,
};
use hybrid_mera::Error;

/// Annealing + MERA ground-state experiments at desk scale.
#[derive(Parser)]
#[command(name = "hmera", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace every seed in the config with this value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Allow chains longer than 12 sites (up to 24; a 24-site statevector needs 256 MiB per copy).
    #[arg(long)]
    large: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep (t_final, dt) and report annealing energies and depths.
    Anneal(Common),
    /// Optimize a MERA on top of the annealed state.
    Optimize(Common),
    /// Run the four snapshot-pool protocols on identical seeds.
    ProtocolStudy(Common),
    /// Optimize on noisy snapshots for each configured noise strength.
    NoisyOptimize(Common),
    /// Weight-resolved variance, snapshot forecast and worst-case bounds.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Snapshot file written by `shadows-sample`.
        #[arg(long)]
        shadows: PathBuf,
        /// MERA containers to score; repeatable.
        #[arg(long)]
        mera: Vec<PathBuf>,
    },
    /// Write a JSONL snapshot file of the annealed state.
    ShadowsSample {
        #[command(flatten)]
        common: Common,
        /// Snapshot count; defaults to the shadow interface's `s`.
        #[arg(long)]
        snapshots: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Anneal(c) | Command::Optimize(c) | Command::ProtocolStudy(c) | Command::NoisyOptimize(c) => c,
            Command::Analyze { common, .. } | Command::ShadowsSample { common, .. } => common,
        }
    }
}

fn run(cmd: &Command) -> hybrid_mera::Result<String> {
    let common = cmd.common();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed_override {
        cfg = cfg.with_seed_override(seed);
    }
    cfg.validate(common.large)?;
    let out = &common.out;
    let line = match cmd {
        Command::Anneal(_) => {
            let s = cmd_anneal(&cfg, out)?;
            format!("{} cells, E_exact = {}", s.rows.len(), s.e_exact)
        }
        Command::Optimize(_) => {
            let s = cmd_optimize(&cfg, out)?;
            format!(
                "relative error {} -> {} after {} steps",
                s.relative_error_qa, s.relative_error_final, s.steps_run
            )
        }
        Command::ProtocolStudy(_) => {
            let s = cmd_protocol_study(&cfg, out)?;
            s.protocols
                .iter()
                .map(|p| format!("({}) min z {:.2}, final exact {}", p.label, p.min_z, p.final_exact))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::NoisyOptimize(_) => {
            let s = cmd_noisy_optimize(&cfg, out)?;
            s.runs
                .iter()
                .map(|r| format!("eta {}: noisy QA {}, final exact {}", r.eta, r.e_qa_noisy, r.final_exact))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Analyze { shadows, mera, .. } => {
            let s = cmd_analyze(&cfg, shadows, mera, out)?;
            s.entries
                .iter()
                .map(|e| format!("{}: total variance {}", e.label, e.total))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::ShadowsSample { snapshots, .. } => cmd_shadows_sample(&cfg, *snapshots, out)?.display().to_string(),
    };
    Ok(line)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}
