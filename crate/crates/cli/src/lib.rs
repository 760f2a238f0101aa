//! Command-line orchestration of the detector pipeline. Every stage reads
//! its upstream artifacts from the output directory and writes JSON and CSV
//! reports that embed the resolved config and master seed.

mod commands;
mod report;

use std::path::PathBuf;

use aros_core::config::RunConfig;
use aros_core::redteam::AttackNorm;
use aros_core::{ArosError, Result};
use clap::{Args, Parser, Subcommand};

pub use commands::{
    ablation_table, attacked_metrics, cmd_ablate, cmd_craft_ood, cmd_evaluate, cmd_sweep_epsilon, cmd_train_aros,
    cmd_train_classifier, cmd_verify_stability, files, AblationRow, CraftSummary, SweepRow, TrainSummary,
};
pub use report::{read_report, write_csv, write_json, Report};

#[derive(Debug, Parser)]
#[command(
    name = "aros",
    version,
    about = "Adversarially robust OOD detection with a stable neural ODE"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarially train the ID classifier.
    TrainClassifier(CommonArgs),
    /// Fit class Gaussians and sample fake OOD embeddings.
    CraftOod(CommonArgs),
    /// Train the neural ODE detector on the crafted embeddings.
    TrainAros(CommonArgs),
    /// Clean, attacked and corrupted metrics for the detector and baselines.
    Evaluate(CommonArgs),
    /// Jacobian certificates and contraction probes at held-out embeddings.
    VerifyStability(CommonArgs),
    /// Attacked AUROC across the configured budgets.
    SweepEpsilon(CommonArgs),
    /// Train and evaluate ablation configs A–F from scratch.
    Ablate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run config; built-in synthetic defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the attack step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides the attack budget.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Overrides the attack norm.
    #[arg(long, value_parser = ["linf", "l2"])]
    pub norm: Option<String>,
}

impl CommonArgs {
    /// Loads the config and applies command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(m) = self.steps {
            cfg.attack.steps = m;
        }
        if let Some(e) = self.epsilon {
            cfg.attack.epsilon = e;
        }
        if let Some(n) = &self.norm {
            cfg.attack.norm = n.parse::<AttackNorm>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::TrainClassifier(a)
            | Command::CraftOod(a)
            | Command::TrainAros(a)
            | Command::Evaluate(a)
            | Command::VerifyStability(a)
            | Command::SweepEpsilon(a)
            | Command::Ablate(a) => a,
        }
    }
}

/// Sizes the global rayon pool from `AROS_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("AROS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ArosError::config("AROS_THREADS", format!("expected a positive integer, got {raw:?}")))?;
    // A second initialization in the same process is harmless; keep the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let cfg = args.resolve()?;
    std::fs::create_dir_all(&args.out).map_err(|e| ArosError::io(&args.out, e))?;
    let out = args.out.as_path();
    match &cli.command {
        Command::TrainClassifier(_) => cmd_train_classifier(&cfg, out),
        Command::CraftOod(_) => cmd_craft_ood(&cfg, out),
        Command::TrainAros(_) => cmd_train_aros(&cfg, out),
        Command::Evaluate(_) => cmd_evaluate(&cfg, out),
        Command::VerifyStability(_) => cmd_verify_stability(&cfg, out),
        Command::SweepEpsilon(_) => cmd_sweep_epsilon(&cfg, out),
        Command::Ablate(_) => cmd_ablate(&cfg, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_land_in_the_config() {
        let cli = Cli::try_parse_from([
            "aros",
            "evaluate",
            "--out",
            "x",
            "--seed",
            "9",
            "--steps",
            "7",
            "--epsilon",
            "0.05",
            "--norm",
            "l2",
        ])
        .unwrap();
        let cfg = cli.command.args().resolve().unwrap();
        assert_eq!(cfg.master_seed, 9);
        assert_eq!(cfg.attack.steps, 7);
        assert_eq!(cfg.attack.epsilon, 0.05);
        assert_eq!(cfg.attack.norm, AttackNorm::L2);
    }

    #[test]
    fn bad_norm_is_rejected_by_the_parser() {
        assert!(Cli::try_parse_from(["aros", "evaluate", "--out", "x", "--norm", "l1"]).is_err());
    }

    #[test]
    fn missing_config_file_names_the_path() {
        let args = CommonArgs {
            config: Some("/nonexistent/run.json".into()),
            out: "x".into(),
            seed: None,
            steps: None,
            epsilon: None,
            norm: None,
        };
        let err = args.resolve().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.json"), "{err}");
        assert_eq!(err.category().exit_code(), 3);
    }
}
