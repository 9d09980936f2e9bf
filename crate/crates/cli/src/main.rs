use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use sgoif::harness::ablation::{run_ablation_suite, summarize};
use sgoif::harness::oracle::oracle_check;
use sgoif::harness::report::{metrics_from_scores, read_scores, write_csv, write_json, write_run};
use sgoif::harness::runner::with_threads;
use sgoif::harness::{run_sgoif, ExperimentConfig};
use sgoif::SgoifError;

const EXIT_CONFIG: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "sgoif", version, about = "Stability-gated online influence experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (outputs do not depend on this).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration.
    Run(Common),
    /// Run the ablation variant matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Dense oracle and lemma-bound suites.
    OracleCheck(Common),
    /// Recompute detection metrics from a score dump.
    Metrics {
        /// A `scores_epoch_<k>.csv` file.
        scores: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, SgoifError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), SgoifError> {
    std::fs::create_dir_all(dir).map_err(|e| SgoifError::Io(format!("{}: {e}", dir.display())))
}

fn run(cli: Cli) -> Result<ExitCode, SgoifError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let out = with_threads(c.threads, || run_sgoif(&cfg))?;
            write_run(&c.out, &out)?;
            let r = &out.report;
            println!(
                "P@1% {}  AUPR {}  AUROC {}  Kendall {}  HVP/step {:.2}",
                fmt(r.p_at_k.get("1").copied().flatten()),
                fmt(r.aupr),
                fmt(r.auroc),
                fmt(r.kendall_tau_adjacent),
                r.hvp_count_per_step
            );
            info!("wrote {}", c.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { common: c, seeds } => {
            let cfg = load_config(&c)?;
            let seed_list: Vec<u64> = (0..seeds.max(1)).map(|i| cfg.seed + i).collect();
            let rows = with_threads(c.threads, || run_ablation_suite(&cfg, &seed_list))?;
            let summary = summarize(&rows);
            ensure_dir(&c.out)?;
            write_json(&c.out.join("ablation.json"), &rows)?;
            write_csv(&c.out.join("ablation_summary.csv"), &summary)?;
            println!("{:<16}{:>8}{:>8}{:>8}{:>9}{:>10}", "variant", "P@1%", "AUPR", "AUROC", "Kendall", "HVP/step");
            for s in &summary {
                println!(
                    "{:<16}{:>8}{:>8}{:>8}{:>9}{:>10.2}",
                    s.variant,
                    fmt(s.p_at_1),
                    fmt(s.aupr),
                    fmt(s.auroc),
                    fmt(s.kendall_tau_adjacent),
                    s.hvp_count_per_step
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck(c) => {
            let cfg = load_config(&c)?;
            let suites = with_threads(c.threads, || oracle_check(&cfg))?;
            ensure_dir(&c.out)?;
            write_json(&c.out.join("oracle_check.json"), &suites)?;
            let mut all = true;
            for s in &suites {
                all &= s.passed;
                println!(
                    "{} {:<20} {}/{} checks ok, worst slack {:.3e}, measured {:.6e}",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.checks - s.violations,
                    s.checks,
                    s.worst_slack,
                    s.measured
                );
            }
            Ok(if all {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ORACLE)
            })
        }
        Command::Metrics { scores } => {
            let rows = read_scores(&scores)?;
            let m = metrics_from_scores(&rows);
            println!("{}", serde_json::to_string_pretty(&m).map_err(|e| SgoifError::Format(e.to_string()))?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.3}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e @ SgoifError::ConfigInvalid(_)) => {
            error!("{e}");
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
