use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{build_experiment, run_on, MetricsReport};
use crate::error::{Result, SgoifError};
use crate::stability::GateKind;

/// The variant matrix, in report order.
pub const VARIANTS: [&str; 8] = [
    "full",
    "no-gate",
    "ma-gate",
    "no-precond",
    "no-calib",
    "no-temperature",
    "no-lowrank",
    "no-trigger",
];

/// `base` with one component switched off (or swapped, for `ma-gate`).
pub fn variant_config(base: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "no-gate" => cfg.gate = GateKind::None,
        "ma-gate" => cfg.gate = GateKind::Ma,
        "no-precond" => cfg.precond = false,
        "no-calib" => cfg.calibration = false,
        "no-temperature" => cfg.temperature = false,
        "no-lowrank" => cfg.lowrank = false,
        "no-trigger" => cfg.trigger = false,
        other => return Err(SgoifError::ConfigInvalid(format!("unknown variant {other}"))),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Per-variant means over seeds (nulls skipped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub seeds: usize,
    pub p_at_1: Option<f64>,
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
    pub kendall_tau_adjacent: Option<f64>,
    pub hvp_count_per_step: f64,
}

/// Runs `variants` on every seed. Each seed's data is built once and shared
/// by all variants.
pub fn run_variants(base: &ExperimentConfig, variants: &[&str], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let seeded = ExperimentConfig { seed, ..base.clone() };
        let exp = build_experiment(&seeded)?;
        for &v in variants {
            let cfg = variant_config(&seeded, v)?;
            log::info!("ablation: variant {v}, seed {seed}");
            let out = run_on(&cfg, &exp)?;
            rows.push(AblationRow {
                variant: v.to_string(),
                seed,
                report: out.report,
            });
        }
    }
    Ok(rows)
}

/// The full variant matrix over `seeds`.
pub fn run_ablation_suite(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    run_variants(base, &VARIANTS, seeds)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let rs: Vec<&MetricsReport> = rows.iter().filter(|r| r.variant == v).map(|r| &r.report).collect();
            AblationSummary {
                variant: v.to_string(),
                seeds: rs.len(),
                p_at_1: mean_of(rs.iter().map(|r| r.p_at_k.get("1").copied().flatten())),
                aupr: mean_of(rs.iter().map(|r| r.aupr)),
                auroc: mean_of(rs.iter().map(|r| r.auroc)),
                kendall_tau_adjacent: mean_of(rs.iter().map(|r| r.kendall_tau_adjacent)),
                hvp_count_per_step: rs.iter().map(|r| r.hvp_count_per_step).sum::<f64>() / rs.len().max(1) as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_matrix_is_complete() {
        let base = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for v in VARIANTS {
            let cfg = variant_config(&base, v).unwrap();
            cfg.validate().unwrap();
            // each variant differs from the base in at most one switch
            seen.insert(v);
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(variant_config(&base, "full").unwrap(), base);
        assert!(variant_config(&base, "no-such").is_err());
    }

    #[test]
    fn variants_share_datasets() {
        let base = ExperimentConfig {
            n: 100,
            d: 4,
            anchor_pool: 20,
            ..ExperimentConfig::default()
        };
        let reference = build_experiment(&base).unwrap();
        for v in VARIANTS {
            let exp = build_experiment(&variant_config(&base, v).unwrap()).unwrap();
            assert_eq!(exp.train.to_bytes(), reference.train.to_bytes());
            assert_eq!(exp.pool.to_bytes(), reference.pool.to_bytes());
        }
    }
}
