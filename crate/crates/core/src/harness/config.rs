use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curvature::Backend;
use crate::data::NoiseMode;
use crate::error::{Result, SgoifError};
use crate::stability::GateKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Quadratic objective; examples only shift the linear term, so there is
    /// no label noise to detect.
    Quadratic,
    LogisticNoise,
    MlpNoise,
}

/// How an aggregated influence becomes a noise score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSign {
    /// `|aggregated|`
    Magnitude,
    /// `-aggregated`: most harmful first.
    Negative,
}

/// One experiment. Every field has a default, so a config file only needs to
/// list what differs; the resolved config is echoed into `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Training examples.
    pub n: usize,
    /// Input features (parameter dimension for the quadratic task).
    pub d: usize,
    pub classes: usize,
    pub hidden: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Held-out examples the anchors are drawn from.
    pub anchor_pool: usize,
    pub noise_rate: f64,
    pub noise_mode: NoiseMode,
    pub sparsity: f64,
    pub seed: u64,

    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Inverse-time decay horizon for the learning rate; 0 keeps it constant.
    pub lr_decay_t0: f64,
    pub weight_decay: f64,

    pub k_anchors: usize,
    /// Low-rank subspace rank.
    pub r: usize,
    /// Subspace refresh period.
    pub t_r: usize,
    /// Anchor replacement period.
    pub t_a: usize,
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha_damping: f64,
    pub backend: Backend,
    pub gate: GateKind,

    pub rho0: f64,
    /// Robbins-Monro horizon; 0 keeps the step constant.
    pub rho_t0: f64,
    pub max_neumann_k: usize,
    /// Fixed extra sweeps per step when adaptive truncation is off.
    pub fixed_neumann_k: Option<usize>,
    pub cg_max_iters: usize,
    pub coverage_threshold: f64,
    pub trigger_quantile: f64,
    pub confidence_floor: f64,

    pub precond: bool,
    pub calibration: bool,
    pub trigger: bool,
    pub lowrank: bool,
    pub temperature: bool,
    pub temperature_value: f64,

    pub score_window: usize,
    pub score_sign: ScoreSign,
    pub alpha_level: f64,
    pub eval_every: usize,
    /// Time a plain SGD run of the same config for the overhead ratio. Off by
    /// default because wall time makes the report non-reproducible.
    pub measure_overhead: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::LogisticNoise,
            n: 1000,
            d: 30,
            classes: 2,
            hidden: 16,
            separation: 2.5,
            anchor_pool: 200,
            noise_rate: 0.2,
            noise_mode: NoiseMode::Symmetric,
            sparsity: 0.0,
            seed: 0,
            steps: 3000,
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay_t0: 0.0,
            weight_decay: 1e-3,
            k_anchors: 8,
            r: 8,
            t_r: 50,
            t_a: 200,
            kappa: crate::stability::DEFAULT_KAPPA,
            gamma1: crate::stability::DEFAULT_GAMMA1,
            gamma2: crate::stability::DEFAULT_GAMMA2,
            alpha_damping: crate::curvature::DEFAULT_DAMPING,
            backend: Backend::LowrankPlusDiag,
            gate: GateKind::Stability,
            rho0: 0.1,
            rho_t0: 100.0,
            max_neumann_k: 3,
            fixed_neumann_k: None,
            cg_max_iters: 20,
            coverage_threshold: crate::anchors::DEFAULT_COVERAGE_THRESHOLD,
            trigger_quantile: crate::scorer::DEFAULT_MAGNITUDE_QUANTILE,
            confidence_floor: crate::scorer::DEFAULT_CONFIDENCE_FLOOR,
            precond: true,
            calibration: true,
            trigger: true,
            lowrank: true,
            temperature: true,
            temperature_value: 1.0,
            score_window: crate::scorer::DEFAULT_SCORE_WINDOW,
            score_sign: ScoreSign::Magnitude,
            alpha_level: crate::scorer::DEFAULT_ALPHA_LEVEL,
            eval_every: 300,
            measure_overhead: false,
        }
    }
}

fn invalid(msg: impl Into<String>) -> SgoifError {
    SgoifError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SgoifError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Model parameter dimension implied by the task.
    pub fn param_dim(&self) -> usize {
        match self.task {
            Task::Quadratic => self.d,
            Task::LogisticNoise => self.classes * (self.d + 1),
            Task::MlpNoise => self.hidden * (self.d + 1) + self.classes * (self.hidden + 1),
        }
    }

    /// Effective subspace rank after the low-rank switch.
    pub fn effective_rank(&self) -> usize {
        if self.lowrank {
            self.r
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steps", self.steps),
            ("t_r", self.t_r),
            ("t_a", self.t_a),
            ("eval_every", self.eval_every),
            ("score_window", self.score_window),
            ("n", self.n),
            ("d", self.d),
            ("batch_size", self.batch_size),
            ("k_anchors", self.k_anchors),
        ] {
            if v < 1 {
                return Err(invalid(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(invalid(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(invalid(format!("sparsity {} outside [0, 1]", self.sparsity)));
        }
        if self.batch_size > self.n {
            return Err(invalid("batch_size exceeds n"));
        }
        if self.k_anchors > self.anchor_pool {
            return Err(invalid("k_anchors exceeds anchor_pool"));
        }
        if self.task != Task::Quadratic && self.classes < 2 {
            return Err(invalid("classification tasks need at least two classes"));
        }
        if self.task == Task::Quadratic && self.noise_rate != 0.0 {
            return Err(invalid("the quadratic task has no labels; set noise_rate = 0"));
        }
        if self.task == Task::MlpNoise && self.hidden < 1 {
            return Err(invalid("hidden must be >= 1"));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("rho0", self.rho0),
            ("alpha_damping", self.alpha_damping),
            ("temperature_value", self.temperature_value),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite")));
            }
        }
        let non_negative = [
            ("kappa", self.kappa),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("weight_decay", self.weight_decay),
            ("lr_decay_t0", self.lr_decay_t0),
            ("rho_t0", self.rho_t0),
            ("separation", self.separation),
            ("coverage_threshold", self.coverage_threshold),
            ("confidence_floor", self.confidence_floor),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative and finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.trigger_quantile) {
            return Err(invalid("trigger_quantile outside [0, 1]"));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(invalid("alpha_level outside (0, 1)"));
        }
        if self.noise_rate > 0.0 && self.noise_rate * (self.n as f64) < 1.0 {
            return Err(invalid("noise_rate flips fewer than one training label"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.param_dim(), 62);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\ngate = \"ma\"\nbackend = \"diagonal\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gate, GateKind::Ma);
        assert_eq!(cfg.n, 1000);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "t_r = 0",
            "noise_rate = 1.5",
            "steps = 0",
            "unknown_key = 1",
            "task = \"quadratic\"",
            "k_anchors = 500",
            "kappa = -1.0",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(SgoifError::ConfigInvalid(_))),
                "{text}"
            );
        }
        ExperimentConfig::from_toml_str("task = \"quadratic\"\nnoise_rate = 0.0").unwrap();
    }
}
