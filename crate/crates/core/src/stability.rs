//! Stability proxy, residual tolerance and confidence gates.

use serde::{Deserialize, Serialize};

pub const DEFAULT_GAMMA1: f64 = 1.0;
pub const DEFAULT_GAMMA2: f64 = 1.0;
/// Calibrated on the logistic reference task so that the median mid-training
/// confidence is about 0.7.
pub const DEFAULT_KAPPA: f64 = 5.0e4;
pub const MA_GATE_WINDOW: usize = 20;

/// `gamma1 * eta * G_bar / n + gamma2 * lambda_w / n`.
pub fn stability_proxy(eta_t: f64, g_bar: f64, lambda_w: f64, n: usize, gamma1: f64, gamma2: f64) -> f64 {
    let n = n.max(1) as f64;
    gamma1 * eta_t * g_bar / n + gamma2 * lambda_w / n
}

/// `kappa * beta_tilde * Gamma`.
pub fn tolerance(beta_tilde: f64, gamma_t: f64, kappa: f64) -> f64 {
    kappa * beta_tilde * gamma_t
}

/// `clip(1 - ||r|| / tau, 0, 1)`; with `tau = 0` the gate is open only for an
/// exact solve.
pub fn confidence_gate(residual_norm: f64, tau_t: f64) -> f64 {
    if tau_t <= 0.0 {
        return if residual_norm == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - residual_norm / tau_t).clamp(0.0, 1.0)
}

/// Moving-average baseline gate: `clip(1 - ||r|| / (2 * mean(last window)), 0, 1)`.
pub fn ma_gate(residual_norm: f64, history: &[f64], window: usize) -> f64 {
    let window = window.max(1);
    let tail = &history[history.len().saturating_sub(window)..];
    if tail.is_empty() {
        return if residual_norm == 0.0 { 1.0 } else { 0.0 };
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    confidence_gate(residual_norm, 2.0 * mean)
}

/// Which gate turns residuals into confidences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    Stability,
    Ma,
    None,
}

/// Per-step controller inputs and outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilitySignals {
    pub eta_t: f64,
    pub g_bar_t: f64,
    pub lambda_w: f64,
    pub n: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta_tilde_t: f64,
    pub gamma_t: f64,
    pub kappa: f64,
    pub tau_t: f64,
}

impl StabilitySignals {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        eta_t: f64,
        g_bar_t: f64,
        lambda_w: f64,
        n: usize,
        gamma1: f64,
        gamma2: f64,
        gamma_t: f64,
        kappa: f64,
    ) -> Self {
        let beta_tilde_t = stability_proxy(eta_t, g_bar_t, lambda_w, n, gamma1, gamma2);
        let gamma_t = gamma_t.max(1.0);
        Self {
            eta_t,
            g_bar_t,
            lambda_w,
            n,
            gamma1,
            gamma2,
            beta_tilde_t,
            gamma_t,
            kappa,
            tau_t: tolerance(beta_tilde_t, gamma_t, kappa),
        }
    }

    /// Confidence for one anchor under `gate`.
    pub fn gate(&self, kind: GateKind, residual_norm: f64, history: &[f64]) -> f64 {
        match kind {
            GateKind::Stability => confidence_gate(residual_norm, self.tau_t),
            GateKind::Ma => ma_gate(residual_norm, history, MA_GATE_WINDOW),
            GateKind::None => 1.0,
        }
    }
}
