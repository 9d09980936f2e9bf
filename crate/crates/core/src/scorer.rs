//! Per-example influence scores, empirical-Bernstein intervals, Top-K
//! certification, the refinement trigger and the error budget.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SgoifError};
use crate::ihvp::{residual_error_bound, AnchorState};
use crate::numerics::dot;

pub const DEFAULT_SCORE_WINDOW: usize = 16;
pub const DEFAULT_MAGNITUDE_QUANTILE: f64 = 0.99;
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.3;
pub const DEFAULT_ALPHA_LEVEL: f64 = 0.05;
const MAGNITUDE_BUFFER: usize = 4096;

/// Score of one example against the current anchor bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub example_id: usize,
    /// `-c_v phi_v^T g_i`
    pub per_anchor_scores: Vec<f64>,
    /// `phi_v^T g_i`
    pub phi_dot_g: Vec<f64>,
    /// `sum_v w_v per_anchor_v`
    pub aggregated: f64,
    pub ci_half_width: f64,
    pub refinement_flagged: bool,
    /// Every anchor had zero confidence.
    pub no_confidence: bool,
    pub probe_count: usize,
}

impl InfluenceRecord {
    /// Probe contributions `w_v * per_anchor_v`.
    pub fn probes(&self, weights: &[f64]) -> Vec<f64> {
        weights
            .iter()
            .zip(&self.per_anchor_scores)
            .map(|(w, s)| w * s)
            .collect()
    }
}

/// Eq.-1/Eq.-5 scoring: per-anchor `-c_v phi_v^T g_i`, combined with `weights`.
pub fn score_example(
    example_id: usize,
    g_i: &[f64],
    anchors: &[AnchorState],
    weights: &[f64],
    no_confidence: bool,
) -> Result<InfluenceRecord> {
    check_dim(anchors.len(), weights.len())?;
    let mut per_anchor = Vec::with_capacity(anchors.len());
    let mut raw = Vec::with_capacity(anchors.len());
    for a in anchors {
        check_dim(a.phi_v.len(), g_i.len())?;
        let p = dot(&a.phi_v, g_i);
        raw.push(p);
        per_anchor.push(-a.c_v * p);
    }
    let aggregated = if no_confidence {
        0.0
    } else {
        weights.iter().zip(&per_anchor).map(|(w, s)| w * s).sum()
    };
    Ok(InfluenceRecord {
        example_id,
        per_anchor_scores: per_anchor,
        phi_dot_g: raw,
        aggregated,
        ci_half_width: 0.0,
        refinement_flagged: no_confidence,
        no_confidence,
        probe_count: 0,
    })
}

/// Running mean and variance (Welford) of bounded probes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BernsteinAccumulator {
    m: usize,
    mean: f64,
    m2: f64,
    values_seen: Vec<f64>,
    /// Known bound on `|probe - mean|`; estimated from the data when `None`.
    pub b_tilde: Option<f64>,
}

impl BernsteinAccumulator {
    pub fn new(b_tilde: Option<f64>) -> Self {
        Self {
            b_tilde,
            ..Self::default()
        }
    }

    pub fn from_values(values: &[f64], b_tilde: Option<f64>) -> Self {
        let mut acc = Self::new(b_tilde);
        for v in values {
            acc.push(*v);
        }
        acc
    }

    pub fn push(&mut self, x: f64) {
        self.m += 1;
        let delta = x - self.mean;
        self.mean += delta / self.m as f64;
        self.m2 += delta * (x - self.mean);
        if self.b_tilde.is_none() {
            self.values_seen.push(x);
        }
    }

    pub fn count(&self) -> usize {
        self.m
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 with fewer than 2 probes).
    pub fn variance(&self) -> f64 {
        if self.m < 2 {
            0.0
        } else {
            (self.m2 / (self.m - 1) as f64).max(0.0)
        }
    }

    /// `B_tilde`: the configured bound, else the largest observed deviation
    /// from the mean.
    pub fn range_bound(&self) -> f64 {
        match self.b_tilde {
            Some(b) => b,
            None => self
                .values_seen
                .iter()
                .map(|v| (v - self.mean).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// `W = sqrt(2 V ln(3/alpha) / m) + 3 B ln(3/alpha) / m`.
pub fn bernstein_half_width(variance: f64, b_tilde: f64, m: usize, alpha_level: f64) -> f64 {
    let l = (3.0 / alpha_level).ln();
    let m = m as f64;
    (2.0 * variance * l / m).sqrt() + 3.0 * b_tilde * l / m
}

pub fn bernstein_interval(acc: &BernsteinAccumulator, alpha_level: f64) -> Result<f64> {
    if acc.count() < 2 {
        return Err(SgoifError::InsufficientProbes(acc.count()));
    }
    Ok(bernstein_half_width(acc.variance(), acc.range_bound(), acc.count(), alpha_level))
}

/// `exp(-m (Delta - b)^2 / (2 sigma^2))` clipped to `[0, 1]`; vacuous (1) when
/// the gap does not exceed the bias.
pub fn misrank_bound(delta_gap: f64, bias_b: f64, sigma_tilde_sq: f64, m: usize) -> f64 {
    if delta_gap <= bias_b {
        return 1.0;
    }
    if sigma_tilde_sq <= 0.0 {
        return 0.0;
    }
    let t = delta_gap - bias_b;
    (-(m as f64) * t * t / (2.0 * sigma_tilde_sq)).exp().clamp(0.0, 1.0)
}

/// Ordering by descending score with the Top-K margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub ordering: Vec<usize>,
    pub top_k: Vec<usize>,
    pub gamma_k: f64,
    pub sup_error_bound: f64,
    pub order_certified: bool,
}

/// Descending order by score, ties by ascending id.
pub fn rank_descending(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .1
            .total_cmp(&scores[a].1)
            .then(scores[a].0.cmp(&scores[b].0))
    });
    idx.into_iter().map(|i| scores[i].0).collect()
}

/// Top-K set and margin `gamma_K = s_(K) - s_(K+1)`; certified iff the
/// uniform error bound is below `gamma_K / 2`.
pub fn topk_report(scores: &[(usize, f64)], k: usize, sup_error_bound: f64) -> Result<RankingReport> {
    if k > scores.len() {
        return Err(SgoifError::ConfigInvalid(format!(
            "top-{k} requested from {} records",
            scores.len()
        )));
    }
    let mut sorted: Vec<(usize, f64)> = scores.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ordering: Vec<usize> = sorted.iter().map(|s| s.0).collect();
    let gamma_k = if k == 0 || k == sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1].1 - sorted[k].1
    };
    Ok(RankingReport {
        top_k: ordering[..k].to_vec(),
        ordering,
        gamma_k,
        sup_error_bound,
        order_certified: sup_error_bound < gamma_k / 2.0,
    })
}

/// Magnitude-quantile trigger for targeted CG refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrigger {
    pub magnitude_quantile: f64,
    pub confidence_floor: f64,
    recent: VecDeque<f64>,
}

impl RefinementTrigger {
    pub fn new(magnitude_quantile: f64, confidence_floor: f64) -> Self {
        Self {
            magnitude_quantile,
            confidence_floor,
            recent: VecDeque::new(),
        }
    }

    pub fn observe(&mut self, magnitudes: impl IntoIterator<Item = f64>) {
        for m in magnitudes {
            if self.recent.len() == MAGNITUDE_BUFFER {
                self.recent.pop_front();
            }
            self.recent.push_back(m.abs());
        }
    }

    /// Nearest-rank quantile of the recent magnitudes (`+inf` when empty).
    pub fn threshold(&self) -> f64 {
        if self.recent.is_empty() {
            return f64::INFINITY;
        }
        let mut v: Vec<f64> = self.recent.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let rank = ((self.magnitude_quantile * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    }

    /// Anchor ids whose `|phi_v^T g_i|` reaches the running quantile while
    /// `c_v` is below the floor.
    pub fn check(&self, record: &InfluenceRecord, anchors: &[AnchorState]) -> Vec<usize> {
        self.check_with_threshold(record, anchors, self.threshold())
    }

    pub fn check_with_threshold(
        &self,
        record: &InfluenceRecord,
        anchors: &[AnchorState],
        threshold: f64,
    ) -> Vec<usize> {
        anchors
            .iter()
            .zip(&record.phi_dot_g)
            .filter(|(a, p)| p.abs() >= threshold && a.c_v < self.confidence_floor)
            .map(|(a, _)| a.anchor_id)
            .collect()
    }
}

/// Computable part of the influence error decomposition for one
/// (example, anchor) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub e_solver: f64,
    pub e_conf: f64,
    pub e_proj_bound: f64,
    pub delta_threshold: f64,
    /// Indicator that the stability-scaled error ceiling can exceed `delta`.
    pub misrank_bound: f64,
}

impl ErrorBudget {
    pub fn total(&self) -> f64 {
        self.e_solver + self.e_conf + self.e_proj_bound
    }
}

/// `E_solver = ||r_v|| / m * ||g_i||`, `E_conf = (1 - c_v) |phi_v^T g_i|`; the
/// misrank entry is 1 when `tau_t ||g_i|| / m + E_proj + E_conf > delta`.
#[allow(clippy::too_many_arguments)]
pub fn error_budget(
    phi_dot_g: f64,
    anchor: &AnchorState,
    m_bound: f64,
    g_i_norm: f64,
    e_proj_bound: f64,
    tau_t: f64,
    delta: f64,
) -> Result<ErrorBudget> {
    if !(m_bound > 0.0) {
        return Err(SgoifError::ConfigInvalid(format!("m must be > 0, got {m_bound}")));
    }
    let e_solver = residual_error_bound(anchor.residual_norm, m_bound) * g_i_norm;
    let e_conf = (1.0 - anchor.c_v) * phi_dot_g.abs();
    let ceiling = tau_t / m_bound * g_i_norm;
    let misrank = if ceiling + e_proj_bound + e_conf > delta { 1.0 } else { 0.0 };
    Ok(ErrorBudget {
        e_solver,
        e_conf,
        e_proj_bound: e_proj_bound.max(0.0),
        delta_threshold: delta,
        misrank_bound: misrank,
    })
}

/// Windowed per-example probe history feeding the Bernstein interval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeWindow {
    visits: VecDeque<(f64, Vec<f64>)>,
    capacity: usize,
}

impl ProbeWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            visits: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, aggregated: f64, probes: Vec<f64>) {
        if self.visits.len() == self.capacity {
            self.visits.pop_front();
        }
        self.visits.push_back((aggregated, probes));
    }

    pub fn visits(&self) -> usize {
        self.visits.len()
    }

    pub fn latest(&self) -> Option<f64> {
        self.visits.back().map(|v| v.0)
    }

    /// Mean aggregated score over the window.
    pub fn mean(&self) -> Option<f64> {
        if self.visits.is_empty() {
            return None;
        }
        Some(self.visits.iter().map(|v| v.0).sum::<f64>() / self.visits.len() as f64)
    }

    /// Half-width on the aggregated scale: the probe interval times the
    /// number of probes per visit. `None` with fewer than 2 probes.
    pub fn half_width(&self, alpha_level: f64) -> Option<f64> {
        let probes: Vec<f64> = self.visits.iter().flat_map(|v| v.1.iter().copied()).collect();
        let per_visit = self.visits.back().map_or(0, |v| v.1.len()).max(1);
        let acc = BernsteinAccumulator::from_values(&probes, None);
        bernstein_interval(&acc, alpha_level)
            .ok()
            .map(|w| w * per_visit as f64)
    }

    pub fn probe_count(&self) -> usize {
        self.visits.iter().map(|v| v.1.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn anchor(id: usize, phi: Vec<f64>, c: f64) -> AnchorState {
        let mut a = AnchorState::new(id, vec![0.0; phi.len()]);
        a.phi_v = phi;
        a.c_v = c;
        a
    }

    #[test]
    fn closed_gate_scores_zero() {
        let anchors = vec![anchor(0, vec![1.0, 0.0], 0.0), anchor(1, vec![0.0, 1.0], 0.0)];
        let r = score_example(3, &[1.0, 1.0], &anchors, &[0.0, 0.0], true).unwrap();
        assert_eq!(r.aggregated, 0.0);
        assert!(r.refinement_flagged);
    }

    #[test]
    fn single_anchor_inner_product() {
        let anchors = vec![anchor(0, vec![1.0, 0.0], 1.0)];
        let r = score_example(0, &[2.0, 0.0], &anchors, &[1.0], false).unwrap();
        assert_eq!(r.per_anchor_scores, vec![-2.0]);
        assert_eq!(r.aggregated, -2.0);
        assert!(score_example(0, &[2.0], &anchors, &[1.0], false).is_err());
    }

    #[test]
    fn bernstein_examples() {
        let acc = BernsteinAccumulator::from_values(&[0.3; 10], Some(0.0));
        assert_eq!(bernstein_interval(&acc, 0.05).unwrap(), 0.0);
        let w = bernstein_half_width(1.0, 1.0, 100, 0.05);
        let l = (60.0f64).ln();
        assert!((w - ((2.0 * l / 100.0).sqrt() + 3.0 * l / 100.0)).abs() < 1e-15);
        assert!((w - 0.409).abs() < 1e-3);
        let mut prev = f64::INFINITY;
        for m in 2..200 {
            let w = bernstein_half_width(0.7, 1.3, m, 0.05);
            assert!(w < prev);
            prev = w;
        }
        let one = BernsteinAccumulator::from_values(&[1.0], None);
        assert!(matches!(bernstein_interval(&one, 0.05), Err(SgoifError::InsufficientProbes(1))));
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 0.5, 3.25];
        let acc = BernsteinAccumulator::from_values(&xs, None);
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((acc.mean() - mean).abs() < 1e-14);
        assert!((acc.variance() - var).abs() < 1e-13);
        assert!((acc.range_bound() - (-2.0 - mean).abs()).abs() < 1e-14);
    }

    #[test]
    fn misrank_limits() {
        assert_eq!(misrank_bound(0.5, 0.5, 1.0, 10), 1.0);
        assert!(misrank_bound(0.5 + 1e-12, 0.5, 1.0, 10) > 0.999_999);
        assert!(misrank_bound(1.0, 0.0, 1e-12, 10) < 1e-100);
        assert_eq!(misrank_bound(1.0, 0.0, 0.0, 10), 0.0);
    }

    #[test]
    fn topk_examples() {
        let s = [(0, 3.0), (1, 2.0), (2, 1.0)];
        let r = topk_report(&s, 1, 0.49).unwrap();
        assert_eq!(r.gamma_k, 1.0);
        assert!(r.order_certified);
        assert!(!topk_report(&s, 1, 0.5).unwrap().order_certified);
        let flat = [(0, 1.0), (1, 1.0), (2, 1.0)];
        let r = topk_report(&flat, 2, 0.0).unwrap();
        assert_eq!(r.gamma_k, 0.0);
        assert!(!r.order_certified);
        assert_eq!(r.ordering, vec![0, 1, 2]);
        assert!(topk_report(&flat, 4, 0.0).is_err());
    }

    #[test]
    fn trigger_rule() {
        let mut t = RefinementTrigger::new(0.99, 0.3);
        t.observe((1..=100).map(|v| v as f64));
        assert_eq!(t.threshold(), 99.0);
        let hi = vec![anchor(0, vec![1.0], 1.0), anchor(1, vec![1.0], 1.0)];
        let rec = |p: f64| InfluenceRecord {
            example_id: 0,
            per_anchor_scores: vec![0.0, 0.0],
            phi_dot_g: vec![p, p],
            aggregated: 0.0,
            ci_half_width: 0.0,
            refinement_flagged: false,
            no_confidence: false,
            probe_count: 0,
        };
        assert!(t.check(&rec(500.0), &hi).is_empty());
        let lo = vec![anchor(0, vec![1.0], 0.0), anchor(7, vec![1.0], 0.1)];
        assert!(t.check(&rec(5.0), &lo).is_empty());
        assert_eq!(t.check(&rec(99.0), &lo), vec![0, 7]);
    }

    #[test]
    fn error_budget_examples() {
        let mut a = anchor(0, vec![1.0, 0.0], 1.0);
        a.residual_norm = 0.0;
        let b = error_budget(2.0, &a, 1.0, 3.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!((b.e_solver, b.e_conf), (0.0, 0.0));
        assert_eq!(b.misrank_bound, 0.0);
        a.c_v = 0.0;
        let b = error_budget(-2.0, &a, 1.0, 3.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(b.e_conf, 2.0);
        assert_eq!(b.misrank_bound, 1.0);
    }

    #[test]
    fn probe_window_tracks_last_visits() {
        let mut w = ProbeWindow::new(2);
        assert_eq!(w.mean(), None);
        w.push(1.0, vec![0.5, 0.5]);
        w.push(3.0, vec![1.0, 2.0]);
        w.push(5.0, vec![2.0, 3.0]);
        assert_eq!(w.visits(), 2);
        assert_eq!(w.mean(), Some(4.0));
        assert_eq!(w.latest(), Some(5.0));
        assert!(w.half_width(0.05).unwrap() > 0.0);
        assert_eq!(w.probe_count(), 4);
    }

    proptest! {
        #[test]
        fn aggregated_is_weighted_sum(c in proptest::collection::vec(0.01..1.0f64, 1..6), seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let anchors: Vec<AnchorState> = c.iter().enumerate()
                .map(|(i, ci)| anchor(i, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), *ci))
                .collect();
            let (w, none) = crate::anchors::aggregation_weights(&c);
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = score_example(0, &g, &anchors, &w, none).unwrap();
            let expected: f64 = r.probes(&w).iter().sum();
            prop_assert!((r.aggregated - expected).abs() <= 1e-12);
        }

        #[test]
        fn small_perturbations_keep_topk(scores in proptest::collection::vec(-10.0..10.0f64, 2..30), k_frac in 0.0..1.0f64, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = ((k_frac * scores.len() as f64) as usize).clamp(1, scores.len());
            let s: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            let rep = topk_report(&s, k, 0.0).unwrap();
            prop_assume!(rep.gamma_k > 0.0 && rep.gamma_k.is_finite());
            let eps = 0.999 * rep.gamma_k / 2.0;
            let p: Vec<(usize, f64)> = s.iter().map(|(i, v)| (*i, v + rng.random_range(-eps..eps))).collect();
            let mut a = rep.top_k.clone();
            let mut b = topk_report(&p, k, 0.0).unwrap().top_k;
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
