//! Detection and ranking metrics over noisy-label ground truth.
//!
//! Scores are ranked in descending order with ties broken by ascending id
//! wherever a strict order is needed. Undefined cases return `None`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

/// `(id, score, is_noisy)` triples sorted by descending score, then id.
fn sorted_triples(scores: &[(usize, f64)], noisy: &HashSet<usize>) -> Vec<(usize, f64, bool)> {
    let mut v: Vec<(usize, f64, bool)> = scores
        .iter()
        .map(|(id, s)| (*id, *s, noisy.contains(id)))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Fraction of noisy examples among the top `ceil(k * N)`.
pub fn compute_p_at_k(scores: &[(usize, f64)], noisy: &HashSet<usize>, k_fraction: f64) -> Option<f64> {
    let n = scores.len();
    if n == 0 || !scores.iter().any(|(id, _)| noisy.contains(id)) {
        return None;
    }
    let k = ((k_fraction * n as f64).ceil() as usize).clamp(1, n);
    let sorted = sorted_triples(scores, noisy);
    let hits = sorted[..k].iter().filter(|t| t.2).count();
    Some(hits as f64 / k as f64)
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over the distinct score
/// thresholds in descending order (tied scores enter together).
pub fn compute_aupr(scores: &[(usize, f64)], noisy: &HashSet<usize>) -> Option<f64> {
    let sorted = sorted_triples(scores, noisy);
    let positives = sorted.iter().filter(|t| t.2).count();
    if positives == 0 || positives == sorted.len() {
        return None;
    }
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].1;
        while i < sorted.len() && sorted[i].1 == s {
            tp += usize::from(sorted[i].2);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Probability that a random noisy example outscores a random clean one,
/// ties counting one half.
pub fn compute_auroc(scores: &[(usize, f64)], noisy: &HashSet<usize>) -> Option<f64> {
    let mut v: Vec<(f64, bool)> = scores.iter().map(|(id, s)| (*s, noisy.contains(id))).collect();
    let pos = v.iter().filter(|t| t.1).count();
    let neg = v.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with mid-ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * v[i..j].iter().filter(|t| t.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Kendall tau-b between two rankings restricted to the union of their top
/// `ceil(top_fraction * N)` prefixes.
pub fn compute_kendall_tau(ranking_a: &[usize], ranking_b: &[usize], top_fraction: f64) -> Option<f64> {
    if ranking_a.len() != ranking_b.len() || ranking_a.is_empty() {
        return None;
    }
    let n = ranking_a.len();
    let k = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
    let pos_a: HashMap<usize, usize> = ranking_a.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let pos_b: HashMap<usize, usize> = ranking_b.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut items: Vec<usize> = ranking_a[..k].iter().chain(&ranking_b[..k]).copied().collect();
    items.sort_unstable();
    items.dedup();
    let pairs: Vec<(usize, usize)> = items
        .iter()
        .map(|id| Some((*pos_a.get(id)?, *pos_b.get(id)?)))
        .collect::<Option<_>>()?;
    if pairs.len() < 2 {
        return None;
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_a, mut ties_b) = (0i64, 0i64);
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let da = pairs[i].0 as i64 - pairs[j].0 as i64;
            let db = pairs[i].1 as i64 - pairs[j].1 as i64;
            match (da.signum(), db.signum()) {
                (0, 0) => {
                    ties_a += 1;
                    ties_b += 1;
                }
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                (x, y) if x == y => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (pairs.len() * (pairs.len() - 1) / 2) as i64;
    let denom = (((n0 - ties_a) * (n0 - ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / denom)
}

/// Detection summary for one score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub p_at_1: Option<f64>,
    pub p_at_5: Option<f64>,
    pub p_at_10: Option<f64>,
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
}

impl DetectionMetrics {
    pub fn compute(scores: &[(usize, f64)], noisy: &HashSet<usize>) -> Self {
        Self {
            p_at_1: compute_p_at_k(scores, noisy, 0.01),
            p_at_5: compute_p_at_k(scores, noisy, 0.05),
            p_at_10: compute_p_at_k(scores, noisy, 0.10),
            aupr: compute_aupr(scores, noisy),
            auroc: compute_auroc(scores, noisy),
        }
    }
}
