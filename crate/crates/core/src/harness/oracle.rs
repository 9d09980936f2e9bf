//! Dense oracle comparisons and lemma inequalities, each reported with its
//! measured slack.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::stream;
use crate::anchors::{build_gram, projection_residual};
use crate::curvature::CurvatureSurrogate;
use crate::error::{Result, SgoifError};
use crate::ihvp::{cg_refine, neumann_ihvp, AnchorState, Preconditioner};
use crate::model::{Example, ModelHandle};
use crate::numerics::{
    dense_solve, dot, max_eigenvalue, min_eigenvalue, norm, orthonormalize, sub, symmetric_eigen, DenseMatrix,
    LinearOperator, EXPLICIT_HESSIAN_MAX_DIM,
};
use crate::scorer::{
    bernstein_interval, misrank_bound, rank_descending, score_example, topk_report, BernsteinAccumulator,
};
use crate::stability::confidence_gate;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub checks: usize,
    pub violations: usize,
    /// Smallest `bound - measured` over all checks (negative on violation).
    pub worst_slack: f64,
    /// Suite-specific headline figure (max error, coverage, ...).
    pub measured: f64,
    pub seconds: f64,
    pub passed: bool,
}

struct Tally {
    checks: usize,
    violations: usize,
    worst_slack: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            checks: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
        }
    }

    /// Records `measured <= bound`.
    fn le(&mut self, measured: f64, bound: f64) {
        self.checks += 1;
        let slack = bound - measured;
        if !(measured <= bound) {
            self.violations += 1;
        }
        if slack < self.worst_slack || slack.is_nan() {
            self.worst_slack = slack;
        }
    }

    fn finish(self, name: &str, instances: usize, measured: f64, started: Instant) -> SuiteResult {
        SuiteResult {
            name: name.to_string(),
            instances,
            checks: self.checks,
            violations: self.violations,
            worst_slack: self.worst_slack,
            measured,
            seconds: started.elapsed().as_secs_f64(),
            passed: self.violations == 0,
        }
    }
}

/// Random SPD matrix with spectrum drawn uniformly from `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> DenseMatrix {
    let raw: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let mut q = orthonormalize(&raw, 1e-8);
    while q.len() < d {
        // measure-zero event; pad with fresh draws
        let extra: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let mut all = q.clone();
        all.push(extra);
        q = orthonormalize(&all, 1e-8);
    }
    let eig: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    let mut a = DenseMatrix::zeros(d, d);
    for (col, l) in q.iter().zip(&eig) {
        for i in 0..d {
            for j in 0..d {
                a.set(i, j, a.get(i, j) + l * col[i] * col[j]);
            }
        }
    }
    a.symmetrize();
    a
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

struct Jacobi(Vec<f64>);

impl Preconditioner for Jacobi {
    fn precond_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().zip(&self.0).map(|(x, d)| x / d).collect())
    }
}

/// Optimal constant Richardson step for the Jacobi-preconditioned system.
fn jacobi_step(h: &DenseMatrix) -> Result<f64> {
    let d = h.rows();
    let diag = h.diagonal();
    let mut s = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            s.set(i, j, h.get(i, j) / (diag[i] * diag[j]).sqrt());
        }
    }
    s.symmetrize();
    let (vals, _) = symmetric_eigen(&s)?;
    Ok(2.0 / (vals[0] + vals[d - 1]))
}

const RICHARDSON_TOL: f64 = 1e-12;
const RICHARDSON_MAX_ITERS: usize = 100_000;
const RESIDUAL_STOP: f64 = 1e-10;

/// Preconditioned Richardson to convergence and CG with `max_iters = d`
/// against `dense_solve`. Measured: the larger of the two worst relative
/// errors; the bounds are `richardson_tol` and `cg_tol` respectively.
pub fn ihvp_equivalence(seed: u64, instances: usize, max_dim: usize, richardson_tol: f64, cg_tol: f64) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 101);
    let mut tally = Tally::new();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(2..=max_dim.max(2));
        let h = random_spd(&mut rng, d, 1.0, 20.0);
        let g = random_vec(&mut rng, d);
        let exact = dense_solve(&h, &g)?;
        let xn = norm(&exact);

        let pre = Jacobi(h.diagonal());
        let rho = jacobi_step(&h)?;
        let mut a = AnchorState::new(0, g.clone());
        let gn = norm(&g);
        for _ in 0..RICHARDSON_MAX_ITERS {
            a.richardson_step(&h, &pre, rho)?;
            if a.residual_norm <= RICHARDSON_TOL * gn {
                break;
            }
        }
        let rel = norm(&sub(&a.phi_v, &exact)) / xn;
        worst = worst.max(rel);
        tally.le(rel, richardson_tol);

        let mut c = AnchorState::new(1, g.clone());
        cg_refine(&mut c, &h, 0.0, d, 0)?;
        let rel = norm(&sub(&c.phi_v, &exact)) / xn;
        worst = worst.max(rel);
        tally.le(rel, cg_tol);
    }
    Ok(tally.finish("ihvp-equivalence", instances, worst, started))
}

/// `||H^{-1} g - phi|| <= ||r|| / m` at every Richardson iterate.
pub fn residual_bound(seed: u64, instances: usize, max_dim: usize, iters: usize) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 102);
    let mut tally = Tally::new();
    for _ in 0..instances {
        let d = rng.random_range(2..=max_dim.max(2));
        let h = random_spd(&mut rng, d, 0.5, 20.0);
        let m = min_eigenvalue(&h)?;
        let g = random_vec(&mut rng, d);
        let exact = dense_solve(&h, &g)?;
        let pre = Jacobi(h.diagonal());
        // deliberately varied step sizes so that some runs converge slowly
        let rho = jacobi_step(&h)? * rng.random_range(0.2..1.0);
        let mut a = AnchorState::new(0, g.clone());
        a.refresh_residual(&h);
        tally.le(norm(&sub(&exact, &a.phi_v)), a.residual_norm / m);
        let gn = norm(&g);
        for _ in 0..iters {
            a.richardson_step(&h, &pre, rho)?;
            tally.le(norm(&sub(&exact, &a.phi_v)), a.residual_norm / m);
            // stop before both sides sink into rounding noise
            if a.residual_norm <= RESIDUAL_STOP * gn {
                break;
            }
        }
    }
    let slack = tally.worst_slack;
    Ok(tally.finish("residual-bound", instances, slack, started))
}

/// Truncated Neumann error against the analytic bound on diagonal and
/// lowrank-plus-diagonal surrogates with `q < 1`.
pub fn neumann_bound(seed: u64, instances: usize, ks: &[usize]) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 103);
    let mut tally = Tally::new();
    let mut made = 0;
    while made < instances {
        let d = rng.random_range(2..=40);
        let alpha = rng.random_range(0.5..2.0);
        // q >= 0.3 keeps q^(K+1) well above machine precision for K <= 10
        let q_target = rng.random_range(0.3..0.9);
        let surrogate = if made % 2 == 0 {
            let mut moment: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..q_target * alpha)).collect();
            moment[0] = q_target * alpha;
            CurvatureSurrogate::diagonal_from_moment(moment, alpha)?
        } else {
            let r = rng.random_range(1..=d.min(4));
            let basis = orthonormalize(&(0..r).map(|_| random_vec(&mut rng, d)).collect::<Vec<_>>(), 1e-8);
            let share = rng.random_range(0.1..0.9);
            let moment: Vec<f64> = (0..d)
                .map(|_| rng.random_range(0.0..share * q_target * alpha))
                .collect();
            let lambda: Vec<f64> = basis
                .iter()
                .map(|_| rng.random_range(0.0..(1.0 - share) * q_target * alpha))
                .collect();
            CurvatureSurrogate::lowrank_from_parts(moment, basis, lambda, alpha)?
        };
        let g = random_vec(&mut rng, d);
        let exact = dense_solve(&surrogate.to_dense()?, &g)?;
        let mut ok = true;
        for &k in ks {
            match neumann_ihvp(&g, &surrogate, k) {
                Ok((approx, bound)) => tally.le(norm(&sub(&approx, &exact)), bound),
                Err(SgoifError::DivergentSeries { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            made += 1;
        }
    }
    let slack = tally.worst_slack;
    Ok(tally.finish("neumann-bound", instances, slack, started))
}

/// Direct squared projection residual against `(1 / lambda_min(G))` times the
/// least-squares residual, on random normalized anchor sets.
pub fn projection_bound(seed: u64, instances: usize) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 104);
    let mut tally = Tally::new();
    for _ in 0..instances {
        let d = rng.random_range(3..=40);
        let k = rng.random_range(2..=d.min(8));
        let phis: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, d)).collect();
        let x = random_vec(&mut rng, d);
        let refs: Vec<&[f64]> = phis.iter().map(|p| p.as_slice()).collect();
        let report = build_gram(&refs)?;
        // direct: orthogonal projector from an orthonormal basis of span(Phi)
        let basis = orthonormalize(&phis, 1e-12);
        let mut resid = x.clone();
        for q in &basis {
            let c = dot(q, &x);
            for (ri, qi) in resid.iter_mut().zip(q) {
                *ri -= c * qi;
            }
        }
        let direct = dot(&resid, &resid);
        let least_squares = projection_residual(&x, &refs)?.powi(2);
        tally.le(direct, least_squares / report.lambda_min);
    }
    let slack = tally.worst_slack;
    Ok(tally.finish("projection-bound", instances, slack, started))
}

/// Perturbations with sup-norm below `gamma_K / 2` never change the top-K set.
pub fn topk_preservation(seed: u64, vectors: usize) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 105);
    let mut tally = Tally::new();
    for _ in 0..vectors {
        let n = rng.random_range(2..=60);
        let k = rng.random_range(1..=n);
        let scores: Vec<(usize, f64)> = (0..n).map(|i| (i, rng.random_range(-1.0..1.0))).collect();
        let rep = topk_report(&scores, k, 0.0)?;
        if !(rep.gamma_k > 0.0) {
            continue;
        }
        let half = if rep.gamma_k.is_finite() { rep.gamma_k / 2.0 } else { 1e3 };
        let in_set: std::collections::HashSet<usize> = rep.top_k.iter().copied().collect();
        // random perturbation and the adversarial one (in-set down, out-set up)
        let adversarial = rng.random_bool(0.5);
        let perturbed: Vec<(usize, f64)> = scores
            .iter()
            .map(|&(i, s)| {
                let e = if adversarial {
                    let mag = half * 0.999;
                    if in_set.contains(&i) {
                        -mag
                    } else {
                        mag
                    }
                } else {
                    half * rng.random_range(-0.999..0.999)
                };
                (i, s + e)
            })
            .collect();
        let mut a = rep.top_k.clone();
        let mut b = rank_descending(&perturbed)[..k].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        tally.le(if a == b { 0.0 } else { 1.0 }, 0.0);
    }
    Ok(tally.finish("topk-preservation", vectors, 0.0, started))
}

/// Monte-Carlo coverage of the empirical-Bernstein interval for bounded
/// probes. Measured: the lower of the coverages with the known range bound
/// and with the empirical one.
pub fn bernstein_coverage(seed: u64, replications: usize, probes: usize, alpha_level: f64) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 106);
    let beta = Beta::new(2.0, 5.0).expect("valid shape");
    let mu = 2.0 / 7.0;
    let mut covered = [0usize; 2];
    for _ in 0..replications {
        let xs: Vec<f64> = (0..probes).map(|_| beta.sample(&mut rng)).collect();
        for (slot, b) in [Some(1.0), None].into_iter().enumerate() {
            let acc = BernsteinAccumulator::from_values(&xs, b);
            let w = bernstein_interval(&acc, alpha_level)?;
            if (acc.mean() - mu).abs() <= w {
                covered[slot] += 1;
            }
        }
    }
    let coverage = covered.iter().copied().min().unwrap_or(0) as f64 / replications.max(1) as f64;
    let mut tally = Tally::new();
    tally.le(1.0 - coverage, alpha_level);
    Ok(tally.finish("bernstein-coverage", replications, coverage, started))
}

/// Grid of `(delta, b, sigma^2, m)`; flip frequency of the mean of `m`
/// Gaussian probes with mean `delta - b` against the analytic bound.
pub fn misrank_grid(seed: u64, trials: usize) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 107);
    let mut tally = Tally::new();
    let mut points = 0;
    for delta in [0.05, 0.1, 0.25, 0.5, 1.0] {
        for b in [0.0, 0.02, 0.1] {
            for sigma_sq in [0.25, 1.0, 4.0] {
                for m in [4usize, 16, 32] {
                    points += 1;
                    let normal = Normal::new(delta - b, f64::sqrt(sigma_sq)).expect("positive sd");
                    let mut flips = 0usize;
                    for _ in 0..trials {
                        let mean: f64 = (0..m).map(|_| normal.sample(&mut rng)).sum::<f64>() / m as f64;
                        if mean <= 0.0 {
                            flips += 1;
                        }
                    }
                    tally.le(flips as f64 / trials as f64, misrank_bound(delta, b, sigma_sq, m));
                }
            }
        }
    }
    let slack = tally.worst_slack;
    Ok(tally.finish("misrank-bound", points, slack, started))
}

/// `confidence_gate` against `clip(1 - r / tau, 0, 1)` on random and boundary
/// pairs, and invariance of the aggregated ranking under a common rescaling of
/// every `c_v`.
pub fn gate_behavior(seed: u64, pairs: usize) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 108);
    let mut tally = Tally::new();
    for i in 0..pairs {
        let tau: f64 = match i % 10 {
            0 => 0.0,
            _ => rng.random_range(0.0..10.0),
        };
        let r: f64 = match i % 7 {
            0 => 0.0,
            1 => tau,
            2 => 2.0 * tau + 1.0,
            _ => rng.random_range(0.0..2.0 * tau.max(1e-3)),
        };
        let expected = if tau > 0.0 {
            f64::max(0.0, f64::min(1.0, 1.0 - r / tau))
        } else if r == 0.0 {
            1.0
        } else {
            0.0
        };
        let got = confidence_gate(r, tau);
        tally.le(if got.to_bits() == expected.to_bits() { 0.0 } else { 1.0 }, 0.0);
    }
    // argsort invariance under c -> s c
    for _ in 0..200 {
        let d = rng.random_range(2..10);
        let k = rng.random_range(1..6);
        let mut anchors: Vec<AnchorState> = (0..k)
            .map(|id| AnchorState::with_phi(id, vec![0.0; d], random_vec(&mut rng, d)).expect("dims"))
            .collect();
        for a in &mut anchors {
            a.c_v = rng.random_range(0.05..1.0);
        }
        let examples: Vec<Vec<f64>> = (0..30).map(|_| random_vec(&mut rng, d)).collect();
        let order = |anchors: &[AnchorState]| -> Result<Vec<usize>> {
            let (w, none) = crate::anchors::aggregation_weights(&anchors.iter().map(|a| a.c_v).collect::<Vec<_>>());
            let s = examples
                .iter()
                .enumerate()
                .map(|(i, g)| Ok((i, score_example(i, g, anchors, &w, none)?.aggregated)))
                .collect::<Result<Vec<_>>>()?;
            Ok(rank_descending(&s))
        };
        let base = order(&anchors)?;
        for s in [0.5, 2.0, 8.0, 0.125] {
            let mut scaled = anchors.clone();
            for a in &mut scaled {
                a.c_v *= s;
            }
            tally.le(if order(&scaled)? == base { 0.0 } else { 1.0 }, 0.0);
        }
    }
    Ok(tally.finish("gate-behavior", pairs, 0.0, started))
}

/// Gradients against central differences and HVPs against the explicit
/// Hessian for the logistic and MLP models.
pub fn model_derivatives(seed: u64, instances: usize) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = stream(seed, 109);
    let mut tally = Tally::new();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let p = rng.random_range(2..6);
        let c = rng.random_range(2..4);
        let model = if i % 2 == 0 {
            ModelHandle::logistic(p, c)?
        } else {
            ModelHandle::mlp(p, rng.random_range(2..5), c)?
        };
        let theta: Vec<f64> = (0..model.dim()).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let batch: Vec<Example> = (0..5)
            .map(|_| {
                let y = rng.random_range(0..c);
                Example {
                    features: random_vec(&mut rng, p),
                    observed_label: y,
                    true_label: y,
                }
            })
            .collect();
        let g = model.per_example_gradient(&theta, &batch[0])?;
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (model.loss(&tp, &batch[0])? - model.loss(&tm, &batch[0])?) / (2.0 * h);
            let err = (fd - g[j]).abs() / (1.0 + g[j].abs());
            worst = worst.max(err);
            tally.le(err, 1e-6);
        }
        let hess = model.explicit_hessian(&theta, &batch)?;
        let v = random_vec(&mut rng, theta.len());
        let hv = model.hvp(&theta, &batch, &v)?;
        let dense = hess.apply(&v);
        let err = norm(&sub(&hv, &dense)) / (1.0 + norm(&dense));
        worst = worst.max(err);
        tally.le(err, 1e-8);
        let lmax = max_eigenvalue(&hess)?;
        tally.le(-lmax, 0.0);
    }
    Ok(tally.finish("model-derivatives", instances, worst, started))
}

/// Every suite at its default size.
pub fn oracle_check(cfg: &ExperimentConfig) -> Result<Vec<SuiteResult>> {
    if cfg.param_dim() > EXPLICIT_HESSIAN_MAX_DIM {
        return Err(SgoifError::ConfigInvalid(format!(
            "oracle-check needs a parameter dimension <= {EXPLICIT_HESSIAN_MAX_DIM}, config implies {}",
            cfg.param_dim()
        )));
    }
    let s = cfg.seed;
    Ok(vec![
        model_derivatives(s, 20)?,
        ihvp_equivalence(s, 100, 50, 1e-6, 1e-8)?,
        residual_bound(s, 100, 50, 200)?,
        neumann_bound(s, 100, &[0, 1, 2, 5, 10])?,
        projection_bound(s, 100)?,
        topk_preservation(s, 10_000)?,
        bernstein_coverage(s, 2000, 100, 0.05)?,
        misrank_grid(s, 10_000)?,
        gate_behavior(s, 100_000)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(ihvp_equivalence(1, 5, 10, 1e-6, 1e-8).unwrap().passed);
        assert!(residual_bound(1, 5, 10, 30).unwrap().passed);
        assert!(neumann_bound(1, 6, &[0, 1, 3]).unwrap().passed);
        assert!(projection_bound(1, 20).unwrap().passed);
        assert!(topk_preservation(1, 200).unwrap().passed);
        assert!(gate_behavior(1, 1000).unwrap().passed);
        assert!(model_derivatives(1, 4).unwrap().passed);
    }

    #[test]
    fn random_spd_has_requested_spectrum() {
        let mut rng = stream(3, 0);
        let a = random_spd(&mut rng, 12, 2.0, 5.0);
        let (vals, _) = symmetric_eigen(&a).unwrap();
        assert!(vals[0] >= 2.0 - 1e-10 && vals[11] <= 5.0 + 1e-10);
    }

    #[test]
    fn oracle_check_rejects_large_models() {
        let cfg = ExperimentConfig {
            d: 150,
            ..ExperimentConfig::default()
        };
        assert!(matches!(oracle_check(&cfg), Err(SgoifError::ConfigInvalid(_))));
    }
}
