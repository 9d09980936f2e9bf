//! Streaming inverse-Hessian-vector products for the anchor bank.
//!
//! Each anchor keeps an iterate `phi_v ~ H^{-1} g_v` that is nudged a few
//! preconditioned Richardson sweeps per training step. Extra sweeps per step
//! are the adaptive truncation order: `K` sweeps from a warm start add the
//! next `K` terms of the preconditioned Neumann series. A rank-`r` subspace,
//! refreshed every `T_r` steps by a randomized range sketch, feeds both the
//! lowrank-plus-diag preconditioner and warm starts; short CG runs repair
//! anchors the scorer flags.

use std::collections::VecDeque;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureSurrogate, DiagPlusLowRank};
use crate::error::{check_dim, Result, SgoifError};
use crate::numerics::{
    all_finite, axpy, dot, norm, orthonormalize, power_iteration, scale, sub, symmetric_eigen,
    Cholesky, DenseMatrix, LinearOperator, ParamVector,
};

/// Residual history kept per anchor (enough for the MA gate and the trend).
pub const HISTORY_LEN: usize = 32;
pub const TREND_WINDOW: usize = 5;
pub const SKETCH_OVERSAMPLING: usize = 4;
/// Inflation applied to power-iteration estimates of the Neumann contraction.
pub const CONTRACTION_SAFETY: f64 = 1.05;

/// Step-size rule for Richardson.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum StepRule {
    Constant { rho0: f64 },
    /// `rho0 / (1 + t / t0)`
    RobbinsMonro { rho0: f64, t0: f64 },
}

impl StepRule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepRule::Constant { rho0 } => rho0,
            StepRule::RobbinsMonro { rho0, t0 } => rho0 / (1.0 + t as f64 / t0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSchedule {
    pub rule: StepRule,
    pub max_neumann_k: usize,
    pub cg_max_iters: usize,
    /// Fixed CG tolerance; `None` means `tau_t / 2` at trigger time.
    pub cg_tol: Option<f64>,
}

impl Default for SolverSchedule {
    fn default() -> Self {
        Self {
            rule: StepRule::RobbinsMonro { rho0: 0.1, t0: 100.0 },
            max_neumann_k: 3,
            cg_max_iters: 20,
            cg_tol: None,
        }
    }
}

/// Preconditioner `P^{-1}` for the Richardson map.
pub trait Preconditioner {
    fn precond_apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl Preconditioner for CurvatureSurrogate {
    fn precond_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        CurvatureSurrogate::precond_apply(self, v)
    }
}

/// `P = I` (unpreconditioned Richardson).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn precond_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.to_vec())
    }
}

/// Per-anchor solver state.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorState {
    pub anchor_id: usize,
    pub g_v: ParamVector,
    pub phi_v: ParamVector,
    pub r_v: ParamVector,
    pub residual_norm: f64,
    pub c_v: f64,
    pub last_refined_step: usize,
    /// Current Richardson sweeps beyond the first (the truncation order).
    pub neumann_k: usize,
    /// Set by CG curvature breakdown or a non-finite reset.
    pub flagged: bool,
    pub resets: usize,
    history: VecDeque<f64>,
    /// `r_v` matches the current `(g_v, H)` pair.
    fresh: bool,
}

impl AnchorState {
    pub fn new(anchor_id: usize, g_v: ParamVector) -> Self {
        let d = g_v.len();
        Self {
            anchor_id,
            residual_norm: norm(&g_v),
            r_v: g_v.clone(),
            g_v,
            phi_v: vec![0.0; d],
            c_v: 0.0,
            last_refined_step: 0,
            neumann_k: 0,
            flagged: false,
            resets: 0,
            history: VecDeque::new(),
            fresh: true,
        }
    }

    /// Anchor with a warm-started iterate; the residual is stale until the
    /// next solver call.
    pub fn with_phi(anchor_id: usize, g_v: ParamVector, phi_v: ParamVector) -> Result<Self> {
        check_dim(g_v.len(), phi_v.len())?;
        let mut a = Self::new(anchor_id, g_v);
        a.phi_v = phi_v;
        a.fresh = false;
        Ok(a)
    }

    pub fn dim(&self) -> usize {
        self.g_v.len()
    }

    /// Replaces the target gradient (re-evaluated at the current parameters).
    pub fn set_target(&mut self, g_v: ParamVector) -> Result<()> {
        check_dim(self.dim(), g_v.len())?;
        self.g_v = g_v;
        self.fresh = false;
        Ok(())
    }

    /// The operator changed; the stored residual no longer describes it.
    pub fn mark_stale(&mut self) {
        self.fresh = false;
    }

    pub fn residual_is_fresh(&self) -> bool {
        self.fresh
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    pub fn history_vec(&self) -> Vec<f64> {
        self.history.iter().copied().collect()
    }

    pub fn push_history(&mut self, value: f64) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(value);
    }

    /// Recomputes `r = g - H phi` (one operator application).
    pub fn refresh_residual(&mut self, apply_h: &dyn LinearOperator) {
        let hphi = apply_h.apply(&self.phi_v);
        self.r_v = sub(&self.g_v, &hphi);
        self.residual_norm = norm(&self.r_v);
        self.fresh = true;
    }

    fn reset(&mut self) {
        self.phi_v = vec![0.0; self.dim()];
        self.r_v = self.g_v.clone();
        self.residual_norm = norm(&self.r_v);
        self.c_v = 0.0;
        self.flagged = true;
        self.resets += 1;
        self.fresh = true;
    }

    /// One preconditioned Richardson update
    /// `phi <- phi + rho P^{-1} (g - H phi)`, followed by a fresh residual.
    pub fn richardson_step(
        &mut self,
        apply_h: &dyn LinearOperator,
        precond: &dyn Preconditioner,
        rho: f64,
    ) -> Result<()> {
        if !(rho > 0.0) {
            return Err(SgoifError::ConfigInvalid(format!("Richardson step must be > 0, got {rho}")));
        }
        if !self.fresh {
            self.refresh_residual(apply_h);
        }
        let step = precond.precond_apply(&self.r_v)?;
        check_dim(self.dim(), step.len())?;
        axpy(rho, &step, &mut self.phi_v);
        if !all_finite(&self.phi_v) {
            self.reset();
            return Err(SgoifError::NonFiniteIterate {
                anchor: self.anchor_id,
            });
        }
        self.refresh_residual(apply_h);
        if !self.residual_norm.is_finite() {
            self.reset();
            return Err(SgoifError::NonFiniteIterate {
                anchor: self.anchor_id,
            });
        }
        Ok(())
    }

    /// `1 + neumann_k` Richardson sweeps; the residual norm after the last one
    /// is appended to the history.
    pub fn refine(
        &mut self,
        apply_h: &dyn LinearOperator,
        precond: &dyn Preconditioner,
        rho: f64,
    ) -> Result<()> {
        let sweeps = 1 + self.neumann_k;
        let mut out = Ok(());
        for _ in 0..sweeps {
            out = self.richardson_step(apply_h, precond, rho);
            if out.is_err() {
                break;
            }
        }
        self.push_history(self.residual_norm);
        out
    }
}

/// Least-squares slope of the last `window` entries (0 with fewer than 2).
pub fn residual_trend(history: &[f64], window: usize) -> f64 {
    let tail = &history[history.len().saturating_sub(window)..];
    let n = tail.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = tail.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    num / den
}

/// Grows the truncation order while residuals fall, shrinks it when they rise.
/// An exactly solved anchor never grows.
pub fn adapt_truncation(current_k: usize, residual_norm: f64, residual_trend: f64, max_k: usize) -> usize {
    if residual_trend < 0.0 && current_k < max_k && residual_norm > 0.0 {
        current_k + 1
    } else if residual_trend > 0.0 {
        current_k.saturating_sub(1)
    } else {
        current_k.min(max_k)
    }
}

/// `||H^{-1} g - phi|| <= ||r|| / m`.
pub fn residual_error_bound(residual_norm: f64, m: f64) -> f64 {
    residual_norm / m
}

/// Estimate of `q = ||alpha^{-1} Delta||` for `H = alpha I + Delta`: exact for
/// diagonal surrogates, inflated power iteration otherwise.
pub fn shift_contraction(surrogate: &CurvatureSurrogate) -> f64 {
    let alpha = surrogate.alpha();
    if surrogate.is_diagonal() {
        return surrogate
            .diagonal_part()
            .iter()
            .map(|s| (s - alpha).abs() / alpha)
            .fold(0.0, f64::max);
    }
    let op = |v: &[f64]| -> Vec<f64> {
        let mut hv = surrogate.surrogate_apply(v).expect("surrogate dimension");
        axpy(-alpha, v, &mut hv);
        scale(1.0 / alpha, &hv)
    };
    CONTRACTION_SAFETY * power_iteration(&op, surrogate.dim(), 200)
}

/// Truncated Neumann expansion `sum_{k<=K} (-alpha^{-1} Delta)^k alpha^{-1} g`
/// together with the truncation bound `||P^{-1}|| q^{K+1} ||g|| / (1 - q)`.
pub fn neumann_ihvp(g: &[f64], surrogate: &CurvatureSurrogate, k: usize) -> Result<(ParamVector, f64)> {
    check_dim(surrogate.dim(), g.len())?;
    let q = shift_contraction(surrogate);
    if q >= 1.0 {
        return Err(SgoifError::DivergentSeries { q });
    }
    let alpha = surrogate.alpha();
    let mut term = scale(1.0 / alpha, g);
    let mut sum = term.clone();
    for _ in 0..k {
        // term <- -alpha^{-1} Delta term
        let mut dt = surrogate.surrogate_apply(&term)?;
        axpy(-alpha, &term, &mut dt);
        term = scale(-1.0 / alpha, &dt);
        axpy(1.0, &term, &mut sum);
    }
    let bound = if q == 0.0 {
        0.0
    } else {
        q.powi(k as i32 + 1) * norm(g) / (alpha * (1.0 - q))
    };
    Ok((sum, bound))
}

/// Tracked rank-`r` eigenspace of the curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceState {
    pub q: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    /// Target rank.
    pub r: usize,
    pub last_refresh_step: usize,
    pub refresh_period: usize,
}

impl SubspaceState {
    pub fn new(r: usize, refresh_period: usize) -> Self {
        Self {
            q: Vec::new(),
            lambda: Vec::new(),
            r,
            last_refresh_step: 0,
            refresh_period: refresh_period.max(1),
        }
    }

    /// Rank currently available (may be below `r` after a deficient sketch).
    pub fn rank(&self) -> usize {
        self.q.len()
    }

    pub fn due(&self, step: usize) -> bool {
        self.r > 0 && step % self.refresh_period == 0
    }

    /// Randomized range sketch of `apply_h` (oversampling `r + 4`, one power
    /// pass) followed by Rayleigh-Ritz. Probe gradients seed the sketch;
    /// Gaussian vectors pad it. Returns the achieved rank.
    pub fn update<R: Rng>(
        &mut self,
        probe_grads: &[ParamVector],
        apply_h: &dyn LinearOperator,
        dim: usize,
        rng: &mut R,
        step: usize,
    ) -> Result<usize> {
        self.last_refresh_step = step;
        if self.r == 0 {
            self.q.clear();
            self.lambda.clear();
            return Ok(0);
        }
        let l = (self.r + SKETCH_OVERSAMPLING).min(dim);
        let mut omega: Vec<Vec<f64>> = Vec::with_capacity(l);
        for g in probe_grads.iter().take(l) {
            check_dim(dim, g.len())?;
            omega.push(g.clone());
        }
        while omega.len() < l {
            omega.push((0..dim).map(|_| StandardNormal.sample(rng)).collect());
        }
        let y: Vec<Vec<f64>> = omega.iter().map(|w| apply_h.apply(w)).collect();
        let q0 = orthonormalize(&y, 1e-10);
        // one power pass
        let y: Vec<Vec<f64>> = q0.iter().map(|w| apply_h.apply(w)).collect();
        let basis = orthonormalize(&y, 1e-10);
        let k = basis.len();
        if k == 0 {
            self.q.clear();
            self.lambda.clear();
            warn!("subspace sketch produced no independent directions at step {step}");
            return Ok(0);
        }
        let hb: Vec<Vec<f64>> = basis.iter().map(|b| apply_h.apply(b)).collect();
        let mut t = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                t.set(i, j, dot(&basis[i], &hb[j]));
            }
        }
        t.symmetrize();
        let (vals, vecs) = symmetric_eigen(&t)?;
        let keep = self.r.min(k);
        if keep < self.r {
            warn!("subspace rank shrinks to {keep} (target {}) at step {step}", self.r);
        }
        let mut q = Vec::with_capacity(keep);
        let mut lambda = Vec::with_capacity(keep);
        for idx in (k - keep..k).rev() {
            let mut col = vec![0.0; dim];
            for (j, b) in basis.iter().enumerate() {
                axpy(vecs.get(j, idx), b, &mut col);
            }
            q.push(col);
            lambda.push(vals[idx].max(0.0));
        }
        // restore orthonormality lost to rounding
        let q = orthonormalize(&q, 1e-10);
        let lambda: Vec<f64> = lambda.into_iter().take(q.len()).collect();
        self.q = q;
        self.lambda = lambda;
        Ok(self.q.len())
    }

    /// `||Q^T Q - I||_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.q.len();
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..r {
                let e = dot(&self.q[i], &self.q[j]) - if i == j { 1.0 } else { 0.0 };
                s += e * e;
            }
        }
        s.sqrt()
    }
}

/// `Q a + u`: `a` solves the projected system `(Q^T H Q) a = Q^T g`, `u` is the
/// Woodbury inverse of `D + Q Lambda Q^T` applied to the out-of-subspace part
/// of `g`.
pub fn subspace_solve(
    sub: &SubspaceState,
    g: &[f64],
    apply_h: &dyn LinearOperator,
    diag_d: &[f64],
) -> Result<ParamVector> {
    check_dim(diag_d.len(), g.len())?;
    let r = sub.rank();
    if r == 0 {
        return DiagPlusLowRank::new(diag_d.to_vec(), &[], &[])?.solve(g);
    }
    let hq: Vec<Vec<f64>> = sub.q.iter().map(|q| apply_h.apply(q)).collect();
    let mut proj = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            proj.set(i, j, dot(&sub.q[i], &hq[j]));
        }
    }
    proj.symmetrize();
    let chol = Cholesky::factor(&proj).map_err(|_| SgoifError::SingularProjectedSystem)?;
    let qtg: Vec<f64> = sub.q.iter().map(|q| dot(q, g)).collect();
    let a = chol.solve(&qtg)?;
    let mut g_perp = g.to_vec();
    for (q, c) in sub.q.iter().zip(&qtg) {
        axpy(-c, q, &mut g_perp);
    }
    let woodbury = DiagPlusLowRank::new(diag_d.to_vec(), &sub.q, &sub.lambda)?;
    let mut out = woodbury.solve(&g_perp)?;
    for (q, ai) in sub.q.iter().zip(&a) {
        axpy(*ai, q, &mut out);
    }
    Ok(out)
}

/// Result of one CG refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
}

/// Conjugate gradient warm-started at `phi_v`, keeping the best iterate so the
/// reported residual never increases. On `p^T H p <= 0` the best iterate is
/// kept, the anchor is flagged and `CurvatureBreakdown` returned.
pub fn cg_refine(
    anchor: &mut AnchorState,
    apply_h: &dyn LinearOperator,
    tol: f64,
    max_iters: usize,
    step: usize,
) -> Result<CgOutcome> {
    if !anchor.fresh {
        anchor.refresh_residual(apply_h);
    }
    let initial = anchor.residual_norm;
    if initial <= tol || max_iters == 0 {
        return Ok(CgOutcome {
            iterations: 0,
            initial_residual: initial,
            final_residual: initial,
        });
    }
    let mut x = anchor.phi_v.clone();
    let mut r = anchor.r_v.clone();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut best_x = x.clone();
    let mut best_norm = initial;
    let mut iterations = 0;
    let mut breakdown = None;
    for _ in 0..max_iters {
        let hp = apply_h.apply(&p);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            breakdown = Some(php);
            break;
        }
        let a = rr / php;
        axpy(a, &p, &mut x);
        axpy(-a, &hp, &mut r);
        iterations += 1;
        let rr_new = dot(&r, &r);
        let rn = rr_new.sqrt();
        if !rn.is_finite() || !all_finite(&x) {
            break;
        }
        if rn < best_norm {
            best_norm = rn;
            best_x.clone_from(&x);
        }
        if rn <= tol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p = r.iter().zip(&p).map(|(ri, pi)| ri + beta * pi).collect();
    }
    if best_norm < initial {
        anchor.phi_v = best_x;
        anchor.refresh_residual(apply_h);
        // the recomputed residual can drift slightly above the recursive one
        if anchor.residual_norm > initial {
            warn!("CG residual drift on anchor {}", anchor.anchor_id);
        }
    }
    anchor.last_refined_step = step;
    if let Some(php) = breakdown {
        anchor.flagged = true;
        return Err(SgoifError::CurvatureBreakdown(php));
    }
    Ok(CgOutcome {
        iterations,
        initial_residual: initial,
        final_residual: anchor.residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dense_solve, DenseMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng, shift: f64) -> DenseMatrix {
        let b = DenseMatrix::new(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut a = b.gram().scaled(1.0 / d as f64);
        a.add_diagonal(shift);
        a.symmetrize();
        a
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        norm(&sub(a, b)) / norm(b).max(1e-300)
    }

    #[test]
    fn richardson_identity_one_step() {
        let h = DenseMatrix::identity(3);
        let mut a = AnchorState::new(0, vec![1.0, 0.0, 0.0]);
        a.richardson_step(&h, &IdentityPreconditioner, 1.0).unwrap();
        assert_eq!(a.phi_v, vec![1.0, 0.0, 0.0]);
        assert_eq!(a.residual_norm, 0.0);
    }

    #[test]
    fn richardson_direct_substitution() {
        let h = DenseMatrix::from_diag(&[2.0, 2.0]);
        let mut a = AnchorState::new(0, vec![1.0, 0.0]);
        a.richardson_step(&h, &IdentityPreconditioner, 0.25).unwrap();
        assert_eq!(a.phi_v, vec![0.25, 0.0]);
        assert!((a.residual_norm - norm(&a.r_v)).abs() <= 1e-12);
    }

    #[test]
    fn richardson_converges_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 30;
        let h = random_spd(d, &mut rng, 0.5);
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = dense_solve(&h, &g).unwrap();
        let big_m = crate::numerics::max_eigenvalue(&h).unwrap();
        let rho = 1.0 / big_m;
        let mut a = AnchorState::new(0, g);
        let mut prev = f64::INFINITY;
        for t in 1..=500 {
            a.richardson_step(&h, &IdentityPreconditioner, rho).unwrap();
            if t % 50 == 0 {
                assert!(a.residual_norm <= prev);
                prev = a.residual_norm;
            }
        }
        assert!(rel(&a.phi_v, &exact) <= 1e-6);
    }

    #[test]
    fn non_finite_iterate_resets_anchor() {
        let h = |v: &[f64]| v.iter().map(|x| x * f64::INFINITY).collect::<Vec<f64>>();
        let mut a = AnchorState::new(4, vec![1.0, 1.0]);
        let err = a.richardson_step(&h, &IdentityPreconditioner, 1.0);
        assert!(matches!(err, Err(SgoifError::NonFiniteIterate { anchor: 4 })));
        assert_eq!(a.phi_v, vec![0.0, 0.0]);
        assert_eq!(a.c_v, 0.0);
        assert!(a.flagged);
    }

    #[test]
    fn neumann_examples() {
        // pure damping
        let s = CurvatureSurrogate::diagonal_from_moment(vec![0.0; 3], 0.5).unwrap();
        for k in [0, 3, 10] {
            let (x, bound) = neumann_ihvp(&[1.0, 2.0, 3.0], &s, k).unwrap();
            assert_eq!(x, vec![2.0, 4.0, 6.0]);
            assert_eq!(bound, 0.0);
        }
        // H = diag(1, 1.5), alpha = 1
        let s = CurvatureSurrogate::diagonal_from_moment(vec![0.0, 0.5], 1.0).unwrap();
        let (x0, _) = neumann_ihvp(&[1.0, 1.0], &s, 0).unwrap();
        assert_eq!(x0, vec![1.0, 1.0]);
        let (x, bound) = neumann_ihvp(&[1.0, 1.0], &s, 10).unwrap();
        let exact = [1.0, 1.0 / 1.5];
        let err = norm(&sub(&x, &exact));
        assert!(err <= bound, "{err} > {bound}");
        // divergence
        let s = CurvatureSurrogate::diagonal_from_moment(vec![0.0, 2.0], 1.0).unwrap();
        assert!(matches!(neumann_ihvp(&[1.0, 1.0], &s, 3), Err(SgoifError::DivergentSeries { .. })));
    }

    #[test]
    fn adapt_truncation_rule() {
        assert_eq!(adapt_truncation(3, 1.0, -0.1, 10), 4);
        assert_eq!(adapt_truncation(10, 1.0, -0.1, 10), 10);
        assert_eq!(adapt_truncation(0, 1.0, 0.1, 10), 0);
        assert_eq!(adapt_truncation(2, 1.0, 0.1, 10), 1);
        assert_eq!(adapt_truncation(2, 1.0, 0.0, 10), 2);
        assert_eq!(adapt_truncation(2, 0.0, -0.1, 10), 2);
    }

    #[test]
    fn trend_sign() {
        assert!(residual_trend(&[5.0, 4.0, 3.0, 2.0, 1.0], 5) < 0.0);
        assert!(residual_trend(&[1.0, 2.0], 5) > 0.0);
        assert_eq!(residual_trend(&[1.0], 5), 0.0);
        assert_eq!(residual_trend(&[9.0, 1.0, 1.0, 1.0, 1.0, 1.0], 5), 0.0);
    }

    #[test]
    fn subspace_finds_dominant_direction() {
        let d = 20;
        let mut diag = vec![1.0; d];
        diag[0] = 10.0;
        let h = DenseMatrix::from_diag(&diag);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = SubspaceState::new(1, 50);
        assert_eq!(s.update(&[], &h, d, &mut rng, 0).unwrap(), 1);
        assert!(s.q[0][0].abs() >= 0.99);
        assert!((s.lambda[0] - 10.0).abs() < 0.1);

        let mut s = SubspaceState::new(4, 50);
        s.update(&[], &DenseMatrix::identity(d), d, &mut rng, 0).unwrap();
        assert!(s.orthonormality_defect() <= 1e-8);
        for l in &s.lambda {
            assert!((l - 1.0).abs() <= 1e-8);
        }

        let mut s = SubspaceState::new(0, 50);
        assert_eq!(s.update(&[], &h, d, &mut rng, 0).unwrap(), 0);
        let g = vec![1.0; d];
        let x = subspace_solve(&s, &g, &h, &vec![2.0; d]).unwrap();
        assert_eq!(x, vec![0.5; d]);
    }

    #[test]
    fn subspace_rank_shrinks_on_low_rank_operator() {
        let d = 10;
        let mut diag = vec![0.0; d];
        diag[0] = 3.0;
        diag[1] = 2.0;
        let h = DenseMatrix::from_diag(&diag);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = SubspaceState::new(4, 10);
        assert_eq!(s.update(&[], &h, d, &mut rng, 10).unwrap(), 2);
    }

    #[test]
    fn subspace_solve_exact_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 12;
        // coordinate-aligned Q: H = D + Q Lambda Q^T with Q = [e0, e3]
        let diag: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut q = vec![vec![0.0; d], vec![0.0; d]];
        q[0][0] = 1.0;
        q[1][3] = 1.0;
        let lambda = vec![4.0, 1.5];
        let mut full = diag.clone();
        full[0] += 4.0;
        full[3] += 1.5;
        let h = DenseMatrix::from_diag(&full);
        let sub_state = SubspaceState { q: q.clone(), lambda, r: 2, last_refresh_step: 0, refresh_period: 1 };
        // g in span(Q)
        let mut g = vec![0.0; d];
        g[0] = 1.0;
        g[3] = -2.0;
        let x = subspace_solve(&sub_state, &g, &h, &diag).unwrap();
        assert!(rel(&x, &dense_solve(&h, &g).unwrap()) <= 1e-8);
        // g orthogonal to span(Q)
        let mut g = vec![1.0; d];
        g[0] = 0.0;
        g[3] = 0.0;
        let x = subspace_solve(&sub_state, &g, &h, &diag).unwrap();
        assert!(rel(&x, &dense_solve(&h, &g).unwrap()) <= 1e-8);

        // r = d, Q = I
        let h = random_spd(d, &mut rng, 0.3);
        let q: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                e
            })
            .collect();
        let sub_state = SubspaceState { q, lambda: vec![1.0; d], r: d, last_refresh_step: 0, refresh_period: 1 };
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = subspace_solve(&sub_state, &g, &h, &vec![1.0; d]).unwrap();
        assert!(rel(&x, &dense_solve(&h, &g).unwrap()) <= 1e-8);
    }

    #[test]
    fn cg_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 30;
        let h = random_spd(d, &mut rng, 0.5);
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = dense_solve(&h, &g).unwrap();

        let mut a = AnchorState::new(0, g.clone());
        let out = cg_refine(&mut a, &h, 1e-10, d, 1).unwrap();
        assert!(rel(&a.phi_v, &exact) <= 1e-8);
        assert!(out.final_residual <= out.initial_residual);

        let before = a.clone();
        let out = cg_refine(&mut a, &h, 1e-6, d, 2).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(a.phi_v, before.phi_v);

        let mut a = AnchorState::new(0, g.clone());
        cg_refine(&mut a, &h, 0.0, 1, 1).unwrap();
        assert!(a.residual_norm < norm(&g));
    }

    #[test]
    fn cg_breakdown_keeps_best_and_flags() {
        let h = DenseMatrix::from_diag(&[1.0, -1.0]);
        let mut a = AnchorState::new(0, vec![1.0, 1.0]);
        let err = cg_refine(&mut a, &h, 1e-12, 5, 1);
        assert!(matches!(err, Err(SgoifError::CurvatureBreakdown(_))));
        assert!(a.flagged);
        assert!(a.residual_norm <= 2f64.sqrt());
    }

    #[test]
    fn residual_bound_formula() {
        assert_eq!(residual_error_bound(0.0, 3.0), 0.0);
        assert_eq!(residual_error_bound(0.5, 2.0), 0.25);
    }

    #[test]
    fn residual_bound_holds_on_random_instances() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 8;
            let h = random_spd(d, &mut rng, 0.2);
            let m = crate::numerics::min_eigenvalue(&h).unwrap();
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exact = dense_solve(&h, &g).unwrap();
            let mut a = AnchorState::new(0, g);
            for _ in 0..5 {
                a.richardson_step(&h, &IdentityPreconditioner, 0.3).unwrap();
                let err = norm(&sub(&exact, &a.phi_v));
                assert!(err <= residual_error_bound(a.residual_norm, m) * (1.0 + 1e-10));
            }
        }
    }
}
