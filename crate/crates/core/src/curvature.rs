//! Curvature surrogates for `H_t`.
//!
//! Four backends are supported:
//!
//! * `Diagonal` - bias-corrected EMA of squared per-example gradients plus `alpha`.
//! * `EmpiricalFisher` - EMA of `g g^T` plus `alpha I` (dense up to
//!   [`FISHER_DENSE_MAX_DIM`], diagonal-of-Fisher above that).
//! * `KfacBlocks` - one Kronecker pair per layer of the one-hidden-layer MLP;
//!   any other model falls back to `Diagonal`.
//! * `LowRankPlusDiag` - the diagonal moment `D` plus a rank-`r` correction
//!   `Q_r Lambda Q_r^T` handed over by the subspace tracker.
//!
//! Every effective operator is `alpha`-damped, so its eigenvalues are at least
//! `alpha` and every inverse-apply is well defined.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SgoifError};
use crate::model::{KfacSample, MlpLayout, ModelHandle, ModelKind};
use crate::numerics::{
    axpy, dot, norm, power_iteration, scale, Cholesky, DenseMatrix, LinearOperator, ParamVector,
    SpectralBounds,
};
use crate::snapshot::{ByteReader, ByteWriter};

pub const CURVATURE_MAGIC: &[u8; 8] = b"SGOIFCB1";
pub const DEFAULT_DAMPING: f64 = 1e-3;
pub const CURVATURE_EMA_DECAY: f64 = 0.95;
pub const FISHER_DENSE_MAX_DIM: usize = 500;
/// Safety factor applied to power-iteration estimates of the largest eigenvalue.
pub const SPECTRAL_SAFETY: f64 = 1.1;
const POWER_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Diagonal,
    EmpiricalFisher,
    KfacBlocks,
    LowrankPlusDiag,
}

impl Backend {
    fn tag(self) -> u8 {
        match self {
            Backend::Diagonal => 0,
            Backend::EmpiricalFisher => 1,
            Backend::KfacBlocks => 2,
            Backend::LowrankPlusDiag => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Backend::Diagonal,
            1 => Backend::EmpiricalFisher,
            2 => Backend::KfacBlocks,
            3 => Backend::LowrankPlusDiag,
            other => return Err(SgoifError::Format(format!("unknown backend tag {other}"))),
        })
    }
}

/// Curvature condition proxy `Gamma_t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionProxy(f64);

impl ConditionProxy {
    pub fn new(value: f64) -> Self {
        if value.is_finite() {
            Self(value.max(1.0))
        } else {
            Self(f64::MAX)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Inputs for one surrogate update.
#[derive(Debug, Clone, Copy)]
pub struct CurvatureBatch<'a> {
    pub grads: &'a [ParamVector],
    pub kfac: Option<&'a [KfacSample]>,
}

impl<'a> CurvatureBatch<'a> {
    pub fn from_grads(grads: &'a [ParamVector]) -> Self {
        Self { grads, kfac: None }
    }
}

/// Bias-corrected exponential moving average of a vector statistic.
#[derive(Debug, Clone, PartialEq)]
struct EmaVec {
    raw: Vec<f64>,
    updates: u64,
}

impl EmaVec {
    fn new(len: usize) -> Self {
        Self {
            raw: vec![0.0; len],
            updates: 0,
        }
    }

    fn push(&mut self, sample: &[f64]) {
        for (r, s) in self.raw.iter_mut().zip(sample) {
            *r = CURVATURE_EMA_DECAY * *r + (1.0 - CURVATURE_EMA_DECAY) * s;
        }
        self.updates += 1;
    }

    fn correction(&self) -> f64 {
        if self.updates == 0 {
            0.0
        } else {
            1.0 / (1.0 - CURVATURE_EMA_DECAY.powi(self.updates.min(i32::MAX as u64) as i32))
        }
    }

    fn value(&self) -> Vec<f64> {
        scale(self.correction(), &self.raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct KfacFactors {
    layout: MlpLayout,
    /// input-side `(p+1) x (p+1)` and output-side `h x h` for layer 1,
    /// input-side `(h+1) x (h+1)` and output-side `c x c` for layer 2.
    a1: EmaVec,
    g1: EmaVec,
    a2: EmaVec,
    g2: EmaVec,
}

impl PartialEq for MlpLayout {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.h == other.h && self.c == other.c
    }
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Diag(EmaVec),
    Dense(EmaVec),
    Kfac(Box<KfacFactors>),
    LowRank {
        diag: EmaVec,
        q: Vec<Vec<f64>>,
        lambda: Vec<f64>,
    },
}

/// `D + U U^T` with `D` diagonal positive and `U = Q Lambda^{1/2}`, inverted
/// through the Woodbury identity with an `r x r` capacitance factorization.
#[derive(Debug, Clone)]
pub struct DiagPlusLowRank {
    diag: Vec<f64>,
    u: Vec<Vec<f64>>,
    capacitance: Option<Cholesky>,
}

impl DiagPlusLowRank {
    pub fn new(diag: Vec<f64>, q: &[Vec<f64>], lambda: &[f64]) -> Result<Self> {
        if let Some((index, &value)) = diag.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(SgoifError::SingularPreconditioner { index, value });
        }
        check_dim(q.len(), lambda.len())?;
        let u: Vec<Vec<f64>> = q
            .iter()
            .zip(lambda)
            .map(|(col, l)| {
                check_dim(diag.len(), col.len())?;
                Ok(scale(l.max(0.0).sqrt(), col))
            })
            .collect::<Result<_>>()?;
        let r = u.len();
        let capacitance = if r == 0 {
            None
        } else {
            // I + U^T D^{-1} U
            let mut c = DenseMatrix::identity(r);
            for i in 0..r {
                for j in i..r {
                    let s: f64 = (0..diag.len()).map(|k| u[i][k] * u[j][k] / diag[k]).sum();
                    c.set(i, j, c.get(i, j) + s);
                    if i != j {
                        c.set(j, i, c.get(j, i) + s);
                    }
                }
            }
            Some(Cholesky::factor(&c)?)
        };
        Ok(Self {
            diag,
            u,
            capacitance,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.diag.iter().zip(v).map(|(d, x)| d * x).collect();
        for col in &self.u {
            let c = dot(col, v);
            axpy(c, col, &mut out);
        }
        out
    }

    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.diag.len(), v.len())?;
        let dinv_v: Vec<f64> = v.iter().zip(&self.diag).map(|(x, d)| x / d).collect();
        let Some(chol) = &self.capacitance else {
            return Ok(dinv_v);
        };
        let rhs: Vec<f64> = self.u.iter().map(|col| dot(col, &dinv_v)).collect();
        let y = chol.solve(&rhs)?;
        let mut correction = vec![0.0; v.len()];
        for (col, yi) in self.u.iter().zip(&y) {
            axpy(*yi, col, &mut correction);
        }
        Ok(dinv_v
            .iter()
            .zip(correction.iter().zip(&self.diag))
            .map(|(a, (c, d))| a - c / d)
            .collect())
    }
}

/// One of the four curvature surrogates for `H_t`.
#[derive(Debug, Clone)]
pub struct CurvatureSurrogate {
    backend: Backend,
    state: State,
    dim: usize,
    alpha: f64,
    step_of_last_update: usize,
    woodbury: Option<DiagPlusLowRank>,
}

impl PartialEq for CurvatureSurrogate {
    fn eq(&self, other: &Self) -> bool {
        self.backend == other.backend
            && self.state == other.state
            && self.dim == other.dim
            && self.alpha == other.alpha
            && self.step_of_last_update == other.step_of_last_update
    }
}

impl CurvatureSurrogate {
    /// Fresh surrogate for `model`. `KfacBlocks` on a non-MLP model and
    /// `EmpiricalFisher` above [`FISHER_DENSE_MAX_DIM`] fall back to diagonal
    /// state.
    pub fn new(backend: Backend, model: &ModelHandle, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(SgoifError::ConfigInvalid(format!("damping alpha must be > 0, got {alpha}")));
        }
        let d = model.dim();
        let (backend, state) = match backend {
            Backend::Diagonal => (Backend::Diagonal, State::Diag(EmaVec::new(d))),
            Backend::EmpiricalFisher if d <= FISHER_DENSE_MAX_DIM => {
                (Backend::EmpiricalFisher, State::Dense(EmaVec::new(d * d)))
            }
            Backend::EmpiricalFisher => (Backend::EmpiricalFisher, State::Diag(EmaVec::new(d))),
            Backend::KfacBlocks => match model.kind() {
                ModelKind::Mlp {
                    features,
                    hidden,
                    classes,
                } => {
                    let layout = MlpLayout::new(*features, *hidden, *classes);
                    (
                        Backend::KfacBlocks,
                        State::Kfac(Box::new(KfacFactors {
                            layout,
                            a1: EmaVec::new((features + 1).pow(2)),
                            g1: EmaVec::new(hidden * hidden),
                            a2: EmaVec::new((hidden + 1).pow(2)),
                            g2: EmaVec::new(classes * classes),
                        })),
                    )
                }
                _ => (Backend::Diagonal, State::Diag(EmaVec::new(d))),
            },
            Backend::LowrankPlusDiag => (
                Backend::LowrankPlusDiag,
                State::LowRank {
                    diag: EmaVec::new(d),
                    q: Vec::new(),
                    lambda: Vec::new(),
                },
            ),
        };
        let mut s = Self {
            backend,
            state,
            dim: d,
            alpha,
            step_of_last_update: 0,
            woodbury: None,
        };
        s.refresh_cache()?;
        Ok(s)
    }

    /// Dense empirical-Fisher surrogate with a given (already averaged)
    /// second-moment matrix; the effective operator is `moment + alpha I`.
    pub fn fisher_from_matrix(moment: &DenseMatrix, alpha: f64) -> Result<Self> {
        check_dim(moment.rows(), moment.cols())?;
        moment.check_symmetric()?;
        let d = moment.rows();
        let mut ema = EmaVec::new(d * d);
        ema.raw = moment.as_slice().to_vec();
        ema.updates = u64::MAX; // correction factor 1
        Ok(Self {
            backend: Backend::EmpiricalFisher,
            state: State::Dense(ema),
            dim: d,
            alpha,
            step_of_last_update: 0,
            woodbury: None,
        })
    }

    /// Diagonal surrogate with effective diagonal `moment + alpha`.
    pub fn diagonal_from_moment(moment: Vec<f64>, alpha: f64) -> Result<Self> {
        let d = moment.len();
        let mut ema = EmaVec::new(d);
        ema.raw = moment;
        ema.updates = u64::MAX;
        let mut s = Self {
            backend: Backend::Diagonal,
            state: State::Diag(ema),
            dim: d,
            alpha,
            step_of_last_update: 0,
            woodbury: None,
        };
        s.refresh_cache()?;
        Ok(s)
    }

    /// Hybrid surrogate `diag(moment) + alpha I + Q diag(lambda) Q^T`.
    pub fn lowrank_from_parts(
        moment: Vec<f64>,
        q: Vec<Vec<f64>>,
        lambda: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let d = moment.len();
        let mut ema = EmaVec::new(d);
        ema.raw = moment;
        ema.updates = u64::MAX;
        let mut s = Self {
            backend: Backend::LowrankPlusDiag,
            state: State::LowRank {
                diag: ema,
                q: Vec::new(),
                lambda: Vec::new(),
            },
            dim: d,
            alpha,
            step_of_last_update: 0,
            woodbury: None,
        };
        s.set_lowrank(q, lambda)?;
        Ok(s)
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_of_last_update(&self) -> usize {
        self.step_of_last_update
    }

    /// True when the effective operator is exactly diagonal.
    pub fn is_diagonal(&self) -> bool {
        matches!(self.state, State::Diag(_))
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.state, State::Dense(_))
    }

    /// Folds one minibatch of per-example statistics into the surrogate.
    pub fn update(&mut self, batch: &CurvatureBatch<'_>, step: usize) -> Result<()> {
        if batch.grads.is_empty() {
            return Err(SgoifError::ConfigInvalid("curvature update needs a non-empty batch".into()));
        }
        for g in batch.grads {
            check_dim(self.dim, g.len())?;
        }
        let w = 1.0 / batch.grads.len() as f64;
        let mean_sq = || {
            let mut acc = vec![0.0; self.dim];
            for g in batch.grads {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += w * gi * gi;
                }
            }
            acc
        };
        match &mut self.state {
            State::Diag(ema) => {
                let s = mean_sq();
                ema.push(&s);
            }
            State::LowRank { diag, .. } => {
                let s = mean_sq();
                diag.push(&s);
            }
            State::Dense(ema) => {
                let d = self.dim;
                let mut acc = vec![0.0; d * d];
                for g in batch.grads {
                    for i in 0..d {
                        if g[i] == 0.0 {
                            continue;
                        }
                        axpy(w * g[i], g, &mut acc[i * d..(i + 1) * d]);
                    }
                }
                ema.push(&acc);
            }
            State::Kfac(f) => {
                let samples = batch.kfac.ok_or_else(|| {
                    SgoifError::BackendMismatch("KFAC update needs per-layer activations".into())
                })?;
                let l = f.layout;
                if samples.len() != batch.grads.len() {
                    return Err(SgoifError::BackendMismatch(
                        "KFAC activations and gradients differ in batch size".into(),
                    ));
                }
                let mut a1 = vec![0.0; (l.p + 1).pow(2)];
                let mut g1 = vec![0.0; l.h * l.h];
                let mut a2 = vec![0.0; (l.h + 1).pow(2)];
                let mut g2 = vec![0.0; l.c * l.c];
                for s in samples {
                    if s.input1.len() != l.p + 1
                        || s.grad1.len() != l.h
                        || s.input2.len() != l.h + 1
                        || s.grad2.len() != l.c
                    {
                        return Err(SgoifError::BackendMismatch(
                            "activation layout does not match the MLP layers".into(),
                        ));
                    }
                    outer_acc(&mut a1, &s.input1, w);
                    outer_acc(&mut g1, &s.grad1, w);
                    outer_acc(&mut a2, &s.input2, w);
                    outer_acc(&mut g2, &s.grad2, w);
                }
                f.a1.push(&a1);
                f.g1.push(&g1);
                f.a2.push(&a2);
                f.g2.push(&g2);
            }
        }
        self.step_of_last_update = step;
        self.refresh_cache()
    }

    /// Installs a new low-rank correction (lowrank-plus-diag only; other
    /// backends ignore it).
    pub fn set_lowrank(&mut self, q_new: Vec<Vec<f64>>, lambda_new: Vec<f64>) -> Result<()> {
        check_dim(q_new.len(), lambda_new.len())?;
        for col in &q_new {
            check_dim(self.dim, col.len())?;
        }
        if let State::LowRank { q, lambda, .. } = &mut self.state {
            *q = q_new;
            *lambda = lambda_new.into_iter().map(|l| l.max(0.0)).collect();
        }
        self.refresh_cache()
    }

    pub fn lowrank_basis(&self) -> Option<(&[Vec<f64>], &[f64])> {
        match &self.state {
            State::LowRank { q, lambda, .. } => Some((q, lambda)),
            _ => None,
        }
    }

    fn refresh_cache(&mut self) -> Result<()> {
        self.woodbury = match &self.state {
            State::LowRank { q, lambda, .. } => {
                Some(DiagPlusLowRank::new(self.diagonal_part(), q, lambda)?)
            }
            _ => None,
        };
        Ok(())
    }

    /// Diagonal of the effective operator's diagonal-bearing part (the `D` of
    /// lowrank-plus-diag, the full diagonal otherwise), damping included.
    pub fn diagonal_part(&self) -> Vec<f64> {
        let d = self.dim;
        let a = self.alpha;
        match &self.state {
            State::Diag(ema) | State::LowRank { diag: ema, .. } => {
                ema.value().into_iter().map(|m| m + a).collect()
            }
            State::Dense(ema) => {
                let c = ema.correction();
                (0..d).map(|i| c * ema.raw[i * d + i] + a).collect()
            }
            State::Kfac(f) => {
                let l = f.layout;
                let (a1, g1, a2, g2) = (f.a1.value(), f.g1.value(), f.a2.value(), f.g2.value());
                let mut out = vec![a; d];
                // layer 1: weights (i, j<p) and bias (i, p)
                for i in 0..l.h {
                    let gii = g1[i * l.h + i];
                    for j in 0..l.p {
                        out[l.w1().start + i * l.p + j] += gii * a1[j * (l.p + 1) + j];
                    }
                    out[l.b1().start + i] += gii * a1[l.p * (l.p + 1) + l.p];
                }
                for i in 0..l.c {
                    let gii = g2[i * l.c + i];
                    for j in 0..l.h {
                        out[l.w2().start + i * l.h + j] += gii * a2[j * (l.h + 1) + j];
                    }
                    out[l.b2().start + i] += gii * a2[l.h * (l.h + 1) + l.h];
                }
                out
            }
        }
    }

    /// `H_t v` for the surrogate's current state.
    pub fn surrogate_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        let a = self.alpha;
        Ok(match &self.state {
            State::Diag(_) => self.diagonal_part().iter().zip(v).map(|(s, x)| s * x).collect(),
            State::LowRank { .. } => self.woodbury.as_ref().expect("woodbury cache").apply(v),
            State::Dense(ema) => {
                let d = self.dim;
                let c = ema.correction();
                (0..d)
                    .map(|i| c * dot(&ema.raw[i * d..(i + 1) * d], v) + a * v[i])
                    .collect()
            }
            State::Kfac(f) => {
                let l = f.layout;
                let mut out = scale(a, v);
                let (a1, g1, a2, g2) = (f.a1.value(), f.g1.value(), f.a2.value(), f.g2.value());
                // layer 1 as an h x (p+1) matrix [W1 | b1]
                let v1 = gather_layer(v, l.w1().start, l.b1().start, l.h, l.p);
                let y1 = kron_apply(&g1, l.h, &v1, &a1, l.p + 1);
                scatter_layer(&y1, &mut out, l.w1().start, l.b1().start, l.h, l.p);
                let v2 = gather_layer(v, l.w2().start, l.b2().start, l.c, l.h);
                let y2 = kron_apply(&g2, l.c, &v2, &a2, l.h + 1);
                scatter_layer(&y2, &mut out, l.w2().start, l.b2().start, l.c, l.h);
                out
            }
        })
    }

    /// `P^{-1} v` with `P` the diagonal part, or the Woodbury inverse of
    /// `D + Q Lambda Q^T` for lowrank-plus-diag.
    pub fn precond_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        if let Some(w) = &self.woodbury {
            return w.solve(v);
        }
        let diag = self.diagonal_part();
        if let Some((index, &value)) = diag.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
            return Err(SgoifError::SingularPreconditioner { index, value });
        }
        Ok(v.iter().zip(&diag).map(|(x, d)| x / d).collect())
    }

    /// `P v` for the same `P` as [`CurvatureSurrogate::precond_apply`].
    pub fn precond_forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        if let Some(w) = &self.woodbury {
            return Ok(w.apply(v));
        }
        Ok(self.diagonal_part().iter().zip(v).map(|(d, x)| d * x).collect())
    }

    /// Condition proxy `Gamma_t`: max/min of the diagonal for diagonal-bearing
    /// backends; for dense Fisher, power-iteration `lambda_max` over an
    /// inverse-iteration `lambda_min` estimate.
    pub fn condition_proxy(&self) -> ConditionProxy {
        if let State::Dense(_) = &self.state {
            let lmax = power_iteration(&|v: &[f64]| self.surrogate_apply(v).expect("dim"), self.dim, POWER_ITERS);
            let lmin = self.dense_min_eigen_estimate().unwrap_or(self.alpha);
            return ConditionProxy::new(lmax / lmin.max(self.alpha));
        }
        let diag = self.diagonal_part();
        let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        ConditionProxy::new(max / min)
    }

    fn dense_min_eigen_estimate(&self) -> Result<f64> {
        let State::Dense(ema) = &self.state else {
            return Ok(self.alpha);
        };
        let d = self.dim;
        let mut m = DenseMatrix::new(d, d, scale(ema.correction(), &ema.raw))?;
        m.add_diagonal(self.alpha);
        m.symmetrize();
        let chol = Cholesky::factor(&m)?;
        // inverse power iteration: dominant eigenvalue of M^{-1}
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 31) % 7) as f64).collect();
        let n0 = norm(&v);
        v = scale(1.0 / n0, &v);
        let mut rq = f64::INFINITY;
        for _ in 0..POWER_ITERS {
            let w = chol.solve(&v)?;
            let nw = norm(&w);
            if nw == 0.0 {
                break;
            }
            v = scale(1.0 / nw, &w);
            rq = dot(&v, &m.matvec(&v)?);
        }
        Ok(rq)
    }

    /// `m = alpha`, `M = 1.1 x` power-iteration estimate of `lambda_max`.
    pub fn spectral_bounds(&self) -> SpectralBounds {
        let est = power_iteration(
            &|v: &[f64]| self.surrogate_apply(v).expect("dim"),
            self.dim,
            POWER_ITERS,
        );
        let m = self.alpha;
        SpectralBounds::new(m, (SPECTRAL_SAFETY * est).max(SPECTRAL_SAFETY * m))
            .expect("alpha > 0")
    }

    /// Dense materialization of the effective operator (tests and oracles).
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        let cols = (0..self.dim)
            .map(|j| {
                let mut e = vec![0.0; self.dim];
                e[j] = 1.0;
                self.surrogate_apply(&e)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = DenseMatrix::from_columns(&cols)?;
        m.symmetrize();
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(CURVATURE_MAGIC);
        w.put_u8(self.backend.tag());
        w.put_f64(self.alpha);
        w.put_u64(self.step_of_last_update as u64);
        w.put_u64(self.dim as u64);
        let put_ema = |w: &mut ByteWriter, e: &EmaVec| {
            w.put_u64(e.updates);
            w.put_array(&e.raw);
        };
        match &self.state {
            State::Diag(e) => {
                w.put_u8(0);
                put_ema(&mut w, e);
            }
            State::Dense(e) => {
                w.put_u8(1);
                put_ema(&mut w, e);
            }
            State::Kfac(f) => {
                w.put_u8(2);
                w.put_u64(f.layout.p as u64);
                w.put_u64(f.layout.h as u64);
                w.put_u64(f.layout.c as u64);
                for e in [&f.a1, &f.g1, &f.a2, &f.g2] {
                    put_ema(&mut w, e);
                }
            }
            State::LowRank { diag, q, lambda } => {
                w.put_u8(3);
                put_ema(&mut w, diag);
                w.put_array(lambda);
                for col in q {
                    w.put_array(col);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, CURVATURE_MAGIC)?;
        let backend = Backend::from_tag(r.get_u8()?)?;
        let alpha = r.get_f64()?;
        let step = r.get_u64()? as usize;
        let dim = r.get_u64()? as usize;
        let get_ema = |r: &mut ByteReader| -> Result<EmaVec> {
            let updates = r.get_u64()?;
            let raw = r.get_array()?;
            Ok(EmaVec { raw, updates })
        };
        let state = match r.get_u8()? {
            0 => State::Diag(get_ema(&mut r)?),
            1 => State::Dense(get_ema(&mut r)?),
            2 => {
                let p = r.get_u64()? as usize;
                let h = r.get_u64()? as usize;
                let c = r.get_u64()? as usize;
                State::Kfac(Box::new(KfacFactors {
                    layout: MlpLayout::new(p, h, c),
                    a1: get_ema(&mut r)?,
                    g1: get_ema(&mut r)?,
                    a2: get_ema(&mut r)?,
                    g2: get_ema(&mut r)?,
                }))
            }
            3 => {
                let diag = get_ema(&mut r)?;
                let lambda = r.get_array()?;
                let q = (0..lambda.len())
                    .map(|_| r.get_array())
                    .collect::<Result<Vec<_>>>()?;
                State::LowRank { diag, q, lambda }
            }
            other => return Err(SgoifError::Format(format!("unknown state tag {other}"))),
        };
        r.expect_end()?;
        if !(alpha > 0.0) {
            return Err(SgoifError::Format("snapshot damping must be positive".into()));
        }
        let mut s = Self {
            backend,
            state,
            dim,
            alpha,
            step_of_last_update: step,
            woodbury: None,
        };
        s.refresh_cache()?;
        Ok(s)
    }
}

impl LinearOperator for CurvatureSurrogate {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.surrogate_apply(v).expect("surrogate dimension")
    }
}

fn outer_acc(dst: &mut [f64], v: &[f64], w: f64) {
    let n = v.len();
    for i in 0..n {
        if v[i] == 0.0 {
            continue;
        }
        axpy(w * v[i], v, &mut dst[i * n..(i + 1) * n]);
    }
}

/// Reads `[W | b]` (rows x (cols+1)) out of the flat parameter vector.
fn gather_layer(v: &[f64], w_start: usize, b_start: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut m = vec![0.0; rows * (cols + 1)];
    for i in 0..rows {
        m[i * (cols + 1)..i * (cols + 1) + cols]
            .copy_from_slice(&v[w_start + i * cols..w_start + (i + 1) * cols]);
        m[i * (cols + 1) + cols] = v[b_start + i];
    }
    m
}

fn scatter_layer(m: &[f64], out: &mut [f64], w_start: usize, b_start: usize, rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[w_start + i * cols + j] += m[i * (cols + 1) + j];
        }
        out[b_start + i] += m[i * (cols + 1) + cols];
    }
}

/// `G V A` for `G` (n_out x n_out), `V` (n_out x n_in), `A` (n_in x n_in).
fn kron_apply(g: &[f64], n_out: usize, v: &[f64], a: &[f64], n_in: usize) -> Vec<f64> {
    let mut gv = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        for k in 0..n_out {
            let gik = g[i * n_out + k];
            if gik == 0.0 {
                continue;
            }
            axpy(gik, &v[k * n_in..(k + 1) * n_in], &mut gv[i * n_in..(i + 1) * n_in]);
        }
    }
    let mut out = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        for k in 0..n_in {
            let x = gv[i * n_in + k];
            if x == 0.0 {
                continue;
            }
            axpy(x, &a[k * n_in..(k + 1) * n_in], &mut out[i * n_in..(i + 1) * n_in]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Example;
    use crate::numerics::{dense_solve, min_eigenvalue, orthonormalize, sub, symmetric_eigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        norm(&sub(a, b)) / norm(b).max(1e-300)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn mlp_batch(rng: &mut ChaCha8Rng, n: usize) -> (ModelHandle, Vec<f64>, Vec<Example>) {
        let m = ModelHandle::mlp(3, 4, 2).unwrap();
        let theta = m.init_theta(rng);
        let batch = (0..n)
            .map(|_| {
                let y = rng.random_range(0..2);
                Example {
                    features: rand_vec(rng, 3),
                    observed_label: y,
                    true_label: y,
                }
            })
            .collect();
        (m, theta, batch)
    }

    #[test]
    fn zero_gradients_leave_damping_floor() {
        let m = ModelHandle::logistic(2, 2).unwrap();
        let mut s = CurvatureSurrogate::new(Backend::Diagonal, &m, 1e-3).unwrap();
        let grads = vec![vec![0.0; 6]; 4];
        s.update(&CurvatureBatch::from_grads(&grads), 1).unwrap();
        assert_eq!(s.diagonal_part(), vec![1e-3; 6]);
        assert_eq!(s.condition_proxy().value(), 1.0);
        let b = s.spectral_bounds();
        assert_eq!(b.m, 1e-3);
        assert!((b.big_m / 1.1 - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn fisher_saturates_to_outer_product() {
        let m = ModelHandle::quadratic(DenseMatrix::identity(4), vec![0.0; 4]).unwrap();
        let mut s = CurvatureSurrogate::new(Backend::EmpiricalFisher, &m, 1e-2).unwrap();
        let g = vec![0.5, -1.0, 2.0, 0.25];
        for t in 0..50 {
            s.update(&CurvatureBatch::from_grads(std::slice::from_ref(&g)), t).unwrap();
        }
        let v = vec![1.0, 2.0, -1.0, 0.5];
        let expected: Vec<f64> = g.iter().zip(&v).map(|(gi, vi)| gi * dot(&g, &v) + 1e-2 * vi).collect();
        assert!(rel(&s.surrogate_apply(&v).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn diagonal_apply_is_elementwise() {
        let s = CurvatureSurrogate::diagonal_from_moment(vec![1.0, 3.0], 1.0).unwrap();
        assert_eq!(s.surrogate_apply(&[1.0, 2.0]).unwrap(), vec![2.0, 8.0]);
        assert_eq!(s.surrogate_apply(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.condition_proxy().value(), 2.0);
        let s = CurvatureSurrogate::diagonal_from_moment(vec![0.0, 3.0], 1.0).unwrap();
        assert_eq!(s.condition_proxy().value(), 4.0);
    }

    #[test]
    fn precond_scaled_identity_and_rank_one_woodbury() {
        let s = CurvatureSurrogate::diagonal_from_moment(vec![1.0; 3], 1.0).unwrap();
        assert_eq!(s.precond_apply(&[2.0, 4.0, 6.0]).unwrap(), vec![1.0, 2.0, 3.0]);

        // D = I (moment 1 - alpha), Q = e1, Lambda = 1
        let alpha = 1e-3;
        let s = CurvatureSurrogate::lowrank_from_parts(
            vec![1.0 - alpha; 3],
            vec![vec![1.0, 0.0, 0.0]],
            vec![1.0],
            alpha,
        )
        .unwrap();
        let out = s.precond_apply(&[3.0, 5.0, 7.0]).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-12);
        assert!((out[1] - 5.0).abs() < 1e-12);
        assert!((out[2] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn woodbury_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (d, r) in [(30, 4), (50, 16), (12, 1)] {
            let moment: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
            let raw: Vec<Vec<f64>> = (0..r).map(|_| rand_vec(&mut rng, d)).collect();
            let q = orthonormalize(&raw, 1e-8);
            let lambda: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..5.0)).collect();
            let s = CurvatureSurrogate::lowrank_from_parts(moment, q.clone(), lambda.clone(), 1e-3)
                .unwrap();
            let dense = s.to_dense().unwrap();
            // dense reconstruction of D + Q Lambda Q^T
            let v = rand_vec(&mut rng, d);
            let mut recon: Vec<f64> = s.diagonal_part().iter().zip(&v).map(|(a, b)| a * b).collect();
            for (col, l) in q.iter().zip(&lambda) {
                axpy(l * dot(col, &v), col, &mut recon);
            }
            assert!(rel(&s.surrogate_apply(&v).unwrap(), &recon) <= 1e-10);
            let x = s.precond_apply(&v).unwrap();
            let x_ref = dense_solve(&dense, &v).unwrap();
            assert!(rel(&x, &x_ref) <= 1e-8);
            // P^{-1} (P v) = v
            let back = s.precond_apply(&s.precond_forward(&v).unwrap()).unwrap();
            assert!(rel(&back, &v) <= 1e-8);
        }
    }

    #[test]
    fn singular_preconditioner_detected() {
        let err = DiagPlusLowRank::new(vec![1.0, 0.0], &[], &[]);
        assert!(matches!(err, Err(SgoifError::SingularPreconditioner { index: 1, .. })));
    }

    #[test]
    fn spectral_bounds_enclose_top_eigenvalue() {
        let mut moment = vec![1.0; 10];
        moment[9] = 10.0;
        let alpha = 1e-3;
        let s = CurvatureSurrogate::diagonal_from_moment(moment, alpha).unwrap();
        let b = s.spectral_bounds();
        assert!(b.big_m >= 10.0 + alpha && b.big_m <= 1.1 * (10.0 + alpha) + 1e-12);
        assert_eq!(b.m, alpha);
    }

    #[test]
    fn fisher_condition_proxy_tracks_true_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let d = 15;
            let b = DenseMatrix::new(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let f = b.gram();
            let alpha = 1e-2;
            let s = CurvatureSurrogate::fisher_from_matrix(&f, alpha).unwrap();
            let mut eff = f.clone();
            eff.add_diagonal(alpha);
            let (vals, _) = symmetric_eigen(&eff).unwrap();
            let kappa = vals[d - 1] / vals[0];
            let proxy = s.condition_proxy().value();
            assert!(proxy >= kappa / 2.0 && proxy <= 2.0 * kappa, "{proxy} vs {kappa}");
        }
    }

    #[test]
    fn operators_are_linear_and_damped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, theta, batch) = mlp_batch(&mut rng, 6);
        let grads: Vec<Vec<f64>> = batch.iter().map(|e| m.per_example_gradient(&theta, e).unwrap()).collect();
        let kfac = m.kfac_samples(&theta, &batch).unwrap().unwrap();
        for backend in [
            Backend::Diagonal,
            Backend::EmpiricalFisher,
            Backend::KfacBlocks,
            Backend::LowrankPlusDiag,
        ] {
            let mut s = CurvatureSurrogate::new(backend, &m, 1e-3).unwrap();
            s.update(&CurvatureBatch { grads: &grads, kfac: Some(&kfac) }, 1).unwrap();
            if backend == Backend::LowrankPlusDiag {
                let q = orthonormalize(&[rand_vec(&mut rng, m.dim()), rand_vec(&mut rng, m.dim())], 1e-8);
                s.set_lowrank(q, vec![2.0, 0.5]).unwrap();
            }
            let (v, w) = (rand_vec(&mut rng, m.dim()), rand_vec(&mut rng, m.dim()));
            let lhs = s.surrogate_apply(&crate::numerics::add(&scale(2.0, &v), &scale(-3.0, &w))).unwrap();
            let rhs = crate::numerics::add(
                &scale(2.0, &s.surrogate_apply(&v).unwrap()),
                &scale(-3.0, &s.surrogate_apply(&w).unwrap()),
            );
            assert!(rel(&lhs, &rhs) <= 1e-10, "{backend:?}");
            let dense = s.to_dense().unwrap();
            assert!(min_eigenvalue(&dense).unwrap() >= 1e-3 * (1.0 - 1e-8), "{backend:?}");
            let back = s.precond_apply(&s.precond_forward(&v).unwrap()).unwrap();
            assert!(rel(&back, &v) <= 1e-8);
        }
    }

    #[test]
    fn kfac_falls_back_and_rejects_bad_layout() {
        let logistic = ModelHandle::logistic(3, 2).unwrap();
        let s = CurvatureSurrogate::new(Backend::KfacBlocks, &logistic, 1e-3).unwrap();
        assert_eq!(s.backend(), Backend::Diagonal);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, theta, batch) = mlp_batch(&mut rng, 3);
        let grads: Vec<Vec<f64>> = batch.iter().map(|e| m.per_example_gradient(&theta, e).unwrap()).collect();
        let mut s = CurvatureSurrogate::new(Backend::KfacBlocks, &m, 1e-3).unwrap();
        assert!(matches!(
            s.update(&CurvatureBatch::from_grads(&grads), 1),
            Err(SgoifError::BackendMismatch(_))
        ));
        let mut kfac = m.kfac_samples(&theta, &batch).unwrap().unwrap();
        kfac[0].grad1.pop();
        assert!(matches!(
            s.update(&CurvatureBatch { grads: &grads, kfac: Some(&kfac) }, 1),
            Err(SgoifError::BackendMismatch(_))
        ));
    }

    #[test]
    fn quadratic_fisher_gap_is_recorded() {
        // diagnostic only: the empirical Fisher of a quadratic is not its Hessian
        let a = DenseMatrix::from_diag(&[1.0, 2.0, 3.0]);
        let m = ModelHandle::quadratic(a.clone(), vec![0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = CurvatureSurrogate::new(Backend::EmpiricalFisher, &m, 1e-3).unwrap();
        for t in 0..100 {
            let theta = rand_vec(&mut rng, 3);
            let ex = Example { features: vec![0.0; 3], observed_label: 0, true_label: 0 };
            let g = m.per_example_gradient(&theta, &ex).unwrap();
            s.update(&CurvatureBatch::from_grads(&[g]), t).unwrap();
        }
        let gap = crate::numerics::max_eigenvalue(&{
            let f = s.to_dense().unwrap();
            let mut diff = DenseMatrix::new(3, 3, sub(f.as_slice(), a.as_slice())).unwrap();
            diff.symmetrize();
            diff
        })
        .unwrap()
        .abs();
        assert!(gap.is_finite());
    }

    #[test]
    fn snapshot_roundtrip_all_backends() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, theta, batch) = mlp_batch(&mut rng, 4);
        let grads: Vec<Vec<f64>> = batch.iter().map(|e| m.per_example_gradient(&theta, e).unwrap()).collect();
        let kfac = m.kfac_samples(&theta, &batch).unwrap().unwrap();
        for backend in [
            Backend::Diagonal,
            Backend::EmpiricalFisher,
            Backend::KfacBlocks,
            Backend::LowrankPlusDiag,
        ] {
            let mut s = CurvatureSurrogate::new(backend, &m, 1e-3).unwrap();
            s.update(&CurvatureBatch { grads: &grads, kfac: Some(&kfac) }, 7).unwrap();
            if backend == Backend::LowrankPlusDiag {
                let q = orthonormalize(&[rand_vec(&mut rng, m.dim())], 1e-8);
                s.set_lowrank(q, vec![1.5]).unwrap();
            }
            let bytes = s.to_bytes();
            assert_eq!(&bytes[..8], b"SGOIFCB1");
            let back = CurvatureSurrogate::from_bytes(&bytes).unwrap();
            assert_eq!(back, s);
            let v = rand_vec(&mut rng, m.dim());
            assert_eq!(back.surrogate_apply(&v).unwrap(), s.surrogate_apply(&v).unwrap());
        }
    }
}
