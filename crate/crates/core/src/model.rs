//! Desk-scale differentiable models and the SGD trainer.
//!
//! Three model kinds share one flat parameter layout convention:
//!
//! * `Quadratic`: `l(theta; z) = 1/2 theta^T A theta - (b + x_z)^T theta`.
//!   The Hessian is `A` for every example.
//! * `Logistic`: multinomial softmax regression, `theta = [W (C x p), b (C)]`.
//! * `Mlp`: one tanh hidden layer,
//!   `theta = [W1 (h x p), b1 (h), W2 (C x h), b2 (C)]`.
//!
//! Gradients are analytic. Hessian-vector products are exact: closed form for
//! the quadratic, forward-over-reverse (R-operator) differentiation of the
//! analytic gradient for the two network kinds.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SgoifError};
use crate::numerics::{axpy, norm, DenseMatrix, ParamVector, EXPLICIT_HESSIAN_MAX_DIM};

/// One labelled example. `observed_label` is what training sees;
/// `true_label` is the clean ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub observed_label: usize,
    pub true_label: usize,
}

impl Example {
    pub fn is_noisy(&self) -> bool {
        self.observed_label != self.true_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    Quadratic { a: DenseMatrix, b: Vec<f64> },
    Logistic { features: usize, classes: usize },
    Mlp { features: usize, hidden: usize, classes: usize },
}

/// Immutable model description plus a shared HVP counter.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    kind: ModelKind,
    hvp_calls: Arc<AtomicU64>,
}

/// Per-example Kronecker factor inputs for the two MLP layers.
#[derive(Debug, Clone)]
pub struct KfacSample {
    /// `[x; 1]`
    pub input1: Vec<f64>,
    /// back-propagated pre-activation gradient of the hidden layer
    pub grad1: Vec<f64>,
    /// `[h; 1]`
    pub input2: Vec<f64>,
    /// logit gradient `softmax(z) - e_y`
    pub grad2: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `R(s) = diag(s) Rz - s (s^T Rz)` for `s = softmax(z)`.
fn softmax_jvp(s: &[f64], rz: &[f64]) -> Vec<f64> {
    let sr: f64 = s.iter().zip(rz).map(|(a, b)| a * b).sum();
    s.iter().zip(rz).map(|(si, ri)| si * (ri - sr)).collect()
}

/// `out[i] = sum_j m[i, j] v[j]` for a row-major `rows x cols` block.
fn block_matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| m[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `out[j] = sum_i m[i, j] v[i]`
fn block_tr_matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        axpy(v[i], &m[i * cols..(i + 1) * cols], &mut out);
    }
    out
}

/// Writes the outer product `u v^T` (scaled) into a row-major block.
fn add_outer(dst: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    for (i, ui) in u.iter().enumerate() {
        if *ui == 0.0 {
            continue;
        }
        axpy(scale * ui, v, &mut dst[i * cols..(i + 1) * cols]);
    }
}

impl ModelHandle {
    pub fn new(kind: ModelKind) -> Result<Self> {
        if let ModelKind::Quadratic { a, b } = &kind {
            check_dim(a.rows(), a.cols())?;
            check_dim(a.rows(), b.len())?;
            a.check_symmetric()?;
        }
        Ok(Self {
            kind,
            hvp_calls: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn quadratic(a: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        Self::new(ModelKind::Quadratic { a, b })
    }

    pub fn logistic(features: usize, classes: usize) -> Result<Self> {
        Self::new(ModelKind::Logistic { features, classes })
    }

    pub fn mlp(features: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(ModelKind::Mlp {
            features,
            hidden,
            classes,
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ModelKind::Quadratic { a, .. } => a.rows(),
            ModelKind::Logistic { features, classes } => classes * (features + 1),
            ModelKind::Mlp {
                features,
                hidden,
                classes,
            } => hidden * (features + 1) + classes * (hidden + 1),
        }
    }

    /// Number of input features an example must carry.
    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Quadratic { a, .. } => a.rows(),
            ModelKind::Logistic { features, .. } | ModelKind::Mlp { features, .. } => *features,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.kind {
            ModelKind::Quadratic { .. } => 1,
            ModelKind::Logistic { classes, .. } | ModelKind::Mlp { classes, .. } => *classes,
        }
    }

    /// Total exact HVPs evaluated through [`ModelHandle::hvp`] on this handle
    /// and its clones.
    pub fn hvp_count(&self) -> u64 {
        self.hvp_calls.load(Ordering::Relaxed)
    }

    pub fn reset_hvp_count(&self) {
        self.hvp_calls.store(0, Ordering::Relaxed);
    }

    fn check_example(&self, theta: &[f64], ex: &Example) -> Result<()> {
        check_dim(self.dim(), theta.len())?;
        check_dim(self.feature_dim(), ex.features.len())?;
        let c = self.classes();
        if !matches!(self.kind, ModelKind::Quadratic { .. }) && ex.observed_label >= c {
            return Err(SgoifError::DimensionMismatch {
                expected: c,
                got: ex.observed_label,
            });
        }
        Ok(())
    }

    /// Random initial parameters (zeros for the quadratic and logistic kinds,
    /// scaled Gaussian weights for the MLP).
    pub fn init_theta<R: Rng>(&self, rng: &mut R) -> ParamVector {
        match &self.kind {
            ModelKind::Quadratic { .. } | ModelKind::Logistic { .. } => vec![0.0; self.dim()],
            ModelKind::Mlp {
                features,
                hidden,
                classes,
            } => {
                let mut theta = vec![0.0; self.dim()];
                let s1 = 1.0 / (*features as f64).sqrt();
                let s2 = 1.0 / (*hidden as f64).sqrt();
                let w1 = hidden * features;
                let w2_start = w1 + hidden;
                for v in theta[..w1].iter_mut() {
                    *v = s1 * Distribution::<f64>::sample(&StandardNormal, rng);
                }
                for v in theta[w2_start..w2_start + classes * hidden].iter_mut() {
                    *v = s2 * Distribution::<f64>::sample(&StandardNormal, rng);
                }
                theta
            }
        }
    }

    pub fn loss(&self, theta: &[f64], ex: &Example) -> Result<f64> {
        self.check_example(theta, ex)?;
        Ok(match &self.kind {
            ModelKind::Quadratic { a, b } => {
                let at = a.matvec(theta)?;
                let quad: f64 = 0.5 * theta.iter().zip(&at).map(|(x, y)| x * y).sum::<f64>();
                let lin: f64 = theta
                    .iter()
                    .zip(b.iter().zip(&ex.features))
                    .map(|(t, (bi, xi))| t * (bi + xi))
                    .sum();
                quad - lin
            }
            ModelKind::Logistic { features, classes } => {
                let z = self.logistic_logits(theta, *features, *classes, &ex.features);
                log_sum_exp(&z) - z[ex.observed_label]
            }
            ModelKind::Mlp {
                features,
                hidden,
                classes,
            } => {
                let fwd = MlpForward::run(theta, *features, *hidden, *classes, &ex.features);
                log_sum_exp(&fwd.logits) - fwd.logits[ex.observed_label]
            }
        })
    }

    pub fn mean_loss(&self, theta: &[f64], batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for ex in batch {
            total += self.loss(theta, ex)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Predicted class (argmax of the logits).
    pub fn predict(&self, theta: &[f64], features: &[f64]) -> usize {
        let z = match &self.kind {
            ModelKind::Quadratic { .. } => return 0,
            ModelKind::Logistic { features: p, classes } => {
                self.logistic_logits(theta, *p, *classes, features)
            }
            ModelKind::Mlp {
                features: p,
                hidden,
                classes,
            } => MlpForward::run(theta, *p, *hidden, *classes, features).logits,
        };
        z.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    }

    fn logistic_logits(&self, theta: &[f64], p: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let w = &theta[..c * p];
        let b = &theta[c * p..];
        let mut z = block_matvec(w, c, p, x);
        for (zi, bi) in z.iter_mut().zip(b) {
            *zi += bi;
        }
        z
    }

    /// `grad_theta l(theta; z)`
    pub fn per_example_gradient(&self, theta: &[f64], ex: &Example) -> Result<ParamVector> {
        self.check_example(theta, ex)?;
        let mut g = vec![0.0; self.dim()];
        match &self.kind {
            ModelKind::Quadratic { a, b } => {
                let at = a.matvec(theta)?;
                for i in 0..g.len() {
                    g[i] = at[i] - b[i] - ex.features[i];
                }
            }
            ModelKind::Logistic { features, classes } => {
                let (p, c) = (*features, *classes);
                let z = self.logistic_logits(theta, p, c, &ex.features);
                let mut dz = softmax(&z);
                dz[ex.observed_label] -= 1.0;
                add_outer(&mut g[..c * p], &dz, &ex.features, 1.0);
                g[c * p..].copy_from_slice(&dz);
            }
            ModelKind::Mlp {
                features,
                hidden,
                classes,
            } => {
                let fwd = MlpForward::run(theta, *features, *hidden, *classes, &ex.features);
                fwd.gradient(theta, &ex.features, ex.observed_label, &mut g);
            }
        }
        Ok(g)
    }

    /// Mean gradient over `batch`.
    pub fn batch_gradient(&self, theta: &[f64], batch: &[Example]) -> Result<ParamVector> {
        let mut g = vec![0.0; self.dim()];
        if batch.is_empty() {
            return Ok(g);
        }
        let w = 1.0 / batch.len() as f64;
        for ex in batch {
            let gi = self.per_example_gradient(theta, ex)?;
            axpy(w, &gi, &mut g);
        }
        Ok(g)
    }

    /// Exact `nabla^2 L_batch(theta) v` for the mean loss over `batch`.
    /// Increments the HVP counter.
    pub fn hvp(&self, theta: &[f64], batch: &[Example], v: &[f64]) -> Result<ParamVector> {
        let out = self.hvp_uncounted(theta, batch, v)?;
        self.hvp_calls.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    fn hvp_uncounted(&self, theta: &[f64], batch: &[Example], v: &[f64]) -> Result<ParamVector> {
        let d = self.dim();
        check_dim(d, theta.len())?;
        check_dim(d, v.len())?;
        if let ModelKind::Quadratic { a, .. } = &self.kind {
            return a.matvec(v);
        }
        let mut out = vec![0.0; d];
        if batch.is_empty() {
            return Ok(out);
        }
        let w = 1.0 / batch.len() as f64;
        for ex in batch {
            self.check_example(theta, ex)?;
            match &self.kind {
                ModelKind::Logistic { features, classes } => {
                    let (p, c) = (*features, *classes);
                    let z = self.logistic_logits(theta, p, c, &ex.features);
                    let s = softmax(&z);
                    let mut rz = block_matvec(&v[..c * p], c, p, &ex.features);
                    for (ri, vb) in rz.iter_mut().zip(&v[c * p..]) {
                        *ri += vb;
                    }
                    let rdz = softmax_jvp(&s, &rz);
                    add_outer(&mut out[..c * p], &rdz, &ex.features, w);
                    axpy(w, &rdz, &mut out[c * p..]);
                }
                ModelKind::Mlp {
                    features,
                    hidden,
                    classes,
                } => {
                    let fwd = MlpForward::run(theta, *features, *hidden, *classes, &ex.features);
                    fwd.hvp_accumulate(theta, &ex.features, ex.observed_label, v, w, &mut out);
                }
                ModelKind::Quadratic { .. } => unreachable!(),
            }
        }
        Ok(out)
    }

    /// Explicit Hessian of the mean batch loss, one exact HVP per basis
    /// vector. Oracle use only; does not touch the HVP counter.
    pub fn explicit_hessian(&self, theta: &[f64], batch: &[Example]) -> Result<DenseMatrix> {
        let d = self.dim();
        if d > EXPLICIT_HESSIAN_MAX_DIM {
            return Err(SgoifError::DimensionMismatch {
                expected: EXPLICIT_HESSIAN_MAX_DIM,
                got: d,
            });
        }
        let mut cols = Vec::with_capacity(d);
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            cols.push(self.hvp_uncounted(theta, batch, &e)?);
        }
        let mut h = DenseMatrix::from_columns(&cols)?;
        h.symmetrize();
        Ok(h)
    }

    /// Kronecker-factor inputs per example; `None` unless the model is an MLP.
    pub fn kfac_samples(&self, theta: &[f64], batch: &[Example]) -> Result<Option<Vec<KfacSample>>> {
        let ModelKind::Mlp {
            features,
            hidden,
            classes,
        } = &self.kind
        else {
            return Ok(None);
        };
        let mut out = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_example(theta, ex)?;
            let fwd = MlpForward::run(theta, *features, *hidden, *classes, &ex.features);
            let mut dz = softmax(&fwd.logits);
            dz[ex.observed_label] -= 1.0;
            let w2 = &theta[MlpLayout::new(*features, *hidden, *classes).w2()];
            let dh = block_tr_matvec(w2, *classes, *hidden, &dz);
            let da: Vec<f64> = dh.iter().zip(&fwd.h).map(|(g, h)| g * (1.0 - h * h)).collect();
            let mut input1 = ex.features.clone();
            input1.push(1.0);
            let mut input2 = fwd.h.clone();
            input2.push(1.0);
            out.push(KfacSample {
                input1,
                grad1: da,
                input2,
                grad2: dz,
            });
        }
        Ok(Some(out))
    }
}

/// Offsets of the MLP parameter blocks.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpLayout {
    pub p: usize,
    pub h: usize,
    pub c: usize,
}

impl MlpLayout {
    pub fn new(p: usize, h: usize, c: usize) -> Self {
        Self { p, h, c }
    }
    pub fn w1(&self) -> std::ops::Range<usize> {
        0..self.h * self.p
    }
    pub fn b1(&self) -> std::ops::Range<usize> {
        let s = self.h * self.p;
        s..s + self.h
    }
    pub fn w2(&self) -> std::ops::Range<usize> {
        let s = self.h * self.p + self.h;
        s..s + self.c * self.h
    }
    pub fn b2(&self) -> std::ops::Range<usize> {
        let s = self.h * self.p + self.h + self.c * self.h;
        s..s + self.c
    }
}

struct MlpForward {
    layout: MlpLayout,
    h: Vec<f64>,
    logits: Vec<f64>,
}

impl MlpForward {
    fn run(theta: &[f64], p: usize, hidden: usize, c: usize, x: &[f64]) -> Self {
        let layout = MlpLayout::new(p, hidden, c);
        let mut a = block_matvec(&theta[layout.w1()], hidden, p, x);
        for (ai, bi) in a.iter_mut().zip(&theta[layout.b1()]) {
            *ai += bi;
        }
        let h: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
        let mut logits = block_matvec(&theta[layout.w2()], c, hidden, &h);
        for (zi, bi) in logits.iter_mut().zip(&theta[layout.b2()]) {
            *zi += bi;
        }
        Self { layout, h, logits }
    }

    fn gradient(&self, theta: &[f64], x: &[f64], label: usize, g: &mut [f64]) {
        let l = self.layout;
        let mut dz = softmax(&self.logits);
        dz[label] -= 1.0;
        add_outer(&mut g[l.w2()], &dz, &self.h, 1.0);
        g[l.b2()].copy_from_slice(&dz);
        let dh = block_tr_matvec(&theta[l.w2()], l.c, l.h, &dz);
        let da: Vec<f64> = dh.iter().zip(&self.h).map(|(g, h)| g * (1.0 - h * h)).collect();
        add_outer(&mut g[l.w1()], &da, x, 1.0);
        g[l.b1()].copy_from_slice(&da);
    }

    /// Accumulates `weight * H_example v` into `out` with the R-operator.
    fn hvp_accumulate(
        &self,
        theta: &[f64],
        x: &[f64],
        label: usize,
        v: &[f64],
        weight: f64,
        out: &mut [f64],
    ) {
        let l = self.layout;
        let w2 = &theta[l.w2()];
        let (v1, vb1, v2, vb2) = (&v[l.w1()], &v[l.b1()], &v[l.w2()], &v[l.b2()]);

        // forward tangents
        let mut ra = block_matvec(v1, l.h, l.p, x);
        for (r, b) in ra.iter_mut().zip(vb1) {
            *r += b;
        }
        let one_minus_h2: Vec<f64> = self.h.iter().map(|h| 1.0 - h * h).collect();
        let rh: Vec<f64> = ra.iter().zip(&one_minus_h2).map(|(r, s)| r * s).collect();
        let mut rz = block_matvec(v2, l.c, l.h, &self.h);
        let w2rh = block_matvec(w2, l.c, l.h, &rh);
        for i in 0..l.c {
            rz[i] += w2rh[i] + vb2[i];
        }

        // backward pass and its tangent
        let s = softmax(&self.logits);
        let mut dz = s.clone();
        dz[label] -= 1.0;
        let rdz = softmax_jvp(&s, &rz);

        add_outer(&mut out[l.w2()], &rdz, &self.h, weight);
        add_outer(&mut out[l.w2()], &dz, &rh, weight);
        axpy(weight, &rdz, &mut out[l.b2()]);

        let dh = block_tr_matvec(w2, l.c, l.h, &dz);
        let mut rdh = block_tr_matvec(v2, l.c, l.h, &dz);
        let w2t_rdz = block_tr_matvec(w2, l.c, l.h, &rdz);
        for i in 0..l.h {
            rdh[i] += w2t_rdz[i];
        }
        let rda: Vec<f64> = (0..l.h)
            .map(|i| rdh[i] * one_minus_h2[i] - 2.0 * dh[i] * self.h[i] * rh[i])
            .collect();
        add_outer(&mut out[l.w1()], &rda, x, weight);
        axpy(weight, &rda, &mut out[l.b1()]);
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// `eta0 / (1 + t / t0)`
    InverseTime { eta0: f64, t0: f64 },
}

impl LrSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant(eta) => eta,
            LrSchedule::InverseTime { eta0, t0 } => eta0 / (1.0 + t as f64 / t0),
        }
    }
}

/// Gradient-norm EMA decay.
pub const GRAD_NORM_EMA_DECAY: f64 = 0.9;

/// Training state threaded through the step loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub theta: ParamVector,
    pub step: usize,
    pub eta_t: f64,
    pub lambda_w: f64,
    pub grad_norm_ema: f64,
}

impl TrainState {
    pub fn new(theta: ParamVector, schedule: &LrSchedule, lambda_w: f64) -> Self {
        Self {
            theta,
            step: 0,
            eta_t: schedule.at(0),
            lambda_w,
            grad_norm_ema: 0.0,
        }
    }
}

/// One step of minibatch SGD with weight decay:
/// `theta <- theta - eta_t (grad L_batch + lambda_w theta)`.
pub fn sgd_step(
    state: &TrainState,
    model: &ModelHandle,
    batch: &[Example],
    schedule: &LrSchedule,
) -> Result<TrainState> {
    if batch.is_empty() {
        return Err(SgoifError::ConfigInvalid("sgd_step needs a non-empty batch".into()));
    }
    let g = model.batch_gradient(&state.theta, batch)?;
    let eta = state.eta_t;
    let theta: Vec<f64> = state
        .theta
        .iter()
        .zip(&g)
        .map(|(t, gi)| t - eta * (gi + state.lambda_w * t))
        .collect();
    let step = state.step + 1;
    Ok(TrainState {
        theta,
        step,
        eta_t: schedule.at(step),
        lambda_w: state.lambda_w,
        grad_norm_ema: GRAD_NORM_EMA_DECAY * state.grad_norm_ema
            + (1.0 - GRAD_NORM_EMA_DECAY) * norm(&g),
    })
}
