use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use log::{debug, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ScoreSign, Task};
use crate::anchors::{coverage_check, AnchorBank, Coverage, ReplaceOutcome, ReplaceTrigger, ReplacementContext};
use crate::curvature::{Backend, CurvatureBatch, CurvatureSurrogate};
use crate::data::{gaussian_blobs, inject_label_noise, Dataset};
use crate::error::{Result, SgoifError};
use crate::ihvp::{
    adapt_truncation, cg_refine, residual_trend, subspace_solve, IdentityPreconditioner, Preconditioner,
    StepRule, SubspaceState, TREND_WINDOW,
};
use crate::metrics::{compute_kendall_tau, DetectionMetrics};
use crate::model::{sgd_step, Example, LrSchedule, ModelHandle, TrainState};
use crate::numerics::{axpy, DenseMatrix, ParamVector};
use crate::scorer::{rank_descending, score_example, InfluenceRecord, ProbeWindow, RefinementTrigger};
use crate::stability::StabilitySignals;

/// Top fraction used for the adjacent-checkpoint Kendall tau.
pub const KENDALL_TOP_FRACTION: f64 = 0.01;
/// `P@k` levels reported, in percent.
pub const P_AT_K_PERCENT: [u32; 3] = [1, 5, 10];

// Independent random streams, so that switching a component on or off never
// shifts the draws of another.
const STREAM_DATA: u64 = 1;
const STREAM_TRAIN_NOISE: u64 = 2;
const STREAM_POOL_NOISE: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_BATCH: u64 = 5;
const STREAM_SKETCH: u64 = 6;
const STREAM_ANCHORS: u64 = 7;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training set, held-out anchor pool and model for one seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: Dataset,
    pub pool: Dataset,
    pub model: ModelHandle,
}

/// Builds the data and model. Depends only on the task fields and the seed,
/// so every ablation variant sees the same examples.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_DATA);
    let total = cfg.n + cfg.anchor_pool;
    match cfg.task {
        Task::Quadratic => {
            let d = cfg.d;
            let b: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b = DenseMatrix::new(d, d, b)?;
            let mut a = b.gram().scaled(1.0 / d as f64);
            a.add_diagonal(0.1);
            a.symmetrize();
            let lin: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let examples: Vec<Example> = (0..total)
                .map(|_| Example {
                    features: (0..d).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect(),
                    observed_label: 0,
                    true_label: 0,
                })
                .collect();
            let (train, pool) = examples.split_at(cfg.n);
            Ok(Experiment {
                train: Dataset {
                    examples: train.to_vec(),
                    classes: 1,
                },
                pool: Dataset {
                    examples: pool.to_vec(),
                    classes: 1,
                },
                model: ModelHandle::quadratic(a, lin)?,
            })
        }
        Task::LogisticNoise | Task::MlpNoise => {
            let all = gaussian_blobs(&mut rng, total, cfg.d, cfg.classes, cfg.separation);
            let train = Dataset::new(all.examples[..cfg.n].to_vec(), cfg.classes)?;
            let pool = Dataset::new(all.examples[cfg.n..].to_vec(), cfg.classes)?;
            let train = inject_label_noise(
                &train,
                cfg.noise_rate,
                cfg.noise_mode,
                cfg.sparsity,
                &mut stream(cfg.seed, STREAM_TRAIN_NOISE),
            )?;
            // the held-out pool is drawn from the same corrupted distribution
            let pool_rate = if cfg.noise_rate * cfg.anchor_pool as f64 >= 1.0 {
                cfg.noise_rate
            } else {
                0.0
            };
            let pool = inject_label_noise(
                &pool,
                pool_rate,
                cfg.noise_mode,
                cfg.sparsity,
                &mut stream(cfg.seed, STREAM_POOL_NOISE),
            )?;
            let model = if cfg.task == Task::LogisticNoise {
                ModelHandle::logistic(cfg.d, cfg.classes)?
            } else {
                ModelHandle::mlp(cfg.d, cfg.hidden, cfg.classes)?
            };
            Ok(Experiment { train, pool, model })
        }
    }
}

fn schedules(cfg: &ExperimentConfig) -> (LrSchedule, StepRule) {
    let lr = if cfg.lr_decay_t0 > 0.0 {
        LrSchedule::InverseTime {
            eta0: cfg.learning_rate,
            t0: cfg.lr_decay_t0,
        }
    } else {
        LrSchedule::Constant(cfg.learning_rate)
    };
    let rho = if cfg.rho_t0 > 0.0 {
        StepRule::RobbinsMonro {
            rho0: cfg.rho0,
            t0: cfg.rho_t0,
        }
    } else {
        StepRule::Constant { rho0: cfg.rho0 }
    };
    (lr, rho)
}

/// One evaluation checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub p_at_1: Option<f64>,
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
    /// Kendall tau against the previous checkpoint's ranking.
    pub kendall_tau_prev: Option<f64>,
    pub mean_confidence: f64,
    pub mean_residual: f64,
    pub tau_t: f64,
}

/// Everything `metrics.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub p_at_k: BTreeMap<String, Option<f64>>,
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
    pub kendall_tau_adjacent: Option<f64>,
    pub hvp_count_per_step: f64,
    pub hvp_count_total: u64,
    /// SG-OIF wall time over plain SGD wall time; only with `measure_overhead`.
    pub wall_overhead_ratio: Option<f64>,
    pub noisy_examples: usize,
    pub replacements: usize,
    pub rejected_replacements: usize,
    pub cg_refinements: usize,
    pub nonfinite_resets: usize,
    pub residual_trace: Vec<f64>,
    pub confidence_trace: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

/// One row of `scores_epoch_<k>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub example_id: usize,
    pub noise_score: f64,
    pub aggregated: f64,
    pub ci_half_width: Option<f64>,
    pub visits: usize,
    pub noisy: bool,
    /// Noise probability from a median/MAD-centred logistic map of the score,
    /// divided by the temperature when temperature scaling is on.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump {
    pub epoch: usize,
    pub step: usize,
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRow {
    pub step: usize,
    pub eta_t: f64,
    pub g_bar_t: f64,
    pub beta_tilde_t: f64,
    pub gamma_t: f64,
    pub tau_t: f64,
    pub rho_t: f64,
    pub mean_c: f64,
    pub min_c: f64,
    pub max_c: f64,
    pub lambda_min: f64,
    pub hvp_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRow {
    pub step: usize,
    pub anchor_id: usize,
    pub residual_norm: f64,
    pub c_v: f64,
    pub neumann_k: usize,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub scores: Vec<ScoreDump>,
    pub controller_trace: Vec<ControllerRow>,
    pub solver_trace: Vec<SolverRow>,
}

struct Replacer<'a> {
    model: &'a ModelHandle,
    theta: &'a [f64],
    pool: &'a Dataset,
    surrogate: &'a CurvatureSurrogate,
    subspace: &'a SubspaceState,
    apply_h: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
}

impl ReplacementContext for Replacer<'_> {
    fn gradient(&self, source: usize) -> Result<ParamVector> {
        self.model.per_example_gradient(self.theta, &self.pool.examples[source])
    }

    fn direction(&self, g: &[f64]) -> Result<ParamVector> {
        self.surrogate.precond_apply(g)
    }

    fn warm_start(&self, g: &[f64]) -> Result<ParamVector> {
        if self.subspace.rank() > 0 {
            subspace_solve(self.subspace, g, &self.apply_h, &self.surrogate.diagonal_part())
        } else {
            self.surrogate.precond_apply(g)
        }
    }
}

fn at_step(step: usize, anchor: Option<usize>) -> impl FnOnce(SgoifError) -> SgoifError {
    move |e| match e {
        e @ SgoifError::Step { .. } => e,
        e => SgoifError::Step {
            step,
            anchor,
            source: Box::new(e),
        },
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Logistic map of scores centred at the median and scaled by the MAD; with
/// temperature scaling the argument is further divided by `temperature`.
pub fn score_probabilities(scores: &[f64], temperature: Option<f64>) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = scores.iter().map(|s| (s - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let mad = median(&dev);
    let spread = if mad > 0.0 { mad } else { 1.0 };
    let t = temperature.unwrap_or(1.0);
    scores
        .iter()
        .map(|s| {
            let z = match temperature {
                Some(_) => (s - med) / (spread * t),
                None => s - med,
            };
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Runs the SG-OIF step loop on the current rayon pool.
pub fn run_sgoif(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let exp = build_experiment(cfg)?;
    run_on(cfg, &exp)
}

/// Runs with a dedicated pool of `threads` workers.
pub fn run_sgoif_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutput> {
    with_threads(threads, || run_sgoif(cfg))
}

pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            warn!("could not build a {threads}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

/// Runs the step loop on a prepared experiment.
pub fn run_on(cfg: &ExperimentConfig, exp: &Experiment) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let model = exp.model.clone();
    model.reset_hvp_count();
    let train = &exp.train;
    let pool = &exp.pool;
    let n = train.len();
    let d = model.dim();
    let (lr, rho_rule) = schedules(cfg);
    let shift = cfg.weight_decay + cfg.alpha_damping;

    let mut batch_rng = stream(cfg.seed, STREAM_BATCH);
    let mut sketch_rng = stream(cfg.seed, STREAM_SKETCH);
    let mut anchor_rng = stream(cfg.seed, STREAM_ANCHORS);

    let mut state = TrainState::new(model.init_theta(&mut stream(cfg.seed, STREAM_INIT)), &lr, cfg.weight_decay);
    let mut surrogate = CurvatureSurrogate::new(cfg.backend, &model, cfg.alpha_damping)?;
    let mut subspace = SubspaceState::new(cfg.effective_rank(), cfg.t_r);

    let mut picks = sample(&mut anchor_rng, pool.len(), cfg.k_anchors).into_vec();
    picks.sort_unstable();
    let chosen: BTreeSet<usize> = picks.iter().copied().collect();
    let initial = picks
        .iter()
        .map(|&s| Ok((s, model.per_example_gradient(&state.theta, &pool.examples[s])?)))
        .collect::<Result<Vec<_>>>()?;
    let rest: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
    let mut bank = AnchorBank::new(initial, rest, cfg.t_a, cfg.coverage_threshold)?;
    if let Some(k) = cfg.fixed_neumann_k {
        for a in &mut bank.anchors {
            a.neumann_k = k;
        }
    }

    let mut windows = vec![ProbeWindow::new(cfg.score_window); n];
    let mut trigger = RefinementTrigger::new(cfg.trigger_quantile, cfg.confidence_floor);
    let mut pending_cg: BTreeSet<usize> = BTreeSet::new();
    let noisy: HashSet<usize> = (0..n).filter(|&i| train.examples[i].is_noisy()).collect();

    let mut controller_trace = Vec::with_capacity(cfg.steps);
    let mut solver_trace = Vec::with_capacity(cfg.steps * cfg.k_anchors);
    let mut scores = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut prev_ranking: Option<Vec<usize>> = None;
    let (mut replacements, mut rejected, mut cg_runs, mut resets) = (0, 0, 0, 0);

    for t in 0..cfg.steps {
        let mut idx = sample(&mut batch_rng, n, cfg.batch_size).into_vec();
        idx.sort_unstable();
        let batch: Vec<Example> = idx.iter().map(|&i| train.examples[i].clone()).collect();
        let eta_t = state.eta_t;
        state = sgd_step(&state, &model, &batch, &lr).map_err(at_step(t, None))?;
        let theta = state.theta.as_slice();

        let grads: Vec<ParamVector> = batch
            .par_iter()
            .map(|ex| model.per_example_gradient(theta, ex))
            .collect::<Result<_>>()
            .map_err(at_step(t, None))?;
        let kfac = if surrogate.backend() == Backend::KfacBlocks {
            model.kfac_samples(theta, &batch).map_err(at_step(t, None))?
        } else {
            None
        };
        surrogate
            .update(
                &CurvatureBatch {
                    grads: &grads,
                    kfac: kfac.as_deref(),
                },
                t,
            )
            .map_err(at_step(t, None))?;

        let apply_h = |v: &[f64]| -> Vec<f64> {
            let mut hv = model.hvp(theta, &batch, v).expect("parameter dimension is fixed");
            axpy(shift, v, &mut hv);
            hv
        };

        if subspace.due(t) {
            subspace
                .update(&grads, &apply_h, d, &mut sketch_rng, t)
                .map_err(at_step(t, None))?;
            if surrogate.backend() == Backend::LowrankPlusDiag {
                surrogate
                    .set_lowrank(subspace.q.clone(), subspace.lambda.clone())
                    .map_err(at_step(t, None))?;
            }
        }

        // anchor IHVP refinement
        let rho = rho_rule.at(t);
        let precond: &(dyn Preconditioner + Sync) = if cfg.precond {
            &surrogate
        } else {
            &IdentityPreconditioner
        };
        let adaptive = cfg.fixed_neumann_k.is_none();
        let outcomes: Vec<(usize, Result<()>)> = bank
            .anchors
            .par_iter_mut()
            .zip(bank.sources.par_iter())
            .map(|(a, &src)| {
                let out = model
                    .per_example_gradient(theta, &pool.examples[src])
                    .and_then(|g| a.set_target(g))
                    .and_then(|_| a.refine(&apply_h, precond, rho));
                if adaptive {
                    let trend = residual_trend(&a.history_vec(), TREND_WINDOW);
                    a.neumann_k = adapt_truncation(a.neumann_k, a.residual_norm, trend, cfg.max_neumann_k);
                }
                (a.anchor_id, out)
            })
            .collect();
        for (id, out) in outcomes {
            match out {
                Ok(()) => {}
                Err(SgoifError::NonFiniteIterate { .. }) => {
                    warn!("step {t}: anchor {id} produced a non-finite iterate and was reset");
                    resets += 1;
                }
                Err(e) => return Err(at_step(t, Some(id))(e)),
            }
        }

        let gamma_t = surrogate.condition_proxy().value();
        let signals = StabilitySignals::compute(
            eta_t,
            state.grad_norm_ema,
            cfg.weight_decay,
            n,
            cfg.gamma1,
            cfg.gamma2,
            gamma_t,
            cfg.kappa,
        );
        for a in &mut bank.anchors {
            let hist = a.history_vec();
            let prev = &hist[..hist.len().saturating_sub(1)];
            a.c_v = signals.gate(cfg.gate, a.residual_norm, prev);
        }

        // score this minibatch
        let (weights, no_conf) = bank.aggregation_weights();
        let records: Vec<InfluenceRecord> = idx
            .par_iter()
            .zip(grads.par_iter())
            .map(|(&i, g)| score_example(i, g, &bank.anchors, &weights, no_conf))
            .collect::<Result<_>>()
            .map_err(at_step(t, None))?;
        let threshold = trigger.threshold();
        for rec in &records {
            if cfg.trigger {
                pending_cg.extend(trigger.check_with_threshold(rec, &bank.anchors, threshold));
            }
            windows[rec.example_id].push(rec.aggregated, rec.probes(&weights));
        }
        trigger.observe(records.iter().flat_map(|r| r.phi_dot_g.iter().copied()));

        // periodic anchor maintenance
        let mut cg_iters: BTreeMap<usize, usize> = BTreeMap::new();
        let mut lambda_min = f64::NAN;
        if t > 0 && t % cfg.t_a == 0 {
            match bank.build_gram() {
                Ok(report) => {
                    lambda_min = report.lambda_min;
                    let coverage = coverage_check(&report, bank.coverage_threshold);
                    let kind = if coverage == Coverage::RefreshNeeded {
                        ReplaceTrigger::Coverage
                    } else {
                        ReplaceTrigger::Periodic
                    };
                    let ctx = Replacer {
                        model: &model,
                        theta,
                        pool,
                        surrogate: &surrogate,
                        subspace: &subspace,
                        apply_h: &apply_h,
                    };
                    match bank
                        .replace_anchors(&report, kind, &ctx, &mut anchor_rng, t)
                        .map_err(at_step(t, None))?
                    {
                        ReplaceOutcome::Replaced {
                            removed_anchor,
                            new_anchor,
                            ..
                        } => {
                            debug!("step {t}: anchor {removed_anchor} replaced by {new_anchor}");
                            replacements += 1;
                        }
                        ReplaceOutcome::Rejected { .. } => rejected += 1,
                        ReplaceOutcome::EmptyPool => {}
                    }
                }
                Err(e) => warn!("step {t}: skipping anchor replacement ({e})"),
            }

            if cfg.trigger {
                let tol = signals.tau_t / 2.0;
                for a in bank.anchors.iter_mut().filter(|a| pending_cg.contains(&a.anchor_id)) {
                    match cg_refine(a, &apply_h, tol, cfg.cg_max_iters, t) {
                        Ok(out) => {
                            cg_iters.insert(a.anchor_id, out.iterations);
                        }
                        Err(SgoifError::CurvatureBreakdown(v)) => {
                            warn!("step {t}: CG breakdown on anchor {} (p^T H p = {v:.3e})", a.anchor_id)
                        }
                        Err(SgoifError::NonFiniteIterate { .. }) => resets += 1,
                        Err(e) => return Err(at_step(t, Some(a.anchor_id))(e)),
                    }
                    let hist = a.history_vec();
                    a.c_v = signals.gate(cfg.gate, a.residual_norm, &hist[..hist.len().saturating_sub(1)]);
                    cg_runs += 1;
                }
                pending_cg.clear();
            }
        }
        if lambda_min.is_nan() {
            lambda_min = bank.build_gram().map(|r| r.lambda_min).unwrap_or(0.0);
        }

        let cs = bank.confidences();
        controller_trace.push(ControllerRow {
            step: t,
            eta_t,
            g_bar_t: signals.g_bar_t,
            beta_tilde_t: signals.beta_tilde_t,
            gamma_t: signals.gamma_t,
            tau_t: signals.tau_t,
            rho_t: rho,
            mean_c: mean(cs.iter().copied()),
            min_c: cs.iter().copied().fold(f64::INFINITY, f64::min),
            max_c: cs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            lambda_min,
            hvp_total: model.hvp_count(),
        });
        for a in &bank.anchors {
            solver_trace.push(SolverRow {
                step: t,
                anchor_id: a.anchor_id,
                residual_norm: a.residual_norm,
                c_v: a.c_v,
                neumann_k: a.neumann_k,
                cg_iterations: cg_iters.get(&a.anchor_id).copied().unwrap_or(0),
            });
        }

        if (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.steps {
            let dump = evaluate(cfg, train, &windows, scores.len(), t + 1);
            let pairs: Vec<(usize, f64)> = dump.rows.iter().map(|r| (r.example_id, r.noise_score)).collect();
            let m = DetectionMetrics::compute(&pairs, &noisy);
            let ranking = rank_descending(&pairs);
            let tau_prev = prev_ranking
                .as_ref()
                .and_then(|p| compute_kendall_tau(p, &ranking, KENDALL_TOP_FRACTION));
            prev_ranking = Some(ranking);
            checkpoints.push(Checkpoint {
                step: t + 1,
                p_at_1: m.p_at_1,
                aupr: m.aupr,
                auroc: m.auroc,
                kendall_tau_prev: tau_prev,
                mean_confidence: mean(cs.iter().copied()),
                mean_residual: mean(bank.anchors.iter().map(|a| a.residual_norm)),
                tau_t: signals.tau_t,
            });
            scores.push(dump);
        }
    }

    let sgoif_secs = started.elapsed().as_secs_f64();
    let wall_overhead_ratio = if cfg.measure_overhead {
        let base = plain_sgd_seconds(cfg, exp)?;
        Some(if base > 0.0 { sgoif_secs / base } else { f64::INFINITY })
    } else {
        None
    };

    let last = scores.last().expect("at least one checkpoint");
    let pairs: Vec<(usize, f64)> = last.rows.iter().map(|r| (r.example_id, r.noise_score)).collect();
    let p_at_k = P_AT_K_PERCENT
        .iter()
        .map(|&k| (k.to_string(), crate::metrics::compute_p_at_k(&pairs, &noisy, k as f64 / 100.0)))
        .collect();
    let taus: Vec<f64> = checkpoints.iter().filter_map(|c| c.kendall_tau_prev).collect();
    let final_cp = checkpoints.last().expect("at least one checkpoint");
    let report = MetricsReport {
        config: cfg.clone(),
        p_at_k,
        aupr: final_cp.aupr,
        auroc: final_cp.auroc,
        kendall_tau_adjacent: if taus.is_empty() { None } else { Some(mean(taus)) },
        hvp_count_per_step: model.hvp_count() as f64 / cfg.steps as f64,
        hvp_count_total: model.hvp_count(),
        wall_overhead_ratio,
        noisy_examples: noisy.len(),
        replacements,
        rejected_replacements: rejected,
        cg_refinements: cg_runs,
        nonfinite_resets: resets,
        residual_trace: checkpoints.iter().map(|c| c.mean_residual).collect(),
        confidence_trace: checkpoints.iter().map(|c| c.mean_confidence).collect(),
        checkpoints,
    };
    Ok(RunOutput {
        report,
        scores,
        controller_trace,
        solver_trace,
    })
}

fn evaluate(
    cfg: &ExperimentConfig,
    train: &Dataset,
    windows: &[ProbeWindow],
    epoch: usize,
    step: usize,
) -> ScoreDump {
    let aggregated: Vec<f64> = windows
        .iter()
        .map(|w| {
            if cfg.calibration {
                w.mean()
            } else {
                w.latest()
            }
            .unwrap_or(0.0)
        })
        .collect();
    let noise: Vec<f64> = aggregated
        .iter()
        .map(|a| match cfg.score_sign {
            ScoreSign::Magnitude => a.abs(),
            ScoreSign::Negative => -a,
        })
        .collect();
    let probs = score_probabilities(&noise, cfg.temperature.then_some(cfg.temperature_value));
    let rows = (0..windows.len())
        .map(|i| ScoreRow {
            example_id: i,
            noise_score: noise[i],
            aggregated: aggregated[i],
            ci_half_width: if cfg.calibration {
                windows[i].half_width(cfg.alpha_level)
            } else {
                None
            },
            visits: windows[i].visits(),
            noisy: train.examples[i].is_noisy(),
            probability: probs[i],
        })
        .collect();
    ScoreDump { epoch, step, rows }
}

/// Wall time of the same minibatch SGD without any influence machinery.
fn plain_sgd_seconds(cfg: &ExperimentConfig, exp: &Experiment) -> Result<f64> {
    let (lr, _) = schedules(cfg);
    let mut rng = stream(cfg.seed, STREAM_BATCH);
    let mut state = TrainState::new(exp.model.init_theta(&mut stream(cfg.seed, STREAM_INIT)), &lr, cfg.weight_decay);
    let n = exp.train.len();
    let started = Instant::now();
    for _ in 0..cfg.steps {
        let mut idx = sample(&mut rng, n, cfg.batch_size).into_vec();
        idx.sort_unstable();
        let batch: Vec<Example> = idx.iter().map(|&i| exp.train.examples[i].clone()).collect();
        state = sgd_step(&state, &exp.model, &batch, &lr)?;
    }
    Ok(started.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n: 200,
            d: 5,
            anchor_pool: 40,
            steps: 120,
            eval_every: 40,
            t_a: 30,
            t_r: 20,
            k_anchors: 4,
            r: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn datasets_depend_only_on_seed() {
        let a = build_experiment(&small()).unwrap();
        let mut other = small();
        other.gate = crate::stability::GateKind::None;
        other.precond = false;
        let b = build_experiment(&other).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.train.noisy_count(), 40);
        assert_eq!(a.pool.noisy_count(), 8);
    }

    #[test]
    fn noiseless_run_reports_null_detection_metrics() {
        let cfg = ExperimentConfig {
            noise_rate: 0.0,
            ..small()
        };
        let out = run_sgoif(&cfg).unwrap();
        assert_eq!(out.report.noisy_examples, 0);
        assert_eq!(out.report.p_at_k["1"], None);
        assert_eq!(out.report.aupr, None);
        assert_eq!(out.report.auroc, None);
    }

    #[test]
    fn run_emits_checkpoints_and_traces() {
        let cfg = small();
        let out = run_sgoif(&cfg).unwrap();
        assert_eq!(out.scores.len(), 3);
        assert_eq!(out.report.checkpoints.len(), 3);
        assert_eq!(out.controller_trace.len(), 120);
        assert_eq!(out.solver_trace.len(), 120 * 4);
        assert!(out.report.hvp_count_per_step > 0.0);
        for c in &out.controller_trace {
            assert!(c.tau_t > 0.0);
            assert!((0.0..=1.0).contains(&c.mean_c));
        }
        for v in [out.report.aupr, out.report.auroc].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn quadratic_and_mlp_tasks_run() {
        let q = ExperimentConfig {
            task: Task::Quadratic,
            noise_rate: 0.0,
            ..small()
        };
        let out = run_sgoif(&q).unwrap();
        assert_eq!(out.report.aupr, None);
        let m = ExperimentConfig {
            task: Task::MlpNoise,
            hidden: 4,
            backend: Backend::KfacBlocks,
            ..small()
        };
        run_sgoif(&m).unwrap();
    }

    #[test]
    fn temperature_changes_only_probabilities() {
        let cfg = small();
        let a = run_sgoif(&cfg).unwrap();
        let b = run_sgoif(&ExperimentConfig {
            temperature_value: 4.0,
            ..cfg
        })
        .unwrap();
        let (ra, rb) = (&a.scores[2].rows, &b.scores[2].rows);
        assert!(ra.iter().zip(rb).all(|(x, y)| x.noise_score == y.noise_score));
        assert!(ra.iter().zip(rb).any(|(x, y)| x.probability != y.probability));
    }

    #[test]
    fn probabilities_are_monotone() {
        let s = [0.1, 3.0, -1.0, 0.5, 0.5];
        for t in [None, Some(1.0), Some(0.25)] {
            let p = score_probabilities(&s, t);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] < s[j] {
                        assert!(p[i] < p[j]);
                    }
                }
            }
        }
    }
}
