//! Anchor bank: coverage auditing on the normalized Gram matrix, anchor
//! replacement and aggregation weights.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{check_dim, Result, SgoifError};
use crate::ihvp::AnchorState;
use crate::numerics::{axpy, dot, min_eigenvalue, norm, orthonormalize, scale, Cholesky, DenseMatrix, ParamVector};
use crate::snapshot::{ByteReader, ByteWriter};

pub const ANCHOR_MAGIC: &[u8; 8] = b"SGOIFAB1";
pub const DEFAULT_ANCHORS: usize = 8;
pub const DEFAULT_REFRESH_PERIOD: usize = 200;
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.1;
pub const CANDIDATE_SAMPLES: usize = 16;
const SINGULAR_GRAM: f64 = 1e-12;

/// Normalized anchor Gram matrix and its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct GramReport {
    pub g: DenseMatrix,
    pub lambda_min: f64,
    /// `1 / lambda_min`, infinite when `lambda_min <= 0`.
    pub projection_residual_bound_factor: f64,
    /// Bank positions of the columns that entered the Gram matrix.
    pub used: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Adequate,
    RefreshNeeded,
}

/// Why a replacement runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaceTrigger {
    Periodic,
    Coverage,
}

/// What `replace_anchors` did.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplaceOutcome {
    Replaced {
        removed_anchor: usize,
        new_anchor: usize,
        source: usize,
        lambda_before: f64,
        lambda_after: f64,
    },
    /// A coverage-triggered swap that would have lowered `lambda_min`.
    Rejected { lambda_before: f64, lambda_after: f64 },
    EmptyPool,
}

/// Hooks the bank needs from the surrounding step loop.
pub trait ReplacementContext {
    /// Gradient of candidate example `source` at the current parameters.
    fn gradient(&self, source: usize) -> Result<ParamVector>;
    /// Cheap map from a gradient to its approximate IHVP direction, used to
    /// rank candidates.
    fn direction(&self, g: &[f64]) -> Result<ParamVector>;
    /// Warm-start iterate for the chosen candidate.
    fn warm_start(&self, g: &[f64]) -> Result<ParamVector>;
}

/// The anchor set with its refresh policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    pub anchors: Vec<AnchorState>,
    /// Candidate-pool index behind each anchor.
    pub sources: Vec<usize>,
    pub refresh_period: usize,
    pub coverage_threshold: f64,
    /// Unused candidate-pool indices.
    pub candidate_pool: Vec<usize>,
    next_id: usize,
}

impl AnchorBank {
    /// Builds a bank from `(source, g_v)` pairs; the remaining pool indices
    /// stay available for replacement.
    pub fn new(
        initial: Vec<(usize, ParamVector)>,
        candidate_pool: Vec<usize>,
        refresh_period: usize,
        coverage_threshold: f64,
    ) -> Result<Self> {
        if initial.is_empty() {
            return Err(SgoifError::ConfigInvalid("anchor bank needs at least one anchor".into()));
        }
        let d = initial[0].1.len();
        let mut anchors = Vec::with_capacity(initial.len());
        let mut sources = Vec::with_capacity(initial.len());
        for (id, (source, g)) in initial.into_iter().enumerate() {
            check_dim(d, g.len())?;
            anchors.push(AnchorState::new(id, g));
            sources.push(source);
        }
        let next_id = anchors.len();
        Ok(Self {
            anchors,
            sources,
            refresh_period: refresh_period.max(1),
            coverage_threshold,
            candidate_pool,
            next_id,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.c_v).collect()
    }

    pub fn phis(&self) -> Vec<&[f64]> {
        self.anchors.iter().map(|a| a.phi_v.as_slice()).collect()
    }

    /// `G = Phi_hat^T Phi_hat` over the non-zero, normalized `phi_v`.
    pub fn build_gram(&self) -> Result<GramReport> {
        build_gram(&self.phis())
    }

    /// `w_v = c_v / sum c_u`, or all zeros plus the no-confidence flag.
    pub fn aggregation_weights(&self) -> (Vec<f64>, bool) {
        aggregation_weights(&self.confidences())
    }

    /// Trigger for this step, if any.
    pub fn replacement_due(&self, step: usize, coverage: Coverage) -> Option<ReplaceTrigger> {
        if coverage == Coverage::RefreshNeeded {
            Some(ReplaceTrigger::Coverage)
        } else if step > 0 && step % self.refresh_period == 0 {
            Some(ReplaceTrigger::Periodic)
        } else {
            None
        }
    }

    /// Replaces the lowest-confidence anchor (ties: smallest id) with the
    /// candidate, among [`CANDIDATE_SAMPLES`] sampled from the pool, whose
    /// normalized direction has the largest component orthogonal to the
    /// remaining anchors' span. The newcomer is warm-started with `c_v = 0`.
    /// A coverage-triggered swap that would lower `lambda_min` is undone.
    pub fn replace_anchors<R: Rng>(
        &mut self,
        report: &GramReport,
        trigger: ReplaceTrigger,
        ctx: &dyn ReplacementContext,
        rng: &mut R,
        step: usize,
    ) -> Result<ReplaceOutcome> {
        if self.candidate_pool.is_empty() {
            warn!("anchor replacement at step {step}: candidate pool is empty");
            return Ok(ReplaceOutcome::EmptyPool);
        }
        let victim = self
            .anchors
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.c_v
                    .total_cmp(&b.c_v)
                    .then(a.anchor_id.cmp(&b.anchor_id))
            })
            .map(|(i, _)| i)
            .expect("bank is never empty");

        let others: Vec<Vec<f64>> = self
            .anchors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != victim)
            .map(|(_, a)| a.phi_v.clone())
            .collect();
        let basis = orthonormalize(&others, 1e-10);

        let take = CANDIDATE_SAMPLES.min(self.candidate_pool.len());
        let mut picks: Vec<usize> = sample(rng, self.candidate_pool.len(), take).into_vec();
        picks.sort_unstable();
        let mut best: Option<(usize, f64, ParamVector)> = None;
        for pos in picks {
            let source = self.candidate_pool[pos];
            let g = ctx.gradient(source)?;
            let dir = ctx.direction(&g)?;
            let n = norm(&dir);
            if !(n > 0.0) || !n.is_finite() {
                continue;
            }
            let mut w = scale(1.0 / n, &dir);
            for q in &basis {
                let c = dot(q, &w);
                axpy(-c, q, &mut w);
            }
            let score = norm(&w);
            if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                best = Some((pos, score, g));
            }
        }
        let Some((pos, _, g)) = best else {
            warn!("anchor replacement at step {step}: no usable candidate");
            return Ok(ReplaceOutcome::EmptyPool);
        };

        let phi0 = ctx.warm_start(&g)?;
        let new_id = self.next_id;
        let mut fresh = AnchorState::with_phi(new_id, g, phi0)?;
        fresh.c_v = 0.0;
        fresh.last_refined_step = step;

        let lambda_before = report.lambda_min;
        let old_anchor = std::mem::replace(&mut self.anchors[victim], fresh);
        let source = self.candidate_pool[pos];
        let old_source = std::mem::replace(&mut self.sources[victim], source);
        let lambda_after = match self.build_gram() {
            Ok(r) => r.lambda_min,
            Err(_) => 0.0,
        };
        if trigger == ReplaceTrigger::Coverage && lambda_after < lambda_before {
            self.anchors[victim] = old_anchor;
            self.sources[victim] = old_source;
            return Ok(ReplaceOutcome::Rejected {
                lambda_before,
                lambda_after,
            });
        }
        self.next_id += 1;
        self.candidate_pool.swap_remove(pos);
        self.candidate_pool.push(old_source);
        self.candidate_pool.sort_unstable();
        Ok(ReplaceOutcome::Replaced {
            removed_anchor: old_anchor.anchor_id,
            new_anchor: new_id,
            source,
            lambda_before,
            lambda_after,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(ANCHOR_MAGIC);
        w.put_u64(self.anchors.len() as u64);
        w.put_u64(self.refresh_period as u64);
        w.put_f64(self.coverage_threshold);
        w.put_u64(self.next_id as u64);
        for (a, s) in self.anchors.iter().zip(&self.sources) {
            w.put_u64(a.anchor_id as u64);
            w.put_u64(*s as u64);
            w.put_f64(a.c_v);
            w.put_array(&a.g_v);
            w.put_array(&a.phi_v);
        }
        w.put_u64(self.candidate_pool.len() as u64);
        for p in &self.candidate_pool {
            w.put_u64(*p as u64);
        }
        w.finish()
    }

    /// Restores ids, targets, iterates and confidences; residuals are
    /// recomputed on the next solver call.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, ANCHOR_MAGIC)?;
        let k = r.get_u64()? as usize;
        let refresh_period = r.get_u64()? as usize;
        let coverage_threshold = r.get_f64()?;
        let next_id = r.get_u64()? as usize;
        let mut anchors = Vec::with_capacity(k);
        let mut sources = Vec::with_capacity(k);
        for _ in 0..k {
            let id = r.get_u64()? as usize;
            let source = r.get_u64()? as usize;
            let c = r.get_f64()?;
            let g = r.get_array()?;
            let phi = r.get_array()?;
            let mut a = AnchorState::with_phi(id, g, phi)?;
            a.c_v = c;
            anchors.push(a);
            sources.push(source);
        }
        let pool_len = r.get_u64()? as usize;
        let candidate_pool = (0..pool_len)
            .map(|_| r.get_u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        if anchors.is_empty() {
            return Err(SgoifError::Format("anchor snapshot holds no anchors".into()));
        }
        Ok(Self {
            anchors,
            sources,
            refresh_period: refresh_period.max(1),
            coverage_threshold,
            candidate_pool,
            next_id,
        })
    }
}

fn normalized_columns(phis: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut cols = Vec::new();
    let mut used = Vec::new();
    for (i, p) in phis.iter().enumerate() {
        let n = norm(p);
        if n > 0.0 && n.is_finite() {
            cols.push(scale(1.0 / n, p));
            used.push(i);
        } else {
            warn!("anchor column {i} has a zero IHVP and is left out of the Gram matrix");
        }
    }
    (cols, used)
}

/// Gram matrix of the normalized columns `phis`.
pub fn build_gram(phis: &[&[f64]]) -> Result<GramReport> {
    let (cols, used) = normalized_columns(phis);
    if cols.is_empty() {
        return Err(SgoifError::AllAnchorsZero);
    }
    let k = cols.len();
    let mut g = DenseMatrix::zeros(k, k);
    for i in 0..k {
        g.set(i, i, dot(&cols[i], &cols[i]));
        for j in i + 1..k {
            let v = dot(&cols[i], &cols[j]);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    let lambda_min = min_eigenvalue(&g)?;
    let projection_residual_bound_factor = if lambda_min > 0.0 {
        1.0 / lambda_min
    } else {
        f64::INFINITY
    };
    Ok(GramReport {
        g,
        lambda_min,
        projection_residual_bound_factor,
        used,
    })
}

/// `RefreshNeeded` iff `lambda_min < threshold`.
pub fn coverage_check(report: &GramReport, threshold: f64) -> Coverage {
    if report.lambda_min < threshold {
        Coverage::RefreshNeeded
    } else {
        Coverage::Adequate
    }
}

/// `(1 / lambda_min(G)) ||g - P_Phi g||^2`, with the projection computed from
/// the normal equations on the normalized columns.
pub fn projection_error_bound(report: &GramReport, g: &[f64], phis: &[&[f64]]) -> Result<f64> {
    if report.lambda_min <= SINGULAR_GRAM {
        return Err(SgoifError::SingularGram(report.lambda_min));
    }
    let residual = projection_residual(g, phis)?;
    Ok(report.projection_residual_bound_factor * residual * residual)
}

/// `||g - P_Phi g||` through the normal equations.
pub fn projection_residual(g: &[f64], phis: &[&[f64]]) -> Result<f64> {
    let (cols, _) = normalized_columns(phis);
    if cols.is_empty() {
        return Ok(norm(g));
    }
    for c in &cols {
        check_dim(g.len(), c.len())?;
    }
    let k = cols.len();
    let mut gram = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            gram.set(i, j, dot(&cols[i], &cols[j]));
        }
    }
    let rhs: Vec<f64> = cols.iter().map(|c| dot(c, g)).collect();
    let chol = Cholesky::factor(&gram).map_err(|_| SgoifError::SingularGram(0.0))?;
    let a = chol.solve(&rhs)?;
    let mut resid = g.to_vec();
    for (c, ai) in cols.iter().zip(&a) {
        axpy(-ai, c, &mut resid);
    }
    Ok(norm(&resid))
}

/// `w_v = c_v / sum c_u`; all zeros and `true` when no anchor has confidence.
pub fn aggregation_weights(c: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = c.iter().sum();
    if !(total > 0.0) {
        return (vec![0.0; c.len()], true);
    }
    (c.iter().map(|ci| ci / total).collect(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::symmetric_eigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    struct Ctx {
        grads: Vec<Vec<f64>>,
    }

    impl ReplacementContext for Ctx {
        fn gradient(&self, source: usize) -> Result<ParamVector> {
            Ok(self.grads[source].clone())
        }
        fn direction(&self, g: &[f64]) -> Result<ParamVector> {
            Ok(g.to_vec())
        }
        fn warm_start(&self, g: &[f64]) -> Result<ParamVector> {
            Ok(g.to_vec())
        }
    }

    fn bank_with_phis(phis: Vec<Vec<f64>>, pool: Vec<usize>) -> AnchorBank {
        let init = phis.iter().enumerate().map(|(i, p)| (100 + i, p.clone())).collect();
        let mut bank = AnchorBank::new(init, pool, 200, 0.1).unwrap();
        for (a, p) in bank.anchors.iter_mut().zip(phis) {
            a.phi_v = p;
            a.c_v = 1.0;
        }
        bank
    }

    #[test]
    fn gram_examples() {
        let bank = bank_with_phis(vec![e(4, 0), scale(3.0, &e(4, 1)), e(4, 2)], vec![]);
        let r = bank.build_gram().unwrap();
        assert_eq!(r.g, DenseMatrix::identity(3));
        assert!((r.lambda_min - 1.0).abs() < 1e-12);

        let v = vec![1.0, 2.0, 3.0];
        let r = build_gram(&[&v, &v]).unwrap();
        assert!(r.lambda_min.abs() <= 1e-10);
        assert_eq!(coverage_check(&r, 0.1), Coverage::RefreshNeeded);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let r = build_gram(&refs).unwrap();
        let (vals, _) = symmetric_eigen(&r.g).unwrap();
        assert!((r.lambda_min - vals[0]).abs() <= 1e-8);
        for i in 0..3 {
            assert!((r.g.get(i, i) - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_columns_are_excluded() {
        let z = vec![0.0; 3];
        assert!(matches!(build_gram(&[&z, &z]), Err(SgoifError::AllAnchorsZero)));
        let v = vec![1.0, 0.0, 0.0];
        let r = build_gram(&[&z, &v]).unwrap();
        assert_eq!(r.used, vec![1]);
    }

    #[test]
    fn coverage_boundary() {
        let mk = |l: f64| GramReport {
            g: DenseMatrix::identity(1),
            lambda_min: l,
            projection_residual_bound_factor: 1.0 / l,
            used: vec![0],
        };
        assert_eq!(coverage_check(&mk(1.0), 0.1), Coverage::Adequate);
        assert_eq!(coverage_check(&mk(0.05), 0.1), Coverage::RefreshNeeded);
        assert_eq!(coverage_check(&mk(0.1), 0.1), Coverage::Adequate);
    }

    #[test]
    fn projection_bound_examples() {
        let phis = [e(3, 0), e(3, 1)];
        let refs: Vec<&[f64]> = phis.iter().map(|c| c.as_slice()).collect();
        let r = build_gram(&refs).unwrap();
        assert_eq!(projection_error_bound(&r, &[2.0, -1.0, 0.0], &refs).unwrap(), 0.0);
        assert!((projection_error_bound(&r, &[2.0, -1.0, 3.0], &refs).unwrap() - 9.0).abs() < 1e-12);

        let v = vec![1.0, 1.0, 0.0];
        let r = build_gram(&[&v, &v]).unwrap();
        assert!(matches!(
            projection_error_bound(&r, &[0.0, 0.0, 1.0], &[&v, &v]),
            Err(SgoifError::SingularGram(_))
        ));
    }

    #[test]
    fn weights_examples() {
        assert_eq!(aggregation_weights(&[1.0; 4]), (vec![0.25; 4], false));
        assert_eq!(aggregation_weights(&[0.5, 0.0, 0.5]), (vec![0.5, 0.0, 0.5], false));
        assert_eq!(aggregation_weights(&[0.0, 0.0]), (vec![0.0, 0.0], true));
    }

    #[test]
    fn no_trigger_leaves_bank_unchanged() {
        let bank = bank_with_phis(vec![e(3, 0), e(3, 1)], vec![0]);
        let r = bank.build_gram().unwrap();
        assert_eq!(bank.replacement_due(7, coverage_check(&r, 0.1)), None);
        assert_eq!(bank.replacement_due(200, coverage_check(&r, 0.1)), Some(ReplaceTrigger::Periodic));
    }

    #[test]
    fn replacing_a_duplicate_improves_coverage() {
        let d = 5;
        let mut bank = bank_with_phis(vec![e(d, 0), e(d, 1), e(d, 1)], vec![0, 1, 2]);
        bank.anchors[2].c_v = 0.2;
        let ctx = Ctx {
            grads: vec![e(d, 0), e(d, 3), vec![0.0, 1.0, 0.0, 0.0, 0.1]],
        };
        let before = bank.build_gram().unwrap();
        assert!(before.lambda_min.abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = bank
            .replace_anchors(&before, ReplaceTrigger::Coverage, &ctx, &mut rng, 10)
            .unwrap();
        let after = bank.build_gram().unwrap();
        assert!(after.lambda_min > before.lambda_min);
        match out {
            ReplaceOutcome::Replaced { removed_anchor, source, .. } => {
                assert_eq!(removed_anchor, 2);
                assert_eq!(source, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(bank.anchors[2].c_v, 0.0);
        assert!(bank.candidate_pool.contains(&102));
    }

    #[test]
    fn single_anchor_bank_never_empties() {
        let mut bank = bank_with_phis(vec![e(3, 0)], vec![0]);
        let ctx = Ctx { grads: vec![e(3, 1)] };
        let r = bank.build_gram().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bank.replace_anchors(&r, ReplaceTrigger::Periodic, &ctx, &mut rng, 200).unwrap();
        assert_eq!(bank.len(), 1);
        let mut empty = bank_with_phis(vec![e(3, 0)], vec![]);
        let out = empty.replace_anchors(&r, ReplaceTrigger::Periodic, &ctx, &mut rng, 200).unwrap();
        assert_eq!(out, ReplaceOutcome::EmptyPool);
        assert_eq!(empty.len(), 1);
    }

    #[test]
    fn snapshot_roundtrip() {
        let bank = bank_with_phis(vec![e(3, 0), vec![0.5, -1.0, 2.0]], vec![4, 9]);
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..8], b"SGOIFAB1");
        let back = AnchorBank::from_bytes(&bytes).unwrap();
        assert_eq!(back.confidences(), bank.confidences());
        assert_eq!(back.phis(), bank.phis());
        assert_eq!(back.sources, bank.sources);
        assert_eq!(back.candidate_pool, bank.candidate_pool);
        assert!(AnchorBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(c in proptest::collection::vec(0.0..1.0f64, 1..20)) {
            let (w, none) = aggregation_weights(&c);
            if c.iter().sum::<f64>() > 0.0 {
                prop_assert!(!none);
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            } else {
                prop_assert!(none);
            }
        }

        #[test]
        fn gram_is_psd_with_unit_diagonal(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let r = build_gram(&refs).unwrap();
            prop_assert!(r.lambda_min >= -1e-10);
            for i in 0..r.g.rows() {
                prop_assert!((r.g.get(i, i) - 1.0).abs() <= 1e-10);
            }
        }

        #[test]
        fn projection_bound_dominates_residual(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = build_gram(&refs).unwrap();
            prop_assume!(r.lambda_min > 1e-9);
            // independent route: Gram-Schmidt basis of the span
            let q = orthonormalize(&cols, 1e-12);
            let mut resid = x.clone();
            for qi in &q {
                let c = dot(qi, &x);
                axpy(-c, qi, &mut resid);
            }
            let direct = norm(&resid).powi(2);
            prop_assert!(direct <= projection_error_bound(&r, &x, &refs).unwrap() * (1.0 + 1e-12));
        }
    }
}
