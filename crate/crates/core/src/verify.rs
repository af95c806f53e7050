//! Randomized verification runners: analytic gradients against central
//! differences, and the Hungarian solver against exhaustive search.
//!
//! Trial `t` draws from its own seeded stream, so results do not depend on
//! the execution strategy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{ciou_grad_raw, ciou_loss_frozen_alpha, ciou_terms_raw};
use crate::losses::{
    contrastive_objective, contrastive_objective_grad, hungarian_forward, hungarian_grad_with, hungarian_loss_fixed,
    GroundTruth, LossWeights, PredictionSet, QueryPrediction,
};
use crate::matching::{brute_force, hungarian, CostMatrix};
use crate::numerics::{central_diff_grad, l2_normalize, max_rel_err, DEFAULT_NORM_EPS};
use crate::synthdata::{random_box, stream};

/// Step used by the gradient checks. Box coordinates are small, so the
/// truncation error of the default step would dominate the tolerance.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ciou,
    Contrastive,
    Hungarian,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Contrastive, LossKind::Ciou, LossKind::Hungarian];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ciou => "ciou",
            LossKind::Contrastive => "contrastive",
            LossKind::Hungarian => "hungarian",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ciou" => Ok(LossKind::Ciou),
            "contrastive" => Ok(LossKind::Contrastive),
            "hungarian" => Ok(LossKind::Hungarian),
            other => Err(Error::InvalidConfig(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub loss: LossKind,
    pub trials: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_rel_err: f64,
    /// Trials whose error exceeded `tol`.
    pub failures: Vec<usize>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ciou_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = random_box(rng).to_array();
    let g = random_box(rng).to_array();
    let alpha = ciou_terms_raw(p, g)?.alpha;
    let analytic = ciou_grad_raw(p, g)?;
    let fd = central_diff_grad(
        |x| ciou_loss_frozen_alpha([x[0], x[1], x[2], x[3]], g, alpha).unwrap_or(f64::NAN),
        &p,
        GRADCHECK_STEP,
    )?;
    Ok(max_rel_err(&analytic, &fd))
}

fn contrastive_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n_pairs = rng.random_range(1..=5);
    let dim = rng.random_range(2..=8);
    let tau = rng.random_range(0.07..1.0);
    let emb = (0..2 * n_pairs)
        .map(|_| l2_normalize(&(0..dim).map(|_| gaussian(rng)).collect::<Vec<_>>(), DEFAULT_NORM_EPS))
        .collect::<Result<Vec<_>>>()?;
    // A random fixed-point-free involution.
    let mut order: Vec<usize> = (0..2 * n_pairs).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut pairing = vec![0; 2 * n_pairs];
    for c in order.chunks(2) {
        pairing[c[0]] = c[1];
        pairing[c[1]] = c[0];
    }
    let (_, grad) = contrastive_objective_grad(&emb, &pairing, tau)?;
    let flat: Vec<f64> = emb.concat();
    let fd = central_diff_grad(
        |x| {
            let e: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
            contrastive_objective(&e, &pairing, tau).unwrap_or(f64::NAN)
        },
        &flat,
        GRADCHECK_STEP,
    )?;
    Ok(max_rel_err(&grad.concat(), &fd))
}

fn hungarian_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = 3;
    let n_queries = rng.random_range(1..=6);
    let n_targets = rng.random_range(0..=n_queries);
    let gts: Vec<GroundTruth> = (0..n_targets)
        .map(|_| GroundTruth { class: rng.random_range(0..k), bbox: random_box(rng) })
        .collect();
    let queries: Vec<QueryPrediction> = (0..n_queries)
        .map(|_| QueryPrediction {
            logits: (0..=k).map(|_| gaussian(rng)).collect(),
            bbox: random_box(rng),
        })
        .collect();
    let preds = PredictionSet::new(k, queries)?;
    let wts = LossWeights::default();
    let fwd = hungarian_forward(&preds, &gts, &wts)?;
    let grad = hungarian_grad_with(&preds, &gts, &wts, &fwd)?;

    // Parameters: all logits, then all boxes.
    let nl = k + 1;
    let mut x: Vec<f64> = preds.queries().iter().flat_map(|q| q.logits.clone()).collect();
    x.extend(preds.queries().iter().flat_map(|q| q.bbox.to_array()));
    let f = |x: &[f64]| {
        let (l, b) = x.split_at(n_queries * nl);
        let logits: Vec<&[f64]> = l.chunks(nl).collect();
        let boxes: Vec<[f64; 4]> = b.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        hungarian_loss_fixed(&logits, &boxes, k, &gts, &wts, &fwd.assignment, &fwd.alphas).unwrap_or(f64::NAN)
    };
    let fd = central_diff_grad(f, &x, GRADCHECK_STEP)?;
    let mut analytic: Vec<f64> = grad.logits.concat();
    analytic.extend(grad.boxes.iter().flatten());
    Ok(max_rel_err(&analytic, &fd))
}

/// Compares the analytic gradient of `loss` with central differences on
/// `trials` random instances. Box losses are checked with the trade-off
/// weight `alpha` held at its value at the evaluation point, and the
/// Hungarian loss additionally with the assignment held fixed.
pub fn gradcheck(loss: LossKind, trials: usize, seed: u64, tol: f64, exec: Execution) -> Result<GradcheckSummary> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let errs = exec.map_range(trials, |t| {
        let mut rng = stream(seed, 1 + t as u64);
        match loss {
            LossKind::Ciou => ciou_trial(&mut rng),
            LossKind::Contrastive => contrastive_trial(&mut rng),
            LossKind::Hungarian => hungarian_trial(&mut rng),
        }
    });
    let errs = errs.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(GradcheckSummary {
        loss,
        trials,
        seed,
        tol,
        max_rel_err: errs.iter().copied().fold(0.0, f64::max),
        failures: errs.iter().enumerate().filter(|(_, e)| **e >= tol).map(|(i, _)| i).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchSummary {
    pub instances: usize,
    pub seed: u64,
    /// Instances whose optimal costs differ.
    pub mismatches: Vec<usize>,
    /// Instances where both costs agree but the chosen pairs differ.
    pub tie_break_differences: Vec<usize>,
}

impl MatchSummary {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Random cost matrix with `1..=max_targets` targets and up to
/// `max_queries` queries. Odd trials use small integer costs so that tied
/// optima are common.
pub fn random_cost_matrix(rng: &mut ChaCha8Rng, max_targets: usize, max_queries: usize, integer: bool) -> Result<CostMatrix> {
    let t = rng.random_range(1..=max_targets);
    let q = rng.random_range(t..=max_queries.max(t));
    let cost = (0..q * t)
        .map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) })
        .collect();
    CostMatrix::new(q, t, cost)
}

/// Solves `instances` random problems with both the Hungarian solver and
/// exhaustive search and compares the optimal totals for exact equality.
pub fn match_crosscheck(
    instances: usize,
    seed: u64,
    max_targets: usize,
    max_queries: usize,
    exec: Execution,
) -> Result<MatchSummary> {
    if max_targets == 0 || max_queries < max_targets {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= max_targets <= max_queries, got {max_targets} and {max_queries}"
        )));
    }
    let results = exec.map_range(instances, |i| {
        let mut rng = stream(seed, 1 + i as u64);
        let costs = random_cost_matrix(&mut rng, max_targets, max_queries, i % 2 == 1)?;
        let fast = hungarian(&costs)?;
        let slow = brute_force(&costs)?;
        Ok((fast.total_cost == slow.total_cost, fast.pairs == slow.pairs))
    });
    let results = results.into_iter().collect::<Result<Vec<(bool, bool)>>>()?;
    Ok(MatchSummary {
        instances,
        seed,
        mismatches: results.iter().enumerate().filter(|(_, r)| !r.0).map(|(i, _)| i).collect(),
        tie_break_differences: results.iter().enumerate().filter(|(_, r)| r.0 && !r.1).map(|(i, _)| i).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradchecks_pass() {
        for kind in LossKind::ALL {
            let s = gradcheck(kind, 40, 9, GRADCHECK_TOL, Execution::default()).unwrap();
            assert!(s.passed(), "{kind}: {s:?}");
        }
    }

    #[test]
    fn gradcheck_is_independent_of_execution() {
        let a = gradcheck(LossKind::Hungarian, 16, 3, GRADCHECK_TOL, Execution::Sequential).unwrap();
        let b = gradcheck(LossKind::Hungarian, 16, 3, GRADCHECK_TOL, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(gradcheck(LossKind::Ciou, 1, 0, 0.0, Execution::Sequential).is_err());
    }

    #[test]
    fn loss_kind_parses() {
        for k in LossKind::ALL {
            assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        }
        assert!("l2".parse::<LossKind>().is_err());
    }

    #[test]
    fn crosscheck_passes_with_no_tie_break_differences() {
        let s = match_crosscheck(300, 4, 6, 8, Execution::default()).unwrap();
        assert!(s.passed(), "{s:?}");
        assert!(s.tie_break_differences.is_empty(), "{s:?}");
        assert!(match_crosscheck(1, 0, 5, 4, Execution::Sequential).is_err());
    }
}
