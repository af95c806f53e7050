//! Trainable objectives: multi-view contrastive loss, box regression loss,
//! and the Hungarian set-prediction loss, each with an analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{ciou_grad_raw, ciou_terms_raw, BoxCxcywh};
use crate::matching::{optimal_assignment, Assignment};
use crate::numerics::{dot, logsumexp_unchecked, norm, softmax_unchecked};

/// Default contrastive temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    /// Weight on the no-object term of unmatched queries.
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_iou: 2.0, lambda_l1: 4.0, no_object_weight: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_iou, self.lambda_l1, self.no_object_weight];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be >= 0: {self:?}")))
        }
    }
}

// ---------------------------------------------------------------------------
// Contrastive loss

/// `2N` embeddings with a fixed-point-free involutive pairing and a
/// temperature. Every embedding must be unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    embeddings: Vec<Vec<f64>>,
    pairing: Vec<usize>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, pairing: Vec<usize>, temperature: f64) -> Result<Self> {
        check_contrastive_inputs(&embeddings, &pairing, temperature)?;
        for (index, e) in embeddings.iter().enumerate() {
            let n = norm(e);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NonUnitEmbedding { index, norm: n });
            }
        }
        Ok(Self { embeddings, pairing, temperature })
    }

    /// Pairs `2k` with `2k + 1`: the layout of a batch built from `N`
    /// (view A, view B) pairs.
    pub fn interleaved(embeddings: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        let pairing = interleaved_pairing(embeddings.len())?;
        Self::new(embeddings, pairing, temperature)
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

pub fn interleaved_pairing(n: usize) -> Result<Vec<usize>> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidPairing(format!("need an even count >= 2, got {n}")));
    }
    Ok((0..n).map(|i| i ^ 1).collect())
}

fn check_contrastive_inputs(embeddings: &[Vec<f64>], pairing: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidPairing(format!("need at least 2 embeddings, got {n}")));
    }
    if pairing.len() != n {
        return Err(Error::InvalidPairing(format!(
            "{} pairing entries for {n} embeddings",
            pairing.len()
        )));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || j == i || pairing[j] != i {
            return Err(Error::InvalidPairing(format!("entry {i} -> {j} is not a fixed-point-free involution")));
        }
    }
    let dim = embeddings[0].len();
    if dim == 0 {
        return Err(Error::EmptyVector);
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::ShapeMismatch(format!("embedding {i} has dim {} not {dim}", e.len())));
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {i}")));
        }
    }
    Ok(())
}

fn gram(embeddings: &[Vec<f64>], exec: Execution) -> Vec<Vec<f64>> {
    exec.map(embeddings, |a| embeddings.iter().map(|b| dot(a, b)).collect())
}

/// Loss from a precomputed inner-product matrix.
pub(crate) fn contrastive_from_gram(gram: &[Vec<f64>], pairing: &[usize], tau: f64) -> f64 {
    let n = gram.len();
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(n - 1);
    for i in 0..n {
        scores.clear();
        scores.extend((0..n).filter(|&b| b != i).map(|b| gram[i][b] / tau));
        total += logsumexp_unchecked(&scores) - gram[i][pairing[i]] / tau;
    }
    total
}

/// Sum over anchors of `-log( exp(w_i.w_j(i)/tau) / sum_{b != i} exp(w_i.w_b/tau) )`.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> f64 {
    let g = gram(&batch.embeddings, Execution::default());
    contrastive_from_gram(&g, &batch.pairing, batch.temperature)
}

pub fn contrastive_grad(batch: &ContrastiveBatch) -> Vec<Vec<f64>> {
    contrastive_value_and_grad(&batch.embeddings, &batch.pairing, batch.temperature, Execution::default()).1
}

/// The contrastive objective with embeddings as free variables (no unit-norm
/// requirement). Used by trainers and finite-difference checks.
pub fn contrastive_objective(embeddings: &[Vec<f64>], pairing: &[usize], tau: f64) -> Result<f64> {
    check_contrastive_inputs(embeddings, pairing, tau)?;
    let g = gram(embeddings, Execution::default());
    Ok(contrastive_from_gram(&g, pairing, tau))
}

pub fn contrastive_objective_grad(
    embeddings: &[Vec<f64>],
    pairing: &[usize],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_contrastive_inputs(embeddings, pairing, tau)?;
    Ok(contrastive_value_and_grad(embeddings, pairing, tau, Execution::default()))
}

// With P the row-wise softmax over b != i and J the pairing indicator,
// M = P - J and dL/dw_i = sum_b (M_ib + M_bi) w_b / tau.
pub(crate) fn contrastive_value_and_grad(
    embeddings: &[Vec<f64>],
    pairing: &[usize],
    tau: f64,
    exec: Execution,
) -> (f64, Vec<Vec<f64>>) {
    let n = embeddings.len();
    let dim = embeddings[0].len();
    let g = gram(embeddings, exec);
    let rows: Vec<(f64, Vec<f64>)> = exec.map_range(n, |i| {
        let scores: Vec<f64> = (0..n).filter(|&b| b != i).map(|b| g[i][b] / tau).collect();
        let lse = logsumexp_unchecked(&scores);
        let mut m = vec![0.0; n];
        for b in (0..n).filter(|&b| b != i) {
            m[b] = (g[i][b] / tau - lse).exp();
        }
        m[pairing[i]] -= 1.0;
        (lse - g[i][pairing[i]] / tau, m)
    });
    let loss = rows.iter().map(|(l, _)| l).sum();
    let grads = exec.map_range(n, |i| {
        let mut out = vec![0.0; dim];
        for b in 0..n {
            let c = (rows[i].1[b] + rows[b].1[i]) / tau;
            if c != 0.0 {
                for (o, x) in out.iter_mut().zip(&embeddings[b]) {
                    *o += c * x;
                }
            }
        }
        out
    });
    (loss, grads)
}

// ---------------------------------------------------------------------------
// Box loss

/// `lambda_iou * L_ciou + lambda_l1 * |b - b_gt|_1` over normalized coordinates.
pub fn box_loss(pred: &BoxCxcywh, gt: &BoxCxcywh, wts: &LossWeights) -> f64 {
    box_loss_raw(pred.to_array(), gt.to_array(), wts).expect("validated boxes")
}

pub fn box_loss_raw(pred: [f64; 4], gt: [f64; 4], wts: &LossWeights) -> Result<f64> {
    let ciou = ciou_terms_raw(pred, gt)?.loss();
    Ok(wts.lambda_iou * ciou + wts.lambda_l1 * l1(&pred, &gt))
}

/// [`box_loss_raw`] with the complete-IoU trade-off weight held at `alpha`.
pub fn box_loss_frozen_alpha(pred: [f64; 4], gt: [f64; 4], alpha: f64, wts: &LossWeights) -> Result<f64> {
    let ciou = ciou_terms_raw(pred, gt)?.loss_with_alpha(alpha);
    Ok(wts.lambda_iou * ciou + wts.lambda_l1 * l1(&pred, &gt))
}

fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn box_loss_grad(pred: &BoxCxcywh, gt: &BoxCxcywh, wts: &LossWeights) -> [f64; 4] {
    box_loss_grad_raw(pred.to_array(), gt.to_array(), wts).expect("validated boxes")
}

pub fn box_loss_grad_raw(pred: [f64; 4], gt: [f64; 4], wts: &LossWeights) -> Result<[f64; 4]> {
    let gc = ciou_grad_raw(pred, gt)?;
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = wts.lambda_iou * gc[k] + wts.lambda_l1 * sign(pred[k] - gt[k]);
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Set prediction

/// One ground-truth object: a real class in `0..K` and its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BoxCxcywh,
}

/// Raw output of one object query: `K + 1` logits (last one is no-object)
/// and a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub logits: Vec<f64>,
    pub bbox: BoxCxcywh,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSet {
    n_classes: usize,
    queries: Vec<QueryPrediction>,
}

impl PredictionSet {
    pub fn new(n_classes: usize, queries: Vec<QueryPrediction>) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidConfig("need at least one real class".into()));
        }
        for (q, p) in queries.iter().enumerate() {
            if p.logits.len() != n_classes + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "query {q} has {} logits, expected {}",
                    p.logits.len(),
                    n_classes + 1
                )));
            }
            if p.logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("logits of query {q}")));
            }
        }
        Ok(Self { n_classes, queries })
    }

    /// Number of real classes `K`; index `K` is the no-object class.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn no_object(&self) -> usize {
        self.n_classes
    }

    pub fn queries(&self) -> &[QueryPrediction] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn probabilities(&self, q: usize) -> Vec<f64> {
        softmax_unchecked(&self.queries[q].logits)
    }
}

/// Gradient of the Hungarian loss with respect to every query's logits and
/// box parameters `(cx, cy, w, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub logits: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
}

impl PredictionGrad {
    pub fn norm(&self) -> f64 {
        let s: f64 = self
            .logits
            .iter()
            .flatten()
            .chain(self.boxes.iter().flatten())
            .map(|x| x * x)
            .sum();
        s.sqrt()
    }
}

/// Forward pass of the Hungarian loss with the quantities the gradient
/// holds fixed: the assignment and each matched pair's CIoU trade-off weight.
#[derive(Debug, Clone, PartialEq)]
pub struct HungarianForward {
    pub loss: f64,
    pub assignment: Assignment,
    /// `alphas[k]` belongs to `assignment.pairs[k]`.
    pub alphas: Vec<f64>,
}

fn check_gts(n_classes: usize, gts: &[GroundTruth]) -> Result<()> {
    for g in gts {
        if g.class >= n_classes {
            return Err(Error::ClassOutOfRange { class: g.class, n_classes });
        }
    }
    Ok(())
}

fn neg_log_softmax(logits: &[f64], class: usize) -> f64 {
    logsumexp_unchecked(logits) - logits[class]
}

pub fn hungarian_forward(preds: &PredictionSet, gts: &[GroundTruth], wts: &LossWeights) -> Result<HungarianForward> {
    wts.validate()?;
    check_gts(preds.n_classes, gts)?;
    let assignment = optimal_assignment(preds, gts, wts)?;
    let alphas = assignment
        .pairs
        .iter()
        .map(|p| {
            let t = ciou_terms_raw(preds.queries[p.query].bbox.to_array(), gts[p.target].bbox.to_array())?;
            Ok(t.alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<&[f64]> = preds.queries.iter().map(|q| q.logits.as_slice()).collect();
    let boxes: Vec<[f64; 4]> = preds.queries.iter().map(|q| q.bbox.to_array()).collect();
    let loss = hungarian_loss_fixed(&logits, &boxes, preds.n_classes, gts, wts, &assignment, &alphas)?;
    Ok(HungarianForward { loss, assignment, alphas })
}

/// Matched terms `-log p(c_j) + L_box` plus `no_object_weight * -log p(no-object)`
/// for every unmatched query, under the optimal assignment.
pub fn hungarian_loss(preds: &PredictionSet, gts: &[GroundTruth], wts: &LossWeights) -> Result<f64> {
    Ok(hungarian_forward(preds, gts, wts)?.loss)
}

/// The Hungarian loss on raw parameters with the assignment and trade-off
/// weights frozen. Summation order is fixed: matched pairs in target order,
/// then unmatched queries in index order.
pub fn hungarian_loss_fixed(
    logits: &[&[f64]],
    boxes: &[[f64; 4]],
    n_classes: usize,
    gts: &[GroundTruth],
    wts: &LossWeights,
    assignment: &Assignment,
    alphas: &[f64],
) -> Result<f64> {
    let mut matched = vec![false; logits.len()];
    let mut total = 0.0;
    for (p, &alpha) in assignment.pairs.iter().zip(alphas) {
        let g = &gts[p.target];
        matched[p.query] = true;
        total += neg_log_softmax(logits[p.query], g.class);
        total += box_loss_frozen_alpha(boxes[p.query], g.bbox.to_array(), alpha, wts)?;
    }
    for (q, l) in logits.iter().enumerate() {
        if !matched[q] {
            total += wts.no_object_weight * neg_log_softmax(l, n_classes);
        }
    }
    Ok(total)
}

/// Gradient of [`hungarian_loss`] with the assignment held constant.
pub fn hungarian_loss_grad(preds: &PredictionSet, gts: &[GroundTruth], wts: &LossWeights) -> Result<PredictionGrad> {
    let fwd = hungarian_forward(preds, gts, wts)?;
    hungarian_grad_with(preds, gts, wts, &fwd)
}

pub fn hungarian_grad_with(
    preds: &PredictionSet,
    gts: &[GroundTruth],
    wts: &LossWeights,
    fwd: &HungarianForward,
) -> Result<PredictionGrad> {
    let nq = preds.len();
    let mut logits = Vec::with_capacity(nq);
    let mut boxes = vec![[0.0; 4]; nq];
    let mut target_of = vec![None; nq];
    for (k, p) in fwd.assignment.pairs.iter().enumerate() {
        target_of[p.query] = Some((p.target, fwd.alphas[k]));
    }
    for (q, pred) in preds.queries.iter().enumerate() {
        let mut g = softmax_unchecked(&pred.logits);
        match target_of[q] {
            Some((t, alpha)) => {
                let gt = &gts[t];
                g[gt.class] -= 1.0;
                let pb = pred.bbox.to_array();
                let gb = gt.bbox.to_array();
                let gc = ciou_grad_with_alpha(pb, gb, alpha)?;
                for k in 0..4 {
                    boxes[q][k] = wts.lambda_iou * gc[k] + wts.lambda_l1 * sign(pb[k] - gb[k]);
                }
            }
            None => {
                g[preds.n_classes] -= 1.0;
                for x in &mut g {
                    *x *= wts.no_object_weight;
                }
            }
        }
        logits.push(g);
    }
    Ok(PredictionGrad { logits, boxes })
}

// ciou_grad_raw recomputes alpha at the current point; the forward pass may
// carry a frozen one, so rescale only the aspect term.
fn ciou_grad_with_alpha(pred: [f64; 4], gt: [f64; 4], alpha: f64) -> Result<[f64; 4]> {
    let t = ciou_terms_raw(pred, gt)?;
    let mut g = ciou_grad_raw(pred, gt)?;
    if alpha != t.alpha {
        let delta = (gt[2] / gt[3]).atan() - (pred[2] / pred[3]).atan();
        let s = pred[2] * pred[2] + pred[3] * pred[3];
        let scale = 8.0 / (std::f64::consts::PI * std::f64::consts::PI) * delta / s;
        let dnu = [0.0, 0.0, -scale * pred[3], scale * pred[2]];
        for k in 0..4 {
            g[k] += (alpha - t.alpha) * dnu[k];
        }
    }
    Ok(g)
}
