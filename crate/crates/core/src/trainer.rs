//! Gradient-descent demonstrations for the three losses: a linear
//! contrastive encoder, direct box refinement and toy set prediction.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Detection, EvalMode, GroundTruthSet};
use crate::exec::Execution;
use crate::geometry::{ciou_terms, BoxCxcywh};
use crate::losses::{
    box_loss, box_loss_grad, contrastive_value_and_grad, hungarian_forward, hungarian_grad_with, interleaved_pairing,
    GroundTruth, LossWeights, PredictionSet, QueryPrediction, DEFAULT_TEMPERATURE,
};
use crate::numerics::{dot, l2_normalize, norm, softmax_unchecked, Mat, DEFAULT_NORM_EPS};
use crate::synthdata::{interleave_views, random_box, stream, DetectionScene, PairedScene};

pub const DEFAULT_PROJECTION_DIM: usize = 128;
pub const MIN_BOX_SIDE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 + cos(pi k / steps)) / 2` at step `k`.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if steps == 0 => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub temperature: f64,
    pub weights: LossWeights,
    /// Log every this many steps; step 0 and the last step are always logged.
    pub log_every: usize,
    pub projection_dim: usize,
    /// Multiplies the learning rate of class logits in set prediction.
    pub class_lr_scale: f64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            schedule: LrSchedule::default(),
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            log_every: 10,
            projection_dim: DEFAULT_PROJECTION_DIM,
            class_lr_scale: 1.0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// 500 steps at rate 0.05, temperature 0.07.
    pub fn contrastive() -> Self {
        Self::default()
    }

    /// 2000 steps at rate 1e-2.
    pub fn boxes() -> Self {
        Self { steps: 2000, learning_rate: 1e-2, log_every: 50, ..Self::default() }
    }

    /// 5000 steps at rate 1e-2 for boxes and 5 for class logits.
    pub fn set_prediction() -> Self {
        Self { steps: 5000, learning_rate: 1e-2, class_lr_scale: 500.0, log_every: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be positive".into()));
        }
        if !(self.class_lr_scale >= 0.0) || !self.class_lr_scale.is_finite() {
            return Err(Error::InvalidConfig(format!("class_lr_scale must be >= 0, got {}", self.class_lr_scale)));
        }
        if self.projection_dim == 0 {
            return Err(Error::InvalidConfig("projection_dim must be positive".into()));
        }
        self.weights.validate()
    }

    fn lr(&self, step: usize) -> f64 {
        self.schedule.rate(self.learning_rate, step, self.steps)
    }

    fn logs(&self, step: usize) -> bool {
        step.is_multiple_of(self.log_every) || step == self.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    fn push(&mut self, step: usize, loss: f64, metric: f64) -> Result<()> {
        if !loss.is_finite() || !metric.is_finite() {
            return Err(Error::NonFinite(format!("training diverged at step {step}")));
        }
        self.rows.push(LogRow { step, loss, metric });
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// `step,loss,metric` rows with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,metric\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.step, r.loss, r.metric).expect("write to string");
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Contrastive encoder

/// Linear map followed by projection onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    pub weights: Mat,
}

impl LinearEncoder {
    /// Entries `N(0, 1/in_dim)`.
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
        Self { weights: Mat::from_fn(out_dim, in_dim, |_, _| normal.sample(&mut rng)) }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        l2_normalize(&self.weights.matvec(x)?, DEFAULT_NORM_EPS)
    }
}

/// Fraction of embeddings whose nearest other embedding (by inner product)
/// is their pair. Ties resolve to the lowest index.
pub fn retrieval_accuracy(emb: &[Vec<f64>], pairing: &[usize]) -> f64 {
    let hits = (0..emb.len())
        .filter(|&i| {
            let mut best = None::<(usize, f64)>;
            for j in (0..emb.len()).filter(|&j| j != i) {
                let s = dot(&emb[i], &emb[j]);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.map(|(j, _)| j) == Some(pairing[i])
        })
        .count();
    hits as f64 / emb.len() as f64
}

struct ContrastiveStep {
    loss: f64,
    embeddings: Vec<Vec<f64>>,
    grad: Mat,
}

// Loss and dL/dW for y_i = W x_i, w_i = y_i / |y_i|. The normalization
// Jacobian maps g_i = dL/dw_i to (g_i - (w_i . g_i) w_i) / |y_i|.
fn contrastive_step(enc: &LinearEncoder, inputs: &[Vec<f64>], pairing: &[usize], tau: f64, exec: Execution) -> Result<ContrastiveStep> {
    let projected = exec.map(inputs, |x| enc.weights.matvec(x));
    let projected = projected.into_iter().collect::<Result<Vec<_>>>()?;
    let embeddings = projected
        .iter()
        .map(|y| l2_normalize(y, DEFAULT_NORM_EPS))
        .collect::<Result<Vec<_>>>()?;
    let (loss, g) = contrastive_value_and_grad(&embeddings, pairing, tau, exec);
    let (rows, cols) = (enc.weights.rows(), enc.weights.cols());
    let mut grad = Mat::zeros(rows, cols);
    for ((y, w), (gi, x)) in projected.iter().zip(&embeddings).zip(g.iter().zip(inputs)) {
        let n = norm(y);
        let wg = dot(w, gi);
        let gd = grad.data_mut();
        for r in 0..rows {
            let dy = (gi[r] - wg * w[r]) / n;
            if dy != 0.0 {
                for (o, xv) in gd[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                    *o += dy * xv;
                }
            }
        }
    }
    Ok(ContrastiveStep { loss, embeddings, grad })
}

/// Full-batch gradient descent on the contrastive loss over all scenes.
/// The metric is positive-pair top-1 retrieval accuracy.
pub fn train_contrastive(data: &[PairedScene], cfg: &TrainConfig) -> Result<(LinearEncoder, TrainLog)> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::DegenerateData(format!("need at least 2 scenes, got {}", data.len())));
    }
    let inputs = interleave_views(data);
    let dim = inputs[0].len();
    if dim == 0 || inputs.iter().any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("views must share a nonzero dimension".into()));
    }
    if inputs.iter().all(|v| v == &inputs[0]) {
        return Err(Error::DegenerateData("all scenes are identical".into()));
    }
    let pairing = interleaved_pairing(inputs.len())?;
    let mut enc = LinearEncoder::random(dim, cfg.projection_dim, cfg.seed);
    let mut log = TrainLog::default();
    for k in 0..=cfg.steps {
        let step = contrastive_step(&enc, &inputs, &pairing, cfg.temperature, cfg.exec)?;
        if cfg.logs(k) {
            log.push(k, step.loss, retrieval_accuracy(&step.embeddings, &pairing))?;
        }
        if k == cfg.steps {
            break;
        }
        let lr = cfg.lr(k);
        for (p, g) in enc.weights.data_mut().iter_mut().zip(step.grad.data()) {
            *p -= lr * g;
        }
    }
    Ok((enc, log))
}

// ---------------------------------------------------------------------------
// Box refinement

fn clamp_box(p: [f64; 4]) -> BoxCxcywh {
    BoxCxcywh::new(
        p[0].clamp(0.0, 1.0),
        p[1].clamp(0.0, 1.0),
        p[2].clamp(MIN_BOX_SIDE, 1.0),
        p[3].clamp(MIN_BOX_SIDE, 1.0),
    )
    .expect("clamped into valid ranges")
}

fn descend(b: &BoxCxcywh, g: &[f64; 4], lr: f64) -> BoxCxcywh {
    let p = b.to_array();
    clamp_box([p[0] - lr * g[0], p[1] - lr * g[1], p[2] - lr * g[2], p[3] - lr * g[3]])
}

/// Descends the box loss of each `init[i]` toward `targets[i]`. Logs the
/// summed loss and mean IoU.
pub fn refine_boxes(init: &[BoxCxcywh], targets: &[BoxCxcywh], cfg: &TrainConfig) -> Result<(Vec<BoxCxcywh>, TrainLog)> {
    cfg.validate()?;
    if init.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} boxes for {} targets", init.len(), targets.len())));
    }
    if init.is_empty() {
        return Err(Error::DegenerateData("no boxes to refine".into()));
    }
    let pairs: Vec<(BoxCxcywh, BoxCxcywh)> = init.iter().copied().zip(targets.iter().copied()).collect();
    let mut boxes: Vec<BoxCxcywh> = init.to_vec();
    let mut log = TrainLog::default();
    for k in 0..=cfg.steps {
        if cfg.logs(k) {
            let loss: f64 = boxes.iter().zip(targets).map(|(b, t)| box_loss(b, t, &cfg.weights)).sum();
            let miou = boxes.iter().zip(targets).map(|(b, t)| ciou_terms(b, t).iou).sum::<f64>() / boxes.len() as f64;
            log.push(k, loss, miou)?;
        }
        if k == cfg.steps {
            break;
        }
        let lr = cfg.lr(k);
        let current: Vec<(BoxCxcywh, BoxCxcywh)> = boxes.iter().copied().zip(pairs.iter().map(|p| p.1)).collect();
        boxes = cfg.exec.map(&current, |(b, t)| descend(b, &box_loss_grad(b, t, &cfg.weights), lr));
    }
    Ok((boxes, log))
}

// ---------------------------------------------------------------------------
// Set prediction

/// Detections for every query: the most probable real class, scored by its
/// probability, with the box in absolute pixels.
pub fn predictions_to_detections(preds: &PredictionSet, width: f64, height: f64, image_id: u64) -> Result<Vec<Detection>> {
    (0..preds.len())
        .map(|q| {
            let p = preds.probabilities(q);
            let (class, score) = p[..preds.n_classes()]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            Detection::new(image_id, class as u64, preds.queries()[q].bbox.to_xyxy(width, height)?, score)
        })
        .collect()
}

pub fn scene_ground_truth(scene: &DetectionScene, image_id: u64) -> Result<GroundTruthSet> {
    let mut gts = GroundTruthSet::new();
    gts.add_image(image_id)?;
    for o in &scene.objects {
        gts.add_object(image_id, o.class as u64, o.bbox.to_xyxy(scene.width, scene.height)?)?;
    }
    Ok(gts)
}

fn map_at_50(preds: &PredictionSet, scene: &DetectionScene, gts: &GroundTruthSet) -> Result<f64> {
    let dets = predictions_to_detections(preds, scene.width, scene.height, 0)?;
    Ok(evaluate(&dets, gts, EvalMode::Single(0.5))?.map_50.expect("threshold 0.5 evaluated"))
}

/// Seeded starting point: logits `N(0, 0.01^2)` and random boxes.
pub fn init_queries(n_queries: usize, n_classes: usize, seed: u64) -> Result<PredictionSet> {
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let queries = (0..n_queries)
        .map(|q| {
            let mut rng = stream(seed, 1 + q as u64);
            let logits = (0..=n_classes).map(|_| normal.sample(&mut rng)).collect();
            QueryPrediction { logits, bbox: random_box(&mut rng) }
        })
        .collect();
    PredictionSet::new(n_classes, queries)
}

/// Fits directly parametrized query logits and boxes to one scene by
/// descending the Hungarian loss. The metric is mAP at IoU 0.5.
pub fn train_set_prediction(
    scene: &DetectionScene,
    n_classes: usize,
    n_queries: usize,
    cfg: &TrainConfig,
) -> Result<(PredictionSet, TrainLog)> {
    cfg.validate()?;
    let gts: Vec<GroundTruth> = scene.objects.clone();
    if n_queries < gts.len() {
        return Err(Error::InsufficientQueries { queries: n_queries, targets: gts.len() });
    }
    let eval_gts = scene_ground_truth(scene, 0)?;
    let mut preds = init_queries(n_queries, n_classes, cfg.seed)?;
    let mut log = TrainLog::default();
    for k in 0..=cfg.steps {
        let fwd = hungarian_forward(&preds, &gts, &cfg.weights)?;
        if cfg.logs(k) {
            log.push(k, fwd.loss, map_at_50(&preds, scene, &eval_gts)?)?;
        }
        if k == cfg.steps {
            break;
        }
        let lr = cfg.lr(k);
        let class_lr = lr * cfg.class_lr_scale;
        let grad = hungarian_grad_with(&preds, &gts, &cfg.weights, &fwd)?;
        let queries = preds
            .queries()
            .iter()
            .zip(grad.logits.iter().zip(&grad.boxes))
            .map(|(q, (gl, gb))| QueryPrediction {
                logits: q.logits.iter().zip(gl).map(|(x, g)| x - class_lr * g).collect(),
                bbox: descend(&q.bbox, gb, lr),
            })
            .collect();
        preds = PredictionSet::new(n_classes, queries)?;
    }
    Ok((preds, log))
}

/// Class probabilities of every query, for reporting.
pub fn query_probabilities(preds: &PredictionSet) -> Vec<Vec<f64>> {
    preds.queries().iter().map(|q| softmax_unchecked(&q.logits)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::contrastive_objective;
    use crate::numerics::{central_diff_grad, max_rel_err};
    use crate::synthdata::{gen_box_pairs, gen_detection_scene, gen_paired_views, SceneSpec};

    fn small_spec() -> SceneSpec {
        SceneSpec { n_scenes: 8, latent_dim: 6, seed: 3, ..Default::default() }
    }

    #[test]
    fn schedule_fixtures() {
        assert_eq!(LrSchedule::Constant.rate(0.1, 7, 10), 0.1);
        assert_eq!(LrSchedule::Cosine.rate(0.1, 0, 10), 0.1);
        assert!(LrSchedule::Cosine.rate(0.1, 10, 10).abs() < 1e-17);
        assert!((LrSchedule::Cosine.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let data = gen_paired_views(&small_spec()).unwrap();
        let inputs = interleave_views(&data);
        let pairing = interleaved_pairing(inputs.len()).unwrap();
        let enc = LinearEncoder::random(6, 5, 11);
        let step = contrastive_step(&enc, &inputs, &pairing, 0.5, Execution::Sequential).unwrap();
        let f = |w: &[f64]| {
            let e = LinearEncoder { weights: Mat::new(5, 6, w.to_vec()).unwrap() };
            let emb: Vec<Vec<f64>> = inputs.iter().map(|x| e.embed(x).unwrap()).collect();
            contrastive_objective(&emb, &pairing, 0.5).unwrap()
        };
        let fd = central_diff_grad(f, enc.weights.data(), 1e-5).unwrap();
        assert!(max_rel_err(step.grad.data(), &fd) < 1e-6);
    }

    #[test]
    fn contrastive_zero_steps_and_zero_rate() {
        let data = gen_paired_views(&small_spec()).unwrap();
        let cfg = TrainConfig { steps: 0, projection_dim: 4, ..Default::default() };
        let (enc, log) = train_contrastive(&data, &cfg).unwrap();
        assert_eq!(enc, LinearEncoder::random(6, 4, 0));
        assert_eq!(log.rows.len(), 1);

        let cfg = TrainConfig { steps: 20, learning_rate: 0.0, log_every: 5, projection_dim: 4, ..Default::default() };
        let (enc, log) = train_contrastive(&data, &cfg).unwrap();
        assert_eq!(enc, LinearEncoder::random(6, 4, 0));
        assert_eq!(log.rows.len(), 5);
        assert!(log.rows.iter().all(|r| r.loss == log.rows[0].loss && r.metric == log.rows[0].metric));
    }

    #[test]
    fn contrastive_training_lowers_loss() {
        let data = gen_paired_views(&small_spec()).unwrap();
        let cfg = TrainConfig { steps: 100, projection_dim: 8, log_every: 50, ..Default::default() };
        let (_, log) = train_contrastive(&data, &cfg).unwrap();
        assert!(log.last().unwrap().loss < log.rows[0].loss);
        assert_eq!(log.to_csv(), train_contrastive(&data, &cfg).unwrap().1.to_csv());
        assert!(log.to_csv().starts_with("step,loss,metric\n0,"));
    }

    #[test]
    fn contrastive_rejects_degenerate_data() {
        let mut data = gen_paired_views(&small_spec()).unwrap();
        let first = data[0].view_a.clone();
        for s in &mut data {
            s.view_a = first.clone();
            s.view_b = first.clone();
        }
        assert!(matches!(train_contrastive(&data, &TrainConfig::default()), Err(Error::DegenerateData(_))));
        assert!(train_contrastive(&data[..1], &TrainConfig::default()).is_err());
        let bad = TrainConfig { temperature: 0.0, ..Default::default() };
        assert!(train_contrastive(&gen_paired_views(&small_spec()).unwrap(), &bad).is_err());
    }

    #[test]
    fn retrieval_fixture() {
        let e = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        assert_eq!(retrieval_accuracy(&e, &[1, 0, 3, 2]), 1.0);
        assert_eq!(retrieval_accuracy(&e, &[2, 3, 0, 1]), 0.0);
    }

    #[test]
    fn refine_fixtures() {
        let pairs = gen_box_pairs(4, 1);
        let targets: Vec<BoxCxcywh> = pairs.iter().map(|p| p.1).collect();
        let cfg = TrainConfig { steps: 10, learning_rate: 1e-2, log_every: 1, ..Default::default() };
        let (out, log) = refine_boxes(&targets, &targets, &cfg).unwrap();
        assert_eq!(out, targets);
        assert!(log.rows.iter().all(|r| r.loss == 0.0 && r.metric == 1.0));

        let init: Vec<BoxCxcywh> = pairs.iter().map(|p| p.0).collect();
        let frozen = TrainConfig { learning_rate: 0.0, ..cfg };
        assert_eq!(refine_boxes(&init, &targets, &frozen).unwrap().0, init);
        assert!(refine_boxes(&init[..2], &targets, &cfg).is_err());
    }

    #[test]
    fn refine_converges() {
        let pairs = gen_box_pairs(10, 2);
        let init: Vec<BoxCxcywh> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<BoxCxcywh> = pairs.iter().map(|p| p.1).collect();
        let cfg = TrainConfig { steps: 2000, learning_rate: 1e-2, log_every: 100, ..Default::default() };
        let (out, log) = refine_boxes(&init, &targets, &cfg).unwrap();
        for (b, t) in out.iter().zip(&targets) {
            assert!(ciou_terms(b, t).iou > 0.99);
        }
        assert!(log.last().unwrap().metric > 0.99);
    }

    #[test]
    fn set_prediction_single_query_converges() {
        let scene = gen_detection_scene(1, 7).unwrap();
        let cfg = TrainConfig { steps: 2000, ..TrainConfig::set_prediction() };
        let (_, log) = train_set_prediction(&scene, 3, 1, &cfg).unwrap();
        let last = log.last().unwrap();
        assert!(last.loss < 1e-3, "{last:?}");
        assert_eq!(last.metric, 1.0);
    }

    #[test]
    fn set_prediction_frozen_and_errors() {
        let scene = gen_detection_scene(3, 1).unwrap();
        let cfg = TrainConfig { steps: 5, learning_rate: 0.0, log_every: 1, ..Default::default() };
        let (preds, log) = train_set_prediction(&scene, 3, 4, &cfg).unwrap();
        assert_eq!(preds, init_queries(4, 3, 0).unwrap());
        assert!(log.rows.iter().all(|r| *r == LogRow { step: r.step, ..log.rows[0] }));
        assert!(matches!(
            train_set_prediction(&scene, 3, 2, &cfg),
            Err(Error::InsufficientQueries { queries: 2, targets: 3 })
        ));
    }
}
