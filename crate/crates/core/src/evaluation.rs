//! COCO-style detection scoring: greedy TP/FP assignment, precision-recall
//! curves, 101-point interpolated AP and class-averaged mAP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{iou, BoxXyxy};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoxXyxy,
    pub score: f64,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u64, bbox: BoxXyxy, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("detection score {score}")));
        }
        Ok(Self { image_id, category_id, bbox, score })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub id: u64,
    pub category_id: u64,
    pub bbox: BoxXyxy,
}

/// Ground-truth boxes per image plus the category registry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    images: BTreeMap<u64, Vec<GtObject>>,
    categories: BTreeMap<u64, String>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_category(&mut self, id: u64, name: impl Into<String>) -> Result<()> {
        if self.categories.insert(id, name.into()).is_some() {
            return Err(Error::Schema(format!("duplicate category id {id}")));
        }
        Ok(())
    }

    pub fn add_image(&mut self, id: u64) -> Result<()> {
        if self.images.insert(id, Vec::new()).is_some() {
            return Err(Error::Schema(format!("duplicate image id {id}")));
        }
        Ok(())
    }

    /// Registers the image and category implicitly if unseen.
    pub fn add_object(&mut self, image_id: u64, category_id: u64, bbox: BoxXyxy) -> Result<()> {
        self.categories.entry(category_id).or_insert_with(|| category_id.to_string());
        let objs = self.images.entry(image_id).or_default();
        let id = objs.len() as u64;
        objs.push(GtObject { id, category_id, bbox });
        Ok(())
    }

    fn add_annotation(&mut self, id: u64, image_id: u64, category_id: u64, bbox: BoxXyxy) -> Result<()> {
        if !self.categories.contains_key(&category_id) {
            return Err(Error::Schema(format!("annotation {id} has unknown category {category_id}")));
        }
        let objs = self
            .images
            .get_mut(&image_id)
            .ok_or_else(|| Error::Schema(format!("annotation {id} has unknown image {image_id}")))?;
        if objs.iter().any(|o| o.id == id) {
            return Err(Error::Schema(format!("duplicate annotation id {id} in image {image_id}")));
        }
        objs.push(GtObject { id, category_id, bbox });
        Ok(())
    }

    pub fn images(&self) -> impl Iterator<Item = u64> + '_ {
        self.images.keys().copied()
    }

    pub fn objects(&self, image_id: u64) -> &[GtObject] {
        self.images.get(&image_id).map_or(&[], Vec::as_slice)
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.get(&id).map(String::as_str)
    }

    /// Categories with at least one annotated box.
    pub fn classes_present(&self) -> BTreeSet<u64> {
        self.images.values().flatten().map(|o| o.category_id).collect()
    }

    pub fn count(&self, category_id: u64) -> usize {
        self.images.values().flatten().filter(|o| o.category_id == category_id).count()
    }

    fn boxes(&self, image_id: u64, category_id: u64) -> Vec<BoxXyxy> {
        self.objects(image_id)
            .iter()
            .filter(|o| o.category_id == category_id)
            .map(|o| o.bbox)
            .collect()
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(t))
    }
}

/// Indices of `dets` by descending score; ties keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

/// TP flag for every detection, aligned with the input order.
///
/// Detections are visited by descending score. Each one claims the unclaimed
/// ground-truth box of the same image and category with the highest IoU,
/// provided that IoU is at least `iou_thresh`; otherwise it is a false
/// positive.
pub fn assign_tp_fp(dets: &[Detection], gts: &GroundTruthSet, iou_thresh: f64) -> Result<Vec<bool>> {
    check_threshold(iou_thresh)?;
    let mut claimed: BTreeMap<(u64, u64), (Vec<BoxXyxy>, Vec<bool>)> = BTreeMap::new();
    let mut flags = vec![false; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let (boxes, used) = claimed.entry((d.image_id, d.category_id)).or_insert_with(|| {
            let b = gts.boxes(d.image_id, d.category_id);
            let n = b.len();
            (b, vec![false; n])
        });
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in boxes.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&d.bbox, b);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            flags[i] = true;
        }
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

/// Cumulative precision and recall after each flag, in the given order.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> PrCurve {
    let mut tp = 0;
    let mut fp = 0;
    let points = flags
        .iter()
        .map(|&f| {
            if f {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                precision: tp as f64 / (tp + fp) as f64,
                tp,
                fp,
            }
        })
        .collect();
    PrCurve { points, n_gt }
}

/// 101-point interpolated AP: mean over `r = 0, 0.01, ..., 1` of the best
/// precision reached at recall `>= r`. Recall comparisons use exact
/// integer counts.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.n_gt == 0 || curve.points.is_empty() {
        return 0.0;
    }
    let mut best_from = vec![0.0; curve.points.len() + 1];
    for i in (0..curve.points.len()).rev() {
        best_from[i] = f64::max(best_from[i + 1], curve.points[i].precision);
    }
    // Recall is nondecreasing, so the first point reaching r dominates.
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100usize {
        while j < curve.points.len() && curve.points[j].tp * 100 < r * curve.n_gt {
            j += 1;
        }
        sum += best_from[j];
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// One IoU threshold.
    Single(f64),
    /// Thresholds 0.50 to 0.95 in steps of 0.05.
    Sweep,
}

impl EvalMode {
    pub fn thresholds(self) -> Result<Vec<f64>> {
        match self {
            EvalMode::Single(t) => {
                check_threshold(t)?;
                Ok(vec![t])
            }
            EvalMode::Sweep => Ok(sweep_thresholds()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub n_gt: usize,
    /// AP at each threshold of the report.
    pub ap: Vec<f64>,
    /// Mean of `ap`.
    pub ap_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub per_class: BTreeMap<u64, ClassReport>,
    /// Class-averaged AP at each threshold.
    pub map_per_threshold: Vec<f64>,
    /// mAP at IoU 0.5, when 0.5 was evaluated.
    pub map_50: Option<f64>,
    /// Mean of `map_per_threshold` over the full sweep, in sweep mode.
    pub map_sweep: Option<f64>,
}

impl EvalReport {
    /// Mean over all evaluated thresholds.
    pub fn map(&self) -> f64 {
        self.map_per_threshold.iter().sum::<f64>() / self.map_per_threshold.len() as f64
    }
}

pub fn evaluate(dets: &[Detection], gts: &GroundTruthSet, mode: EvalMode) -> Result<EvalReport> {
    evaluate_with(dets, gts, mode, Execution::default())
}

/// Detections on images or categories absent from the ground truth are
/// ignored. Every (class, threshold) pair is scored independently.
pub fn evaluate_with(dets: &[Detection], gts: &GroundTruthSet, mode: EvalMode, exec: Execution) -> Result<EvalReport> {
    let thresholds = mode.thresholds()?;
    let classes: Vec<u64> = gts.classes_present().into_iter().collect();
    if classes.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let by_class: Vec<Vec<Detection>> = classes
        .iter()
        .map(|&c| {
            dets.iter()
                .filter(|d| d.category_id == c && gts.images.contains_key(&d.image_id))
                .copied()
                .collect()
        })
        .collect();
    let jobs: Vec<(usize, f64)> = (0..classes.len())
        .flat_map(|ci| thresholds.iter().map(move |&t| (ci, t)))
        .collect();
    let aps = exec.map(&jobs, |&(ci, t)| {
        let d = &by_class[ci];
        let flags = assign_tp_fp(d, gts, t)?;
        let ordered: Vec<bool> = score_order(d).into_iter().map(|i| flags[i]).collect();
        Ok(average_precision(&pr_curve(&ordered, gts.count(classes[ci]))))
    });
    let aps = aps.into_iter().collect::<Result<Vec<f64>>>()?;

    let nt = thresholds.len();
    let mut per_class = BTreeMap::new();
    for (ci, &c) in classes.iter().enumerate() {
        let ap = aps[ci * nt..(ci + 1) * nt].to_vec();
        let ap_mean = ap.iter().sum::<f64>() / nt as f64;
        per_class.insert(
            c,
            ClassReport {
                name: gts.category_name(c).unwrap_or_default().to_string(),
                n_gt: gts.count(c),
                ap,
                ap_mean,
            },
        );
    }
    let map_per_threshold: Vec<f64> = (0..nt)
        .map(|ti| per_class.values().map(|r| r.ap[ti]).sum::<f64>() / classes.len() as f64)
        .collect();
    let map_50 = thresholds.iter().position(|&t| t == 0.5).map(|i| map_per_threshold[i]);
    let map_sweep = matches!(mode, EvalMode::Sweep).then(|| map_per_threshold.iter().sum::<f64>() / nt as f64);
    Ok(EvalReport { thresholds, per_class, map_per_threshold, map_50, map_sweep })
}

/// COCO `[x, y, width, height]` with positive, finite extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct XywhBox(pub [f64; 4]);

impl<'de> Deserialize<'de> for XywhBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(serde::de::Error::custom("bbox has a non-finite coordinate"));
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(serde::de::Error::custom(format!(
                "bbox width and height must be positive, got {} x {}",
                v[2], v[3]
            )));
        }
        Ok(XywhBox(v))
    }
}

impl XywhBox {
    pub fn to_xyxy(self) -> Result<BoxXyxy> {
        let [x, y, w, h] = self.0;
        BoxXyxy::from_xywh(x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: XywhBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoGroundTruth {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: XywhBox,
    pub score: f64,
}

impl CocoGroundTruth {
    pub fn to_ground_truth(&self) -> Result<GroundTruthSet> {
        let mut gts = GroundTruthSet::new();
        for c in &self.categories {
            gts.add_category(c.id, c.name.clone())?;
        }
        for im in &self.images {
            if !(im.width > 0.0 && im.height > 0.0) {
                return Err(Error::Schema(format!(
                    "image {} has non-positive size {}x{}",
                    im.id, im.width, im.height
                )));
            }
            gts.add_image(im.id)?;
        }
        for a in &self.annotations {
            let b = a.bbox.to_xyxy().map_err(|e| Error::Schema(format!("annotation {}: {e}", a.id)))?;
            gts.add_annotation(a.id, a.image_id, a.category_id, b)?;
        }
        Ok(gts)
    }
}

fn schema(e: serde_json::Error) -> Error {
    Error::Schema(e.to_string())
}

/// Parses COCO ground-truth JSON. Errors carry serde's line and column.
pub fn parse_ground_truth(json: &str) -> Result<GroundTruthSet> {
    serde_json::from_str::<CocoGroundTruth>(json).map_err(schema)?.to_ground_truth()
}

/// Parses a COCO detection array.
pub fn parse_detections(json: &str) -> Result<Vec<Detection>> {
    let raw: Vec<CocoDetection> = serde_json::from_str(json).map_err(schema)?;
    raw.iter()
        .enumerate()
        .map(|(i, d)| {
            let b = d.bbox.to_xyxy().map_err(|e| Error::Schema(format!("detection {i}: {e}")))?;
            Detection::new(d.image_id, d.category_id, b, d.score).map_err(|e| Error::Schema(format!("detection {i}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXyxy {
        BoxXyxy::new(x1, y1, x2, y2).unwrap()
    }

    fn one_gt() -> GroundTruthSet {
        let mut g = GroundTruthSet::new();
        g.add_object(0, 1, bx(0.0, 0.0, 10.0, 10.0)).unwrap();
        g
    }

    #[test]
    fn assign_fixtures() {
        let g = one_gt();
        // 6x10 inside 10x10: IoU 0.6; 4x10: IoU 0.4.
        let hit = Detection::new(0, 1, bx(0.0, 0.0, 6.0, 10.0), 0.9).unwrap();
        let miss = Detection::new(0, 1, bx(0.0, 0.0, 4.0, 10.0), 0.9).unwrap();
        assert_eq!(assign_tp_fp(&[hit], &g, 0.5).unwrap(), vec![true]);
        assert_eq!(assign_tp_fp(&[miss], &g, 0.5).unwrap(), vec![false]);

        let near = bx(0.0, 0.0, 9.0, 10.0);
        let lo = Detection::new(0, 1, near, 0.3).unwrap();
        let hi = Detection::new(0, 1, near, 0.8).unwrap();
        assert_eq!(assign_tp_fp(&[lo, hi], &g, 0.5).unwrap(), vec![false, true]);
        // Equal scores: first in input order wins.
        assert_eq!(assign_tp_fp(&[hi, hi], &g, 0.5).unwrap(), vec![true, false]);

        for t in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(assign_tp_fp(&[hit], &g, t), Err(Error::InvalidThreshold(_))));
        }
    }

    #[test]
    fn pr_and_ap_fixtures() {
        let c = pr_curve(&[true], 1);
        assert_eq!((c.points[0].recall, c.points[0].precision), (1.0, 1.0));
        assert_eq!(average_precision(&c), 1.0);

        let c = pr_curve(&[true, false], 2);
        let rp: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(rp, vec![(0.5, 1.0), (0.5, 0.5)]);
        assert!((average_precision(&c) - 51.0 / 101.0).abs() < 1e-12);

        let c = pr_curve(&[], 3);
        assert!(c.points.is_empty());
        assert_eq!(average_precision(&c), 0.0);
    }

    #[test]
    fn evaluate_fixtures() {
        let g = one_gt();
        let perfect = [Detection::new(0, 1, bx(0.0, 0.0, 10.0, 10.0), 0.5).unwrap()];
        let r = evaluate(&perfect, &g, EvalMode::Sweep).unwrap();
        assert!(r.map_per_threshold.iter().all(|&m| m == 1.0));
        assert_eq!((r.map_50, r.map_sweep), (Some(1.0), Some(1.0)));

        let r = evaluate(&[], &g, EvalMode::Single(0.5)).unwrap();
        assert_eq!((r.map_50, r.map_sweep), (Some(0.0), None));

        // Unknown category and unknown image are ignored.
        let stray = [
            perfect[0],
            Detection::new(0, 7, bx(0.0, 0.0, 1.0, 1.0), 0.99).unwrap(),
            Detection::new(5, 1, bx(0.0, 0.0, 1.0, 1.0), 0.99).unwrap(),
        ];
        let r = evaluate(&stray, &g, EvalMode::Single(0.5)).unwrap();
        assert_eq!(r.map_50, Some(1.0));
        assert_eq!(r.per_class.keys().copied().collect::<Vec<_>>(), vec![1]);

        assert_eq!(evaluate(&[], &GroundTruthSet::new(), EvalMode::Sweep), Err(Error::EmptyGroundTruth));
        assert!(evaluate(&[], &g, EvalMode::Single(1.5)).is_err());
    }

    #[test]
    fn coco_parsing() {
        let gt = r#"{
            "images": [{"id": 1, "width": 640, "height": 512}],
            "annotations": [{"id": 3, "image_id": 1, "category_id": 2, "bbox": [10, 20, 30, 40]}],
            "categories": [{"id": 2, "name": "person"}]
        }"#;
        let g = parse_ground_truth(gt).unwrap();
        assert_eq!(g.objects(1)[0].bbox.to_array(), [10.0, 20.0, 40.0, 60.0]);
        assert_eq!(g.category_name(2), Some("person"));

        let dets = parse_detections(r#"[{"image_id": 1, "category_id": 2, "bbox": [10, 20, 30, 40], "score": 0.7}]"#).unwrap();
        let r = evaluate(&dets, &g, EvalMode::Single(0.5)).unwrap();
        assert_eq!(r.map_50, Some(1.0));

        let bad = "[\n{\"image_id\": 1, \"category_id\": 2,\n \"bbox\": [0, 0, -3, 4], \"score\": 0.5}]";
        let msg = parse_detections(bad).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(parse_ground_truth("{").unwrap_err().to_string().contains("line 1"));
        let orphan = gt.replace("\"image_id\": 1", "\"image_id\": 9");
        assert!(matches!(parse_ground_truth(&orphan), Err(Error::Schema(_))));
    }

    // Independent evaluator: for each class, repeatedly picks the highest
    // scoring unvisited detection by linear scan and matches it by scanning
    // every ground-truth object. AP by direct thresholding of recall
    // fractions.
    fn naive_map(dets: &[Detection], gts: &GroundTruthSet, t: f64) -> f64 {
        let classes = gts.classes_present();
        let mut total = 0.0;
        for &c in &classes {
            let mut visited = vec![false; dets.len()];
            let mut taken: Vec<(u64, u64)> = Vec::new();
            let n_gt = gts.count(c);
            let mut hist: Vec<(usize, usize)> = Vec::new();
            let (mut tp, mut fp) = (0, 0);
            loop {
                let mut pick: Option<usize> = None;
                for (i, d) in dets.iter().enumerate() {
                    if visited[i] || d.category_id != c || !gts.images().any(|im| im == d.image_id) {
                        continue;
                    }
                    if pick.is_none() || d.score > dets[pick.unwrap()].score {
                        pick = Some(i);
                    }
                }
                let Some(i) = pick else { break };
                visited[i] = true;
                let d = dets[i];
                let mut best: Option<(u64, f64)> = None;
                for o in gts.objects(d.image_id) {
                    if o.category_id != c || taken.contains(&(d.image_id, o.id)) {
                        continue;
                    }
                    let v = iou(&d.bbox, &o.bbox);
                    if v >= t && (best.is_none() || v > best.unwrap().1) {
                        best = Some((o.id, v));
                    }
                }
                match best {
                    Some((id, _)) => {
                        taken.push((d.image_id, id));
                        tp += 1;
                    }
                    None => fp += 1,
                }
                hist.push((tp, fp));
            }
            let mut ap = 0.0;
            for r in 0..=100usize {
                let mut p: f64 = 0.0;
                for &(a, b) in &hist {
                    if 100 * a >= r * n_gt {
                        p = p.max(a as f64 / (a + b) as f64);
                    }
                }
                ap += p;
            }
            total += ap / 101.0;
        }
        total / classes.len() as f64
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, GroundTruthSet) {
        let mut g = GroundTruthSet::new();
        let mut dets = Vec::new();
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(0.0..80.0);
            let y = rng.random_range(0.0..80.0);
            bx(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0))
        };
        for im in 0..20 {
            g.add_image(im).unwrap();
            for _ in 0..rng.random_range(0..4) {
                let c = rng.random_range(0..3);
                let b = rand_box(rng);
                g.add_object(im, c, b).unwrap();
                // Perturbed copies of truth plus clutter.
                for _ in 0..rng.random_range(0..3) {
                    let j = bx(
                        b.to_array()[0] + rng.random_range(-2.0..2.0),
                        b.to_array()[1] + rng.random_range(-2.0..2.0),
                        b.to_array()[2] + rng.random_range(-2.0..2.0),
                        b.to_array()[3] + rng.random_range(-2.0..2.0),
                    );
                    let score = (rng.random_range(0..20) as f64) / 20.0;
                    dets.push(Detection::new(im, c, j, score).unwrap());
                }
            }
            for _ in 0..rng.random_range(0..3) {
                let score = (rng.random_range(0..20) as f64) / 20.0;
                dets.push(Detection::new(im, rng.random_range(0..3), rand_box(rng), score).unwrap());
            }
        }
        (dets, g)
    }

    #[test]
    fn matches_naive_evaluator_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let (dets, g) = random_instance(&mut rng);
            if g.classes_present().is_empty() {
                continue;
            }
            let r = evaluate(&dets, &g, EvalMode::Sweep).unwrap();
            for (t, m) in r.thresholds.iter().zip(&r.map_per_threshold) {
                assert_eq!(*m, naive_map(&dets, &g, *t));
            }
        }
    }

    #[test]
    fn metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..30 {
            let (dets, g) = random_instance(&mut rng);
            if g.classes_present().is_empty() {
                continue;
            }
            let r = evaluate(&dets, &g, EvalMode::Sweep).unwrap();
            for w in r.map_per_threshold.windows(2) {
                assert!(w[1] <= w[0]);
            }
            for c in r.per_class.values() {
                assert!(c.ap.iter().all(|a| (0.0..=1.0).contains(a)));
                for w in c.ap.windows(2) {
                    assert!(w[1] <= w[0]);
                }
            }

            let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect();
            assert_eq!(evaluate(&squashed, &g, EvalMode::Sweep).unwrap().per_class, r.per_class);

            if let Some(&d) = dets.first() {
                let min = dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
                let mut dup = dets.clone();
                dup.push(Detection { score: min - 1.0, ..d });
                let r2 = evaluate(&dup, &g, EvalMode::Sweep).unwrap();
                for (a, b) in r2.per_class.values().zip(r.per_class.values()) {
                    for (x, y) in a.ap.iter().zip(&b.ap) {
                        assert!(x <= y);
                    }
                }
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (dets, g) = random_instance(&mut rng);
        assert_eq!(
            evaluate_with(&dets, &g, EvalMode::Sweep, Execution::Sequential).unwrap(),
            evaluate_with(&dets, &g, EvalMode::Sweep, Execution::Parallel).unwrap()
        );
    }
}
