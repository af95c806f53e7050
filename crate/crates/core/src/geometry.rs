//! Box representations, IoU, and the complete-IoU loss with its gradient.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in normalized center form: center, width and height as fractions of
/// the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxCxcywh {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {b:?}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive size in {b:?}")));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::InvalidBox(format!("center outside [0,1] in {b:?}")));
        }
        Ok(b)
    }

    pub fn from_array(p: [f64; 4]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Absolute corner form on an `img_w` x `img_h` image.
    pub fn to_xyxy(self, img_w: f64, img_h: f64) -> Result<BoxXyxy> {
        check_image_dims(img_w, img_h)?;
        BoxXyxy::new(
            (self.cx - self.w / 2.0) * img_w,
            (self.cy - self.h / 2.0) * img_h,
            (self.cx + self.w / 2.0) * img_w,
            (self.cy + self.h / 2.0) * img_h,
        )
    }
}

impl<'de> Deserialize<'de> for BoxCxcywh {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            cx: f64,
            cy: f64,
            w: f64,
            h: f64,
        }
        let r = Raw::deserialize(d)?;
        BoxCxcywh::new(r.cx, r.cy, r.w, r.h).map_err(serde::de::Error::custom)
    }
}

/// Box in absolute corner form (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxXyxy {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {b:?}")));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!("empty extent in {b:?}")));
        }
        Ok(b)
    }

    /// From COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn translate(self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Inverse of [`BoxCxcywh::to_xyxy`].
    pub fn to_cxcywh(self, img_w: f64, img_h: f64) -> Result<BoxCxcywh> {
        check_image_dims(img_w, img_h)?;
        BoxCxcywh::new(
            (self.x1 + self.x2) / 2.0 / img_w,
            (self.y1 + self.y2) / 2.0 / img_h,
            (self.x2 - self.x1) / img_w,
            (self.y2 - self.y1) / img_h,
        )
    }
}

fn check_image_dims(img_w: f64, img_h: f64) -> Result<()> {
    if img_w > 0.0 && img_h > 0.0 && img_w.is_finite() && img_h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidImageDims { width: img_w, height: img_h })
    }
}

pub fn convert(b: BoxCxcywh, img_w: f64, img_h: f64) -> Result<BoxXyxy> {
    b.to_xyxy(img_w, img_h)
}

/// Intersection area over union area.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

const NU_SCALE: f64 = 4.0 / (PI * PI);

/// Intermediate quantities of the complete-IoU loss for one box pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouTerms {
    pub iou: f64,
    /// Squared center distance.
    pub rho2: f64,
    /// Squared diagonal of the smallest enclosing box.
    pub c2: f64,
    /// Aspect-ratio consistency.
    pub nu: f64,
    /// Trade-off weight `nu / ((1 - iou) + nu)`; 0 when both vanish.
    pub alpha: f64,
}

impl CiouTerms {
    pub fn loss(&self) -> f64 {
        self.loss_with_alpha(self.alpha)
    }

    pub fn loss_with_alpha(&self, alpha: f64) -> f64 {
        1.0 - self.iou + self.rho2 / self.c2 + alpha * self.nu
    }
}

fn check_size(p: &[f64; 4], which: &str) -> Result<()> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidBox(format!("{which} box has non-finite coordinate")));
    }
    if p[2] <= 0.0 || p[3] <= 0.0 {
        return Err(Error::InvalidBox(format!(
            "{which} box has non-positive size {}x{}",
            p[2], p[3]
        )));
    }
    Ok(())
}

fn corners(p: &[f64; 4]) -> [f64; 4] {
    [p[0] - p[2] / 2.0, p[1] - p[3] / 2.0, p[0] + p[2] / 2.0, p[1] + p[3] / 2.0]
}

/// Complete-IoU terms for raw `[cx, cy, w, h]` arrays. Only positive size
/// is required, so callers may probe slightly outside the unit square.
pub fn ciou_terms_raw(pred: [f64; 4], gt: [f64; 4]) -> Result<CiouTerms> {
    check_size(&pred, "predicted")?;
    check_size(&gt, "ground-truth")?;
    let [x1, y1, x2, y2] = corners(&pred);
    let [gx1, gy1, gx2, gy2] = corners(&gt);

    let iw = (x2.min(gx2) - x1.max(gx1)).max(0.0);
    let ih = (y2.min(gy2) - y1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = (x2 - x1) * (y2 - y1) + (gx2 - gx1) * (gy2 - gy1) - inter;
    let iou = inter / union;

    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c2 = cw * cw + ch * ch;
    let rho2 = (pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2);

    let d = (gt[2] / gt[3]).atan() - (pred[2] / pred[3]).atan();
    let nu = NU_SCALE * d * d;
    let denom = (1.0 - iou) + nu;
    let alpha = if denom > 0.0 { nu / denom } else { 0.0 };

    Ok(CiouTerms { iou, rho2, c2, nu, alpha })
}

pub fn ciou_terms(pred: &BoxCxcywh, gt: &BoxCxcywh) -> CiouTerms {
    ciou_terms_raw(pred.to_array(), gt.to_array()).expect("validated boxes")
}

/// `1 - IoU + rho^2 / c^2 + alpha * nu`.
pub fn ciou_loss(pred: &BoxCxcywh, gt: &BoxCxcywh) -> f64 {
    ciou_terms(pred, gt).loss()
}

pub fn ciou_loss_raw(pred: [f64; 4], gt: [f64; 4]) -> Result<f64> {
    Ok(ciou_terms_raw(pred, gt)?.loss())
}

/// Loss with `alpha` held at a caller-supplied value. Its gradient is what
/// [`ciou_grad`] returns when `alpha` is taken from the same point.
pub fn ciou_loss_frozen_alpha(pred: [f64; 4], gt: [f64; 4], alpha: f64) -> Result<f64> {
    Ok(ciou_terms_raw(pred, gt)?.loss_with_alpha(alpha))
}

// d max(a, b) / da and d min(a, b) / da, splitting ties evenly.
fn dmax(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

fn dmin(a: f64, b: f64) -> f64 {
    dmax(b, a)
}

/// Gradient of the complete-IoU loss with respect to the predicted
/// `(cx, cy, w, h)`, with `alpha` treated as a constant.
///
/// Where two edges coincide the max/min derivative is split evenly between
/// the branches (mean of the one-sided limits). At exact identity this yields
/// the zero subgradient.
pub fn ciou_grad(pred: &BoxCxcywh, gt: &BoxCxcywh) -> [f64; 4] {
    ciou_grad_raw(pred.to_array(), gt.to_array()).expect("validated boxes")
}

pub fn ciou_grad_raw(pred: [f64; 4], gt: [f64; 4]) -> Result<[f64; 4]> {
    let t = ciou_terms_raw(pred, gt)?;
    let [cx, cy, w, h] = pred;
    let [x1, y1, x2, y2] = corners(&pred);
    let [gx1, gy1, gx2, gy2] = corners(&gt);

    // Intersection partials over corner coordinates.
    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let (di_x1, di_x2) = if iw_raw > 0.0 {
        (-ih * dmax(x1, gx1), ih * dmin(x2, gx2))
    } else {
        (0.0, 0.0)
    };
    let (di_y1, di_y2) = if ih_raw > 0.0 {
        (-iw * dmax(y1, gy1), iw * dmin(y2, gy2))
    } else {
        (0.0, 0.0)
    };
    let di = [
        di_x1 + di_x2,
        di_y1 + di_y2,
        0.5 * (di_x2 - di_x1),
        0.5 * (di_y2 - di_y1),
    ];
    let (pw, ph) = (x2 - x1, y2 - y1);
    let d_area = [0.0, 0.0, ph, pw];
    let inter = iw * ih;
    let union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter;

    // Enclosing diagonal partials.
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let dc2_x1 = -2.0 * cw * dmin(x1, gx1);
    let dc2_x2 = 2.0 * cw * dmax(x2, gx2);
    let dc2_y1 = -2.0 * ch * dmin(y1, gy1);
    let dc2_y2 = 2.0 * ch * dmax(y2, gy2);
    let dc2 = [
        dc2_x1 + dc2_x2,
        dc2_y1 + dc2_y2,
        0.5 * (dc2_x2 - dc2_x1),
        0.5 * (dc2_y2 - dc2_y1),
    ];
    let drho2 = [2.0 * (cx - gt[0]), 2.0 * (cy - gt[1]), 0.0, 0.0];

    let delta = (gt[2] / gt[3]).atan() - (w / h).atan();
    let s = w * w + h * h;
    let dnu = [0.0, 0.0, -2.0 * NU_SCALE * delta * h / s, 2.0 * NU_SCALE * delta * w / s];

    let mut g = [0.0; 4];
    for k in 0..4 {
        let du = d_area[k] - di[k];
        let diou = (di[k] * union - inter * du) / (union * union);
        let ddist = drho2[k] / t.c2 - t.rho2 * dc2[k] / (t.c2 * t.c2);
        g[k] = -diou + ddist + t.alpha * dnu[k];
    }
    Ok(g)
}
