//! Bounding-box algebra: IoU, the CIoU regression loss, and per-class NMS.
//!
//! Boxes are stored in center/size form. Corner form only appears inside
//! the overlap computations.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Predicted extents are clamped to at least this before the CIoU terms.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Label(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// A ground-truth box with its fine-grained class id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub cls: usize,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// A detection: box, fine-grained class id and confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub cls: usize,
    pub score: f64,
}

// Interval overlap and enclosing length in center/extent form. Identical
// intervals give exactly their extent, which corner arithmetic does not.
fn overlap_1d(c1: f64, e1: f64, c2: f64, e2: f64) -> f64 {
    e1.min(e2).min((e1 + e2) / 2.0 - (c1 - c2).abs()).max(0.0)
}

fn enclose_1d(c1: f64, e1: f64, c2: f64, e2: f64) -> f64 {
    e1.max(e2).max((e1 + e2) / 2.0 + (c1 - c2).abs())
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    overlap_1d(a.cx, a.w, b.cx, b.w) * overlap_1d(a.cy, a.h, b.cy, b.h)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `1 - CIoU` where `CIoU = IoU - ρ²/c² - a·v`.
///
/// `ρ` is the center distance, `c` the diagonal of the smallest enclosing
/// box, `v = 4/π² (atan(w_gt/h_gt) - atan(w/h))²` and `a = v / ((1 - IoU) + v)`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let pred = BBox {
        w: pred.w.max(MIN_EXTENT),
        h: pred.h.max(MIN_EXTENT),
        ..*pred
    };
    let iou = {
        let inter = intersection(&pred, gt);
        inter / (pred.area() + gt.area() - inter)
    };
    let cw = enclose_1d(pred.cx, pred.w, gt.cx, gt.w);
    let ch = enclose_1d(pred.cy, pred.h, gt.cy, gt.h);
    let c2 = cw * cw + ch * ch;
    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let v = aspect_penalty(pred.w, pred.h, gt);
    let a = trade_off(iou, v);
    1.0 - iou + rho2 / c2 + a * v
}

fn aspect_penalty(w: f64, h: f64, gt: &BBox) -> f64 {
    4.0 / (PI * PI) * ((gt.w / gt.h).atan() - (w / h).atan()).powi(2)
}

fn trade_off(iou: f64, v: f64) -> f64 {
    let denom = (1.0 - iou) + v;
    if denom > 0.0 {
        v / denom
    } else {
        0.0
    }
}

/// Differentiable box coordinates: four vectors of equal length.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

/// Elementwise CIoU loss of `pred[i]` against `gt[i]`, returned as a vector
/// Var of length `gt.len()`. The trade-off coefficient `a` is held constant
/// during backward.
pub fn ciou_loss_vars(tape: &mut Tape, pred: BoxVars, gt: &[BBox]) -> Result<Var> {
    let m = gt.len();
    if [pred.cx, pred.cy, pred.w, pred.h]
        .iter()
        .any(|&v| tape.value(v).len() != m)
    {
        return Err(Error::Shape(format!(
            "ciou: prediction vectors do not match {m} ground-truth boxes"
        )));
    }
    let shape = tape.shape(pred.cx).clone();
    let gt_field = |f: fn(&BBox) -> f64, tape: &mut Tape| -> Result<Var> {
        tape.constant(gt.iter().map(f).collect(), shape.clone())
    };
    let gcx = gt_field(|b| b.cx, tape)?;
    let gcy = gt_field(|b| b.cy, tape)?;
    let gw = gt_field(|b| b.w, tape)?;
    let gh = gt_field(|b| b.h, tape)?;
    let g_area = gt_field(BBox::area, tape)?;
    let g_atan = gt_field(|b| (b.w / b.h).atan(), tape)?;

    let w = tape.clamp(pred.w, MIN_EXTENT, f64::INFINITY)?;
    let h = tape.clamp(pred.h, MIN_EXTENT, f64::INFINITY)?;
    let dx = tape.sub(pred.cx, gcx)?;
    let dy = tape.sub(pred.cy, gcy)?;
    let (iw, cw) = overlap_enclose_vars(tape, dx, w, gw)?;
    let (ih, ch) = overlap_enclose_vars(tape, dy, h, gh)?;

    let inter = tape.mul(iw, ih)?;
    let p_area = tape.mul(w, h)?;
    let union = tape.add(p_area, g_area)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    // center distance over enclosing diagonal
    let cw2 = tape.square(cw);
    let ch2 = tape.square(ch);
    let c2 = tape.add(cw2, ch2)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let rho2 = tape.add(dx2, dy2)?;
    let dist = tape.div(rho2, c2)?;

    // aspect ratio
    let ratio = tape.div(w, h)?;
    let p_atan = tape.atan(ratio);
    let d_atan = tape.sub(g_atan, p_atan)?;
    let d_atan2 = tape.square(d_atan);
    let v = tape.scale(d_atan2, 4.0 / (PI * PI));
    let coeff: Vec<f64> = tape
        .value(iou)
        .iter()
        .zip(tape.value(v))
        .map(|(&i, &vv)| trade_off(i, vv))
        .collect();
    let coeff = tape.stop_gradient(coeff, shape)?;
    let av = tape.mul(coeff, v)?;

    let one_minus = tape.neg(iou);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let loss = tape.add(one_minus, dist)?;
    tape.add(loss, av)
}

/// Differentiable [`overlap_1d`] and [`enclose_1d`] from the center offset
/// `d` and the two extents.
fn overlap_enclose_vars(tape: &mut Tape, d: Var, e1: Var, e2: Var) -> Result<(Var, Var)> {
    let neg = tape.neg(d);
    let abs = tape.maximum(d, neg)?;
    let sum = tape.add(e1, e2)?;
    let half = tape.scale(sum, 0.5);
    let lo = tape.minimum(e1, e2)?;
    let hi = tape.maximum(e1, e2)?;
    let inner = tape.sub(half, abs)?;
    let overlap = tape.minimum(lo, inner)?;
    let overlap = tape.relu(overlap);
    let outer = tape.add(half, abs)?;
    let enclose = tape.maximum(hi, outer)?;
    Ok((overlap, enclose))
}

/// Per-class greedy suppression. Output is sorted by score descending with
/// ties kept in input order; within a class every surviving pair has IoU
/// below `iou_threshold`.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.cls == d.cls && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
