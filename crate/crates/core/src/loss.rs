//! Training objective: `box + obj + alpha * cls`, where the per-anchor
//! classification term is scaled by `1 + gamma` when the anchor's predicted
//! coarse class disagrees with its target's coarse class.
//!
//! Components are summed per image. Ground truth is assigned to the grid
//! cell containing its center and to every anchor whose shape is within a
//! factor of 4 on both axes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{ciou_loss_vars, BoxVars, LabeledBox};
use crate::taxonomy::{HierLossParams, Taxonomy};

/// Shape ratio above which an anchor does not take a ground truth.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// Head values per anchor before the class logits: tx, ty, tw, th, tobj.
pub const BOX_FIELDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Grid side; the grid has `s * s` cells.
    pub s: usize,
    /// Anchors per cell.
    pub b: usize,
    pub n_fine: usize,
    /// `(w, h)` per anchor, image-normalized.
    pub anchors: Vec<(f64, f64)>,
}

impl GridSpec {
    pub fn new(s: usize, n_fine: usize, anchors: Vec<(f64, f64)>) -> Result<Self> {
        let g = GridSpec {
            s,
            b: anchors.len(),
            n_fine,
            anchors,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::config("grid.s", "must be >= 1"));
        }
        if self.b == 0 || self.anchors.len() != self.b {
            return Err(Error::config(
                "grid.anchors",
                format!("expected b = {} >= 1 anchors, got {}", self.b, self.anchors.len()),
            ));
        }
        if self.n_fine == 0 {
            return Err(Error::config("grid.n_fine", "must be >= 1"));
        }
        if let Some(a) = self.anchors.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0)) {
            return Err(Error::config("grid.anchors", format!("non-positive anchor {a:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.s * self.s
    }

    /// Number of (cell, anchor) pairs.
    pub fn pairs(&self) -> usize {
        self.cells() * self.b
    }

    pub fn channels_per_anchor(&self) -> usize {
        BOX_FIELDS + self.n_fine
    }

    pub fn head_channels(&self) -> usize {
        self.b * self.channels_per_anchor()
    }

    /// Flat index into the `[b * (5 + n_fine), s, s]` head output of field
    /// `k` for anchor `anchor` of cell `cell` (`cell = gy * s + gx`).
    pub fn head_index(&self, cell: usize, anchor: usize, k: usize) -> usize {
        (anchor * self.channels_per_anchor() + k) * self.cells() + cell
    }

    /// Cell holding a normalized center; half-open spans, with 1.0 folded
    /// into the last cell.
    pub fn cell_of(&self, cx: f64, cy: f64) -> Result<usize> {
        if !((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy)) {
            return Err(Error::Label(format!("box center ({cx}, {cy}) outside [0,1]")));
        }
        let idx = |v: f64| ((v * self.s as f64).floor() as usize).min(self.s - 1);
        Ok(idx(cy) * self.s + idx(cx))
    }

    /// `(gx, gy)` of a cell index.
    pub fn cell_xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.s, cell / self.s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssignEntry {
    pub cell: usize,
    pub anchor: usize,
    pub gt: usize,
}

/// Ground truth to (cell, anchor) assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Sorted by (cell, anchor); each pair appears at most once.
    pub entries: Vec<AssignEntry>,
    /// Indexed by `cell * b + anchor`; 1 exactly on assigned pairs.
    pub obj_target: Vec<f64>,
    /// Claims lost to a better-matching ground truth.
    pub dropped: usize,
}

/// One-hot class target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassTarget {
    pub class: usize,
    pub n: usize,
}

impl ClassTarget {
    pub fn new(class: usize, n: usize) -> Result<Self> {
        if class >= n {
            return Err(Error::ClassOutOfRange { id: class, n });
        }
        Ok(ClassTarget { class, n })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.n).map(|c| if c == self.class { 1.0 } else { 0.0 }).collect()
    }
}

/// Loss components of one image (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub obj_loss: f64,
    /// Classification term with the `1 + gamma` weights applied, before `alpha`.
    pub cls_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.box_loss, self.obj_loss, self.cls_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss graph root plus its component values.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub root: Var,
    pub breakdown: LossBreakdown,
}

fn max_shape_ratio(w: f64, h: f64, anchor: (f64, f64)) -> f64 {
    let (aw, ah) = anchor;
    (w / aw).max(aw / w).max(h / ah).max(ah / h)
}

fn shape_iou(w: f64, h: f64, anchor: (f64, f64)) -> f64 {
    let inter = w.min(anchor.0) * h.min(anchor.1);
    inter / (w * h + anchor.0 * anchor.1 - inter)
}

pub fn assign(gt: &[LabeledBox], grid: &GridSpec) -> Result<Assignment> {
    let mut claims: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut dropped = 0;
    for (gi, g) in gt.iter().enumerate() {
        g.bbox.validate()?;
        let cell = grid.cell_of(g.bbox.cx, g.bbox.cy)?;
        let ratios: Vec<f64> = grid
            .anchors
            .iter()
            .map(|&a| max_shape_ratio(g.bbox.w, g.bbox.h, a))
            .collect();
        let mut anchors: Vec<usize> = (0..grid.b).filter(|&j| ratios[j] < ANCHOR_RATIO_LIMIT).collect();
        if anchors.is_empty() {
            let best = (0..grid.b)
                .min_by(|&a, &b| ratios[a].total_cmp(&ratios[b]))
                .expect("grid has at least one anchor");
            anchors.push(best);
        }
        for j in anchors {
            let key = (cell, j);
            match claims.get(&key) {
                None => {
                    claims.insert(key, gi);
                }
                Some(&prev) => {
                    let p = &gt[prev].bbox;
                    let iou_prev = shape_iou(p.w, p.h, grid.anchors[j]);
                    let iou_new = shape_iou(g.bbox.w, g.bbox.h, grid.anchors[j]);
                    if iou_new > iou_prev {
                        claims.insert(key, gi);
                    }
                    dropped += 1;
                    log::warn!("cell {cell} anchor {j}: two ground truths claim the pair; keeping the better shape match");
                }
            }
        }
    }
    let mut obj_target = vec![0.0; grid.pairs()];
    let entries = claims
        .into_iter()
        .map(|((cell, anchor), gt)| {
            obj_target[cell * grid.b + anchor] = 1.0;
            AssignEntry { cell, anchor, gt }
        })
        .collect();
    Ok(Assignment {
        entries,
        obj_target,
        dropped,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn expect_dims(tape: &Tape, v: Var, dims: &[usize], what: &str) -> Result<()> {
    if tape.shape(v).dims() != dims {
        return Err(Error::Shape(format!(
            "{what}: expected shape {dims:?}, got {}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// BCE of `σ(obj_logits)` against the assignment's 0/1 targets, summed over
/// every (cell, anchor). `obj_logits` has shape `[s², b]`.
pub fn objectness_loss(tape: &mut Tape, obj_logits: Var, assignment: &Assignment) -> Result<Var> {
    if tape.value(obj_logits).len() != assignment.obj_target.len() {
        return Err(Error::Shape(format!(
            "objectness: {} logits for {} (cell, anchor) pairs",
            tape.value(obj_logits).len(),
            assignment.obj_target.len()
        )));
    }
    let bce = tape.bce_with_logits(obj_logits, &assignment.obj_target)?;
    Ok(tape.sum(bce))
}

/// `Σ_(i,j) assigned (1 + γ_ij) Σ_c BCE(σ(logit_ijc), onehot_c)`.
///
/// `cls_logits` has shape `[s², b, n_fine]`; `targets[k]` belongs to
/// `assignment.entries[k]`. `γ_ij` uses the argmax fine class of the
/// anchor's logits and is a constant for backward.
pub fn classification_loss(
    tape: &mut Tape,
    cls_logits: Var,
    targets: &[ClassTarget],
    assignment: &Assignment,
    taxonomy: &Taxonomy,
    params: &HierLossParams,
) -> Result<Var> {
    params.validate()?;
    let dims = tape.shape(cls_logits).dims().to_vec();
    let &[cells, b, n] = dims.as_slice() else {
        return Err(Error::Shape(format!(
            "classification logits must be [s², b, n_fine], got {dims:?}"
        )));
    };
    if n != taxonomy.n_fine() {
        return Err(Error::Shape(format!(
            "{n} class logits for a taxonomy of {} fine classes",
            taxonomy.n_fine()
        )));
    }
    if targets.len() != assignment.entries.len() {
        return Err(Error::Shape(format!(
            "{} class targets for {} assigned anchors",
            targets.len(),
            assignment.entries.len()
        )));
    }
    let m = assignment.entries.len();
    if m == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut indices = Vec::with_capacity(m * n);
    let mut onehot = Vec::with_capacity(m * n);
    let mut weights = Vec::with_capacity(m * n);
    for (e, t) in assignment.entries.iter().zip(targets) {
        if e.cell >= cells || e.anchor >= b || t.n != n {
            return Err(Error::Shape(format!("assignment {e:?} / target {t:?} outside logits {dims:?}")));
        }
        let row = (e.cell * b + e.anchor) * n;
        let logits = &tape.value(cls_logits)[row..row + n];
        let predicted = argmax(logits);
        let gamma = taxonomy.gamma(params, predicted, t.class)?;
        indices.extend(row..row + n);
        onehot.extend(t.one_hot());
        weights.extend(std::iter::repeat(1.0 + gamma).take(n));
    }
    let shape = Shape::new(&[m, n])?;
    let picked = tape.gather(cls_logits, indices, shape.clone())?;
    let bce = tape.bce_with_logits(picked, &onehot)?;
    let w = tape.stop_gradient(weights, shape)?;
    let weighted = tape.mul(bce, w)?;
    Ok(tape.sum(weighted))
}

/// Sum of CIoU losses of `decoded[k]` against the ground truth of
/// `assignment.entries[k]`.
pub fn box_loss(
    tape: &mut Tape,
    decoded: Option<BoxVars>,
    gt: &[LabeledBox],
    assignment: &Assignment,
) -> Result<Var> {
    let m = assignment.entries.len();
    let Some(decoded) = decoded else {
        if m == 0 {
            return Ok(tape.scalar(0.0));
        }
        return Err(Error::Shape(format!("no decoded boxes for {m} assigned anchors")));
    };
    if tape.value(decoded.cx).len() != m {
        return Err(Error::Shape(format!(
            "{} decoded boxes for {m} assigned anchors",
            tape.value(decoded.cx).len()
        )));
    }
    let targets = assignment
        .entries
        .iter()
        .map(|e| gt.get(e.gt).map(|g| g.bbox))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Shape("assignment references a missing ground truth".into()))?;
    let per_pair = ciou_loss_vars(tape, decoded, &targets)?;
    Ok(tape.sum(per_pair))
}

/// Gathers `[s², b]` objectness logits from the head output.
pub fn objectness_logits(tape: &mut Tape, head: Var, grid: &GridSpec) -> Result<Var> {
    expect_dims(tape, head, &[grid.head_channels(), grid.s, grid.s], "head output")?;
    let idx = (0..grid.cells())
        .flat_map(|cell| (0..grid.b).map(move |j| (cell, j)))
        .map(|(cell, j)| grid.head_index(cell, j, 4))
        .collect();
    tape.gather(head, idx, Shape::new(&[grid.cells(), grid.b])?)
}

/// Gathers `[s², b, n_fine]` class logits from the head output.
pub fn class_logits(tape: &mut Tape, head: Var, grid: &GridSpec) -> Result<Var> {
    expect_dims(tape, head, &[grid.head_channels(), grid.s, grid.s], "head output")?;
    let mut idx = Vec::with_capacity(grid.pairs() * grid.n_fine);
    for cell in 0..grid.cells() {
        for j in 0..grid.b {
            for c in 0..grid.n_fine {
                idx.push(grid.head_index(cell, j, BOX_FIELDS + c));
            }
        }
    }
    tape.gather(head, idx, Shape::new(&[grid.cells(), grid.b, grid.n_fine])?)
}

/// Differentiable decode of the assigned anchors:
/// `bx = (2σ(tx) - 0.5 + gx) / s`, `bw = anchor_w · (2σ(tw))²`.
pub fn decode_assigned(
    tape: &mut Tape,
    head: Var,
    grid: &GridSpec,
    assignment: &Assignment,
) -> Result<Option<BoxVars>> {
    expect_dims(tape, head, &[grid.head_channels(), grid.s, grid.s], "head output")?;
    let m = assignment.entries.len();
    if m == 0 {
        return Ok(None);
    }
    let shape = Shape::vector(m)?;
    let field = |tape: &mut Tape, k: usize| -> Result<Var> {
        let idx = assignment
            .entries
            .iter()
            .map(|e| grid.head_index(e.cell, e.anchor, k))
            .collect();
        let raw = tape.gather(head, idx, shape.clone())?;
        Ok(tape.sigmoid(raw))
    };
    let inv_s = 1.0 / grid.s as f64;
    let center = |tape: &mut Tape, k: usize, offset: &dyn Fn(&AssignEntry) -> f64| -> Result<Var> {
        let sg = field(tape, k)?;
        let two = tape.scale(sg, 2.0);
        let offs = tape.constant(
            assignment.entries.iter().map(|e| offset(e) - 0.5).collect(),
            shape.clone(),
        )?;
        let pos = tape.add(two, offs)?;
        Ok(tape.scale(pos, inv_s))
    };
    let cx = center(tape, 0, &|e| grid.cell_xy(e.cell).0 as f64)?;
    let cy = center(tape, 1, &|e| grid.cell_xy(e.cell).1 as f64)?;
    let extent = |tape: &mut Tape, k: usize, anchor: &dyn Fn(&AssignEntry) -> f64| -> Result<Var> {
        let sg = field(tape, k)?;
        let two = tape.scale(sg, 2.0);
        let sq = tape.square(two);
        let a = tape.constant(assignment.entries.iter().map(anchor).collect(), shape.clone())?;
        tape.mul(sq, a)
    };
    let w = extent(tape, 2, &|e| grid.anchors[e.anchor].0)?;
    let h = extent(tape, 3, &|e| grid.anchors[e.anchor].1)?;
    Ok(Some(BoxVars { cx, cy, w, h }))
}

/// Full per-image objective on a detector head output
/// `[b * (5 + n_fine), s, s]`.
pub fn total_loss(
    tape: &mut Tape,
    head: Var,
    gt: &[LabeledBox],
    grid: &GridSpec,
    taxonomy: &Taxonomy,
    params: &HierLossParams,
) -> Result<LossOutput> {
    params.validate()?;
    if grid.n_fine != taxonomy.n_fine() {
        return Err(Error::Shape(format!(
            "grid has {} classes, taxonomy {}",
            grid.n_fine,
            taxonomy.n_fine()
        )));
    }
    let assignment = assign(gt, grid)?;
    let targets = assignment
        .entries
        .iter()
        .map(|e| ClassTarget::new(gt[e.gt].cls, grid.n_fine))
        .collect::<Result<Vec<_>>>()?;

    let decoded = decode_assigned(tape, head, grid, &assignment)?;
    let lbox = box_loss(tape, decoded, gt, &assignment)?;
    let obj_logits = objectness_logits(tape, head, grid)?;
    let lobj = objectness_loss(tape, obj_logits, &assignment)?;
    let cls_logits = class_logits(tape, head, grid)?;
    let lcls = classification_loss(tape, cls_logits, &targets, &assignment, taxonomy, params)?;

    let weighted = tape.scale(lcls, params.effective_alpha());
    let partial = tape.add(lbox, lobj)?;
    let root = tape.add(partial, weighted)?;

    let breakdown = LossBreakdown {
        box_loss: tape.item(lbox),
        obj_loss: tape.item(lobj),
        cls_loss: tape.item(lcls),
        total: tape.item(root),
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("{breakdown:?}")));
    }
    Ok(LossOutput { root, breakdown })
}

/// Value-only sigmoid BCE, used by tests and diagnostics.
pub fn bce(logit: f64, target: f64) -> f64 {
    let s = sigmoid(logit);
    -(target * s.ln() + (1.0 - target) * (1.0 - s).ln())
}
