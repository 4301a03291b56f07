//! mAP@0.5 at fine and coarse granularity, and the ablation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, LabeledBox, ScoredBox};
use crate::taxonomy::Taxonomy;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Fine,
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class id; classes without ground truth are absent.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map50: f64,
    pub granularity: Granularity,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Area under the precision envelope, all recall points.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Greedy matching per class and all-point AP. Detections are ranked by
/// score descending, ties by image then input order; each takes the
/// unmatched same-class ground truth with the highest IoU `>= iou_thr`.
pub fn match_and_ap(
    detections: &[Vec<ScoredBox>],
    gts: &[Vec<LabeledBox>],
    class_count: usize,
    iou_thr: f64,
    granularity: Granularity,
) -> Result<EvalReport> {
    if detections.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            detections.len(),
            gts.len()
        )));
    }
    let out_of_range = detections
        .iter()
        .flatten()
        .map(|d| d.cls)
        .chain(gts.iter().flatten().map(|g| g.cls))
        .find(|&c| c >= class_count);
    if let Some(id) = out_of_range {
        return Err(Error::ClassOutOfRange { id, n: class_count });
    }

    let mut per_class_ap = BTreeMap::new();
    for class in 0..class_count {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.cls == class).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, usize, &ScoredBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().enumerate().map(move |(k, d)| (img, k, d)))
            .filter(|(_, _, d)| d.cls == class)
            .collect();
        ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let tp: Vec<bool> = ranked
            .iter()
            .map(|&(img, _, d)| {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts[img].iter().enumerate() {
                    if gt.cls != class || used[img][g] {
                        continue;
                    }
                    let o = iou(&d.bbox, &gt.bbox);
                    if o >= iou_thr && best.map_or(true, |(_, b)| o > b) {
                        best = Some((g, o));
                    }
                }
                best.map(|(g, _)| used[img][g] = true).is_some()
            })
            .collect();
        per_class_ap.insert(class, average_precision(&tp, n_gt));
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map50,
        granularity,
        n_images: gts.len(),
        n_gt: gts.iter().map(Vec::len).sum(),
        n_det: detections.iter().map(Vec::len).sum(),
    })
}

pub fn eval_fine(detections: &[Vec<ScoredBox>], gts: &[Vec<LabeledBox>], taxonomy: &Taxonomy, iou_thr: f64) -> Result<EvalReport> {
    match_and_ap(detections, gts, taxonomy.n_fine(), iou_thr, Granularity::Fine)
}

/// Maps detections and ground truth to coarse classes and matches again.
pub fn eval_coarse(
    detections: &[Vec<ScoredBox>],
    gts: &[Vec<LabeledBox>],
    taxonomy: &Taxonomy,
    iou_thr: f64,
) -> Result<EvalReport> {
    let dets = detections
        .iter()
        .map(|ds| {
            ds.iter()
                .map(|d| Ok(ScoredBox { cls: taxonomy.to_coarse(d.cls)?, ..*d }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let gts = gts
        .iter()
        .map(|gs| {
            gs.iter()
                .map(|g| Ok(LabeledBox { cls: taxonomy.to_coarse(g.cls)?, bbox: g.bbox }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    match_and_ap(&dets, &gts, taxonomy.n_coarse(), iou_thr, Granularity::Coarse)
}

/// Count of (predicted coarse, true coarse) pairs over matched detections
/// at IoU `>= iou_thr`, class-agnostic. Diagnostic only.
pub fn coarse_confusion(
    detections: &[Vec<ScoredBox>],
    gts: &[Vec<LabeledBox>],
    taxonomy: &Taxonomy,
    iou_thr: f64,
) -> Result<Vec<Vec<usize>>> {
    let n = taxonomy.n_coarse();
    let mut m = vec![vec![0; n]; n];
    for (ds, gs) in detections.iter().zip(gts) {
        for d in ds {
            let best = gs
                .iter()
                .map(|g| (iou(&d.bbox, &g.bbox), g.cls))
                .filter(|(o, _)| *o >= iou_thr)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, g)) = best {
                m[taxonomy.to_coarse(d.cls)?][taxonomy.to_coarse(g)?] += 1;
            }
        }
    }
    Ok(m)
}

// ---- ablation table -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub fine_map: f64,
    pub coarse_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed_count: usize,
    pub fine_map_mean: f64,
    pub fine_map_std: f64,
    pub coarse_map_mean: f64,
    pub coarse_map_std: f64,
    /// Runs of this label that failed and are not in the means.
    pub failed: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sort key placing normal first, weighted runs by ascending alpha, then
/// proposed runs, then anything else by label.
fn row_rank(label: &str) -> (u8, String) {
    let group = if label == "normal" {
        0
    } else if label.starts_with("weighted") {
        1
    } else if label.starts_with("proposed") {
        2
    } else {
        3
    };
    (group, label.to_string())
}

/// Aggregates runs per label with mean and sample standard deviation.
/// `failed` lists labels of runs that did not finish.
pub fn ablation_rows(runs: &[RunResult], failed: &[String]) -> Vec<AblationRow> {
    let mut labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).chain(failed.iter().map(String::as_str)).collect();
    labels.sort_by_key(|l| row_rank(l));
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.label == label).collect();
            let fine: Vec<f64> = mine.iter().map(|r| r.fine_map).collect();
            let coarse: Vec<f64> = mine.iter().map(|r| r.coarse_map).collect();
            let (fine_map_mean, fine_map_std) = mean_std(&fine);
            let (coarse_map_mean, coarse_map_std) = mean_std(&coarse);
            AblationRow {
                label: label.to_string(),
                seed_count: mine.len(),
                fine_map_mean,
                fine_map_std,
                coarse_map_mean,
                coarse_map_std,
                failed: failed.iter().filter(|f| *f == label).count(),
            }
        })
        .collect()
}

pub const REPORT_HEADER: &str = "label,seed_count,fine_map_mean,fine_map_std,coarse_map_mean,coarse_map_std";

pub fn report_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.label, r.seed_count, r.fine_map_mean, r.fine_map_std, r.coarse_map_mean, r.coarse_map_std
        )
        .expect("string write");
    }
    out
}

pub fn report_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| label | seeds | fine mAP@0.5 | coarse mAP@0.5 |\n|---|---|---|---|\n",
    );
    for r in rows {
        let note = if r.failed > 0 { format!(" ({} failed)", r.failed) } else { String::new() };
        writeln!(
            out,
            "| {} | {}{} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
            r.label,
            r.seed_count,
            note,
            100.0 * r.fine_map_mean,
            100.0 * r.fine_map_std,
            100.0 * r.coarse_map_mean,
            100.0 * r.coarse_map_std
        )
        .expect("string write");
    }
    out
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn write_report(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("report.csv", report_csv(rows)), ("report.md", report_markdown(rows))] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
