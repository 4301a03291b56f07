//! Momentum SGD over the synthetic dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{mosaic, LabeledImage};
use crate::error::{Error, Result};
use crate::eval::{eval_coarse, eval_fine, EvalReport, DEFAULT_IOU};
use crate::geometry::ScoredBox;
use crate::loss::{total_loss, GridSpec, LossBreakdown};
use crate::model::{Checkpoint, DetectorParams, ModelConfig};
use crate::taxonomy::{HierLossParams, Taxonomy};

pub const METRICS_HEADER: &str = "epoch,box,obj,cls,total,fine_map,coarse_map";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mosaic_prob: f64,
    pub loss: HierLossParams,
    /// Evaluate every this many epochs; the last epoch is always evaluated
    /// when an evaluation set is given. 0 evaluates only the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 3e-4,
            momentum: 0.9,
            seed: 0,
            mosaic_prob: 0.5,
            loss: HierLossParams::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.mosaic_prob) {
            return Err(Error::config(
                "train.mosaic_prob",
                format!("must be in [0, 1], got {}", self.mosaic_prob),
            ));
        }
        self.loss.validate()
    }
}

/// Detection thresholds used when scoring a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub iou: f64,
    pub conf: f64,
    pub nms_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou: DEFAULT_IOU,
            conf: 0.25,
            nms_iou: 0.45,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("eval.iou", self.iou), ("eval.conf", self.conf), ("eval.nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field, format!("must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Per-image means over the epoch.
    pub loss: LossBreakdown,
    pub fine_map: Option<f64>,
    pub coarse_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub metrics: Vec<EpochMetrics>,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |m| format!("{m:.6}"));
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            m.epoch,
            m.loss.box_loss,
            m.loss.obj_loss,
            m.loss.cls_loss,
            m.loss.total,
            opt(m.fine_map),
            opt(m.coarse_map)
        )
        .expect("string write");
    }
    out
}

/// `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Loss and parameter gradients for one image, gradients added into `grads`
/// scaled by `weight`.
pub fn accumulate_image(
    params: &DetectorParams,
    image: &LabeledImage,
    taxonomy: &Taxonomy,
    loss: &HierLossParams,
    weight: f64,
    grads: &mut [Vec<f64>],
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true)?;
    let head = params.forward(&mut tape, &vars, &image.pixels.to_planar())?;
    let out = total_loss(&mut tape, head, &image.labels, &params.grid, taxonomy, loss)?;
    let root = tape.scale(out.root, weight);
    tape.backward(root)?;
    for (g, v) in grads.iter_mut().zip(&vars) {
        if let Some(d) = tape.grad(*v) {
            g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    Ok(out.breakdown)
}

pub fn predict_all(params: &DetectorParams, images: &[LabeledImage], settings: &EvalSettings) -> Result<Vec<Vec<ScoredBox>>> {
    images
        .iter()
        .map(|img| params.predict(&img.pixels.to_planar(), settings.conf, settings.nms_iou))
        .collect()
}

/// Fine and coarse mAP reports of a model on labelled images.
pub fn evaluate(
    params: &DetectorParams,
    images: &[LabeledImage],
    taxonomy: &Taxonomy,
    settings: &EvalSettings,
) -> Result<(EvalReport, EvalReport)> {
    let dets = predict_all(params, images, settings)?;
    let gts: Vec<_> = images.iter().map(|i| i.labels.clone()).collect();
    Ok((
        eval_fine(&dets, &gts, taxonomy, settings.iou)?,
        eval_coarse(&dets, &gts, taxonomy, settings.iou)?,
    ))
}

/// Trains from a seeded init. Everything random (init, shuffles, mosaic
/// choices) derives from `cfg.seed`, so equal inputs give equal outputs.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    grid: &GridSpec,
    taxonomy: &Taxonomy,
    train_set: &[LabeledImage],
    eval_set: Option<(&[LabeledImage], &EvalSettings)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    taxonomy.ensure_valid()?;
    if train_set.is_empty() {
        return Err(Error::config("train.data", "training set is empty"));
    }
    let params = DetectorParams::init(model.clone(), grid.clone(), cfg.seed)?;
    train_from(cfg, params, taxonomy, train_set, eval_set)
}

pub fn train_from(
    cfg: &TrainConfig,
    mut params: DetectorParams,
    taxonomy: &Taxonomy,
    train_set: &[LabeledImage],
    eval_set: Option<(&[LabeledImage], &EvalSettings)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = params.config.image_size;
    if let Some(bad) = train_set.iter().find(|i| i.pixels.width != size || i.pixels.height != size) {
        return Err(Error::Shape(format!(
            "model expects {size}x{size} images, got {}x{}",
            bad.pixels.width, bad.pixels.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut velocity: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let augmented;
                let image = if cfg.mosaic_prob > 0.0 && rng.gen_bool(cfg.mosaic_prob) {
                    let mut four = vec![train_set[i].clone()];
                    four.extend((0..3).map(|_| train_set[rng.gen_range(0..train_set.len())].clone()));
                    augmented = mosaic(&four, size, rng.gen())?;
                    &augmented
                } else {
                    &train_set[i]
                };
                let b = accumulate_image(&params, image, taxonomy, &cfg.loss, weight, &mut grads).map_err(|e| match e {
                    Error::NonFinite(detail) => {
                        Error::NonFinite(format!("epoch {epoch}, batch {batch_no}, image {i}: {detail}"))
                    }
                    other => other,
                })?;
                sum.box_loss += b.box_loss;
                sum.obj_loss += b.obj_loss;
                sum.cls_loss += b.cls_loss;
                sum.total += b.total;
            }
            if let Some((t, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {batch_no}: gradient of {} is not finite",
                    params.tensors[t].name
                )));
            }
            for ((t, v), g) in params.tensors.iter_mut().zip(&mut velocity).zip(&grads) {
                sgd_step(&mut t.data, v, g, cfg.lr, cfg.momentum);
            }
        }
        let n = train_set.len() as f64;
        let loss = LossBreakdown {
            box_loss: sum.box_loss / n,
            obj_loss: sum.obj_loss / n,
            cls_loss: sum.cls_loss / n,
            total: sum.total / n,
        };
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let (fine_map, coarse_map) = match eval_set {
            Some((images, settings)) if due && !images.is_empty() => {
                let (f, c) = evaluate(&params, images, taxonomy, settings)?;
                (Some(f.map50), Some(c.map50))
            }
            _ => (None, None),
        };
        log::info!(
            "epoch {epoch}: total {:.4} (box {:.4} obj {:.4} cls {:.4}){}",
            loss.total,
            loss.box_loss,
            loss.obj_loss,
            loss.cls_loss,
            fine_map.map_or(String::new(), |f| format!(" fine mAP {f:.4} coarse mAP {:.4}", coarse_map.unwrap_or(0.0)))
        );
        metrics.push(EpochMetrics {
            epoch,
            loss,
            fine_map,
            coarse_map,
        });
    }
    Ok(TrainOutcome { params, metrics })
}

/// Writes `checkpoint.hdet` and `metrics.csv` into `out`.
pub fn write_outputs(out: &Path, outcome: &TrainOutcome, taxonomy: &Taxonomy) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Checkpoint {
        params: outcome.params.clone(),
        taxonomy_hash: taxonomy.hash(),
    }
    .save(&out.join("checkpoint.hdet"))?;
    let path = out.join("metrics.csv");
    std::fs::write(&path, metrics_csv(&outcome.metrics)).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, SynthConfig};

    fn setup() -> (ModelConfig, GridSpec, Taxonomy, Vec<LabeledImage>) {
        let synth = SynthConfig {
            image_size: 16,
            n_series: 2,
            n_stages: 2,
            cells_per_image: (1, 2),
            radius_range: (0.15, 0.2),
            ..Default::default()
        };
        let images = (0..5).map(|i| render(&synth, i).0).collect();
        let model = ModelConfig {
            image_size: 16,
            channels: vec![3, 4],
        };
        let grid = GridSpec::new(4, 4, vec![(0.3, 0.3), (0.4, 0.35)]).unwrap();
        (model, grid, synth.taxonomy(), images)
    }

    fn cfg(loss: HierLossParams) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 3e-4,
            loss,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (model, grid, tax, imgs) = setup();
        let c = TrainConfig { lr: 0.0, ..cfg(HierLossParams::default()) };
        let out = train(&c, &model, &grid, &tax, &imgs, None).unwrap();
        let init = DetectorParams::init(model, grid, c.seed).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn deterministic() {
        let (model, grid, tax, imgs) = setup();
        let settings = EvalSettings { conf: 0.01, ..Default::default() };
        let c = cfg(HierLossParams::default());
        let a = train(&c, &model, &grid, &tax, &imgs, Some((&imgs, &settings))).unwrap();
        let b = train(&c, &model, &grid, &tax, &imgs, Some((&imgs, &settings))).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.params, b.params);
        assert!(a.metrics[1].fine_map.is_some() && a.metrics[0].fine_map.is_none());
    }

    #[test]
    fn zero_beta_matches_class_weighted() {
        let (model, grid, tax, imgs) = setup();
        let a = train(&cfg(HierLossParams::proposed(2.5, 0.0)), &model, &grid, &tax, &imgs, None).unwrap();
        let b = train(&cfg(HierLossParams::class_weighted(2.5)), &model, &grid, &tax, &imgs, None).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert!((x.loss.total - y.loss.total).abs() <= 1e-9);
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn momentum_step_by_hand() {
        let mut p = [1.0, -2.0];
        let mut v = [0.5, 0.0];
        sgd_step(&mut p, &mut v, &[0.2, 1.0], 0.1, 0.9);
        // v = 0.9 * 0.5 + 0.2 = 0.65, p = 1 - 0.065
        assert_eq!(v, [0.9 * 0.5 + 0.2, 1.0]);
        assert_eq!(p, [1.0 - 0.1 * (0.9 * 0.5 + 0.2), -2.0 - 0.1]);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("train.batch_size"));
        let (model, grid, tax, _) = setup();
        assert!(train(&TrainConfig::default(), &model, &grid, &tax, &[], None).is_err());
    }

    #[test]
    fn metrics_header() {
        let csv = metrics_csv(&[EpochMetrics {
            epoch: 1,
            loss: LossBreakdown { box_loss: 1.0, obj_loss: 2.0, cls_loss: 3.0, total: 6.0 },
            fine_map: None,
            coarse_map: None,
        }]);
        assert_eq!(csv, "epoch,box,obj,cls,total,fine_map,coarse_map\n1,1.000000,2.000000,3.000000,6.000000,,\n");
    }
}
