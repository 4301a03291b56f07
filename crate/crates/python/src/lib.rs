//! Python bindings: boxes, taxonomy, loss settings, anchors, evaluation,
//! dataset generation and checkpoint inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hierdet::data::{self, Image, SynthConfig};
use hierdet::geometry::{self, BBox, LabeledBox, ScoredBox};
use hierdet::model::Checkpoint;
use hierdet::taxonomy::HierLossParams;

type Box4 = (f64, f64, f64, f64);
/// `(cx, cy, w, h, class, score)`
type Det = (f64, f64, f64, f64, usize, f64);
/// `(cx, cy, w, h, class)`
type Gt = (f64, f64, f64, f64, usize);

fn py_err(e: hierdet::Error) -> PyErr {
    match e {
        hierdet::Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(b: Box4) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(py_err)
}

fn det_tuple(d: &ScoredBox) -> Det {
    (d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h, d.cls, d.score)
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    Ok(geometry::iou(&bbox(a)?, &bbox(b)?))
}

/// `1 - CIoU` of a prediction against a ground-truth box.
#[pyfunction]
fn ciou_loss(pred: Box4, gt: Box4) -> PyResult<f64> {
    Ok(geometry::ciou_loss(&bbox(pred)?, &bbox(gt)?))
}

#[pyfunction]
fn nms(dets: Vec<Det>, iou_threshold: f64) -> PyResult<Vec<Det>> {
    let boxes = dets
        .iter()
        .map(|d| Ok(ScoredBox { bbox: bbox((d.0, d.1, d.2, d.3))?, cls: d.4, score: d.5 }))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(geometry::nms(&boxes, iou_threshold).iter().map(det_tuple).collect())
}

#[pyclass(frozen)]
#[derive(Clone)]
struct Taxonomy(hierdet::taxonomy::Taxonomy);

#[pymethods]
impl Taxonomy {
    #[new]
    fn new(fine_to_coarse: Vec<usize>) -> PyResult<Self> {
        hierdet::taxonomy::Taxonomy::from_map(fine_to_coarse).map(Taxonomy).map_err(py_err)
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Taxonomy(hierdet::taxonomy::Taxonomy::identity(n))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        hierdet::taxonomy::Taxonomy::load(&path).map(Taxonomy).map_err(py_err)
    }

    #[getter]
    fn n_fine(&self) -> usize {
        self.0.n_fine()
    }

    #[getter]
    fn n_coarse(&self) -> usize {
        self.0.n_coarse()
    }

    fn to_coarse(&self, fine: usize) -> PyResult<usize> {
        self.0.to_coarse(fine).map_err(py_err)
    }

    /// Extra classification weight for an anchor predicting `predicted`
    /// when the target is `target`.
    fn gamma(&self, params: &LossParams, predicted: usize, target: usize) -> PyResult<f64> {
        self.0.gamma(&params.0, predicted, target).map_err(py_err)
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Taxonomy(n_fine={}, n_coarse={})", self.0.n_fine(), self.0.n_coarse())
    }
}

#[pyclass(frozen)]
#[derive(Clone)]
struct LossParams(HierLossParams);

#[pymethods]
impl LossParams {
    #[staticmethod]
    fn normal() -> Self {
        LossParams(HierLossParams::normal())
    }

    #[staticmethod]
    fn class_weighted(alpha: f64) -> PyResult<Self> {
        let p = HierLossParams::class_weighted(alpha);
        p.validate().map_err(py_err)?;
        Ok(LossParams(p))
    }

    #[staticmethod]
    fn proposed(alpha: f64, beta: f64) -> PyResult<Self> {
        let p = HierLossParams::proposed(alpha, beta);
        p.validate().map_err(py_err)?;
        Ok(LossParams(p))
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.effective_alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.effective_beta()
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    fn __repr__(&self) -> String {
        format!("LossParams({})", self.0.label())
    }
}

/// Returns `(anchors, mean_best_iou)`.
#[pyfunction]
#[pyo3(signature = (shapes, k, max_iters = 100, seed = 0))]
fn kmeans_anchors(shapes: Vec<(f64, f64)>, k: usize, max_iters: usize, seed: u64) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let set = hierdet::anchors::kmeans_anchors(&shapes, k, max_iters, seed).map_err(py_err)?;
    Ok((set.anchors, set.mean_best_iou))
}

/// Fine and coarse mAP@iou for per-image detections and ground truths.
#[pyfunction]
#[pyo3(signature = (detections, gts, taxonomy, iou = 0.5))]
fn evaluate(detections: Vec<Vec<Det>>, gts: Vec<Vec<Gt>>, taxonomy: &Taxonomy, iou: f64) -> PyResult<(f64, f64)> {
    let dets = detections
        .iter()
        .map(|img| {
            img.iter()
                .map(|d| Ok(ScoredBox { bbox: bbox((d.0, d.1, d.2, d.3))?, cls: d.4, score: d.5 }))
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let gts = gts
        .iter()
        .map(|img| {
            img.iter()
                .map(|g| Ok(LabeledBox { cls: g.4, bbox: bbox((g.0, g.1, g.2, g.3))? }))
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let fine = hierdet::eval::eval_fine(&dets, &gts, &taxonomy.0, iou).map_err(py_err)?;
    let coarse = hierdet::eval::eval_coarse(&dets, &gts, &taxonomy.0, iou).map_err(py_err)?;
    Ok((fine.map50, coarse.map50))
}

/// Writes a synthetic dataset and returns its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, count, seed = 0))]
fn generate(out_dir: PathBuf, count: usize, seed: u64) -> PyResult<String> {
    let cfg = SynthConfig { seed, ..Default::default() };
    let manifest = data::generate(&cfg, count, &out_dir).map_err(py_err)?;
    serde_json::to_string(&manifest).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Finite-difference gradient checks as `(name, max_rel_err, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = hierdet::gradcheck::run(seed, None).map_err(py_err)?;
    Ok(results.iter().map(|r| (r.name.clone(), r.max_rel_err, r.tolerance, r.passed())).collect())
}

/// A trained detector loaded from a checkpoint file.
#[pyclass(frozen)]
struct Detector(Checkpoint);

#[pymethods]
impl Detector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(Detector).map_err(py_err)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.params.config.image_size
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.params.n_params()
    }

    #[getter]
    fn taxonomy_hash(&self) -> String {
        self.0.taxonomy_hash.clone()
    }

    /// Detections on a binary PPM image.
    #[pyo3(signature = (ppm, conf = 0.25, nms_iou = 0.45))]
    fn predict(&self, ppm: &[u8], conf: f64, nms_iou: f64) -> PyResult<Vec<Det>> {
        let image = Image::decode_ppm(ppm).map_err(py_err)?;
        let dets = self.0.params.predict(&image.to_planar(), conf, nms_iou).map_err(py_err)?;
        Ok(dets.iter().map(det_tuple).collect())
    }
}

#[pymodule]
fn hierdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Taxonomy>()?;
    m.add_class::<LossParams>()?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(ciou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
