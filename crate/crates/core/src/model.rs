//! Small single-scale grid detector.
//!
//! `[conv3x3 pad 1 -> ReLU -> maxpool2] x L` followed by a 1x1 conv to
//! `b * (5 + n_fine)` channels. With the default 96 px input and four
//! blocks the head is a 6x6 grid.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, ScoredBox};
use crate::loss::{argmax, GridSpec, BOX_FIELDS};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"HDET1";
pub const OBJECTNESS_BIAS_INIT: f64 = -4.0;
/// Class logits start near σ = 0.0025.
pub const CLASS_BIAS_INIT: f64 = -6.0;
/// Pixels in [0, 1] enter the network as `(p - 0.5) * 4`.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Output channels of each conv block; each block halves the resolution.
    pub channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 96,
            channels: vec![16, 32, 64, 64],
        }
    }
}

impl ModelConfig {
    /// Grid side produced by this backbone.
    pub fn grid_side(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("model.channels", "need at least one block, all widths >= 1"));
        }
        let div = 1usize << self.channels.len();
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::config(
                "model.image_size",
                format!("{} is not a positive multiple of {div}", self.image_size),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Detector weights plus the configuration needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub config: ModelConfig,
    pub grid: GridSpec,
    /// Per block `conv{i}.weight`, `conv{i}.bias`, then `head.weight`, `head.bias`.
    pub tensors: Vec<Tensor>,
}

impl DetectorParams {
    /// Seeded init: uniform in `±1/sqrt(fan_in)` for weights and biases,
    /// objectness biases set to -4 and class biases to -6.
    pub fn init(config: ModelConfig, grid: GridSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        if grid.s != config.grid_side() {
            return Err(Error::config(
                "grid.s",
                format!("model produces a {0}x{0} grid, grid spec says {1}", config.grid_side(), grid.s),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut uniform = |name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor { name, shape, data }
        };
        let mut c_in = 3;
        for (i, &c_out) in config.channels.iter().enumerate() {
            tensors.push(uniform(format!("conv{i}.weight"), vec![c_out, c_in, 3, 3], c_in * 9));
            tensors.push(uniform(format!("conv{i}.bias"), vec![c_out], c_in * 9));
            c_in = c_out;
        }
        let head = grid.head_channels();
        tensors.push(uniform("head.weight".into(), vec![head, c_in, 1, 1], c_in));
        let mut bias = uniform("head.bias".into(), vec![head], c_in);
        for j in 0..grid.b {
            bias.data[j * grid.channels_per_anchor() + 4] = OBJECTNESS_BIAS_INIT;
            let cls = j * grid.channels_per_anchor() + BOX_FIELDS;
            bias.data[cls..cls + grid.n_fine].fill(CLASS_BIAS_INIT);
        }
        tensors.push(bias);
        Ok(DetectorParams { config, grid, tensors })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Puts every tensor on the tape, as variables or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                let shape = Shape::new(&t.shape)?;
                if trainable {
                    tape.variable(t.data.clone(), shape)
                } else {
                    tape.constant(t.data.clone(), shape)
                }
            })
            .collect()
    }

    fn expect_image(&self, image: &[f64]) -> Result<()> {
        let n = self.config.image_size;
        if image.len() != 3 * n * n {
            return Err(Error::Shape(format!(
                "expected a 3x{n}x{n} image ({} values), got {}",
                3 * n * n,
                image.len()
            )));
        }
        Ok(())
    }

    /// Head output `[b * (5 + n_fine), s, s]` for a planar `[3, H, W]` image,
    /// using parameter vars from [`DetectorParams::bind`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: &[f64]) -> Result<Var> {
        self.expect_image(image)?;
        if vars.len() != self.tensors.len() {
            return Err(Error::Shape(format!("expected {} parameter vars, got {}", self.tensors.len(), vars.len())));
        }
        let n = self.config.image_size;
        let input = image.iter().map(|p| (p - INPUT_CENTER) * INPUT_GAIN).collect();
        let mut x = tape.constant(input, Shape::new(&[3, n, n])?)?;
        for block in vars[..vars.len() - 2].chunks_exact(2) {
            let conv = tape.conv2d(x, block[0], 1, 1)?;
            let biased = tape.bias_add(conv, block[1])?;
            let act = tape.relu(biased);
            x = tape.max_pool2(act)?;
        }
        let conv = tape.conv2d(x, vars[vars.len() - 2], 1, 0)?;
        tape.bias_add(conv, vars[vars.len() - 1])
    }

    /// Value-only forward pass.
    pub fn raw_output(&self, image: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let head = self.forward(&mut tape, &vars, image)?;
        Ok(tape.value(head).to_vec())
    }

    /// Scored, NMS-filtered detections. Score is objectness times the best
    /// class score; only scores strictly above `conf_threshold` are kept.
    pub fn predict(&self, image: &[f64], conf_threshold: f64, nms_iou: f64) -> Result<Vec<ScoredBox>> {
        let raw = self.raw_output(image)?;
        Ok(detections(&raw, &self.grid, conf_threshold, nms_iou))
    }
}

/// One decoded (cell, anchor) prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub cell: usize,
    pub anchor: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

/// `bx = (2σ(tx) - 0.5 + gx) / s`, `bw = aw · (2σ(tw))²`; objectness and
/// class scores are sigmoids of their logits.
pub fn decode(raw: &[f64], grid: &GridSpec) -> Vec<Decoded> {
    let s = grid.s as f64;
    let mut out = Vec::with_capacity(grid.pairs());
    for cell in 0..grid.cells() {
        let (gx, gy) = grid.cell_xy(cell);
        for anchor in 0..grid.b {
            let at = |k: usize| raw[grid.head_index(cell, anchor, k)];
            let (aw, ah) = grid.anchors[anchor];
            let bbox = BBox {
                cx: (2.0 * sigmoid(at(0)) - 0.5 + gx as f64) / s,
                cy: (2.0 * sigmoid(at(1)) - 0.5 + gy as f64) / s,
                w: aw * (2.0 * sigmoid(at(2))).powi(2),
                h: ah * (2.0 * sigmoid(at(3))).powi(2),
            };
            out.push(Decoded {
                cell,
                anchor,
                bbox,
                objectness: sigmoid(at(4)),
                class_scores: (0..grid.n_fine).map(|c| sigmoid(at(BOX_FIELDS + c))).collect(),
            });
        }
    }
    out
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of the box part of [`decode`] for one (cell, anchor). Returns
/// `None` when the box is outside the decode range: center offset within
/// the cell not in `(-0.5, 1.5)` or extent ratio not in `(0, 4)`.
pub fn encode(bbox: &BBox, cell: usize, anchor: usize, grid: &GridSpec) -> Option<[f64; 4]> {
    let s = grid.s as f64;
    let (gx, gy) = grid.cell_xy(cell);
    let (aw, ah) = grid.anchors[anchor];
    let center = |c: f64, g: usize| {
        let p = (c * s - g as f64 + 0.5) / 2.0;
        (p > 0.0 && p < 1.0).then(|| logit(p))
    };
    let extent = |e: f64, a: f64| {
        let p = (e / a).sqrt() / 2.0;
        (p > 0.0 && p < 1.0).then(|| logit(p))
    };
    Some([
        center(bbox.cx, gx)?,
        center(bbox.cy, gy)?,
        extent(bbox.w, aw)?,
        extent(bbox.h, ah)?,
    ])
}

/// Thresholding and per-class NMS on a raw head output.
pub fn detections(raw: &[f64], grid: &GridSpec, conf_threshold: f64, nms_iou: f64) -> Vec<ScoredBox> {
    let candidates: Vec<ScoredBox> = decode(raw, grid)
        .into_iter()
        .filter_map(|d| {
            let cls = argmax(&d.class_scores);
            let score = d.objectness * d.class_scores[cls];
            (score > conf_threshold).then_some(ScoredBox {
                bbox: d.bbox,
                cls,
                score,
            })
        })
        .collect();
    nms(&candidates, nms_iou)
}

// ---- checkpoint ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    tensors: Vec<TensorEntry>,
    grid: GridSpec,
    taxonomy_hash: String,
    model: ModelConfig,
}

/// Loaded checkpoint with the taxonomy hash it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    pub taxonomy_hash: String,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 4 * t.data.len();
                e
            })
            .collect();
        let meta = CheckpointMeta {
            tensors,
            grid: self.params.grid.clone(),
            taxonomy_hash: self.taxonomy_hash.clone(),
            model: self.params.config.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::json("checkpoint metadata", e))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
        let mut out = Vec::with_capacity(9 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(9..9 + len)
            .ok_or_else(|| bad(format!("metadata length {len} exceeds file size {}", bytes.len())))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| bad(format!("metadata: {e}")))?;
        let data = &bytes[9 + len..];
        let tensors = meta
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let raw = data
                    .get(e.offset..e.offset + 4 * n)
                    .ok_or_else(|| bad(format!("tensor {} truncated", e.name)))?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect();
                Ok(Tensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = DetectorParams {
            config: meta.model,
            grid: meta.grid,
            tensors,
        };
        // structure must match a freshly initialized model
        let fresh = DetectorParams::init(params.config.clone(), params.grid.clone(), 0)
            .map_err(|e| bad(e.to_string()))?;
        let same = fresh.tensors.len() == params.tensors.len()
            && fresh
                .tensors
                .iter()
                .zip(&params.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same {
            return Err(bad("tensor layout does not match the model config".into()));
        }
        Ok(Checkpoint {
            params,
            taxonomy_hash: meta.taxonomy_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
