//! Synthetic dense-cell scenes.
//!
//! A fine class is a (series, stage) pair. Series sets the hue; stage sets
//! a continuous appearance scalar that darkens the cell and grows its inner
//! disc, with adjacent stages one `1 - stage_similarity` step apart.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ppm::Image;
use super::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};
use crate::taxonomy::Taxonomy;

/// Placement attempts per cell before it is given up.
const PLACEMENT_ATTEMPTS: usize = 200;
const BACKGROUND: [f64; 3] = [236.0, 214.0, 224.0];
/// Per-cell jitter of the stage appearance scalar.
const APPEARANCE_JITTER: f64 = 0.06;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_series: usize,
    pub n_stages: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Inclusive `(min, max)` cell count per image.
    pub cells_per_image: (usize, usize),
    /// Inclusive `(min, max)` ellipse semi-axis, image-normalized.
    pub radius_range: (f64, f64),
    /// Largest allowed `(r1 + r2 - d) / min(r1, r2)` between two cells.
    pub overlap_max: f64,
    /// In `(0, 1]`; 1 makes every stage of a series look the same.
    pub stage_similarity: f64,
    /// Std-dev of per-pixel Gaussian noise, in 8-bit units.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_series: 4,
            n_stages: 3,
            image_size: 96,
            cells_per_image: (3, 8),
            radius_range: (0.05, 0.09),
            overlap_max: 0.25,
            stage_similarity: 0.85,
            noise_std: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_fine(&self) -> usize {
        self.n_series * self.n_stages
    }

    /// Coarse classes per series: stages merge pairwise, `ceil(n_stages / 2)`.
    pub fn coarse_per_series(&self) -> usize {
        self.n_stages.div_ceil(2)
    }

    pub fn n_coarse(&self) -> usize {
        self.n_series * self.coarse_per_series()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("synth.{field}"), reason));
        if self.n_series == 0 {
            return bad("n_series", "must be >= 1".into());
        }
        if self.n_stages == 0 {
            return bad("n_stages", "must be >= 1".into());
        }
        if self.image_size < 8 {
            return bad("image_size", format!("must be >= 8, got {}", self.image_size));
        }
        let (cmin, cmax) = self.cells_per_image;
        if cmin > cmax {
            return bad("cells_per_image", format!("min {cmin} exceeds max {cmax}"));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin > 0.0 && rmax < 0.5 && rmin <= rmax) {
            return bad(
                "radius_range",
                format!("need 0 < min <= max < 0.5, got ({rmin}, {rmax})"),
            );
        }
        if !(self.overlap_max >= 0.0 && self.overlap_max.is_finite()) {
            return bad("overlap_max", format!("must be >= 0, got {}", self.overlap_max));
        }
        if !(self.stage_similarity > 0.0 && self.stage_similarity <= 1.0) {
            return bad(
                "stage_similarity",
                format!("must be in (0, 1], got {}", self.stage_similarity),
            );
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn series_of(&self, fine: usize) -> usize {
        fine / self.n_stages
    }

    pub fn stage_of(&self, fine: usize) -> usize {
        fine % self.n_stages
    }

    /// Same-series adjacent stages `{0,1}, {2,3}, ...` share a coarse class.
    pub fn taxonomy(&self) -> Taxonomy {
        let per = self.coarse_per_series();
        let mut fine_names = Vec::with_capacity(self.n_fine());
        let mut fine_to_coarse = Vec::with_capacity(self.n_fine());
        for series in 0..self.n_series {
            for stage in 0..self.n_stages {
                fine_names.push(format!("series{series}-stage{stage}"));
                fine_to_coarse.push(series * per + stage / 2);
            }
        }
        let coarse_names = (0..self.n_series)
            .flat_map(|series| {
                (0..per).map(move |g| {
                    let last = (2 * g + 1).min(self.n_stages - 1);
                    if last == 2 * g {
                        format!("series{series}-stage{}", 2 * g)
                    } else {
                        format!("series{series}-stages{}-{last}", 2 * g)
                    }
                })
            })
            .collect();
        Taxonomy {
            fine_names,
            coarse_names,
            fine_to_coarse,
        }
    }
}

/// Generator for image `index`: its own ChaCha stream under the config
/// seed, so images can be rendered in any order.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Cell {
    cls: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    appearance: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Renders image `index`. Also returns how many cells could not be placed
/// within the overlap limit.
pub fn render(cfg: &SynthConfig, index: u64) -> (LabeledImage, usize) {
    let mut rng = image_rng(cfg.seed, index);
    let (cmin, cmax) = cfg.cells_per_image;
    let target = rng.gen_range(cmin..=cmax);
    let (rmin, rmax) = cfg.radius_range;
    let step = 1.0 - cfg.stage_similarity;

    let mut cells: Vec<Cell> = Vec::with_capacity(target);
    let mut shortfall = 0;
    for _ in 0..target {
        let cls = rng.gen_range(0..cfg.n_fine());
        let jitter: f64 = rng.gen_range(-APPEARANCE_JITTER..=APPEARANCE_JITTER);
        let appearance = cfg.stage_of(cls) as f64 * step + jitter;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rx = rng.gen_range(rmin..=rmax);
            let ry = rng.gen_range(rmin..=rmax);
            let cx = rng.gen_range(rx..=1.0 - rx);
            let cy = rng.gen_range(ry..=1.0 - ry);
            let r = (rx + ry) / 2.0;
            let clash = cells.iter().any(|c| {
                let rc = (c.rx + c.ry) / 2.0;
                let d = ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt();
                (r + rc - d) / r.min(rc) > cfg.overlap_max
            });
            if !clash {
                cells.push(Cell {
                    cls,
                    cx,
                    cy,
                    rx,
                    ry,
                    appearance,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            shortfall += 1;
        }
    }

    let n = cfg.image_size;
    let mut canvas: Vec<[f64; 3]> = vec![BACKGROUND; n * n];
    for cell in &cells {
        let hue = 360.0 * cfg.series_of(cell.cls) as f64 / cfg.n_series as f64 + 20.0;
        let a = cell.appearance.clamp(0.0, 1.0);
        let body = hsv_to_rgb(hue, 0.35 + 0.2 * a, 0.9 - 0.3 * a);
        let core = hsv_to_rgb(hue, 0.6, 0.55 - 0.3 * a);
        let core_ratio = 0.3 + 0.35 * a;
        let x0 = ((cell.cx - cell.rx) * n as f64).floor().max(0.0) as usize;
        let x1 = (((cell.cx + cell.rx) * n as f64).ceil() as usize).min(n);
        let y0 = ((cell.cy - cell.ry) * n as f64).floor().max(0.0) as usize;
        let y1 = (((cell.cy + cell.ry) * n as f64).ceil() as usize).min(n);
        for py in y0..y1 {
            let v = ((py as f64 + 0.5) / n as f64 - cell.cy) / cell.ry;
            for px in x0..x1 {
                let u = ((px as f64 + 0.5) / n as f64 - cell.cx) / cell.rx;
                let q = u * u + v * v;
                if q <= core_ratio * core_ratio {
                    canvas[py * n + px] = core;
                } else if q <= 1.0 {
                    canvas[py * n + px] = body;
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(3 * n * n);
    for px in &canvas {
        for &c in px {
            let e = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((c + e).round().clamp(0.0, 255.0) as u8);
        }
    }

    let labels = cells
        .iter()
        .map(|c| LabeledBox {
            cls: c.cls,
            bbox: BBox {
                cx: c.cx,
                cy: c.cy,
                w: 2.0 * c.rx,
                h: 2.0 * c.ry,
            },
        })
        .collect();
    let image = LabeledImage {
        pixels: Image {
            width: n,
            height: n,
            data,
        },
        labels,
    };
    (image, shortfall)
}
