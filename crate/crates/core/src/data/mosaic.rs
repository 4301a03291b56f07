//! Four-image mosaic augmentation.
//!
//! The sources are pasted around a junction point on a `2 * out_size`
//! canvas (top-left, top-right, bottom-left, bottom-right), each rescaled
//! and cut at its quadrant. An `out_size` window is then cropped from the
//! canvas. Boxes follow the same transform; any box narrower or shorter
//! than [`MIN_BOX_PX`] after clipping is dropped.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ppm::Image;
use super::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};

pub const MIN_BOX_PX: f64 = 2.0;
pub const FILL: [u8; 3] = [114, 114, 114];

/// Random choices of one mosaic, in canvas pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MosaicLayout {
    /// Junction `(x, y)` inside the central half of the canvas.
    pub junction: (usize, usize),
    /// Per-source scale in `[0.5, 1.5]`.
    pub scales: [f64; 4],
    /// Top-left corner of the final crop, each in `[0, out_size]`.
    pub crop: (usize, usize),
}

impl MosaicLayout {
    pub fn sample(out_size: usize, rng: &mut impl Rng) -> Self {
        let lo = out_size / 2;
        let hi = out_size + out_size / 2;
        let junction = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let scales = [(); 4].map(|_| rng.gen_range(0.5..=1.5));
        let crop = (rng.gen_range(0..=out_size), rng.gen_range(0..=out_size));
        MosaicLayout {
            junction,
            scales,
            crop,
        }
    }

    /// Junction at the canvas center, unit scales, centered crop.
    pub fn centered(out_size: usize) -> Self {
        MosaicLayout {
            junction: (out_size, out_size),
            scales: [1.0; 4],
            crop: (out_size / 2, out_size / 2),
        }
    }
}

pub fn mosaic(four: &[LabeledImage], out_size: usize, seed: u64) -> Result<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = MosaicLayout::sample(out_size, &mut rng);
    mosaic_with_layout(four, out_size, &layout)
}

/// Clips `[lo, hi)` (in canvas pixels) to `[min, max)`.
fn clip(lo: f64, hi: f64, min: f64, max: f64) -> (f64, f64) {
    (lo.max(min), hi.min(max))
}

pub fn mosaic_with_layout(four: &[LabeledImage], out_size: usize, layout: &MosaicLayout) -> Result<LabeledImage> {
    if four.len() != 4 {
        return Err(Error::MosaicArity(four.len()));
    }
    let canvas_size = 2 * out_size;
    let (xc, yc) = layout.junction;
    let mut canvas = Image::filled(canvas_size, canvas_size, FILL);
    let mut boxes: Vec<(usize, f64, f64, f64, f64)> = Vec::new();

    for (q, src) in four.iter().enumerate() {
        let img = &src.pixels;
        let s = layout.scales[q];
        let sw = ((img.width as f64 * s).round() as usize).max(1);
        let sh = ((img.height as f64 * s).round() as usize).max(1);
        // placed rectangle, anchored at the junction
        let (x0, y0) = (
            if q % 2 == 0 { xc as isize - sw as isize } else { xc as isize },
            if q < 2 { yc as isize - sh as isize } else { yc as isize },
        );
        // quadrant bounds
        let (qx0, qx1) = if q % 2 == 0 { (0, xc) } else { (xc, canvas_size) };
        let (qy0, qy1) = if q < 2 { (0, yc) } else { (yc, canvas_size) };
        let vx0 = x0.max(qx0 as isize) as usize;
        let vx1 = ((x0 + sw as isize).max(0) as usize).min(qx1);
        let vy0 = y0.max(qy0 as isize) as usize;
        let vy1 = ((y0 + sh as isize).max(0) as usize).min(qy1);

        let fx = img.width as f64 / sw as f64;
        let fy = img.height as f64 / sh as f64;
        for cy in vy0..vy1 {
            let sy = ((((cy as isize - y0) as f64 + 0.5) * fy) as usize).min(img.height - 1);
            for cx in vx0..vx1 {
                let sx = ((((cx as isize - x0) as f64 + 0.5) * fx) as usize).min(img.width - 1);
                canvas.set(cx, cy, img.get(sx, sy));
            }
        }

        for l in &src.labels {
            let (bx1, by1, bx2, by2) = l.bbox.corners();
            let (a, b) = clip(
                x0 as f64 + bx1 * sw as f64,
                x0 as f64 + bx2 * sw as f64,
                vx0 as f64,
                vx1 as f64,
            );
            let (c, d) = clip(
                y0 as f64 + by1 * sh as f64,
                y0 as f64 + by2 * sh as f64,
                vy0 as f64,
                vy1 as f64,
            );
            if b - a >= MIN_BOX_PX && d - c >= MIN_BOX_PX {
                boxes.push((l.cls, a, c, b, d));
            }
        }
    }

    let (ox, oy) = layout.crop;
    let ox = ox.min(canvas_size - out_size);
    let oy = oy.min(canvas_size - out_size);
    let mut out = Image::filled(out_size, out_size, FILL);
    for y in 0..out_size {
        for x in 0..out_size {
            out.set(x, y, canvas.get(x + ox, y + oy));
        }
    }
    let size = out_size as f64;
    let labels = boxes
        .into_iter()
        .filter_map(|(cls, x1, y1, x2, y2)| {
            let (a, b) = clip(x1 - ox as f64, x2 - ox as f64, 0.0, size);
            let (c, d) = clip(y1 - oy as f64, y2 - oy as f64, 0.0, size);
            if b - a < MIN_BOX_PX || d - c < MIN_BOX_PX {
                return None;
            }
            Some(LabeledBox {
                cls,
                bbox: BBox {
                    cx: (a + b) / 2.0 / size,
                    cy: (c + d) / 2.0 / size,
                    w: (b - a) / size,
                    h: (d - c) / size,
                },
            })
        })
        .collect();
    Ok(LabeledImage { pixels: out, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(size: usize, bbox: BBox, cls: usize) -> LabeledImage {
        LabeledImage {
            pixels: Image::filled(size, size, [200, 10, 10]),
            labels: vec![LabeledBox { cls, bbox }],
        }
    }

    #[test]
    fn centered_layout_is_pure_translation() {
        let img = single_cell(96, BBox::new(0.5, 0.5, 0.5, 0.5).unwrap(), 3);
        let four = vec![img.clone(), img.clone(), img.clone(), img];
        let out = mosaic_with_layout(&four, 96, &MosaicLayout::centered(96)).unwrap();
        assert_eq!(out.labels.len(), 4);
        let centers: Vec<(f64, f64)> = out.labels.iter().map(|l| (l.bbox.cx, l.bbox.cy)).collect();
        assert_eq!(
            centers,
            vec![(0.125, 0.125), (0.875, 0.125), (0.125, 0.875), (0.875, 0.875)]
        );
        for l in &out.labels {
            assert_eq!((l.bbox.w, l.bbox.h), (0.25, 0.25));
            assert_eq!(l.cls, 3);
        }
        // quadrant offsets are exactly half the output size
        assert_eq!(centers[1].0 - centers[0].0, 0.75);
        assert_eq!(out.pixels.width, 96);
    }

    #[test]
    fn labels_outside_quadrant_are_dropped() {
        let visible = single_cell(96, BBox::new(0.5, 0.5, 0.5, 0.5).unwrap(), 0);
        // top-left source shows only its bottom-right quarter in the crop
        let hidden = single_cell(96, BBox::new(0.1, 0.1, 0.1, 0.1).unwrap(), 1);
        let four = vec![hidden, visible.clone(), visible.clone(), visible];
        let out = mosaic_with_layout(&four, 96, &MosaicLayout::centered(96)).unwrap();
        assert_eq!(out.labels.len(), 3);
        assert!(out.labels.iter().all(|l| l.cls == 0));
    }

    #[test]
    fn arity_and_determinism() {
        let img = single_cell(32, BBox::new(0.4, 0.6, 0.3, 0.2).unwrap(), 0);
        assert!(matches!(mosaic(&[img.clone()], 32, 0), Err(Error::MosaicArity(1))));
        let four = vec![img.clone(), img.clone(), img.clone(), img];
        assert_eq!(mosaic(&four, 32, 9).unwrap(), mosaic(&four, 32, 9).unwrap());
    }

    #[test]
    fn fuzz_labels_valid() {
        let imgs: Vec<LabeledImage> = (0..4)
            .map(|i| LabeledImage {
                pixels: Image::filled(40, 40, [i as u8, 0, 0]),
                labels: vec![
                    LabeledBox {
                        cls: i,
                        bbox: BBox::new(0.2 + 0.1 * i as f64, 0.5, 0.3, 0.2).unwrap(),
                    },
                    LabeledBox {
                        cls: 0,
                        bbox: BBox::new(0.9, 0.9, 0.2, 0.2).unwrap(),
                    },
                ],
            })
            .collect();
        for seed in 0..1000 {
            let out = mosaic(&imgs, 40, seed).unwrap();
            assert!(out.labels.len() <= 8);
            out.validate(4).unwrap();
            for l in &out.labels {
                assert!(l.bbox.w * 40.0 >= MIN_BOX_PX - 1e-9 && l.bbox.h * 40.0 >= MIN_BOX_PX - 1e-9);
            }
        }
    }
}
