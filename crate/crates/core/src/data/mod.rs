//! Synthetic datasets on disk and mosaic augmentation.
//!
//! Directory layout:
//!
//! ```text
//! imgs/000000.ppm ...   binary PPM (P6), 8-bit RGB
//! labels.jsonl          {"image": "imgs/000042.ppm", "boxes": [{"cls": 3, "cx": .., "cy": .., "w": .., "h": ..}]}
//! taxonomy.json         fine → coarse class map
//! manifest.json         counts, generator config, train/test split
//! ```

pub mod mosaic;
pub mod ppm;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use mosaic::{mosaic, mosaic_with_layout, MosaicLayout};
pub use ppm::Image;
pub use synth::{render, SynthConfig};

use crate::error::{Error, Result};
use crate::geometry::LabeledBox;
use crate::taxonomy::Taxonomy;

/// Every sixth image (id % 6 == 5) goes to the test split.
pub const TEST_EVERY: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub labels: Vec<LabeledBox>,
}

impl LabeledImage {
    /// Boxes inside `[0,1]²` with positive extents and class ids `< n_fine`.
    pub fn validate(&self, n_fine: usize) -> Result<()> {
        const EPS: f64 = 1e-9;
        for l in &self.labels {
            l.bbox.validate()?;
            if l.cls >= n_fine {
                return Err(Error::Label(format!("class {} not in taxonomy of {n_fine}", l.cls)));
            }
            let (x1, y1, x2, y2) = l.bbox.corners();
            if x1 < -EPS || y1 < -EPS || x2 > 1.0 + EPS || y2 > 1.0 + EPS {
                return Err(Error::Label(format!("box {:?} leaves the unit square", l.bbox)));
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.labels.iter().map(|l| (l.bbox.w, l.bbox.h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image: String,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn by_rule(count: usize) -> Self {
        let (test, train) = (0..count).partition(|i| i % TEST_EVERY == TEST_EVERY - 1);
        Splits { train, test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub n_fine: usize,
    pub n_coarse: usize,
    pub n_boxes: usize,
    /// Cells dropped because no placement met the overlap limit.
    pub placement_shortfall: usize,
    pub config: SynthConfig,
    pub splits: Splits,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub taxonomy: Taxonomy,
    pub splits: Splits,
}

impl Dataset {
    pub fn subset(&self, ids: &[usize]) -> Vec<LabeledImage> {
        ids.iter().map(|&i| self.images[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<LabeledImage> {
        self.subset(&self.splits.train)
    }

    pub fn test(&self) -> Vec<LabeledImage> {
        self.subset(&self.splits.test)
    }

    pub fn all_shapes(&self, ids: &[usize]) -> Vec<(f64, f64)> {
        ids.iter().flat_map(|&i| self.images[i].shapes()).collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn image_name(index: usize) -> String {
    format!("imgs/{index:06}.ppm")
}

/// Renders `n_images` scenes into `out`. Fails fast on an invalid config;
/// cells that cannot be placed are counted in the manifest.
pub fn generate(cfg: &SynthConfig, n_images: usize, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let imgs = out.join("imgs");
    fs::create_dir_all(&imgs).map_err(|e| Error::io(&imgs, e))?;
    let taxonomy = cfg.taxonomy();
    let mut labels = Vec::new();
    let mut n_boxes = 0;
    let mut shortfall = 0;
    for i in 0..n_images {
        let (img, missing) = render(cfg, i as u64);
        if missing > 0 {
            log::warn!("image {i}: {missing} cell(s) could not be placed");
        }
        shortfall += missing;
        n_boxes += img.labels.len();
        let name = image_name(i);
        img.pixels.write(&out.join(&name))?;
        let record = LabelRecord {
            image: name,
            boxes: img.labels,
        };
        serde_json::to_writer(&mut labels, &record).map_err(|e| Error::json("labels", e))?;
        labels.push(b'\n');
    }
    write_file(&out.join("labels.jsonl"), &labels)?;
    taxonomy.save(&out.join("taxonomy.json"))?;
    let manifest = Manifest {
        count: n_images,
        n_fine: taxonomy.n_fine(),
        n_coarse: taxonomy.n_coarse(),
        n_boxes,
        placement_shortfall: shortfall,
        config: cfg.clone(),
        splits: Splits::by_rule(n_images),
    };
    let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    text.push(b'\n');
    write_file(&out.join("manifest.json"), &text)?;
    Ok(manifest)
}

/// Loads a dataset directory. `taxonomy` overrides `dir/taxonomy.json`.
/// Without a manifest the split falls back to [`Splits::by_rule`].
pub fn load(dir: &Path, taxonomy: Option<&Path>) -> Result<Dataset> {
    let tax_path: PathBuf = taxonomy.map_or_else(|| dir.join("taxonomy.json"), Path::to_path_buf);
    let taxonomy = Taxonomy::load(&tax_path)?;
    let labels_path = dir.join("labels.jsonl");
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut images = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelRecord = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("{}:{}", labels_path.display(), line_no + 1), e))?;
        let pixels = Image::read(&dir.join(&record.image))?;
        let img = LabeledImage {
            pixels,
            labels: record.boxes,
        };
        img.validate(taxonomy.n_fine())
            .map_err(|e| Error::Label(format!("{} ({}): {e}", record.image, line_no + 1)))?;
        images.push(img);
    }
    let manifest_path = dir.join("manifest.json");
    let splits = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json("manifest.json", e))?;
        if manifest.count != images.len() {
            return Err(Error::Label(format!(
                "manifest lists {} images, labels.jsonl has {}",
                manifest.count,
                images.len()
            )));
        }
        manifest.splits
    } else {
        Splits::by_rule(images.len())
    };
    if let Some(&bad) = splits.train.iter().chain(&splits.test).find(|&&i| i >= images.len()) {
        return Err(Error::Label(format!("split references missing image {bad}")));
    }
    Ok(Dataset {
        images,
        taxonomy,
        splits,
    })
}

/// Appends one JSON line; used by tests and tools that build datasets by hand.
pub fn write_label_line(w: &mut impl Write, record: &LabelRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, record).map_err(|e| Error::json("labels", e))?;
    w.write_all(b"\n").map_err(|e| Error::io("labels.jsonl", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rule_is_five_to_one() {
        let s = Splits::by_rule(600);
        assert_eq!((s.train.len(), s.test.len()), (500, 100));
        assert_eq!(s.test[0], 5);
    }

    #[test]
    fn label_line_format() {
        let rec = LabelRecord {
            image: image_name(42),
            boxes: vec![LabeledBox {
                cls: 3,
                bbox: crate::geometry::BBox::new(0.41, 0.52, 0.11, 0.12).unwrap(),
            }],
        };
        let mut buf = Vec::new();
        write_label_line(&mut buf, &rec).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"image\":\"imgs/000042.ppm\",\"boxes\":[{\"cls\":3,\"cx\":0.41,\"cy\":0.52,\"w\":0.11,\"h\":0.12}]}\n"
        );
    }
}
