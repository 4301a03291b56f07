//! Run configuration and the end-to-end workflows behind the CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{kmeans_anchors, DEFAULT_MAX_ITERS};
use crate::data::{Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{ablation_rows, write_report, AblationRow, RunResult};
use crate::loss::GridSpec;
use crate::model::ModelConfig;
use crate::taxonomy::HierLossParams;
use crate::train::{train, write_outputs, EvalSettings, TrainConfig, TrainOutcome};

/// Alpha values of the class-weighted sweep.
pub const FULL_ALPHA_SWEEP: [f64; 5] = [2.5, 2.75, 3.0, 3.25, 3.5];
pub const DEFAULT_ALPHA_SWEEP: [f64; 3] = [2.5, 3.0, 3.5];

/// Every setting of a run in one JSON document. Missing fields take
/// their defaults; command-line flags override fields after loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Images written by `gen`.
    pub count: usize,
    pub model: ModelConfig,
    /// Fixed anchors; when absent they are clustered from the training split.
    pub anchors: Option<Vec<(f64, f64)>>,
    pub anchor_k: usize,
    pub anchor_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            count: 600,
            model: ModelConfig::default(),
            anchors: None,
            anchor_k: 3,
            anchor_seed: 0,
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.anchor_k == 0 {
            return Err(Error::config("anchor_k", "must be >= 1"));
        }
        if self.synth.image_size != self.model.image_size {
            return Err(Error::config(
                "model.image_size",
                format!("{} differs from synth.image_size {}", self.model.image_size, self.synth.image_size),
            ));
        }
        if let Some(a) = &self.anchors {
            GridSpec::new(self.model.grid_side(), 1, a.clone())?;
        }
        Ok(())
    }

    /// Grid for `taxonomy`, with anchors from the config or clustered from
    /// the training split.
    pub fn grid(&self, dataset: &Dataset) -> Result<GridSpec> {
        let anchors = match &self.anchors {
            Some(a) => a.clone(),
            None => {
                let shapes = dataset.all_shapes(&dataset.splits.train);
                kmeans_anchors(&shapes, self.anchor_k, DEFAULT_MAX_ITERS, self.anchor_seed)?.anchors
            }
        };
        GridSpec::new(self.model.grid_side(), dataset.taxonomy.n_fine(), anchors)
    }
}

/// Trains one model on the training split and scores it on the test split.
pub fn train_run(cfg: &RunConfig, dataset: &Dataset, grid: &GridSpec) -> Result<TrainOutcome> {
    let train_set = dataset.train();
    let test_set = dataset.test();
    train(
        &cfg.train,
        &cfg.model,
        grid,
        &dataset.taxonomy,
        &train_set,
        Some((&test_set, &cfg.eval)),
    )
}

/// Loss variants of the ablation, in table order.
pub fn ablation_variants(full_sweep: bool) -> Vec<HierLossParams> {
    let sweep: &[f64] = if full_sweep { &FULL_ALPHA_SWEEP } else { &DEFAULT_ALPHA_SWEEP };
    let mut v = vec![HierLossParams::normal()];
    v.extend(sweep.iter().map(|&a| HierLossParams::class_weighted(a)));
    v.push(HierLossParams::proposed(2.0, 1.0));
    v
}

#[derive(Debug)]
pub struct AblationOutcome {
    pub runs: Vec<RunResult>,
    /// `(label, seed, error)` of runs that did not finish.
    pub failed: Vec<(String, u64, Error)>,
    pub rows: Vec<AblationRow>,
}

/// Trains every (variant, seed) pair, writing `<label>_seed<k>/` run
/// directories and `report.csv` / `report.md` under `out`. A failed run is
/// reported and left out of the means; the others continue.
pub fn run_ablation(
    cfg: &RunConfig,
    dataset: &Dataset,
    variants: &[HierLossParams],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    cfg.validate()?;
    let grid = cfg.grid(dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for params in variants {
        for &seed in seeds {
            let label = params.label();
            let mut run_cfg = cfg.clone();
            run_cfg.train.loss = *params;
            run_cfg.train.seed = seed;
            log::info!("training {label} seed {seed}");
            let result = train_run(&run_cfg, dataset, &grid).and_then(|outcome| {
                write_outputs(&out.join(format!("{label}_seed{seed}")), &outcome, &dataset.taxonomy)?;
                let last = outcome.metrics.last().ok_or_else(|| Error::config("train.epochs", "must be >= 1"))?;
                Ok(RunResult {
                    label: label.clone(),
                    seed,
                    fine_map: last.fine_map.unwrap_or(0.0),
                    coarse_map: last.coarse_map.unwrap_or(0.0),
                })
            });
            match result {
                Ok(r) => runs.push(r),
                Err(e) => {
                    log::error!("{label} seed {seed} failed: {e}");
                    failed.push((label, seed, e));
                }
            }
        }
    }
    let failed_labels: Vec<String> = failed.iter().map(|f| f.0.clone()).collect();
    let rows = ablation_rows(&runs, &failed_labels);
    write_report(out, &rows)?;
    Ok(AblationOutcome { runs, failed, rows })
}

/// Loads a dataset, optionally with an explicit taxonomy file.
pub fn load_dataset(dir: &Path, taxonomy: Option<&Path>) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::config("data", format!("{} is not a dataset directory", dir.display())));
    }
    crate::data::load(dir, taxonomy)
}
