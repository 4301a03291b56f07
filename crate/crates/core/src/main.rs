use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hierdet::anchors::{kmeans_anchors, DEFAULT_MAX_ITERS};
use hierdet::data;
use hierdet::eval::{coarse_confusion, eval_coarse, eval_fine};
use hierdet::experiment::{ablation_variants, load_dataset, run_ablation, train_run, RunConfig};
use hierdet::gradcheck;
use hierdet::model::Checkpoint;
use hierdet::taxonomy::{HierLossParams, LossVariant};
use hierdet::train::{predict_all, write_outputs};
use hierdet::Error;

/// Grid detector with a hierarchy-weighted classification loss.
#[derive(Parser)]
#[command(name = "hierdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Cluster anchor shapes from a dataset's training split.
    Anchors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_parser = ["normal", "weighted", "proposed"])]
        loss: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint at fine and coarse granularity.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        /// `all`, `train` or `test`.
        #[arg(long, default_value = "test", value_parser = ["all", "train", "test"])]
        split: String,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every loss variant for each seed.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Sweep all five class-weighted alphas instead of three.
        #[arg(long)]
        full_sweep: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the backward rule of this op (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply_train_args(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
}

/// `--beta` only belongs to the proposed loss; a missing alpha falls back
/// to the config for the same variant, else the variant default.
fn loss_from_flags(
    base: HierLossParams,
    loss: Option<&str>,
    alpha: Option<f64>,
    beta: Option<f64>,
) -> Result<HierLossParams, Error> {
    let variant = match loss {
        Some(name) => LossVariant::parse(name).ok_or_else(|| Error::LossParams(format!("unknown loss {name:?}")))?,
        None => base.variant,
    };
    if beta.is_some() && variant != LossVariant::Proposed {
        return Err(Error::LossParams("--beta is only valid with --loss proposed".into()));
    }
    let same = variant == base.variant;
    let params = match variant {
        LossVariant::Normal => {
            if alpha.is_some_and(|a| a != 1.0) {
                return Err(Error::LossParams("--alpha is fixed at 1 for --loss normal".into()));
            }
            HierLossParams::normal()
        }
        LossVariant::ClassWeighted => {
            HierLossParams::class_weighted(alpha.unwrap_or(if same { base.alpha } else { 2.5 }))
        }
        LossVariant::Proposed => HierLossParams::proposed(
            alpha.unwrap_or(if same { base.alpha } else { 2.0 }),
            beta.unwrap_or(if same { base.beta } else { 1.0 }),
        ),
    };
    params.validate()?;
    Ok(params)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            count,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let count = count.unwrap_or(cfg.count);
            let manifest = data::generate(&cfg.synth, count, &out)?;
            println!(
                "wrote {} images ({} boxes, {} train / {} test, {} fine / {} coarse classes) to {}",
                manifest.count,
                manifest.n_boxes,
                manifest.splits.train.len(),
                manifest.splits.test.len(),
                manifest.n_fine,
                manifest.n_coarse,
                out.display()
            );
            if manifest.placement_shortfall > 0 {
                eprintln!("warning: {} cells could not be placed", manifest.placement_shortfall);
            }
        }
        Command::Anchors { data, k, seed } => {
            let ds = load_dataset(&data, None)?;
            let shapes = ds.all_shapes(&ds.splits.train);
            let set = kmeans_anchors(&shapes, k, DEFAULT_MAX_ITERS, seed)?;
            println!("{}", serde_json::to_string_pretty(&set).expect("anchor set serializes"));
        }
        Command::Train {
            common,
            loss,
            alpha,
            beta,
            seed,
            out,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            apply_train_args(&mut cfg, &common);
            cfg.train.loss = loss_from_flags(cfg.train.loss, loss.as_deref(), alpha, beta)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let ds = load_dataset(&common.data, common.taxonomy.as_deref())?;
            cfg.synth.image_size = ds.images.first().map_or(cfg.synth.image_size, |i| i.pixels.width);
            cfg.validate()?;
            let grid = cfg.grid(&ds)?;
            let outcome = train_run(&cfg, &ds, &grid)?;
            write_outputs(&out, &outcome, &ds.taxonomy)?;
            let config_path = out.join("config.json");
            let mut resolved = cfg.clone();
            resolved.anchors = Some(grid.anchors.clone());
            let text = serde_json::to_string_pretty(&resolved).expect("config serializes");
            std::fs::write(&config_path, text + "\n").map_err(|e| Error::Io {
                path: config_path.clone(),
                source: e,
            })?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "{}: fine mAP@0.5 {:.4}, coarse mAP@0.5 {:.4}",
                    cfg.train.loss.label(),
                    last.fine_map.unwrap_or(0.0),
                    last.coarse_map.unwrap_or(0.0)
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            taxonomy,
            iou,
            conf,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = load_dataset(&data, taxonomy.as_deref())?;
            if ck.taxonomy_hash != ds.taxonomy.hash() {
                eprintln!("warning: checkpoint was trained with a different taxonomy");
            }
            if ck.params.grid.n_fine != ds.taxonomy.n_fine() {
                return Err(Error::Taxonomy(format!(
                    "checkpoint predicts {} classes, taxonomy has {}",
                    ck.params.grid.n_fine,
                    ds.taxonomy.n_fine()
                ))
                .into());
            }
            let settings = hierdet::train::EvalSettings {
                iou,
                conf,
                ..Default::default()
            };
            settings.validate()?;
            let images = match split.as_str() {
                "train" => ds.train(),
                "test" => ds.test(),
                _ => ds.images.clone(),
            };
            let dets = predict_all(&ck.params, &images, &settings)?;
            let gts: Vec<_> = images.iter().map(|i| i.labels.clone()).collect();
            let fine = eval_fine(&dets, &gts, &ds.taxonomy, iou)?;
            let coarse = eval_coarse(&dets, &gts, &ds.taxonomy, iou)?;
            let confusion = coarse_confusion(&dets, &gts, &ds.taxonomy, iou)?;
            let dir = out.unwrap_or_else(|| ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let report = serde_json::json!({ "fine": fine, "coarse": coarse, "coarse_confusion": confusion });
            let path = dir.join("eval.json");
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
            println!("fine mAP@{iou}: {:.4}", fine.map50);
            println!("coarse mAP@{iou}: {:.4}", coarse.map50);
        }
        Command::Ablate {
            common,
            seeds,
            full_sweep,
            out,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            apply_train_args(&mut cfg, &common);
            let ds = load_dataset(&common.data, common.taxonomy.as_deref())?;
            cfg.synth.image_size = ds.images.first().map_or(cfg.synth.image_size, |i| i.pixels.width);
            let outcome = run_ablation(&cfg, &ds, &ablation_variants(full_sweep), &seeds, &out)?;
            print!("{}", hierdet::eval::report_markdown(&outcome.rows));
            for (label, seed, err) in &outcome.failed {
                eprintln!("failed: {label} seed {seed}: {err}");
            }
            // a numerical abort in any run wins over other failures
            if let Some(worst) = outcome.failed.into_iter().map(|f| f.2).max_by_key(Error::exit_code) {
                return Err(Failure::Run(worst));
            }
        }
        Command::Gradcheck { seed, inject_fault } => {
            // the fault name must outlive the tapes that reference it
            let fault: Option<&'static str> = inject_fault.map(|s| &*Box::leak(s.into_boxed_str()));
            let results = gradcheck::run(seed, fault)?;
            let mut failures = Vec::new();
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:28} max rel err {:.3e} (tol {:.0e}, {} coords)",
                    r.name, r.max_rel_err, r.tolerance, r.coords
                );
                if !r.passed() {
                    failures.push(format!("{} (max rel err {:.3e})", r.name, r.max_rel_err));
                }
            }
            if !failures.is_empty() {
                return Err(Failure::Check(format!("gradient check failed: {}", failures.join(", "))));
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
