//! `sceneforge` — train, evaluate, and run the two-stream scene
//! recognition model over precomputed feature files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sceneforge_core::checkpoint;
use sceneforge_core::config::Config;
use sceneforge_core::error::Error;
use sceneforge_core::infer::{infer_records_parallel, Selection};
use sceneforge_core::manifest::{load_manifest, Manifest, Split};
use sceneforge_core::model::{ModelSnapshot, TwoStreamModel};
use sceneforge_core::optim::TrainState;
use sceneforge_core::scalar::{Dtype, Scalar};
use sceneforge_core::store::ParameterStore;
use sceneforge_core::synth::{generate_synthetic_dataset, SynthSpec};
use sceneforge_core::train::{load_dataset, train, DatasetOptions};

#[derive(Parser)]
#[command(name = "sceneforge", version, about = "Two-stream video scene recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SelectionArgs {
    /// Select labels with refined scores at or above this threshold.
    #[arg(long, conflicts_with = "topk")]
    threshold: Option<f64>,
    /// Select the K best-scoring labels per video.
    #[arg(long)]
    topk: Option<usize>,
}

impl SelectionArgs {
    fn to_selection(&self) -> Selection {
        match (self.threshold, self.topk) {
            (_, Some(k)) => Selection::TopK(k),
            (Some(t), None) => Selection::Threshold(t),
            (None, None) => Selection::Threshold(0.0),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest and write the best checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force bit-reproducible execution (single-threaded).
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint: micro-F1, precision/recall, RP@90%.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Split to evaluate (train | val | test).
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for report.txt / report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Write per-video predictions as JSONL.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        deterministic: bool,
    },
    /// Generate a synthetic planted-structure corpus.
    Synth {
        #[arg(long, default_value_t = 600)]
        videos: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        parents: usize,
        #[arg(long, default_value_t = 4)]
        children: usize,
        #[arg(long, default_value_t = 12)]
        nf: usize,
        /// Width of the 2D/3D/text/region feature spaces.
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        #[arg(long, default_value_t = 32)]
        dkg: usize,
        #[arg(long, default_value_t = 3)]
        regions: usize,
        /// Hold out one child label: its videos go to the test split and
        /// its token is left out of the embedding table.
        #[arg(long)]
        holdout: bool,
        #[arg(long, default_value = "f32")]
        dtype: String,
    },
    /// Verify analytic gradients of the full two-stream objective against
    /// central differences at 64-bit.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Summarize a manifest or a checkpoint.
    Inspect {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn worker_threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    std::env::var("SCENEFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help/--version print and exit 0.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_input() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, manifest, out, seed, deterministic } => {
            let mut cfg = match config {
                Some(path) => Config::load(&path)?,
                None => Config::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if deterministic {
                cfg.deterministic = true;
            }
            cfg.validate()?;
            let manifest = load_manifest(&manifest)?;
            match cfg.dtype {
                Dtype::F32 => run_train::<f32>(&cfg, &manifest, &out),
                Dtype::F64 => run_train::<f64>(&cfg, &manifest, &out),
            }
        }
        Command::Eval { checkpoint, manifest, selection, split, out, deterministic } => {
            let split = parse_split(&split)?;
            let threads = worker_threads(deterministic);
            let manifest = load_manifest(&manifest)?;
            match checkpoint::peek_dtype(&checkpoint)? {
                Dtype::F32 => run_eval::<f32>(&checkpoint, &manifest, selection.to_selection(), split, out.as_deref(), threads),
                Dtype::F64 => run_eval::<f64>(&checkpoint, &manifest, selection.to_selection(), split, out.as_deref(), threads),
            }
        }
        Command::Infer { checkpoint, manifest, out, selection, split, deterministic } => {
            let split = parse_split(&split)?;
            let threads = worker_threads(deterministic);
            let manifest = load_manifest(&manifest)?;
            match checkpoint::peek_dtype(&checkpoint)? {
                Dtype::F32 => run_infer::<f32>(&checkpoint, &manifest, &out, selection.to_selection(), split, threads),
                Dtype::F64 => run_infer::<f64>(&checkpoint, &manifest, &out, selection.to_selection(), split, threads),
            }
        }
        Command::Synth { videos, seed, out, noise, parents, children, nf, feature_dim, dkg, regions, holdout, dtype } => {
            let mut spec = SynthSpec::default();
            spec.n_videos = videos;
            spec.seed = seed;
            spec.noise = noise;
            spec.n_parents = parents;
            spec.children_per_parent = children;
            spec.dims.n_f = nf;
            spec.dims.d2d = feature_dim;
            spec.dims.d3d = feature_dim;
            spec.dims.d_text = feature_dim;
            spec.dims.d_region = feature_dim;
            spec.dims.d_kg = dkg;
            spec.regions_per_frame = regions;
            spec.holdout = holdout;
            let desc = match dtype.as_str() {
                "f32" => generate_synthetic_dataset::<f32>(&spec, &out)?,
                "f64" => generate_synthetic_dataset::<f64>(&spec, &out)?,
                other => return Err(Error::Config(format!("dtype must be f32 or f64, got {other:?}"))),
            };
            println!(
                "wrote {} videos, hierarchy {}x{}, to {}",
                videos,
                desc.parent_names.len(),
                desc.child_names.len(),
                out.display()
            );
            if let Some(held) = &desc.holdout_child {
                println!("held-out label: {held}");
            }
            Ok(())
        }
        Command::Gradcheck { config, seed, step, samples } => {
            let seed = match config {
                Some(path) => Config::load(&path)?.seed,
                None => seed,
            };
            let err = sceneforge_core::gradcheck::full_objective_check(seed, step, samples)?;
            println!("max_relative_error={err:.6e}");
            if err < 1e-3 {
                Ok(())
            } else {
                Err(Error::numeric(
                    "gradcheck",
                    format!("max relative error {err:.3e} exceeds 1e-3"),
                ))
            }
        }
        Command::Inspect { manifest, checkpoint } => {
            if manifest.is_none() && checkpoint.is_none() {
                return Err(Error::Config("inspect needs --manifest or --checkpoint".into()));
            }
            if let Some(path) = manifest {
                inspect_manifest(&path)?;
            }
            if let Some(path) = checkpoint {
                inspect_checkpoint(&path)?;
            }
            Ok(())
        }
    }
}

fn run_train<S: Scalar>(cfg: &Config, manifest: &Manifest, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let mut kstore = manifest.load_knowledge::<S>()?;
    let mut store = ParameterStore::<S>::new(cfg.seed);
    let model = TwoStreamModel::build(cfg, &manifest.dims, &manifest.hierarchy, &mut kstore, &mut store)?;
    let dataset = load_dataset(manifest, &manifest.hierarchy, &mut kstore, &mut store, DatasetOptions::default())?;
    log::info!(
        "training on {} videos ({} val, {} test), {} parameters",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        store.total_elements()
    );
    let mut state = TrainState::new(cfg.seed);
    let checkpoint_path = out.join("checkpoint.kfcp");
    let report = train(cfg, &model, &dataset, &store, &mut state, Some(&checkpoint_path))?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!(
        "best validation micro-F1 {:.4} at epoch {} ({} epochs run{})",
        report.best_val_f1,
        report.best_epoch,
        report.epochs.len(),
        if report.stopped_early { ", stopped early" } else { "" }
    );
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

/// Builds the ground-truth index sets for a record list.
fn truth_sets(
    manifest: &Manifest,
    records: &[&sceneforge_core::manifest::VideoRecord],
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>), Error> {
    let mut level1 = Vec::with_capacity(records.len());
    let mut level2 = Vec::with_capacity(records.len());
    for r in records {
        let idx = manifest.hierarchy.path_indices(&r.labels)?;
        level1.push(idx.level1);
        level2.push(idx.level2);
    }
    Ok((level1, level2))
}

fn snapshot_from_checkpoint<S: Scalar>(
    path: &Path,
    manifest: &Manifest,
) -> Result<ModelSnapshot<S>, Error> {
    let ckpt = checkpoint::load::<S>(path)?;
    let kstore = manifest.load_knowledge::<S>()?;
    Ok(ModelSnapshot {
        config: ckpt.config.clone(),
        dims: manifest.dims,
        hierarchy_spec: manifest.hierarchy.to_spec(),
        kstore_raw: kstore.to_raw(),
        params_raw: ckpt.params,
        store_seed: ckpt.store_seed,
    })
}

fn run_eval<S: Scalar>(
    checkpoint_path: &Path,
    manifest: &Manifest,
    selection: Selection,
    split: Split,
    out: Option<&Path>,
    threads: usize,
) -> Result<(), Error> {
    let snapshot = snapshot_from_checkpoint::<S>(checkpoint_path, manifest)?;
    let records = manifest.records_in(split);
    if records.is_empty() {
        return Err(Error::validation("eval", format!("no records in split {split:?}")));
    }
    let owned: Vec<sceneforge_core::manifest::VideoRecord> =
        records.iter().map(|&r| r.clone()).collect();
    let predictions = infer_records_parallel(&snapshot, &owned, &manifest.dir, selection, threads)?;
    let (truth_l1, truth_l2) = truth_sets(manifest, &records)?;
    let report = sceneforge_core::infer::compute_report(
        &predictions,
        &truth_l1,
        &truth_l2,
        &manifest.hierarchy,
        selection,
    )?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), report.to_text())?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
    }
    Ok(())
}

fn run_infer<S: Scalar>(
    checkpoint_path: &Path,
    manifest: &Manifest,
    out: &Path,
    selection: Selection,
    split: Split,
    threads: usize,
) -> Result<(), Error> {
    let snapshot = snapshot_from_checkpoint::<S>(checkpoint_path, manifest)?;
    let records = manifest.records_in(split);
    if records.is_empty() {
        return Err(Error::validation("infer", format!("no records in split {split:?}")));
    }
    let owned: Vec<sceneforge_core::manifest::VideoRecord> =
        records.iter().map(|&r| r.clone()).collect();
    let predictions = infer_records_parallel(&snapshot, &owned, &manifest.dir, selection, threads)?;
    let mut lines = String::new();
    for p in &predictions {
        lines.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        lines.push('\n');
    }
    std::fs::write(out, lines)?;
    println!("wrote {} predictions to {}", predictions.len(), out.display());
    Ok(())
}

fn inspect_manifest(path: &Path) -> Result<(), Error> {
    let manifest = load_manifest(path)?;
    let count = |s: Split| manifest.records.iter().filter(|r| r.split == s).count();
    println!("manifest: {}", path.display());
    println!(
        "hierarchy: {} level-1 labels, {} level-2 labels",
        manifest.hierarchy.n_level1(),
        manifest.hierarchy.n_level2()
    );
    let d = &manifest.dims;
    println!(
        "dims: d2d={} d3d={} d_text={} d_region={} d_kg={} n_f={} max_keywords={}",
        d.d2d, d.d3d, d.d_text, d.d_region, d.d_kg, d.n_f, d.max_keywords
    );
    println!(
        "records: {} total (train {}, val {}, test {})",
        manifest.records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    if let Some(p) = &manifest.embeddings_path {
        println!("embeddings: {}", p.display());
    }
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> Result<(), Error> {
    let dtype = checkpoint::peek_dtype(path)?;
    println!("checkpoint: {}", path.display());
    println!("dtype: {dtype}");
    match dtype {
        Dtype::F32 => inspect_checkpoint_typed::<f32>(path),
        Dtype::F64 => inspect_checkpoint_typed::<f64>(path),
    }
}

fn inspect_checkpoint_typed<S: Scalar>(path: &Path) -> Result<(), Error> {
    let ckpt = checkpoint::load::<S>(path)?;
    let elements: usize = ckpt.params.iter().map(|(_, _, v)| v.len()).sum();
    println!("epoch: {} (step {})", ckpt.epoch, ckpt.step);
    println!("best_metric: {}", ckpt.best_metric);
    println!("parameters: {} tensors, {} elements", ckpt.params.len(), elements);
    println!("optimizer_moments: {}", ckpt.moments.len());
    println!("config:");
    for line in ckpt.config.to_text().lines() {
        println!("  {line}");
    }
    Ok(())
}
