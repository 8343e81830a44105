use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, Bagging, RunConfig};
use super::{create_dir_all, write_json, write_predictions, write_text, RunLayout, RUN_ROOT_ENV};
use crate::dataset::{self, ClassLabel, DatasetManifest, FoldPlan, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::{report_from_predictions, MetricsReport};
use crate::neuralnet::write_checkpoint;
use crate::trainer::{evaluate, train};

const BOOTSTRAP_TAG: u64 = 0xb007;

#[derive(Debug, Clone)]
pub struct CvOptions {
    /// Concurrent model×fold jobs.
    pub jobs: usize,
    /// Output root; takes precedence over the configuration and environment.
    pub out_root: Option<PathBuf>,
    /// Validate, ingest and plan folds without training or writing anything.
    pub dry_run: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            out_root: None,
            dry_run: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub model: String,
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub harness_version: String,
    pub name: String,
    pub seed: u64,
    pub k: usize,
    pub samples: usize,
    pub class_counts: BTreeMap<ClassLabel, usize>,
    pub models: Vec<String>,
    /// Models whose every fold finished.
    pub completed: Vec<String>,
    pub failures: Vec<JobFailure>,
    /// Mean cross-fold accuracy of each completed model.
    pub mean_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct CvOutcome {
    /// `None` for a dry run.
    pub run_dir: Option<PathBuf>,
    pub manifest: DatasetManifest,
    pub plan: FoldPlan,
    pub summary: CvSummary,
}

/// Output root precedence: explicit option, configuration, environment, `runs`.
pub fn resolve_out_root(explicit: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit.or(configured) {
        return p.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// First of `<root>/<name>-s<seed>`, `<root>/<name>-s<seed>-2`, ... that does not exist.
pub fn fresh_run_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    let base = format!("{name}-s{seed}");
    let mut candidate = root.join(&base);
    let mut n = 2;
    while candidate.exists() {
        candidate = root.join(format!("{base}-{n}"));
        n += 1;
    }
    candidate
}

/// Ingest every configured dataset and merge the manifests.
pub fn build_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let mut merged: Option<DatasetManifest> = None;
    for src in &cfg.datasets {
        let m = dataset::ingest(&src.root, &src.origin)?;
        merged = Some(match merged {
            None => m,
            Some(acc) => dataset::merge(&acc, &m)?,
        });
    }
    merged.ok_or_else(|| Error::Config("no datasets configured".into()))
}

type InputKey = (usize, usize, usize);

/// Decode every sample once, keeping only copies resized to the input shapes
/// the configured models need.
fn load_resized(manifest: &DatasetManifest, keys: &BTreeSet<InputKey>) -> Result<BTreeMap<InputKey, Vec<LabeledImage>>> {
    let per_sample: Vec<Vec<LabeledImage>> = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let img = dataset::load_entry(e)?;
            keys.iter().map(|&(h, w, c)| img.resize(h, w, c)).collect()
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<InputKey, Vec<LabeledImage>> = keys.iter().map(|k| (*k, Vec::new())).collect();
    for sample in per_sample {
        for (key, img) in keys.iter().zip(sample) {
            out.get_mut(key).expect("key present").push(img);
        }
    }
    Ok(out)
}

fn bootstrap(set: &[LabeledImage], seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..set.len()).map(|_| set[rng.gen_range(0..set.len())].clone()).collect()
}

struct JobResult {
    model: usize,
    fold: usize,
    outcome: std::result::Result<MetricsReport, String>,
}

/// Train and evaluate every model on every fold, persisting all artifacts in
/// a fresh run directory.
pub fn run_cv(cfg: &RunConfig, source_text: Option<&str>, opts: &CvOptions) -> Result<CvOutcome> {
    cfg.validate()?;
    let manifest = build_manifest(cfg)?;
    let plan = dataset::make_folds(&manifest, cfg.folds.k, cfg.seed, cfg.folds.stratified)?;
    let model_names: Vec<String> = cfg.models.iter().map(|m| m.name.clone()).collect();
    let mut summary = CvSummary {
        harness_version: env!("CARGO_PKG_VERSION").into(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        k: cfg.folds.k,
        samples: manifest.len(),
        class_counts: manifest.class_counts().clone(),
        models: model_names.clone(),
        completed: Vec::new(),
        failures: Vec::new(),
        mean_accuracy: BTreeMap::new(),
    };
    if opts.dry_run {
        return Ok(CvOutcome {
            run_dir: None,
            manifest,
            plan,
            summary,
        });
    }

    let out_root = resolve_out_root(opts.out_root.as_deref(), cfg.out_root.as_deref());
    create_dir_all(&out_root)?;
    let run_dir = fresh_run_dir(&out_root, &cfg.name, cfg.seed);
    let layout = RunLayout::new(&run_dir);
    create_dir_all(&run_dir)?;
    write_text(&layout.config(), &cfg.to_toml()?)?;
    if let Some(text) = source_text {
        write_text(&layout.source_config(), text)?;
    }
    write_json(
        &layout.run_info(),
        &serde_json::json!({
            "harness_version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "fold_seed": plan.seed,
            "precision": "f64",
        }),
    )?;
    manifest.write_csv(&layout.manifest())?;
    write_text(&layout.folds(), &plan.to_json()?)?;

    let keys: BTreeSet<InputKey> = cfg
        .models
        .iter()
        .map(|m| (m.spec.input_hw.0, m.spec.input_hw.1, m.spec.input_channels))
        .collect();
    let images = load_resized(&manifest, &keys)?;
    let fold_of: Vec<usize> = manifest
        .entries()
        .iter()
        .map(|e| plan.fold_of(&e.sample_id).expect("plan covers manifest"))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..cfg.folds.k)
        .flat_map(|f| (0..cfg.models.len()).map(move |m| (m, f)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<JobResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mi, fold)| {
                let entry = &cfg.models[mi];
                let key = (entry.spec.input_hw.0, entry.spec.input_hw.1, entry.spec.input_channels);
                let set = &images[&key];
                let outcome = run_job(cfg, &layout, mi, fold, set, &fold_of).map_err(|e| e.to_string());
                match &outcome {
                    Ok(r) => log::info!("fold {fold} {}: accuracy {:.4}", entry.name, r.accuracy),
                    Err(e) => log::error!("fold {fold} {}: {e}", entry.name),
                }
                JobResult {
                    model: mi,
                    fold,
                    outcome,
                }
            })
            .collect()
    });

    let mut per_model: Vec<Vec<Option<MetricsReport>>> = vec![vec![None; cfg.folds.k]; cfg.models.len()];
    for r in results {
        match r.outcome {
            Ok(rep) => per_model[r.model][r.fold] = Some(rep),
            Err(error) => summary.failures.push(JobFailure {
                model: model_names[r.model].clone(),
                fold: r.fold,
                error,
            }),
        }
    }
    create_dir_all(&run_dir.join("reports"))?;
    for (mi, reports) in per_model.into_iter().enumerate() {
        let Some(reports) = reports.into_iter().collect::<Option<Vec<_>>>() else {
            continue;
        };
        let mean = MetricsReport::mean_of(&reports)?;
        mean.write_json(&layout.mean_report(&model_names[mi]))?;
        summary.mean_accuracy.insert(model_names[mi].clone(), mean.accuracy);
        summary.completed.push(model_names[mi].clone());
    }
    write_json(&layout.summary(), &summary)?;
    Ok(CvOutcome {
        run_dir: Some(run_dir),
        manifest,
        plan,
        summary,
    })
}

fn run_job(
    cfg: &RunConfig,
    layout: &RunLayout,
    mi: usize,
    fold: usize,
    set: &[LabeledImage],
    fold_of: &[usize],
) -> Result<MetricsReport> {
    let entry = &cfg.models[mi];
    let mut train_set = Vec::new();
    let mut test_set = Vec::new();
    for (img, &f) in set.iter().zip(fold_of) {
        if f == fold {
            test_set.push(img.clone());
        } else {
            train_set.push(img.clone());
        }
    }
    if cfg.ensemble.bagging == Bagging::Bootstrap {
        train_set = bootstrap(&train_set, derive_seed(cfg.seed, &[BOOTSTRAP_TAG, mi as u64, fold as u64]));
    }
    let seed = derive_seed(cfg.seed, &[mi as u64, fold as u64]);
    let tc = entry.train.to_config(&entry.spec, seed);
    let (params, mut record) = train(&tc, &train_set)?;
    let dir = layout.model_dir(fold, &entry.name);
    create_dir_all(&dir)?;
    write_checkpoint(&dir.join("checkpoint.bin"), &params, &entry.spec, tc.epochs)?;
    record.checkpoint = Some(PathBuf::from("checkpoint.bin"));
    write_json(&dir.join("trainrecord.json"), &record)?;
    let preds = evaluate(&params, &entry.spec, &test_set)?;
    write_predictions(&dir.join("predictions.jsonl"), &preds)?;
    let report = report_from_predictions(&preds)?;
    report.write_json(&dir.join("report.json"))?;
    Ok(report)
}
