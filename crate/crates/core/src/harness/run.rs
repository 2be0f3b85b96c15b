use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::RunConfig;
use super::eval::evaluate;
use super::trace::TrainTrace;
use super::train::{prepare_triplets, train_run};
use crate::checkpoint;
use crate::data::{kfold_split, Sample};
use crate::error::{Error, Result};
use crate::io_util::write_text;
use crate::metrics::{aggregate, metrics_csv, MetricsRecord, Summary};
use crate::model::Model;

pub const CHECKPOINT_FILE: &str = "model.tsck";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "model,dsc,sensitivity,specificity,hausdorff_mm";

/// Sibling of a checkpoint holding the run configuration it was trained with.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

/// Sibling of a checkpoint listing parameter names and extents.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest.txt")
}

/// Writes the checkpoint, its config and manifest siblings, and the trace
/// CSV into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &RunConfig,
    model: &Model<f32>,
    trace: &TrainTrace,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::write(&ckpt, &model.params)?;
    write_text(&config_path(&ckpt), &cfg.to_text())?;
    write_text(&manifest_path(&ckpt), &model.params.manifest())?;
    write_text(&dir.join(TRACE_FILE), &trace.to_csv())
}

/// Rebuilds a trained model from a checkpoint and its `.cfg` sibling.
pub fn load_model(checkpoint_file: &Path) -> Result<(RunConfig, Model<f32>)> {
    let cfg_file = config_path(checkpoint_file);
    let cfg = RunConfig::read(&cfg_file)?;
    let mut model = Model::<f32>::build(cfg.model_kind, cfg.model, cfg.seed)?;
    checkpoint::load_into(&mut model.params, &checkpoint::read(checkpoint_file)?)?;
    Ok((cfg, model))
}

/// Trains on every sample and writes the run artifacts under `out`.
pub fn train_to_dir(
    cfg: &RunConfig,
    samples: &[Sample],
    out: &Path,
) -> Result<(Model<f32>, TrainTrace)> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let triplets = prepare_triplets(&refs, cfg.image_size)?;
    let (model, trace) = train_run(cfg, &triplets)?;
    write_run(out, cfg, &model, &trace)?;
    Ok((model, trace))
}

pub fn summary_csv(rows: &[(String, Summary)]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{:.6}",
            s.dsc, s.sensitivity, s.specificity, s.hausdorff_mm
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub index: usize,
    pub test_ids: Vec<String>,
    pub trace: TrainTrace,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Medians over the test slices of all folds.
    pub pooled: Summary,
}

impl CrossValidation {
    /// One `label/fold{i}` row per fold, then the pooled `label` row.
    pub fn summary_rows(&self, label: &str) -> Vec<(String, Summary)> {
        let mut rows: Vec<(String, Summary)> = self
            .folds
            .iter()
            .map(|f| (format!("{label}/fold{}", f.index), f.summary))
            .collect();
        rows.push((label.to_string(), self.pooled));
        rows
    }
}

fn run_fold(
    cfg: &RunConfig,
    samples: &[Sample],
    index: usize,
    train: &[usize],
    test: &[usize],
) -> Result<FoldResult> {
    let fold_cfg = RunConfig {
        seed: cfg.seed.wrapping_add(index as u64),
        ..cfg.clone()
    };
    let train_set: Vec<&Sample> = train.iter().map(|&i| &samples[i]).collect();
    let test_set: Vec<&Sample> = test.iter().map(|&i| &samples[i]).collect();
    let triplets = prepare_triplets(&train_set, cfg.image_size)?;
    let (model, trace) = train_run(&fold_cfg, &triplets)?;
    let records = evaluate(&model, &test_set, cfg.image_size)?;
    let summary = aggregate(&records)?;
    if let Some(out) = &cfg.out {
        let dir = out.join(format!("fold{index}"));
        write_run(&dir, &fold_cfg, &model, &trace)?;
        write_text(&dir.join(METRICS_FILE), &metrics_csv(&records)?)?;
    }
    Ok(FoldResult {
        index,
        test_ids: test_set.iter().map(|s| s.id.clone()).collect(),
        trace,
        records,
        summary,
    })
}

/// k-fold cross-validation over volumes. Fold `i` trains with seed
/// `cfg.seed + i`; folds run concurrently on up to `jobs` threads. With
/// `cfg.out` set, per-fold artifacts go to `out/fold{i}/` and the pooled
/// metrics and summary CSVs to `out/`.
pub fn cross_validate(cfg: &RunConfig, samples: &[Sample], jobs: usize) -> Result<CrossValidation> {
    cfg.validate()?;
    if samples.len() < cfg.folds {
        return Err(Error::Config(format!(
            "{} folds need at least {} volumes, dataset has {}",
            cfg.folds,
            cfg.folds,
            samples.len()
        )));
    }
    let splits = kfold_split(samples.len(), cfg.folds, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
    let folds = pool.install(|| {
        splits
            .par_iter()
            .enumerate()
            .map(|(i, f)| run_fold(cfg, samples, i, &f.train, &f.test))
            .collect::<Result<Vec<_>>>()
    })?;
    let all: Vec<MetricsRecord> = folds
        .iter()
        .flat_map(|f| f.records.iter().cloned())
        .collect();
    let cv = CrossValidation {
        pooled: aggregate(&all)?,
        folds,
    };
    if let Some(out) = &cfg.out {
        write_text(&out.join(METRICS_FILE), &metrics_csv(&all)?)?;
        write_text(
            &out.join(SUMMARY_FILE),
            &summary_csv(&cv.summary_rows(&cfg.label())),
        )?;
    }
    Ok(cv)
}
