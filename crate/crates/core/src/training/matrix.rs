//! The fold x label-fraction x variant experiment matrix.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.toml                      materialized configuration
//! fold{k}/global/                  shared global stage of fold k
//! fold{k}/frac{f}/{variant}/       one cell: checkpoints, logs, result.json
//! report.tsv summary.tsv table.md  aggregated report
//! ```
//!
//! A cell is complete once its `result.json` exists with status `ok`;
//! reruns skip complete cells and retry failed ones.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Variant};
use crate::data::{generate_synthetic_corpus, read_corpus_dir, split_and_select, DatasetSplits, Slice2D, Volume};
use crate::error::{Error, Result};
use crate::eval::{
    average_scores, embedding_separation, evaluate_volume, export_embeddings, summarize_results, SamplePrediction,
};
use crate::model::{build_network, checkpoint_bytes, content_hash, load_checkpoint, predict_segmentation, save_checkpoint, NetworkState};
use crate::rng;

pub use crate::eval::{CellKey, CellResult, CellStatus, Lineage};

use super::pool::{LabelUse, PreparedCorpus, SlicePool};
use super::stages::{finetune, local_stage_kind, pretrain_global, pretrain_local};
use super::{log_to_tsv, EpochLog, StageConfig, StageKind};

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<Volume>> {
    match cfg.dataset.source {
        DataSource::Synthetic => generate_synthetic_corpus(&cfg.dataset.synthetic, rng::derive(cfg.seed, &[rng::tag("corpus")])),
        DataSource::Directory => read_corpus_dir(Path::new(&cfg.dataset.path)),
    }
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

pub fn cell_dir(out: &Path, key: &CellKey) -> PathBuf {
    fold_dir(out, key.fold).join(format!("frac{}", key.fraction)).join(key.variant.slug())
}

/// Seed of everything specific to one fold: its split and, through the
/// derived seeds below, every stage of every cell in it.
pub fn fold_seed(cfg: &ExperimentConfig, fold: usize) -> u64 {
    rng::derive(cfg.seed, &[rng::tag("fold"), fold as u64])
}

/// Initialization seed, shared by every variant of a fold.
pub fn init_seed(cfg: &ExperimentConfig, fold: usize) -> u64 {
    rng::derive(fold_seed(cfg, fold), &[rng::tag("init")])
}

pub fn global_seed(cfg: &ExperimentConfig, fold: usize) -> u64 {
    rng::derive(fold_seed(cfg, fold), &[rng::tag("global")])
}

pub fn local_seed(cfg: &ExperimentConfig, fold: usize, variant: Variant, fraction: f64) -> u64 {
    rng::derive(fold_seed(cfg, fold), &[rng::tag("local"), rng::tag(variant.slug()), fraction.to_bits()])
}

/// Fine-tuning seed, shared by every variant at one fold and fraction so
/// variants differ only in their starting network.
pub fn finetune_seed(cfg: &ExperimentConfig, fold: usize, fraction: f64) -> u64 {
    rng::derive(fold_seed(cfg, fold), &[rng::tag("finetune"), fraction.to_bits()])
}

pub fn embed_seed(cfg: &ExperimentConfig, fold: usize) -> u64 {
    rng::derive(fold_seed(cfg, fold), &[rng::tag("embed")])
}

/// Volume splits of one fold at one label fraction.
pub fn fold_splits(cfg: &ExperimentConfig, volumes: &[Volume], fold: usize, fraction: f64) -> Result<DatasetSplits> {
    split_and_select(volumes, cfg.dataset.split_ratios(), fraction, fold_seed(cfg, fold))
}

fn read_completed(dir: &Path) -> Option<CellResult> {
    let text = fs::read_to_string(dir.join("result.json")).ok()?;
    let r: CellResult = serde_json::from_str(&text).ok()?;
    (r.status == CellStatus::Ok).then_some(r)
}

fn save_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_atomic(path, log_to_tsv(log).as_bytes())
}

/// Returns the fold's globally pre-trained network and its checkpoint hash,
/// training it on first use and loading it from disk afterwards.
fn global_stage(
    cfg: &ExperimentConfig,
    corpus: &PreparedCorpus,
    splits: &DatasetSplits,
    fold: usize,
    out: &Path,
    fresh: &NetworkState,
    fresh_hash: &str,
) -> Result<(NetworkState, String)> {
    let dir = fold_dir(out, fold).join("global");
    let path = dir.join("checkpoint.ckpt");
    if path.exists() {
        if let Ok(loaded) = load_checkpoint(&path, Some(&cfg.model)) {
            info!("fold {fold}: reusing global checkpoint {}", path.display());
            return Ok(loaded);
        }
    }
    info!("fold {fold}: global pre-training");
    let sc = StageConfig::from_experiment(cfg, StageKind::Global, None, global_seed(cfg, fold));
    let mut run = pretrain_global(fresh.clone(), corpus, splits, &sc)?;
    run.net.parent_hash = Some(fresh_hash.to_string());
    save_log(&dir.join("epochs.tsv"), &run.log)?;
    let hash = save_checkpoint(&run.net, &path)?;
    Ok((run.net, hash))
}

/// Test slice with the most foreground in the first test volume.
fn sample_slice(test: &SlicePool) -> Option<&Slice2D> {
    test.volumes().first()?.iter().max_by_key(|s| {
        // earliest slice wins ties
        let fg = s.labels.as_ref().map_or(0, |l| l.iter().filter(|&&k| k > 0).count());
        (fg, std::cmp::Reverse(s.slice_index))
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    corpus: &PreparedCorpus,
    splits: &DatasetSplits,
    key: &CellKey,
    out: &Path,
    dir: &Path,
    global_cache: &mut Option<(NetworkState, String)>,
) -> Result<CellResult> {
    let fresh = build_network(&cfg.model, init_seed(cfg, key.fold))?;
    let fresh_hash = content_hash(&checkpoint_bytes(&fresh)?);
    let mut lineage = Lineage { init: fresh_hash.clone(), ..Default::default() };

    let (mut net, mut parent) = if key.variant.uses_global() {
        if global_cache.is_none() {
            *global_cache = Some(global_stage(cfg, corpus, splits, key.fold, out, &fresh, &fresh_hash)?);
        }
        let (n, h) = global_cache.clone().expect("filled above");
        lineage.global = Some(h.clone());
        (n, h)
    } else {
        (fresh, fresh_hash)
    };

    if let Some(strategy) = key.variant.local_strategy() {
        info!("{}: local pre-training ({strategy:?})", describe(key));
        let seed = local_seed(cfg, key.fold, key.variant, key.fraction);
        let sc = StageConfig::from_experiment(cfg, local_stage_kind(strategy), Some(strategy), seed);
        let mut run = pretrain_local(net, corpus, splits, &sc)?;
        run.net.parent_hash = Some(parent);
        save_log(&dir.join("local_epochs.tsv"), &run.log)?;
        let h = save_checkpoint(&run.net, &dir.join("local.ckpt"))?;
        lineage.local = Some(h.clone());
        parent = h;
        net = run.net;
    }

    info!("{}: fine-tuning", describe(key));
    let sc = StageConfig::from_experiment(cfg, StageKind::Finetune, None, finetune_seed(cfg, key.fold, key.fraction));
    let mut run = finetune(net, corpus, splits, &sc)?;
    run.net.parent_hash = Some(parent);
    save_log(&dir.join("finetune_epochs.tsv"), &run.log)?;
    let h = save_checkpoint(&run.net, &dir.join("finetuned.ckpt"))?;
    lineage.finetuned = Some(h);
    let net = run.net;
    let val_dice = run.log.iter().find(|l| l.epoch == net.epoch).and_then(|l| l.val_dice);

    let test = SlicePool::new(corpus, &splits.test, LabelUse::Require)?;
    let volume_scores = test.volumes().iter().map(|v| evaluate_volume(&net, v)).collect::<Result<Vec<_>>>()?;
    let scores = average_scores(&volume_scores);

    let test_slices: Vec<Slice2D> = test.volumes().concat();
    let table = export_embeddings(&net, &test_slices, cfg.experiment.embedding_cap, embed_seed(cfg, key.fold))?;
    write_atomic(&dir.join("embeddings.tsv"), table.to_tsv().as_bytes())?;

    if let Some(s) = sample_slice(&test) {
        let pred = predict_segmentation(&net, std::slice::from_ref(s))?.remove(0);
        let sample = SamplePrediction::new(s, &pred);
        write_atomic(&dir.join("sample.json"), &serde_json::to_vec(&sample)?)?;
    }

    Ok(CellResult {
        key: *key,
        seed: fold_seed(cfg, key.fold),
        status: CellStatus::Ok,
        error: None,
        per_class_dice: scores.per_class,
        mean_dice: scores.mean,
        val_dice,
        best_epoch: Some(net.epoch),
        embedding: embedding_separation(&table),
        lineage,
        wall_time_s: 0.0,
    })
}

fn describe(key: &CellKey) -> String {
    format!("fold {} / {} labels / {}", key.fold, crate::eval::fraction_label(key.fraction), key.variant)
}

/// Summary of a run written next to the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunIndex {
    completed: usize,
    failed: usize,
    skipped: usize,
}

/// Every cell of the matrix in execution order: fold, then label fraction,
/// then variant.
pub fn schedule(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let x = &cfg.experiment;
    (0..x.folds)
        .flat_map(|fold| {
            x.label_fractions
                .iter()
                .flat_map(move |&fraction| x.variants.iter().map(move |&variant| CellKey { variant, fraction, fold }))
        })
        .collect()
}

/// Runs (or resumes) every cell of the matrix and writes the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<crate::eval::MetricsReport> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    cfg.echo_to(&out)?;
    let volumes = load_corpus(cfg)?;
    let corpus = PreparedCorpus::new(&volumes, cfg.dataset.resolution)?;
    let x = &cfg.experiment;
    info!(
        "{} folds x {} fractions x {} variants = {} cells",
        x.folds,
        x.label_fractions.len(),
        x.variants.len(),
        schedule(cfg).len()
    );

    let mut results = Vec::new();
    let mut index = RunIndex { completed: 0, failed: 0, skipped: 0 };
    let mut global_cache: Option<(NetworkState, String)> = None;
    let mut current: Option<(usize, f64, DatasetSplits)> = None;
    for key in schedule(cfg) {
        if current.as_ref().is_none_or(|(f, _, _)| *f != key.fold) {
            global_cache = None;
        }
        if current.as_ref().is_none_or(|(f, fr, _)| *f != key.fold || *fr != key.fraction) {
            current = Some((key.fold, key.fraction, fold_splits(cfg, &volumes, key.fold, key.fraction)?));
        }
        let splits = &current.as_ref().expect("set above").2;
        let dir = cell_dir(&out, &key);
        if let Some(done) = read_completed(&dir) {
            info!("{}: already complete", describe(&key));
            index.skipped += 1;
            results.push(done);
            continue;
        }
        let start = Instant::now();
        let mut result = match run_cell(cfg, &corpus, splits, &key, &out, &dir, &mut global_cache) {
            Ok(r) => {
                index.completed += 1;
                r
            }
            Err(e) => {
                error!("{}: failed: {e}", describe(&key));
                index.failed += 1;
                failed_cell(key, fold_seed(cfg, key.fold), e.to_string())
            }
        };
        result.wall_time_s = start.elapsed().as_secs_f64();
        write_atomic(&dir.join("result.json"), &serde_json::to_vec_pretty(&result)?)?;
        results.push(result);
    }

    let report = summarize_results(&results, &x.variants, &x.label_fractions);
    write_report(&out, &report)?;
    write_atomic(&out.join("run_index.json"), &serde_json::to_vec_pretty(&index)?)?;
    Ok(report)
}

fn failed_cell(key: CellKey, seed: u64, message: String) -> CellResult {
    CellResult {
        key,
        seed,
        status: CellStatus::Failed,
        error: Some(message),
        per_class_dice: Vec::new(),
        mean_dice: None,
        val_dice: None,
        best_epoch: None,
        embedding: None,
        lineage: Lineage::default(),
        wall_time_s: 0.0,
    }
}

pub fn write_report(out: &Path, report: &crate::eval::MetricsReport) -> Result<()> {
    write_atomic(&out.join("report.tsv"), report.cells_tsv().as_bytes())?;
    write_atomic(&out.join("summary.tsv"), report.summary_tsv().as_bytes())?;
    write_atomic(&out.join("table.md"), report.table_markdown().as_bytes())
}
