//! Stage contracts: loss decrease, determinism, stage isolation, transfer
//! and lineage, degenerate corpora, overfitting, matrix scheduling and
//! resume equivalence.

mod common;

use std::fs;

use ndarray::Array3;

use semicontrast::config::{parse_config_str, Variant, DEFAULTS_TOML};
use semicontrast::data::{DatasetSplits, Volume};
use semicontrast::eval::{average_scores, evaluate_volume};
use semicontrast::losses::Strategy;
use semicontrast::model::{build_network, checkpoint_bytes, content_hash, load_checkpoint, NetworkState, StageTag};
use semicontrast::training::{
    cell_dir, finetune, fold_splits, init_seed, load_corpus, local_stage_kind, pretrain_global, pretrain_local,
    run_experiment, schedule, CellKey, CellStatus, LabelUse, PreparedCorpus, SlicePool, StageConfig, StageKind,
};

use common::tiny_config;

struct Fixture {
    cfg: semicontrast::config::ExperimentConfig,
    volumes: Vec<Volume>,
    splits: DatasetSplits,
    _dir: tempfile::TempDir,
}

fn fixture(overrides: &[&str]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), overrides);
    let volumes = load_corpus(&cfg).unwrap();
    let splits = fold_splits(&cfg, &volumes, 0, 0.5).unwrap();
    Fixture { cfg, volumes, splits, _dir: dir }
}

impl Fixture {
    fn corpus(&self) -> PreparedCorpus {
        PreparedCorpus::new(&self.volumes, self.cfg.dataset.resolution).unwrap()
    }

    fn fresh(&self) -> NetworkState {
        build_network(&self.cfg.model, init_seed(&self.cfg, 0)).unwrap()
    }

    fn stage(&self, kind: StageKind, strategy: Option<Strategy>) -> StageConfig {
        StageConfig::from_experiment(&self.cfg, kind, strategy, 11)
    }
}

fn bytes(net: &NetworkState) -> Vec<u8> {
    checkpoint_bytes(net).unwrap()
}

fn first_last(log: &[semicontrast::training::EpochLog]) -> (f64, f64) {
    (log.first().unwrap().mean_loss, log.last().unwrap().mean_loss)
}

#[test]
fn global_stage_decreases_loss_and_is_deterministic() {
    let fx = fixture(&[]);
    let corpus = fx.corpus();
    let sc = fx.stage(StageKind::Global, None);
    let a = pretrain_global(fx.fresh(), &corpus, &fx.splits, &sc).unwrap();
    let b = pretrain_global(fx.fresh(), &corpus, &fx.splits, &sc).unwrap();
    assert_eq!(bytes(&a.net), bytes(&b.net));
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
    let (first, last) = first_last(&a.log);
    assert!(last < first, "global loss {first} -> {last}");
    assert_eq!(a.net.stage, StageTag::GlobalPretrained);
}

#[test]
fn local_stages_decrease_loss() {
    let fx = fixture(&[]);
    let corpus = fx.corpus();
    for strategy in [Strategy::SupervisedBlock, Strategy::SupervisedStride, Strategy::SelfsupGrid] {
        let sc = fx.stage(local_stage_kind(strategy), Some(strategy));
        let run = pretrain_local(fx.fresh(), &corpus, &fx.splits, &sc).unwrap();
        let (first, last) = first_last(&run.log);
        assert!(last < first, "{strategy:?}: {first} -> {last}");
        assert_eq!(run.net.stage, StageTag::LocalPretrained);
    }
}

#[test]
fn finetune_decreases_loss_and_keeps_best_validation_epoch() {
    let fx = fixture(&[]);
    let corpus = fx.corpus();
    let run = finetune(fx.fresh(), &corpus, &fx.splits, &fx.stage(StageKind::Finetune, None)).unwrap();
    let (first, last) = first_last(&run.log);
    assert!(last < first, "finetune loss {first} -> {last}");
    let dice: Vec<f64> = run.log.iter().map(|l| l.val_dice.unwrap()).collect();
    let best = dice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first_best = dice.iter().position(|&d| d == best).unwrap() + 1;
    assert_eq!(run.net.epoch, first_best);
    // the kept parameters reproduce the logged validation Dice
    let val = SlicePool::new(&corpus, &fx.splits.val, LabelUse::Require).unwrap();
    let scores: Vec<_> = val.volumes().iter().map(|v| evaluate_volume(&run.net, v).unwrap()).collect();
    assert_eq!(average_scores(&scores).mean.unwrap(), best);
    assert_eq!(run.net.stage, StageTag::Finetuned);
}

fn poisoned(volumes: &[Volume], ids: &[String]) -> Vec<Volume> {
    volumes
        .iter()
        .map(|v| {
            if ids.contains(&v.id) {
                let mut p = v.clone();
                p.voxels.fill(f32::NAN);
                p.labels = Some(Array3::from_elem(v.voxels.dim(), 1));
                p
            } else {
                v.clone()
            }
        })
        .collect()
}

#[test]
fn finetune_and_supervised_local_never_read_unlabeled_volumes() {
    let fx = fixture(&[]);
    assert!(!fx.splits.unlabeled_train.is_empty());
    let clean = fx.corpus();
    let dirty = PreparedCorpus::new(&poisoned(&fx.volumes, &fx.splits.unlabeled_train), 16).unwrap();

    let sc = fx.stage(StageKind::Finetune, None);
    let a = finetune(fx.fresh(), &clean, &fx.splits, &sc).unwrap();
    let b = finetune(fx.fresh(), &dirty, &fx.splits, &sc).unwrap();
    assert_eq!(bytes(&a.net), bytes(&b.net));

    let sc = fx.stage(StageKind::LocalSupervised, Some(Strategy::SupervisedBlock));
    let a = pretrain_local(fx.fresh(), &clean, &fx.splits, &sc).unwrap();
    let b = pretrain_local(fx.fresh(), &dirty, &fx.splits, &sc).unwrap();
    assert_eq!(bytes(&a.net), bytes(&b.net));
}

#[test]
fn global_stage_never_reads_labels() {
    let fx = fixture(&[]);
    let scrambled: Vec<Volume> = fx
        .volumes
        .iter()
        .map(|v| {
            let mut s = v.clone();
            s.labels = Some(Array3::from_shape_fn(v.voxels.dim(), |(z, y, x)| ((z + y * 3 + x) % 3) as i32));
            s
        })
        .collect();
    let sc = fx.stage(StageKind::Global, None);
    let a = pretrain_global(fx.fresh(), &fx.corpus(), &fx.splits, &sc).unwrap();
    let b = pretrain_global(fx.fresh(), &PreparedCorpus::new(&scrambled, 16).unwrap(), &fx.splits, &sc).unwrap();
    assert_eq!(bytes(&a.net), bytes(&b.net));
}

#[test]
fn one_pair_global_batches_have_zero_loss() {
    let fx = fixture(&["stages.global.batch_pairs=1", "stages.global.epochs=2"]);
    let run = pretrain_global(fx.fresh(), &fx.corpus(), &fx.splits, &fx.stage(StageKind::Global, None)).unwrap();
    assert!(run.log.iter().all(|l| l.mean_loss == 0.0));
}

#[test]
fn all_background_corpus_completes_with_zero_loss() {
    let fx = fixture(&[]);
    let background: Vec<Volume> = fx
        .volumes
        .iter()
        .map(|v| {
            let mut b = v.clone();
            b.labels = Some(Array3::zeros(v.voxels.dim()));
            b
        })
        .collect();
    let corpus = PreparedCorpus::new(&background, 16).unwrap();
    let fresh = fx.fresh();
    let run = pretrain_local(fresh.clone(), &corpus, &fx.splits, &fx.stage(StageKind::LocalSupervised, Some(Strategy::SupervisedBlock)))
        .unwrap();
    assert!(run.log.iter().all(|l| l.mean_loss == 0.0 && l.batches == 0 && l.skipped_batches > 0));
    assert_eq!(run.net.params(), fresh.params());
}

#[test]
fn pretrained_weights_transfer_exactly_and_lineage_chains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &["experiment.folds=1", r#"experiment.variants=["global", "global+local(block)"]"#]);
    let report = run_experiment(&cfg).unwrap();
    assert!(report.cells.iter().all(|c| c.status == CellStatus::Ok));

    let global_path = dir.path().join("fold0/global/checkpoint.ckpt");
    let (global, global_hash) = load_checkpoint(&global_path, Some(&cfg.model)).unwrap();
    assert_eq!(global.stage, StageTag::GlobalPretrained);
    assert_eq!(global_hash, content_hash(&fs::read(&global_path).unwrap()));
    let fresh = build_network(&cfg.model, init_seed(&cfg, 0)).unwrap();
    assert_eq!(global.parent_hash.as_deref(), Some(content_hash(&bytes(&fresh)).as_str()));

    for c in &report.cells {
        let l = &c.lineage;
        assert_eq!(l.init, content_hash(&bytes(&fresh)));
        assert_eq!(l.global.as_deref(), Some(global_hash.as_str()));
        let cell = cell_dir(dir.path(), &c.key);
        let (tuned, tuned_hash) = load_checkpoint(&cell.join("finetuned.ckpt"), None).unwrap();
        assert_eq!(l.finetuned.as_deref(), Some(tuned_hash.as_str()));
        match c.key.variant {
            Variant::Global => {
                assert!(l.local.is_none());
                assert_eq!(tuned.parent_hash, l.global);
            }
            _ => {
                let (local, local_hash) = load_checkpoint(&cell.join("local.ckpt"), None).unwrap();
                assert_eq!(l.local.as_deref(), Some(local_hash.as_str()));
                assert_eq!(local.parent_hash, l.global);
                assert_eq!(tuned.parent_hash, l.local);
            }
        }
    }

    // a saved stage output is the next stage's exact starting point
    let corpus = PreparedCorpus::new(&load_corpus(&cfg).unwrap(), 16).unwrap();
    let splits = fold_splits(&cfg, &load_corpus(&cfg).unwrap(), 0, 0.5).unwrap();
    let sc = StageConfig::from_experiment(&cfg, StageKind::Finetune, None, semicontrast::training::finetune_seed(&cfg, 0, 0.5));
    let from_disk = finetune(global.clone(), &corpus, &splits, &sc).unwrap();
    let (tuned, _) = load_checkpoint(&cell_dir(dir.path(), &report.cells[0].key).join("finetuned.ckpt"), None).unwrap();
    assert_eq!(report.cells[0].key.variant, Variant::Global);
    assert_eq!(from_disk.net.params(), tuned.params());
}

#[test]
fn single_volume_overfits() {
    let fx = fixture(&["model.base_channels=8", "model.local_head_channels=8", "augment.apply_prob=0.0"]);
    let id = fx.splits.labeled_train[0].clone();
    let one = DatasetSplits {
        train: vec![id.clone()],
        val: vec![id.clone()],
        test: vec![id.clone()],
        labeled_train: vec![id.clone()],
        unlabeled_train: vec![],
    };
    let mut sc = fx.stage(StageKind::Finetune, None);
    sc.epochs = 150;
    sc.batch = 4;
    sc.learning_rate = 1e-2;
    let corpus = fx.corpus();
    let run = finetune(fx.fresh(), &corpus, &one, &sc).unwrap();
    let pool = SlicePool::new(&corpus, &one.labeled_train, LabelUse::Require).unwrap();
    let dice = evaluate_volume(&run.net, &pool.volumes()[0]).unwrap().mean.unwrap();
    assert!(dice > 0.95, "training Dice {dice}");
}

#[test]
fn default_matrix_schedules_84_distinct_cells() {
    let cfg = parse_config_str(DEFAULTS_TOML, &[]).unwrap();
    let cells = schedule(&cfg);
    assert_eq!(cells.len(), 7 * 3 * 4);
    for (i, a) in cells.iter().enumerate() {
        assert!(cells[i + 1..].iter().all(|b| b != a));
    }
    assert_eq!(cells[0], CellKey { variant: Variant::Random, fraction: 0.05, fold: 0 });
    assert_eq!(cells[83], CellKey { variant: Variant::GlobalLocalBlock, fraction: 0.2, fold: 3 });
}

const REPORT_FILES: [&str; 3] = ["report.tsv", "summary.tsv", "table.md"];

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = tiny_config(a.path(), &[]);
    let cfg_b = tiny_config(b.path(), &[]);
    run_experiment(&cfg_a).unwrap();

    // interrupted run: fold 1 never started and fold 0's second cell died
    // before writing its result
    run_experiment(&tiny_config(b.path(), &["experiment.folds=1"])).unwrap();
    let second = schedule(&cfg_b)[1];
    fs::remove_file(cell_dir(b.path(), &second).join("result.json")).unwrap();
    fs::remove_file(cell_dir(b.path(), &second).join("finetuned.ckpt")).unwrap();
    run_experiment(&cfg_b).unwrap();

    for f in REPORT_FILES {
        let x = fs::read_to_string(a.path().join(f)).unwrap();
        let y = fs::read_to_string(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let index: serde_json::Value = serde_json::from_slice(&fs::read(b.path().join("run_index.json")).unwrap()).unwrap();
    assert_eq!(index["skipped"], 1);
    assert_eq!(index["completed"], 3);
}

#[test]
fn failed_cells_are_recorded_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    // a diverging local stage fails its cell; the other variant still runs
    let cfg = tiny_config(dir.path(), &["experiment.folds=1", "stages.local.learning_rate=1e30"]);
    let report = run_experiment(&cfg).unwrap();
    let statuses: Vec<_> = report.cells.iter().map(|c| (c.key.variant, c.status)).collect();
    assert_eq!(statuses[0], (Variant::Random, CellStatus::Ok));
    assert_eq!(statuses[1], (Variant::GlobalLocalBlock, CellStatus::Failed));
    assert!(report.cells[1].error.as_deref().unwrap().contains("non-finite"));
    assert!(report.table_markdown().contains("| global+local(block) | |"));
}
