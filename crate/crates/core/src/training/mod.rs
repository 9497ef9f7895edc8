//! Global and local contrastive pre-training, fine-tuning, and the
//! resumable experiment matrix.

mod matrix;
mod optim;
mod pool;
mod seg_loss;
mod stages;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use matrix::{
    cell_dir, embed_seed, finetune_seed, fold_dir, fold_seed, fold_splits, global_seed, init_seed, load_corpus, local_seed,
    run_experiment, schedule, write_report, CellKey, CellResult, CellStatus, Lineage,
};
pub use optim::Adam;
pub use pool::{LabelUse, PreparedCorpus, SlicePool};
pub use seg_loss::segmentation_loss;
pub use stages::{finetune, local_stage_kind, pretrain_global, pretrain_local, StageRun};

use crate::config::ExperimentConfig;
use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::{LocalLossVariant, SetSpec, Strategy, Temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Global,
    LocalSupervised,
    LocalSelfsup,
    Finetune,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Global => "global",
            StageKind::LocalSupervised => "local_supervised",
            StageKind::LocalSelfsup => "local_selfsup",
            StageKind::Finetune => "finetune",
        }
    }
}

/// Everything one stage needs. `batch` counts pairs for contrastive stages
/// and slices for fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: StageKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Slices drawn per epoch; 0 means one pass over the pool.
    pub slices_per_epoch: usize,
    pub tau: Temperature,
    pub sets: SetSpec,
    pub level: usize,
    pub normalize_local: bool,
    pub local_variant: LocalLossVariant,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl StageConfig {
    /// Stage settings drawn from an experiment config. `strategy` selects
    /// the local set construction and is ignored by the other stages.
    pub fn from_experiment(cfg: &ExperimentConfig, stage: StageKind, strategy: Option<Strategy>, seed: u64) -> Self {
        let l = &cfg.losses;
        let (learning_rate, epochs, batch, slices_per_epoch) = match stage {
            StageKind::Global => {
                let s = &cfg.stages.global;
                (s.learning_rate, s.epochs, s.batch_pairs, s.slices_per_epoch)
            }
            StageKind::LocalSupervised | StageKind::LocalSelfsup => {
                let s = &cfg.stages.local;
                (s.learning_rate, s.epochs, s.batch_pairs, s.slices_per_epoch)
            }
            StageKind::Finetune => {
                let s = &cfg.stages.finetune;
                (s.learning_rate, s.epochs, s.batch_size, s.slices_per_epoch)
            }
        };
        let strategy = strategy.unwrap_or(match stage {
            StageKind::LocalSelfsup => Strategy::SelfsupGrid,
            _ => Strategy::SupervisedBlock,
        });
        StageConfig {
            stage,
            learning_rate,
            epochs,
            batch,
            slices_per_epoch,
            tau: l.temperature(),
            sets: l.set_spec(strategy),
            level: l.level,
            normalize_local: l.normalize_local,
            local_variant: l.local_variant,
            augment: cfg.augment_for(matches!(stage, StageKind::LocalSelfsup).then_some(Strategy::SelfsupGrid)),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Training(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Training("epochs and batch size must be >= 1".into()));
        }
        self.augment.validate()
    }
}

/// One row of a per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: StageKind,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub batches: usize,
    pub skipped_batches: usize,
    pub val_dice: Option<f64>,
}

impl EpochLog {
    pub fn new(stage: StageKind, epoch: usize, mean_loss: f64, lr: f64, batches: usize, skipped_batches: usize) -> Self {
        Self { stage, epoch, mean_loss, lr, batches, skipped_batches, val_dice: None }
    }

    pub const TSV_HEADER: &'static str = "stage\tepoch\tmean_loss\tlr\tbatches\tskipped_batches\tval_dice";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.9}\t{:e}\t{}\t{}\t{}",
            self.stage.name(),
            self.epoch,
            self.mean_loss,
            self.lr,
            self.batches,
            self.skipped_batches,
            self.val_dice.map_or(String::new(), |d| format!("{d:.6}"))
        )
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} epoch {}: loss {:.5}", self.stage.name(), self.epoch, self.mean_loss)?;
        if let Some(d) = self.val_dice {
            write!(f, ", val dice {d:.4}")?;
        }
        Ok(())
    }
}

/// Renders a log as TSV with header.
pub fn log_to_tsv(log: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::TSV_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.tsv_row());
        out.push('\n');
    }
    out
}

/// Parses a TSV log written by [`log_to_tsv`] into `(stage, epoch, loss)`.
pub fn parse_log_tsv(text: &str) -> Result<Vec<(String, usize, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Data(format!("malformed log row `{line}`"));
            if cols.len() < 3 {
                return Err(bad());
            }
            Ok((cols[0].to_string(), cols[1].parse().map_err(|_| bad())?, cols[2].parse().map_err(|_| bad())?))
        })
        .collect()
}
