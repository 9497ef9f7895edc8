//! The three training stages. Each takes ownership of a network, trains it
//! on the slices it is allowed to see, and returns it with a per-epoch log.

use log::{info, warn};

use crate::data::{augment_view, make_batch, DatasetSplits, Slice2D};
use crate::error::{Error, Result};
use crate::eval::{average_scores, evaluate_volume};
use crate::losses::{build_contrast_sets, global_loss_from_raw, local_contrastive_loss_with, LocalFeatureMap, Strategy};
use crate::model::{level_labels, Fmap, NetworkState, StageTag};
use crate::rng;

use super::optim::Adam;
use super::pool::{LabelUse, PreparedCorpus, SlicePool};
use super::seg_loss::segmentation_loss;
use super::{EpochLog, StageConfig, StageKind};

/// A trained network and the log of the run that produced it.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub net: NetworkState,
    pub log: Vec<EpochLog>,
}

fn check_kind(cfg: &StageConfig, allowed: &[StageKind]) -> Result<()> {
    if !allowed.contains(&cfg.stage) {
        return Err(Error::Training(format!("stage config is {:?}, expected one of {allowed:?}", cfg.stage)));
    }
    cfg.validate()
}

fn epoch_mean(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

/// Image-level contrastive pre-training of the encoder and global head on
/// every training volume, with labels removed.
pub fn pretrain_global(mut net: NetworkState, corpus: &PreparedCorpus, splits: &DatasetSplits, cfg: &StageConfig) -> Result<StageRun> {
    check_kind(cfg, &[StageKind::Global])?;
    let pool = SlicePool::new(corpus, &splits.train, LabelUse::Strip)?;
    if pool.is_empty() {
        return Err(Error::Training("global pre-training needs a non-empty training set".into()));
    }
    if cfg.batch == 1 {
        warn!("global stage with one pair per batch: the loss has no negatives and is identically 0");
    }
    let mut opt = Adam::new(net.params(), cfg.learning_rate);
    let mut rng = rng::stream(cfg.seed, &[rng::tag("global")]);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = pool.epoch(cfg.slices_per_epoch, &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let slices: Vec<Slice2D> = chunk.iter().map(|s| (*s).clone()).collect();
            let batch = make_batch(&slices, &cfg.augment, &mut rng)?;
            let mut raws = Vec::with_capacity(batch.len());
            let mut traces = Vec::with_capacity(batch.len());
            for img in &batch.images {
                let (z, t) = net.global_forward(&net.input(img)?);
                raws.push(z.iter().map(|&v| v as f64).collect::<Vec<_>>());
                traces.push(t);
            }
            let (loss, dz) = global_loss_from_raw(&raws, &batch.pairing, cfg.tau)?;
            let mut grads = net.params().zeros_like();
            for (t, g) in traces.iter().zip(&dz) {
                let g: Vec<f32> = g.iter().map(|&v| v as f32).collect();
                net.global_backward(t, &g, &mut grads);
            }
            if !grads.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in global stage, epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grads);
            losses.push(loss);
        }
        let entry = EpochLog::new(StageKind::Global, epoch, epoch_mean(&losses), cfg.learning_rate, losses.len(), 0);
        info!("{entry}");
        log.push(entry);
    }
    net.stage = StageTag::GlobalPretrained;
    net.epoch = cfg.epochs;
    Ok(StageRun { net, log })
}

/// Pixel-level contrastive training of the whole network. The supervised
/// stage reads labeled training volumes only; the self-supervised stage
/// reads every training volume without labels.
pub fn pretrain_local(mut net: NetworkState, corpus: &PreparedCorpus, splits: &DatasetSplits, cfg: &StageConfig) -> Result<StageRun> {
    check_kind(cfg, &[StageKind::LocalSupervised, StageKind::LocalSelfsup])?;
    net.check_level(cfg.level)?;
    let supervised = cfg.stage == StageKind::LocalSupervised;
    if supervised != cfg.sets.strategy.is_supervised() {
        return Err(Error::Training(format!("{:?} stage cannot use strategy {:?}", cfg.stage, cfg.sets.strategy)));
    }
    let pool = if supervised {
        if splits.labeled_train.is_empty() {
            return Err(Error::Training("supervised local pre-training needs labeled volumes".into()));
        }
        SlicePool::new(corpus, &splits.labeled_train, LabelUse::Require)?
    } else {
        SlicePool::new(corpus, &splits.train, LabelUse::Strip)?
    };
    if pool.is_empty() {
        return Err(Error::Training("local pre-training has no slices".into()));
    }
    let mut opt = Adam::new(net.params(), cfg.learning_rate);
    let mut rng = rng::stream(cfg.seed, &[rng::tag("local")]);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut total_steps = 0;
    for epoch in 1..=cfg.epochs {
        let order = pool.epoch(cfg.slices_per_epoch, &mut rng);
        let mut losses = Vec::new();
        let mut skipped = 0;
        for chunk in order.chunks(cfg.batch) {
            let slices: Vec<Slice2D> = chunk.iter().map(|s| (*s).clone()).collect();
            if supervised && !slices.iter().any(Slice2D::has_foreground) {
                skipped += 1;
                continue;
            }
            let batch = make_batch(&slices, &cfg.augment, &mut rng)?;
            let mut maps = Vec::with_capacity(batch.len());
            let mut traces = Vec::with_capacity(batch.len());
            for (i, img) in batch.images.iter().enumerate() {
                let (f, t) = net.local_forward(&net.input(img)?, cfg.level);
                let labels = if supervised { level_labels(img, f.h, f.w) } else { None };
                maps.push(LocalFeatureMap::from_raw_channel_major(&f.data, f.c, f.h, f.w, labels, i, cfg.normalize_local)?);
                traces.push((t, f.c, f.h, f.w));
            }
            let sets = build_contrast_sets(&maps, &batch.pairing, &cfg.sets)?;
            let out = local_contrastive_loss_with(&maps, &sets, cfg.tau, cfg.local_variant, true)?;
            if out.anchors_used == 0 {
                skipped += 1;
                continue;
            }
            let mut grads = net.params().zeros_like();
            for ((map, (t, c, h, w)), g) in maps.iter().zip(&traces).zip(out.grads.as_deref().unwrap_or_default()) {
                let raw = map.backprop(g);
                let dout = Fmap::new(*c, *h, *w, raw.iter().map(|&v| v as f32).collect());
                net.local_backward(t, &dout, &mut grads);
            }
            if !grads.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in local stage, epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grads);
            losses.push(out.value);
        }
        total_steps += losses.len();
        let entry = EpochLog::new(cfg.stage, epoch, epoch_mean(&losses), cfg.learning_rate, losses.len(), skipped);
        info!("{entry}");
        log.push(entry);
    }
    if total_steps == 0 {
        warn!("local stage found no anchors in any batch; the network is unchanged");
    }
    net.stage = StageTag::LocalPretrained;
    net.epoch = cfg.epochs;
    Ok(StageRun { net, log })
}

/// Mean volume Dice over validation volumes.
fn validation_dice(net: &NetworkState, pool: &SlicePool) -> Result<f64> {
    let scores = pool.volumes().iter().map(|v| evaluate_volume(net, v)).collect::<Result<Vec<_>>>()?;
    Ok(average_scores(&scores).mean.unwrap_or(0.0))
}

/// Supervised segmentation training on labeled training volumes, keeping
/// the parameters of the epoch with the best validation Dice.
pub fn finetune(mut net: NetworkState, corpus: &PreparedCorpus, splits: &DatasetSplits, cfg: &StageConfig) -> Result<StageRun> {
    check_kind(cfg, &[StageKind::Finetune])?;
    if splits.labeled_train.is_empty() {
        return Err(Error::Training("fine-tuning needs labeled volumes".into()));
    }
    let pool = SlicePool::new(corpus, &splits.labeled_train, LabelUse::Require)?;
    let val = SlicePool::new(corpus, &splits.val, LabelUse::Require)?;
    let mut opt = Adam::new(net.params(), cfg.learning_rate);
    let mut rng = rng::stream(cfg.seed, &[rng::tag("finetune")]);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::model::ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let order = pool.epoch(cfg.slices_per_epoch, &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let views: Vec<Slice2D> = chunk.iter().map(|s| augment_view(s, &cfg.augment, &mut rng)).collect();
            let mut logits = Vec::with_capacity(views.len());
            let mut traces = Vec::with_capacity(views.len());
            for v in &views {
                let (l, _, t) = net.segment_forward(&net.input(v)?);
                logits.push(l);
                traces.push(t);
            }
            let labels: Vec<Vec<i32>> = views
                .iter()
                .map(|v| v.labels.as_ref().expect("pool requires labels").iter().copied().collect())
                .collect();
            let label_refs: Vec<&[i32]> = labels.iter().map(Vec::as_slice).collect();
            let (loss, dlogits) = segmentation_loss(&logits, &label_refs);
            let mut grads = net.params().zeros_like();
            for (t, d) in traces.iter().zip(&dlogits) {
                net.segment_backward(t, d, &mut grads);
            }
            if !grads.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in fine-tuning, epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grads);
            losses.push(loss);
        }
        let dice = if val.is_empty() { 0.0 } else { validation_dice(&net, &val)? };
        if best.as_ref().is_none_or(|(b, _, _)| dice > *b) {
            best = Some((dice, epoch, net.params().clone()));
        }
        let mut entry = EpochLog::new(StageKind::Finetune, epoch, epoch_mean(&losses), cfg.learning_rate, losses.len(), 0);
        entry.val_dice = Some(dice);
        info!("{entry}");
        log.push(entry);
    }
    let (dice, epoch, params) = best.expect("at least one epoch");
    info!("fine-tuning keeps epoch {epoch} (validation Dice {dice:.4})");
    *net.params_mut() = params;
    net.stage = StageTag::Finetuned;
    net.epoch = epoch;
    Ok(StageRun { net, log })
}

/// Stage kind for a local strategy.
pub fn local_stage_kind(strategy: Strategy) -> StageKind {
    if strategy.is_supervised() {
        StageKind::LocalSupervised
    } else {
        StageKind::LocalSelfsup
    }
}
