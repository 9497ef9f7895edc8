//! Randomized self-checks of the contrastive losses and the interaction
//! count benchmark behind `semicontrast verify-losses` and
//! `semicontrast bench-complexity`.

use std::fmt;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    build_contrast_sets, count_pairwise_interactions, global_contrastive_loss, global_loss_from_raw,
    local_contrastive_loss_with, reference_local_loss_with, LocalFeatureMap, LocalLossVariant, PairIndex, SetSpec,
    Temperature,
};
use crate::rng::{self, Rng};

/// Absolute tolerance of the dense-vs-reference comparison.
pub const ORACLE_TOL: f64 = 1e-6;
/// Central difference step of the gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance of the gradient checks.
pub const FD_REL_TOL: f64 = 1e-4;

/// Pass count of one family of checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Largest error observed (absolute for the oracle, relative for
    /// gradients).
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckSummary {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for CheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} within {:e} (max error {:.3e})",
            self.name, self.passed, self.total, self.tolerance, self.max_error
        )
    }
}

/// A random local-loss instance: 2 to 4 maps (whole pairs) of side 4 or 8,
/// 1 to 4 channels, labels over background plus up to 3 classes.
#[derive(Debug, Clone)]
pub struct LocalInstance {
    pub side: usize,
    pub channels: usize,
    /// Channel-major raw features per map.
    pub raw: Vec<Vec<f64>>,
    pub labels: Vec<Vec<i32>>,
    pub pairing: PairIndex,
}

impl LocalInstance {
    pub fn random(r: &mut Rng) -> Self {
        let side = if r.random_bool(0.5) { 4 } else { 8 };
        let channels = r.random_range(1..=4);
        let pairs = r.random_range(1..=2);
        let classes = r.random_range(1..=3);
        let hw = side * side;
        let raw = (0..2 * pairs)
            .map(|_| (0..channels * hw).map(|_| StandardNormal.sample(r)).collect())
            .collect();
        let labels = (0..2 * pairs).map(|_| (0..hw).map(|_| r.random_range(0..=classes)).collect()).collect();
        Self { side, channels, raw, labels, pairing: PairIndex::adjacent(pairs) }
    }

    pub fn maps(&self) -> Result<Vec<LocalFeatureMap>> {
        self.maps_with(&self.raw)
    }

    pub fn maps_with(&self, raw: &[Vec<f64>]) -> Result<Vec<LocalFeatureMap>> {
        raw.iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (r, l))| {
                LocalFeatureMap::from_raw_channel_major(r, self.channels, self.side, self.side, Some(l.clone()), i, true)
            })
            .collect()
    }

    /// Strategies that apply to this instance's map size.
    pub fn strategies(&self) -> Vec<SetSpec> {
        let mut s = vec![SetSpec::full(), SetSpec::stride(1), SetSpec::stride(2), SetSpec::stride(4)];
        s.extend([4, 8].into_iter().filter(|b| self.side % b == 0).map(SetSpec::block));
        s.push(SetSpec::grid(9));
        s
    }
}

fn tau() -> Temperature {
    Temperature::default()
}

/// Dense loss against the nested-loop reference on `instances` random
/// instances; an instance passes when every applicable strategy agrees.
pub fn oracle_battery(instances: usize, seed: u64) -> Result<CheckSummary> {
    let mut r = rng::stream(seed, &[rng::tag("oracle")]);
    let mut passed = 0;
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let inst = LocalInstance::random(&mut r);
        let maps = inst.maps()?;
        let mut ok = true;
        for spec in inst.strategies() {
            let sets = build_contrast_sets(&maps, &inst.pairing, &spec)?;
            for variant in [LocalLossVariant::SumInsideLog, LocalLossVariant::PerPositiveLog] {
                let dense = local_contrastive_loss_with(&maps, &sets, tau(), variant, false)?.value;
                let reference = reference_local_loss_with(&maps, &sets, tau(), variant)?;
                let err = (dense - reference).abs();
                max_error = max_error.max(err);
                ok &= err <= ORACLE_TOL;
            }
        }
        passed += ok as usize;
    }
    Ok(CheckSummary { name: "oracle".into(), passed, total: instances, max_error, tolerance: ORACLE_TOL })
}

/// `max_i |a_i - n_i| / max(max_i |n_i|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Gradient of the local loss (through pixel normalization) and of the
/// global loss (through vector normalization) against central differences
/// on `instances` random instances each.
pub fn gradient_battery(instances: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut r = rng::stream(seed, &[rng::tag("gradient")]);
    let mut local = CheckSummary { name: "gradient(local)".into(), passed: 0, total: 0, max_error: 0.0, tolerance: FD_REL_TOL };
    let mut global = CheckSummary { name: "gradient(global)".into(), passed: 0, total: 0, max_error: 0.0, tolerance: FD_REL_TOL };
    let strategies = [SetSpec::full(), SetSpec::stride(2), SetSpec::block(4), SetSpec::grid(9)];
    for i in 0..instances {
        let inst = LocalInstance::random(&mut r);
        let spec = strategies[i % strategies.len()];
        let variant = if i % 2 == 0 { LocalLossVariant::SumInsideLog } else { LocalLossVariant::PerPositiveLog };
        let maps = inst.maps()?;
        let sets = build_contrast_sets(&maps, &inst.pairing, &spec)?;
        let out = local_contrastive_loss_with(&maps, &sets, tau(), variant, true)?;
        let grads = out.grads.unwrap_or_default();
        let analytic: Vec<f64> = maps.iter().zip(&grads).flat_map(|(m, g)| m.backprop(g)).collect();
        let flat: Vec<f64> = inst.raw.concat();
        let len = inst.raw[0].len();
        let numeric = central_difference(&flat, |x| {
            let raw: Vec<Vec<f64>> = x.chunks(len).map(<[f64]>::to_vec).collect();
            let maps = inst.maps_with(&raw)?;
            Ok(local_contrastive_loss_with(&maps, &sets, tau(), variant, false)?.value)
        })?;
        let err = relative_error(&analytic, &numeric);
        local.max_error = local.max_error.max(err);
        local.passed += (err <= FD_REL_TOL) as usize;
        local.total += 1;

        let pairs = r.random_range(1..=3);
        let dim = r.random_range(2..=6);
        let z: Vec<Vec<f64>> = (0..2 * pairs).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let pairing = PairIndex::adjacent(pairs);
        let (_, gz) = global_loss_from_raw(&z, &pairing, tau())?;
        let numeric = central_difference(&z.concat(), |x| {
            let raw: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
            Ok(global_loss_from_raw(&raw, &pairing, tau())?.0)
        })?;
        let err = relative_error(&gz.concat(), &numeric);
        global.max_error = global.max_error.max(err);
        global.passed += (err <= FD_REL_TOL) as usize;
        global.total += 1;
    }
    Ok(vec![local, global])
}

/// Degenerate cases with known values:
/// stride 1 equals full, a single block equals full on maps with
/// foreground, one pair gives a global loss of 0, and two identical
/// embeddings give `ln 3`.
pub fn invariance_battery(instances: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut r = rng::stream(seed, &[rng::tag("invariance")]);
    let summary = |name: &str, tolerance: f64| CheckSummary { name: name.into(), passed: 0, total: 0, max_error: 0.0, tolerance };
    let mut stride1 = summary("stride1==full", 0.0);
    let mut block = summary("single_block==full", 0.0);
    let mut b1 = summary("global(b=1)==0", 0.0);
    let mut ln3 = summary("global(identical b=2)==ln3", 1e-9);
    let record = |s: &mut CheckSummary, err: f64| {
        s.total += 1;
        s.max_error = s.max_error.max(err);
        s.passed += (err <= s.tolerance) as usize;
    };
    for _ in 0..instances {
        let inst = LocalInstance::random(&mut r);
        let maps = inst.maps()?;
        let eval = |spec: SetSpec| -> Result<f64> {
            let sets = build_contrast_sets(&maps, &inst.pairing, &spec)?;
            Ok(local_contrastive_loss_with(&maps, &sets, tau(), LocalLossVariant::default(), false)?.value)
        };
        let full = eval(SetSpec::full())?;
        record(&mut stride1, (eval(SetSpec::stride(1))? - full).abs());
        if inst.labels.iter().any(|l| l.iter().any(|&k| k > 0)) {
            record(&mut block, (eval(SetSpec::block(inst.side))? - full).abs());
        }

        let dim = r.random_range(2..=8);
        let z: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let unit: Vec<Vec<f64>> = z.iter().map(|v| crate::losses::normalize(v).0).collect();
        record(&mut b1, global_contrastive_loss(&unit, &PairIndex::adjacent(1), tau())?.abs());
        let same = vec![unit[0].clone(); 4];
        let v = global_contrastive_loss(&same, &PairIndex::adjacent(2), tau())?;
        record(&mut ln3, (v - 3f64.ln()).abs());
    }
    Ok(vec![stride1, block, b1, ln3])
}

/// Full battery with the default sizes: 100 oracle instances, 20 gradient
/// instances, 100 invariance instances.
pub fn verify_losses(seed: u64) -> Result<Vec<CheckSummary>> {
    let mut out = vec![oracle_battery(100, seed)?];
    out.extend(gradient_battery(20, seed)?);
    out.extend(invariance_battery(100, seed)?);
    Ok(out)
}

/// One row of the complexity benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub h: usize,
    /// Stride, block size or grid point count; 0 for the full strategy.
    pub param: usize,
    pub count: u64,
    /// Seconds for one loss evaluation; `None` when timing was skipped.
    pub wall_time: Option<f64>,
}

impl BenchRow {
    pub const TSV_HEADER: &'static str = "strategy\th\tparam\tcount\twall_time";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.strategy,
            self.h,
            self.param,
            self.count,
            self.wall_time.map_or(String::new(), |t| format!("{t:.6}"))
        )
    }
}

/// A pair of `h x h` maps with every pixel foreground. `classes = 1` gives
/// the single-class layout used for counting; timing uses two classes in a
/// checkerboard of 4x4 tiles so that every anchor has negatives.
pub fn full_foreground_pair(h: usize, channels: usize, classes: i32, seed: u64) -> Result<(Vec<LocalFeatureMap>, PairIndex)> {
    let mut r = rng::stream(seed, &[rng::tag("bench"), h as u64]);
    let labels: Vec<i32> = (0..h * h).map(|p| 1 + (((p / h) / 4 + (p % h) / 4) as i32 % classes)).collect();
    let maps = (0..2)
        .map(|i| {
            let raw: Vec<f64> = (0..channels * h * h).map(|_| StandardNormal.sample(&mut r)).collect();
            LocalFeatureMap::from_raw_channel_major(&raw, channels, h, h, Some(labels.clone()), i, true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, PairIndex::adjacent(1)))
}

/// Interaction counts for each `(strategy, h)` on single-class
/// full-foreground pairs, with wall times of one loss evaluation on the
/// two-class layout for sides up to `time_up_to`.
pub fn bench_complexity(sides: &[usize], specs: &[SetSpec], time_up_to: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &h in sides {
        let (count_maps, pairing) = full_foreground_pair(h, 4, 1, seed)?;
        let (time_maps, _) = full_foreground_pair(h, 4, 2, seed)?;
        for spec in specs {
            let (strategy, param) = match spec.strategy {
                crate::losses::Strategy::SupervisedFull => ("full", 0),
                crate::losses::Strategy::SupervisedStride => ("stride", spec.stride),
                crate::losses::Strategy::SupervisedBlock => ("block", spec.block_size),
                crate::losses::Strategy::SelfsupGrid => ("selfsup", spec.grid_points),
            };
            let applicable = match spec.strategy {
                crate::losses::Strategy::SupervisedBlock => h % spec.block_size == 0,
                crate::losses::Strategy::SupervisedStride => spec.stride <= h,
                _ => true,
            };
            if !applicable {
                continue;
            }
            let count = count_pairwise_interactions(&build_contrast_sets(&count_maps, &pairing, spec)?);
            let wall_time = if h <= time_up_to {
                let sets = build_contrast_sets(&time_maps, &pairing, spec)?;
                let start = Instant::now();
                local_contrastive_loss_with(&time_maps, &sets, tau(), LocalLossVariant::default(), false)?;
                Some(start.elapsed().as_secs_f64())
            } else {
                None
            };
            rows.push(BenchRow { strategy: strategy.into(), h, param, count, wall_time });
        }
    }
    Ok(rows)
}
