//! Desk-scale efficiency comparison between per-channel boolean masks and
//! the packed bit-mask volume: transform cost and mask memory.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bitmask::{encode, BitMaskVolume, VoxelPermutation, MAX_ROIS};
use crate::error::{Error, Result};
use crate::loss::{cdm_loss, LossConfig};
use crate::template::{Bound, BoundOp, BoundUnit, LossWeights, MetricKind, MetricSpec, PlanTemplate, RoiClass};
use crate::volume::{Dims, DoseGrid, RoiMask};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    pub roi_count: usize,
    pub dims: [usize; 3],
    pub repetitions: usize,
    /// Wall time per operation, nanoseconds.
    pub median_ns: u128,
    pub min_ns: u128,
    pub max_ns: u128,
    /// Bytes read plus bytes written by one operation.
    pub bytes_moved: usize,
    /// Largest amount of decoded or per-channel mask data alive at once.
    pub peak_mask_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Threads {
    /// Both paths on the calling thread.
    Single,
    /// Both paths use the data-parallel transform.
    Parallel,
}

/// Random overlapping masks: each voxel joins each ROI with probability 1/4.
pub fn random_masks(dims: Dims, roi_count: usize, seed: u64) -> Result<Vec<RoiMask>> {
    if roi_count == 0 || roi_count > MAX_ROIS {
        return Err(Error::TooManyRois { count: roi_count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..roi_count)
        .map(|i| {
            let occ = (0..dims.len()).map(|_| rng.random_range(0..4u8) == 0).collect();
            RoiMask::new(format!("roi_{i:02}"), dims, occ)
        })
        .collect()
}

fn time_reps(reps: usize, mut op: impl FnMut()) -> (u128, u128, u128) {
    op();
    let mut t: Vec<u128> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            op();
            start.elapsed().as_nanos()
        })
        .collect();
    t.sort_unstable();
    (t[reps / 2], t[0], t[reps - 1])
}

fn run<T: Copy + Default + Send + Sync>(t: &VoxelPermutation, src: &[T], dims: Dims, threads: Threads) -> Result<Vec<T>> {
    match threads {
        Threads::Single => t.apply_sequential(src, dims),
        Threads::Parallel => t.apply(src, dims),
    }
}

/// Times `roi_count` per-channel transforms against one packed transform.
/// Returns `(one_hot, bit_mask)`. Outputs are checked for equality first.
pub fn bench_transform(
    dims: Dims,
    roi_count: usize,
    transform: &VoxelPermutation,
    reps: usize,
    threads: Threads,
    seed: u64,
) -> Result<(BenchReport, BenchReport)> {
    if reps < 5 {
        return Err(Error::InvalidArgument("at least 5 repetitions are required".into()));
    }
    let masks = random_masks(dims, roi_count, seed)?;
    let packed = encode(&masks)?;

    let per_channel: Vec<Vec<bool>> = masks
        .iter()
        .map(|m| run(transform, m.occupancy(), dims, threads))
        .collect::<Result<_>>()?;
    let moved = BitMaskVolume::from_parts(
        dims,
        packed.spacing_mm(),
        packed.roi_names().to_vec(),
        run(transform, packed.words(), dims, threads)?,
    )?;
    for (m, expect) in masks.iter().zip(&per_channel) {
        if moved.decode(m.name.as_str())?.occupancy() != expect.as_slice() {
            return Err(Error::BenchMismatch(m.name.clone()));
        }
    }

    let (omed, omin, omax) = time_reps(reps, || {
        for m in &masks {
            std::hint::black_box(run(transform, m.occupancy(), dims, threads).expect("validated"));
        }
    });
    let (bmed, bmin, bmax) = time_reps(reps, || {
        std::hint::black_box(run(transform, packed.words(), dims, threads).expect("validated"));
    });
    let n = dims.len();
    let report = |scenario: &str, med, min, max, bytes, peak| BenchReport {
        scenario: scenario.into(),
        roi_count,
        dims: dims.0,
        repetitions: reps,
        median_ns: med,
        min_ns: min,
        max_ns: max,
        bytes_moved: bytes,
        peak_mask_bytes: peak,
    };
    Ok((
        report("transform/one_hot", omed, omin, omax, 2 * roi_count * n, 2 * roi_count * n),
        report("transform/bit_mask", bmed, bmin, bmax, 2 * 4 * n, 2 * 4 * n),
    ))
}

fn speedup(one_hot: &BenchReport, bit_mask: &BenchReport) -> f64 {
    one_hot.median_ns as f64 / bit_mask.median_ns.max(1) as f64
}

/// Median-time ratio of the per-channel path over the packed path.
pub fn transform_speedup(pair: &(BenchReport, BenchReport)) -> f64 {
    speedup(&pair.0, &pair.1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub one_hot: BenchReport,
    pub bit_mask: BenchReport,
    /// One-hot bytes over packed bytes.
    pub storage_ratio: f64,
    /// Decoded masks alive at once during one loss evaluation.
    pub peak_resident_masks: usize,
}

/// Storage of one boolean channel per ROI against one 32-bit word volume,
/// plus the decoded-mask residency of a loss evaluation over every ROI.
pub fn bench_memory(dims: Dims, roi_count: usize, seed: u64) -> Result<MemoryReport> {
    let masks = random_masks(dims, roi_count, seed)?;
    let packed = encode(&masks)?;
    let specs = masks
        .iter()
        .map(|m| MetricSpec {
            roi: m.name.clone(),
            class: RoiClass::Oar,
            metric: MetricKind::DMean,
            aim: Some(Bound {
                op: BoundOp::Le,
                value: 1.0,
                unit: BoundUnit::Gy,
            }),
            constraint: None,
            loss_weight: 0.1,
            alpha: None,
        })
        .collect();
    let template = PlanTemplate::new(Default::default(), LossWeights::default(), specs)?;
    let cfg = LossConfig::from_template(template)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let values = (0..dims.len()).map(|_| rng.random_range(0.0..70.0)).collect();
    let pred = DoseGrid::new(dims, [1.0; 3], 1.0, values)?;
    let gt = DoseGrid::filled(dims, [1.0; 3], 30.0)?;
    packed.residency().reset();
    cdm_loss(&pred, &gt, &packed, &cfg, true)?;
    let peak = packed.residency().peak();

    let n = dims.len();
    let report = |scenario: &str, bytes: usize, peak_bytes: usize| BenchReport {
        scenario: scenario.into(),
        roi_count,
        dims: dims.0,
        repetitions: 1,
        median_ns: 0,
        min_ns: 0,
        max_ns: 0,
        bytes_moved: bytes,
        peak_mask_bytes: peak_bytes,
    };
    Ok(MemoryReport {
        one_hot: report("memory/one_hot", roi_count * n, roi_count * n),
        bit_mask: report("memory/bit_mask", 4 * n, 4 * n + peak * n),
        storage_ratio: (roi_count * n) as f64 / (4 * n) as f64,
        peak_resident_masks: peak,
    })
}
