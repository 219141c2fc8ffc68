//! Exact D- and V-metrics over the voxel doses of one ROI.
//!
//! D-metrics are order statistics found by selection (no full sort);
//! V-metrics count voxels at or above a threshold, with a voxel exactly at
//! the threshold counted as covered.

use serde::Serialize;

use crate::bitmask::BitMaskVolume;
use crate::error::{Error, Result};
use crate::template::{MetricKind, MetricSpec, PlanTemplate};
use crate::volume::{DoseGrid, RoiMask};

/// Where the voxels of an ROI come from.
#[derive(Debug, Clone, Copy)]
pub enum RoiSource<'a> {
    Mask(&'a RoiMask),
    Packed(&'a BitMaskVolume, &'a str),
}

/// Member voxels of an ROI in ascending z-major order, with their doses in Gy.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiDoses {
    pub indices: Vec<usize>,
    pub doses: Vec<f64>,
}

impl RoiDoses {
    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }
}

/// Collects the doses (Gy) of all member voxels. A packed source is decoded
/// once and the mask dropped before returning.
pub fn gather_roi_doses(grid: &DoseGrid, source: RoiSource<'_>) -> Result<RoiDoses> {
    let indices = match source {
        RoiSource::Mask(m) => {
            grid.dims().ensure_same(&m.dims())?;
            m.member_indices()
        }
        RoiSource::Packed(b, name) => {
            grid.dims().ensure_same(&b.dims())?;
            b.decode_tracked(name)?.member_indices()
        }
    };
    if indices.is_empty() {
        let name = match source {
            RoiSource::Mask(m) => m.name.clone(),
            RoiSource::Packed(_, n) => n.to_string(),
        };
        return Err(Error::EmptyRoi(name));
    }
    let doses = indices.iter().map(|&i| grid.gy(i)).collect();
    Ok(RoiDoses { indices, doses })
}

fn non_empty(doses: &[f64]) -> Result<()> {
    if doses.is_empty() {
        Err(Error::EmptyDoses)
    } else {
        Ok(())
    }
}

/// `ceil(r)`, tolerant of representation error just above an integer.
pub(crate) fn ceil_rank(r: f64) -> usize {
    let k = (r - r.abs() * 1e-12).ceil();
    if k < 1.0 {
        1
    } else {
        k as usize
    }
}

/// Rank `k` of the hottest-`x`-percent order statistic.
pub fn quantile_rank(x_pct: f64, n: usize) -> usize {
    ceil_rank(x_pct * n as f64 / 100.0).min(n)
}

/// Rank `k` of the hottest-`x`-cc order statistic and whether it was clamped to `n`.
pub fn cc_rank(x_cc: f64, voxel_volume_cc: f64, n: usize) -> (usize, bool) {
    let k = ceil_rank(x_cc / voxel_volume_cc);
    if k > n {
        (n, true)
    } else {
        (k, false)
    }
}

/// The `k`-th largest dose (1-based) and the list position of the voxel
/// that carries it. Among equal doses the smallest position wins.
pub fn kth_largest(doses: &[f64], k: usize) -> Result<(f64, usize)> {
    non_empty(doses)?;
    if k == 0 || k > doses.len() {
        return Err(Error::InvalidArgument(format!(
            "rank {k} outside 1..={}",
            doses.len()
        )));
    }
    let value = if k == 1 {
        doses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else if k == doses.len() {
        doses.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        let mut scratch = doses.to_vec();
        let (_, v, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        *v
    };
    let pos = doses
        .iter()
        .position(|&d| d == value)
        .expect("selected value is present");
    Ok((value, pos))
}

pub fn d_quantile_pct(doses: &[f64], x_pct: f64) -> Result<f64> {
    non_empty(doses)?;
    if !(x_pct > 0.0 && x_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile percent must be in (0, 100], got {x_pct}"
        )));
    }
    Ok(kth_largest(doses, quantile_rank(x_pct, doses.len()))?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HottestCc {
    pub value: f64,
    pub k: usize,
    /// The requested volume exceeded the ROI and `k` was clamped to `N`.
    pub clamped: bool,
}

pub fn d_hottest_cc(doses: &[f64], x_cc: f64, voxel_volume_cc: f64) -> Result<HottestCc> {
    non_empty(doses)?;
    if !(x_cc > 0.0 && voxel_volume_cc > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "volume {x_cc} cc and voxel volume {voxel_volume_cc} cc must be positive"
        )));
    }
    let (k, clamped) = cc_rank(x_cc, voxel_volume_cc, doses.len());
    Ok(HottestCc {
        value: kth_largest(doses, k)?.0,
        k,
        clamped,
    })
}

/// `(D_max, D_min)`.
pub fn d_extrema(doses: &[f64]) -> Result<(f64, f64)> {
    non_empty(doses)?;
    Ok(doses
        .iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &d| (hi.max(d), lo.min(d))))
}

pub fn d_mean(doses: &[f64]) -> Result<f64> {
    non_empty(doses)?;
    Ok(doses.iter().sum::<f64>() / doses.len() as f64)
}

/// Fraction of doses `>= threshold`.
pub fn v_exact(doses: &[f64], threshold: f64) -> Result<f64> {
    non_empty(doses)?;
    let covered = doses.iter().filter(|&&d| d >= threshold).count();
    Ok(covered as f64 / doses.len() as f64)
}

/// Cumulative DVH sampled at `0, w, 2w, ...` up to `max_dose`.
pub fn cumulative_dvh(doses: &[f64], bin_width: f64, max_dose: f64) -> Result<Vec<(f64, f64)>> {
    non_empty(doses)?;
    if !(bin_width > 0.0 && bin_width.is_finite()) || !(max_dose >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bin width {bin_width} must be positive and max dose {max_dose} nonnegative"
        )));
    }
    let mut sorted = doses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let bins = (max_dose / bin_width).floor() as usize + 1;
    Ok((0..bins)
        .map(|b| {
            let t = b as f64 * bin_width;
            let below = sorted.partition_point(|&d| d < t);
            (t, (n - below) as f64 / n as f64)
        })
        .collect())
}

/// Dose threshold in Gy for a V-metric.
pub fn v_threshold(kind: MetricKind, prescription: Option<f64>, roi: &str) -> Result<f64> {
    match kind {
        MetricKind::VPctOfPrescription(x) => {
            let p = prescription.ok_or_else(|| Error::MissingPrescription(roi.to_string()))?;
            Ok(x * p / 100.0)
        }
        MetricKind::VAbsGy(x) => Ok(x),
        other => Err(Error::InvalidArgument(format!("{other} is not a V-metric"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValue {
    pub roi: String,
    pub metric: String,
    /// Gy for D-metrics, a fraction in [0, 1] for V-metrics.
    pub value: f64,
    pub roi_voxel_count: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// Evaluates one metric on Gy doses.
pub fn evaluate_kind(
    doses: &[f64],
    kind: MetricKind,
    prescription: Option<f64>,
    voxel_volume_cc: f64,
    roi: &str,
) -> Result<(f64, bool)> {
    Ok(match kind {
        MetricKind::DMean => (d_mean(doses)?, false),
        MetricKind::DMax => (d_extrema(doses)?.0, false),
        MetricKind::DMin => (d_extrema(doses)?.1, false),
        MetricKind::DQuantilePct(x) => (d_quantile_pct(doses, x)?, false),
        MetricKind::DHottestCc(x) => {
            let h = d_hottest_cc(doses, x, voxel_volume_cc)?;
            (h.value, h.clamped)
        }
        MetricKind::VPctOfPrescription(_) | MetricKind::VAbsGy(_) => {
            (v_exact(doses, v_threshold(kind, prescription, roi)?)?, false)
        }
    })
}

pub fn evaluate_metric(
    grid: &DoseGrid,
    source: RoiSource<'_>,
    spec: &MetricSpec,
    template: &PlanTemplate,
) -> Result<MetricValue> {
    let roi = gather_roi_doses(grid, source)?;
    let presc = template.prescriptions.get(&spec.roi).copied();
    let (value, clamped) = evaluate_kind(&roi.doses, spec.metric, presc, grid.voxel_volume_cc(), &spec.roi)?;
    Ok(MetricValue {
        roi: spec.roi.clone(),
        metric: spec.metric.to_string(),
        value,
        roi_voxel_count: roi.len(),
        clamped,
    })
}

/// Evaluates every spec in template order, decoding each ROI once.
/// Empty ROIs yield `None` for their specs.
pub fn evaluate_template(
    grid: &DoseGrid,
    rois: &BitMaskVolume,
    template: &PlanTemplate,
) -> Result<Vec<Option<MetricValue>>> {
    let mut out = vec![None; template.specs.len()];
    for (roi, idx) in template.specs_by_roi() {
        let doses = match gather_roi_doses(grid, RoiSource::Packed(rois, &roi)) {
            Ok(d) => d,
            Err(Error::EmptyRoi(_)) => continue,
            Err(e) => return Err(e),
        };
        for i in idx {
            let spec = &template.specs[i];
            let presc = template.prescriptions.get(&spec.roi).copied();
            let (value, clamped) =
                evaluate_kind(&doses.doses, spec.metric, presc, grid.voxel_volume_cc(), &roi)?;
            out[i] = Some(MetricValue {
                roi: roi.clone(),
                metric: spec.metric.to_string(),
                value,
                roi_voxel_count: doses.len(),
                clamped,
            });
        }
    }
    Ok(out)
}
