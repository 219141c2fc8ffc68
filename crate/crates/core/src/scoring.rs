//! Plan scores, constraint checks, the Wilcoxon signed-rank test and
//! cohort summaries.
//!
//! Scores always use exact metrics. PTV differences are expressed in
//! percent (of prescription for D-metrics, of volume for V-metrics), OAR
//! D-metric differences in Gy.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bitmask::BitMaskVolume;
use crate::error::{Error, Result};
use crate::loss::EmptyRoiPolicy;
use crate::metrics::{evaluate_kind, gather_roi_doses, RoiSource};
use crate::par;
use crate::template::{Bound, BoundUnit, MetricKind, MetricSpec, PlanTemplate, RoiClass};
use crate::volume::DoseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportUnit {
    PctPresc,
    PctVolume,
    Gy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricScore {
    pub roi: String,
    pub class: RoiClass,
    pub metric: String,
    /// Values in `unit`.
    pub pred: f64,
    pub gt: f64,
    pub abs_diff: f64,
    pub unit: ReportUnit,
    pub aim_pass: Option<bool>,
    pub constraint_pass: Option<bool>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub patient_id: String,
    /// Mean over PTVs of the mean absolute metric difference, percent.
    pub ptv_score: f64,
    /// Mean over OARs of the mean absolute metric difference, Gy.
    pub oar_score: f64,
    /// Mean absolute voxel difference, Gy.
    pub dose_score: f64,
    pub per_metric: Vec<MetricScore>,
}

/// Converts an exact metric (Gy or fraction) into the reporting unit.
fn reporting_value(spec: &MetricSpec, raw: f64, template: &PlanTemplate) -> Result<(f64, ReportUnit)> {
    if spec.metric.is_volume_metric() {
        return Ok((raw * 100.0, ReportUnit::PctVolume));
    }
    match spec.class {
        RoiClass::Ptv => Ok((raw / template.prescription(&spec.roi)? * 100.0, ReportUnit::PctPresc)),
        RoiClass::Oar => Ok((raw, ReportUnit::Gy)),
    }
}

/// Converts an exact metric into a bound's unit.
fn bound_value(spec: &MetricSpec, raw: f64, bound: &Bound, template: &PlanTemplate) -> Result<f64> {
    Ok(match bound.unit {
        BoundUnit::PctVolume => raw * 100.0,
        BoundUnit::Gy => raw,
        BoundUnit::PctPresc => raw / template.prescription(&spec.roi)? * 100.0,
    })
}

fn check(spec: &MetricSpec, raw: f64, bound: Option<&Bound>, template: &PlanTemplate) -> Result<Option<bool>> {
    bound
        .map(|b| Ok(b.is_satisfied(bound_value(spec, raw, b, template)?)))
        .transpose()
}

/// Exact metric values for every spec; `None` for specs on empty ROIs
/// when the policy skips them.
fn exact_values(
    grid: &DoseGrid,
    rois: &BitMaskVolume,
    template: &PlanTemplate,
    policy: EmptyRoiPolicy,
) -> Result<Vec<Option<f64>>> {
    grid.dims().ensure_same(&rois.dims())?;
    let mut out = vec![None; template.specs.len()];
    for (roi, idx) in template.specs_by_roi() {
        let doses = match gather_roi_doses(grid, RoiSource::Packed(rois, &roi)) {
            Ok(d) => d,
            Err(Error::EmptyRoi(name)) if policy == EmptyRoiPolicy::Skip => {
                log::warn!("ROI {name} is empty; its metrics are not scored");
                continue;
            }
            Err(e) => return Err(e),
        };
        for i in idx {
            let kind: MetricKind = template.specs[i].metric;
            let presc = template.prescriptions.get(&roi).copied();
            out[i] = Some(evaluate_kind(&doses.doses, kind, presc, grid.voxel_volume_cc(), &roi)?.0);
        }
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scores `pred` against `gt`; empty ROIs are an error.
pub fn score_pair(pred: &DoseGrid, gt: &DoseGrid, rois: &BitMaskVolume, template: &PlanTemplate) -> Result<ScoreReport> {
    score_pair_with_policy(pred, gt, rois, template, EmptyRoiPolicy::Error)
}

pub fn score_pair_with_policy(
    pred: &DoseGrid,
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    template: &PlanTemplate,
    policy: EmptyRoiPolicy,
) -> Result<ScoreReport> {
    pred.dims().ensure_same(&gt.dims())?;
    let pv = exact_values(pred, rois, template, policy)?;
    let gv = exact_values(gt, rois, template, policy)?;

    let mut per_metric = Vec::with_capacity(template.specs.len());
    for (spec, (p, g)) in template.specs.iter().zip(pv.into_iter().zip(gv)) {
        let row = match (p, g) {
            (Some(p), Some(g)) => {
                let (pr, unit) = reporting_value(spec, p, template)?;
                let (gr, _) = reporting_value(spec, g, template)?;
                MetricScore {
                    roi: spec.roi.clone(),
                    class: spec.class,
                    metric: spec.metric.to_string(),
                    pred: pr,
                    gt: gr,
                    abs_diff: (pr - gr).abs(),
                    unit,
                    aim_pass: check(spec, p, spec.aim.as_ref(), template)?,
                    constraint_pass: check(spec, p, spec.constraint.as_ref(), template)?,
                    skipped: false,
                }
            }
            _ => MetricScore {
                roi: spec.roi.clone(),
                class: spec.class,
                metric: spec.metric.to_string(),
                pred: f64::NAN,
                gt: f64::NAN,
                abs_diff: f64::NAN,
                unit: reporting_value(spec, 0.0, template)?.1,
                aim_pass: None,
                constraint_pass: None,
                skipped: true,
            },
        };
        per_metric.push(row);
    }

    let class_score = |class: RoiClass| -> f64 {
        let roi_means: Vec<f64> = template
            .specs_by_roi()
            .into_iter()
            .filter_map(|(_, idx)| {
                let diffs: Vec<f64> = idx
                    .iter()
                    .filter(|&&i| template.specs[i].class == class && !per_metric[i].skipped)
                    .map(|&i| per_metric[i].abs_diff)
                    .collect();
                mean(&diffs)
            })
            .collect();
        mean(&roi_means).unwrap_or(0.0)
    };

    let n = pred.len();
    let (p, g) = (pred.values(), gt.values());
    let (sp, sg) = (pred.unit_scale(), gt.unit_scale());
    let dose_score = par::sum_range(n, |i| (p[i] * sp - g[i] * sg).abs()) / n as f64;

    Ok(ScoreReport {
        patient_id: String::new(),
        ptv_score: class_score(RoiClass::Ptv),
        oar_score: class_score(RoiClass::Oar),
        dose_score,
        per_metric,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Aim,
    Constraint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintCheck {
    pub roi: String,
    pub class: RoiClass,
    pub metric: String,
    pub kind: BoundKind,
    pub bound: Bound,
    /// Metric value in the bound's unit.
    pub value: f64,
    pub satisfied: bool,
    /// Positive when satisfied, in the bound's unit.
    pub slack: f64,
}

/// Evaluates every aim and constraint of the template on `dose`.
pub fn constraint_report(dose: &DoseGrid, rois: &BitMaskVolume, template: &PlanTemplate) -> Result<Vec<ConstraintCheck>> {
    let values = exact_values(dose, rois, template, EmptyRoiPolicy::Error)?;
    let mut out = Vec::new();
    for (spec, v) in template.specs.iter().zip(values) {
        let raw = v.expect("empty ROIs are errors here");
        for (kind, bound) in [(BoundKind::Aim, &spec.aim), (BoundKind::Constraint, &spec.constraint)] {
            if let Some(b) = bound {
                let value = bound_value(spec, raw, b, template)?;
                out.push(ConstraintCheck {
                    roi: spec.roi.clone(),
                    class: spec.class,
                    metric: spec.metric.to_string(),
                    kind,
                    bound: *b,
                    value,
                    satisfied: b.is_satisfied(value),
                    slack: b.slack(value),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub zeros_dropped: usize,
    pub method: WilcoxonMethod,
    /// All differences were zero; `p_value` is 1 by convention.
    pub degenerate: bool,
}

/// Largest effective sample size evaluated with the exact distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Mid-ranks of `|d|`, doubled so they are integers.
fn doubled_midranks(abs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled: (i + 1) + (j + 1).
        let r = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    (ranks, tie_sizes)
}

/// Two-tailed test on paired differences `pred - gt`.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(p, g)| p - g).collect();
    wilcoxon_from_differences(&diffs)
}

pub fn wilcoxon_from_differences(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(Error::InvalidArgument("Wilcoxon test needs at least one pair".into()));
    }
    if let Some(i) = diffs.iter().position(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite difference at pair {i}")));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let zeros_dropped = diffs.len() - nonzero.len();
    let n = nonzero.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            n_effective: 0,
            zeros_dropped,
            method: WilcoxonMethod::Exact,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let total2: u64 = ranks.iter().sum();
    let wp2: u64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_plus = wp2 as f64 / 2.0;
    let w_minus = (total2 - wp2) as f64 / 2.0;

    let (p_value, method) = if n <= WILCOXON_EXACT_MAX_N {
        // counts[s] = number of sign patterns with doubled W+ = s.
        let mut counts = vec![0.0f64; total2 as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                let c = counts[s];
                if c != 0.0 {
                    counts[s + r] += c;
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=wp2 as usize].iter().sum::<f64>() / all;
        let upper: f64 = counts[wp2 as usize..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let dev = ((w_plus - mu).abs() - 0.5).max(0.0);
        let p = if var > 0.0 {
            let z = dev / var.sqrt();
            let normal = Normal::standard();
            2.0 * (1.0 - normal.cdf(z))
        } else {
            1.0
        };
        (p.min(1.0), WilcoxonMethod::NormalApprox)
    };

    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        p_value,
        n_effective: n,
        zeros_dropped,
        method,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single case.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassRate {
    pub roi: String,
    pub metric: String,
    pub kind: BoundKind,
    pub passed: usize,
    pub evaluated: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSummary {
    pub cases: usize,
    pub ptv_score: MeanSd,
    pub oar_score: MeanSd,
    pub dose_score: MeanSd,
    /// Set when only one case was given, so `sd` is 0 by convention.
    pub single_case: bool,
    pub pass_rates: Vec<PassRate>,
}

fn mean_sd(xs: &[f64]) -> MeanSd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanSd { mean, sd }
}

/// Mean and sample sd per score plus per-spec pass rates. Reports are
/// reduced in patient-id order.
pub fn cohort_summary(reports: &[ScoreReport]) -> Result<CohortSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("cohort summary needs at least one report".into()));
    }
    let mut sorted: Vec<&ScoreReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let col = |f: fn(&ScoreReport) -> f64| mean_sd(&sorted.iter().map(|r| f(r)).collect::<Vec<_>>());

    let mut pass_rates: Vec<PassRate> = Vec::new();
    for r in &sorted {
        for m in &r.per_metric {
            for (kind, pass) in [(BoundKind::Aim, m.aim_pass), (BoundKind::Constraint, m.constraint_pass)] {
                let Some(pass) = pass else { continue };
                let slot = match pass_rates
                    .iter_mut()
                    .position(|p| p.roi == m.roi && p.metric == m.metric && p.kind == kind)
                {
                    Some(i) => &mut pass_rates[i],
                    None => {
                        pass_rates.push(PassRate {
                            roi: m.roi.clone(),
                            metric: m.metric.clone(),
                            kind,
                            passed: 0,
                            evaluated: 0,
                            rate: 0.0,
                        });
                        pass_rates.last_mut().expect("just pushed")
                    }
                };
                slot.evaluated += 1;
                slot.passed += usize::from(pass);
            }
        }
    }
    for p in &mut pass_rates {
        p.rate = p.passed as f64 / p.evaluated as f64;
    }

    Ok(CohortSummary {
        cases: sorted.len(),
        ptv_score: col(|r| r.ptv_score),
        oar_score: col(|r| r.oar_score),
        dose_score: col(|r| r.dose_score),
        single_case: sorted.len() == 1,
        pass_rates,
    })
}
