//! The clinical DVH metric (CDM) loss, the voxel-wise MAE loss and their
//! weighted sum, each with an exact analytic (sub)gradient with respect to
//! the predicted dose.
//!
//! All terms are computed on the grids' stored values (their native unit
//! scale). Thresholds and sigmoid slopes are specified in Gy and converted:
//! `T_native = T / unit_scale`, `alpha_native = alpha * unit_scale`, which
//! leaves the surrogate itself unchanged by normalization.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bitmask::BitMaskVolume;
use crate::error::{Error, Result};
use crate::metrics::{cc_rank, kth_largest, quantile_rank, v_threshold};
use crate::par;
use crate::surrogate::{sigmoid_indicator, sigmoid_slope_factor};
use crate::template::{MetricKind, PlanTemplate};
use crate::volume::DoseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyRoiPolicy {
    /// Drop the ROI's terms and log a warning.
    #[default]
    Skip,
    Error,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub template: PlanTemplate,
    /// Sigmoid slope (1/Gy) per spec; `Some` for every V-metric.
    pub alphas: Vec<Option<f64>>,
    pub lambda_mae: f64,
    pub lambda_cdm: f64,
    /// Evaluate ground-truth V-metrics with the surrogate as well.
    pub use_surrogate_for_gt: bool,
    pub empty_roi: EmptyRoiPolicy,
}

impl LossConfig {
    /// Takes weights, lambdas and per-spec slopes from the template.
    pub fn from_template(template: PlanTemplate) -> Result<Self> {
        let alphas = template.specs.iter().map(|s| s.alpha).collect();
        let cfg = LossConfig {
            lambda_mae: template.lambda.mae,
            lambda_cdm: template.lambda.cdm,
            template,
            alphas,
            use_surrogate_for_gt: true,
            empty_roi: EmptyRoiPolicy::Skip,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the slope of every V-metric on `roi`.
    pub fn with_alpha(mut self, roi: &str, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        let mut hit = false;
        for (s, a) in self.template.specs.iter().zip(self.alphas.iter_mut()) {
            if s.roi == roi && s.metric.is_volume_metric() {
                *a = Some(alpha);
                hit = true;
            }
        }
        if !hit {
            return Err(Error::UnknownRoi(format!("{roi} (no V-metric)")));
        }
        Ok(self)
    }

    pub fn with_lambdas(mut self, lambda_mae: f64, lambda_cdm: f64) -> Result<Self> {
        self.lambda_mae = lambda_mae;
        self.lambda_cdm = lambda_cdm;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("lambda_mae", self.lambda_mae), ("lambda_cdm", self.lambda_cdm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{what} must be nonnegative, got {v}")));
            }
        }
        if self.alphas.len() != self.template.specs.len() {
            return Err(Error::InvalidArgument("one alpha slot per spec required".into()));
        }
        for (s, a) in self.template.specs.iter().zip(&self.alphas) {
            if s.metric.is_volume_metric() && a.is_none() {
                return Err(Error::MissingSurrogate(s.label()));
            }
        }
        Ok(())
    }
}

/// One template metric as seen by the loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTerm {
    pub roi: String,
    pub metric: String,
    pub pred: f64,
    pub gt: f64,
    pub weighted_abs_diff: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub value: f64,
    #[serde(skip)]
    pub gradient: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdmResult {
    pub value: f64,
    pub terms: Vec<MetricTerm>,
    #[serde(skip)]
    pub gradient: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossResult {
    pub l_cdm: f64,
    pub l_mae: f64,
    pub l_total: f64,
    pub terms: Vec<MetricTerm>,
    /// `dL_total / d pred` per voxel, in the grid's native units.
    #[serde(skip)]
    pub gradient: Option<Vec<f64>>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pair(pred_len: usize, gt: &DoseGrid, rois: Option<&BitMaskVolume>) -> Result<()> {
    if pred_len != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {pred_len} voxels, ground truth {}",
            gt.len()
        )));
    }
    if let Some(b) = rois {
        gt.dims().ensure_same(&b.dims())?;
    }
    Ok(())
}

/// MAE over raw prediction values laid out like `gt`.
pub fn mae_loss_values(pred: &[f64], gt: &DoseGrid, with_grad: bool) -> Result<Component> {
    check_pair(pred.len(), gt, None)?;
    let g = gt.values();
    let n = g.len();
    let value = par::sum_range(n, |i| (pred[i] - g[i]).abs()) / n as f64;
    let gradient = with_grad.then(|| {
        let inv = 1.0 / n as f64;
        let mut grad = vec![0.0; n];
        par::for_each_chunk_mut(&mut grad, par::CHUNK, |c, out| {
            let base = c * par::CHUNK;
            for (k, o) in out.iter_mut().enumerate() {
                *o = sign(pred[base + k] - g[base + k]) * inv;
            }
        });
        grad
    });
    Ok(Component { value, gradient })
}

pub fn mae_loss(pred: &DoseGrid, gt: &DoseGrid, with_grad: bool) -> Result<Component> {
    pred.ensure_compatible(gt)?;
    mae_loss_values(pred.values(), gt, with_grad)
}

/// How a term's metric depends on the prediction; used for gradients and
/// for finite-difference probe classification.
#[derive(Debug, Clone)]
pub(crate) enum Dependence {
    Mean,
    /// Order statistic carried by one voxel.
    Single { voxel: usize, value: f64 },
    Sigmoid { alpha: f64, threshold: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct TermTrace {
    pub members: Vec<usize>,
    pub dependence: Dependence,
    pub weight: f64,
    pub delta: f64,
}

/// Metric value on native doses plus its dependence on the doses.
fn native_metric(
    doses: &[f64],
    members: &[usize],
    kind: MetricKind,
    threshold_native: f64,
    alpha_native: Option<f64>,
    voxel_volume_cc: f64,
) -> Result<(f64, Dependence)> {
    let n = doses.len();
    let single = |k: usize| -> Result<(f64, Dependence)> {
        let (value, pos) = kth_largest(doses, k)?;
        Ok((value, Dependence::Single { voxel: members[pos], value }))
    };
    match kind {
        MetricKind::DMean => Ok((doses.iter().sum::<f64>() / n as f64, Dependence::Mean)),
        MetricKind::DMax => single(1),
        MetricKind::DMin => single(n),
        MetricKind::DQuantilePct(x) => single(quantile_rank(x, n)),
        MetricKind::DHottestCc(x) => single(cc_rank(x, voxel_volume_cc, n).0),
        MetricKind::VPctOfPrescription(_) | MetricKind::VAbsGy(_) => match alpha_native {
            Some(alpha) => {
                let s: f64 = doses
                    .iter()
                    .map(|&d| sigmoid_indicator(d - threshold_native, alpha))
                    .sum();
                Ok((
                    s / n as f64,
                    Dependence::Sigmoid {
                        alpha,
                        threshold: threshold_native,
                    },
                ))
            }
            None => {
                let c = doses.iter().filter(|&&d| d >= threshold_native).count();
                Ok((c as f64 / n as f64, Dependence::Mean))
            }
        },
    }
}

pub(crate) fn cdm_eval(
    pred: &[f64],
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    with_grad: bool,
    mut trace: Option<&mut Vec<TermTrace>>,
) -> Result<CdmResult> {
    check_pair(pred.len(), gt, Some(rois))?;
    cfg.validate()?;
    let template = &cfg.template;
    let scale = gt.unit_scale();
    let vv = gt.voxel_volume_cc();
    let gtv = gt.values();
    let mut gradient = with_grad.then(|| vec![0.0; pred.len()]);
    let mut terms: Vec<Option<MetricTerm>> = vec![None; template.specs.len()];

    for (roi, spec_idx) in template.specs_by_roi() {
        // Decode on demand; the mask is released before any metric work.
        let members = rois.decode_tracked(roi.as_str())?.member_indices();
        if members.is_empty() {
            match cfg.empty_roi {
                EmptyRoiPolicy::Error => return Err(Error::EmptyRoi(roi)),
                EmptyRoiPolicy::Skip => {
                    warn!("ROI {roi} is empty; skipping {} metric(s)", spec_idx.len());
                    for i in spec_idx {
                        let s = &template.specs[i];
                        terms[i] = Some(MetricTerm {
                            roi: roi.clone(),
                            metric: s.metric.to_string(),
                            pred: f64::NAN,
                            gt: f64::NAN,
                            weighted_abs_diff: 0.0,
                            skipped: true,
                        });
                    }
                    continue;
                }
            }
        }
        let pd: Vec<f64> = members.iter().map(|&i| pred[i]).collect();
        let gd: Vec<f64> = members.iter().map(|&i| gtv[i]).collect();
        let n = members.len() as f64;

        for i in spec_idx {
            let spec = &template.specs[i];
            let (threshold, alpha) = if spec.metric.is_volume_metric() {
                let t = v_threshold(spec.metric, template.prescriptions.get(&roi).copied(), &roi)?;
                let a = cfg.alphas[i].ok_or_else(|| Error::MissingSurrogate(spec.label()))?;
                (t / scale, Some(a * scale))
            } else {
                (0.0, None)
            };
            let (m_pred, dep) = native_metric(&pd, &members, spec.metric, threshold, alpha, vv)?;
            let gt_alpha = if cfg.use_surrogate_for_gt { alpha } else { None };
            let (m_gt, _) = native_metric(&gd, &members, spec.metric, threshold, gt_alpha, vv)?;
            let delta = m_pred - m_gt;
            let w = spec.loss_weight;
            terms[i] = Some(MetricTerm {
                roi: roi.clone(),
                metric: spec.metric.to_string(),
                pred: m_pred,
                gt: m_gt,
                weighted_abs_diff: w * delta.abs(),
                skipped: false,
            });

            if let Some(grad) = gradient.as_mut() {
                let ws = w * sign(delta);
                if ws != 0.0 {
                    match dep {
                        Dependence::Mean => {
                            let g = ws / n;
                            for &v in &members {
                                grad[v] += g;
                            }
                        }
                        Dependence::Single { voxel, .. } => grad[voxel] += ws,
                        Dependence::Sigmoid { alpha, threshold } => {
                            let g = ws * alpha / n;
                            for &v in &members {
                                grad[v] += g * sigmoid_slope_factor(pred[v] - threshold, alpha);
                            }
                        }
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(TermTrace {
                    members: members.clone(),
                    dependence: dep,
                    weight: w,
                    delta,
                });
            }
        }
    }

    let terms: Vec<MetricTerm> = terms.into_iter().map(|t| t.expect("every spec visited")).collect();
    let value = terms.iter().map(|t| t.weighted_abs_diff).sum();
    Ok(CdmResult {
        value,
        terms,
        gradient,
    })
}

/// CDM loss on raw prediction values laid out like `gt`.
pub fn cdm_loss_values(
    pred: &[f64],
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<CdmResult> {
    cdm_eval(pred, gt, rois, cfg, with_grad, None)
}

pub fn cdm_loss(
    pred: &DoseGrid,
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<CdmResult> {
    pred.ensure_compatible(gt)?;
    cdm_eval(pred.values(), gt, rois, cfg, with_grad, None)
}

fn combine(mae: Component, cdm: CdmResult, cfg: &LossConfig) -> LossResult {
    let (l1, l2) = (cfg.lambda_mae, cfg.lambda_cdm);
    let gradient = match (mae.gradient, cdm.gradient) {
        (Some(mut a), Some(b)) => {
            par::for_each_chunk_mut(&mut a, par::CHUNK, |c, out| {
                let base = c * par::CHUNK;
                for (k, o) in out.iter_mut().enumerate() {
                    *o = l1 * *o + l2 * b[base + k];
                }
            });
            Some(a)
        }
        _ => None,
    };
    LossResult {
        l_cdm: cdm.value,
        l_mae: mae.value,
        l_total: l1 * mae.value + l2 * cdm.value,
        terms: cdm.terms,
        gradient,
    }
}

/// `lambda_mae * L_MAE + lambda_cdm * L_CDM` on raw prediction values.
pub fn total_loss_values(
    pred: &[f64],
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<LossResult> {
    let mae = mae_loss_values(pred, gt, with_grad)?;
    let cdm = cdm_eval(pred, gt, rois, cfg, with_grad, None)?;
    Ok(combine(mae, cdm, cfg))
}

/// As [`total_loss_values`], writing the gradient into a caller-owned
/// buffer instead of allocating one in the result.
pub fn total_loss_into(
    pred: &[f64],
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    grad_out: &mut [f64],
) -> Result<LossResult> {
    if grad_out.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient buffer has {} slots for {} voxels",
            grad_out.len(),
            pred.len()
        )));
    }
    let mut r = total_loss_values(pred, gt, rois, cfg, true)?;
    grad_out.copy_from_slice(r.gradient.as_deref().expect("gradient requested"));
    r.gradient = None;
    Ok(r)
}

pub fn total_loss(
    pred: &DoseGrid,
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<LossResult> {
    pred.ensure_compatible(gt)?;
    total_loss_values(pred.values(), gt, rois, cfg, with_grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdOptions {
    /// Random probes drawn from the union of template ROIs (or the whole
    /// grid when that union is empty). Voxels carrying an order statistic
    /// are always probed in addition.
    pub probes: usize,
    /// Central-difference half step, native units.
    pub step: f64,
    pub seed: u64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub abs_floor: f64,
    /// Sigmoid arguments beyond this are reported as saturated.
    pub saturation: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            probes: 64,
            step: 1e-4,
            seed: 0,
            abs_floor: 1e-6,
            saturation: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeClass {
    Smooth,
    /// Within one step of a non-differentiable point.
    Kink,
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub voxel: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub class: ProbeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub step: f64,
    pub smooth_probes: usize,
    pub kink_probes: usize,
    pub saturated_probes: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub probes: Vec<ProbeRecord>,
}

fn classify(voxel: usize, pred: &[f64], gt: &[f64], cfg: &LossConfig, traces: &[TermTrace], opts: &FdOptions) -> ProbeClass {
    let h = opts.step;
    if cfg.lambda_mae > 0.0 && (pred[voxel] - gt[voxel]).abs() <= 2.0 * h {
        return ProbeClass::Kink;
    }
    if cfg.lambda_cdm == 0.0 {
        return ProbeClass::Smooth;
    }
    let mut saturated = false;
    for t in traces.iter().filter(|t| t.weight > 0.0) {
        if t.members.binary_search(&voxel).is_err() {
            continue;
        }
        let n = t.members.len() as f64;
        match t.dependence {
            Dependence::Mean => {
                if t.delta.abs() <= 2.0 * h / n {
                    return ProbeClass::Kink;
                }
            }
            Dependence::Single { voxel: sel, value } => {
                if t.delta.abs() <= 2.0 * h {
                    return ProbeClass::Kink;
                }
                if sel == voxel {
                    let crowded = t
                        .members
                        .iter()
                        .any(|&m| m != voxel && (pred[m] - value).abs() <= 2.0 * h);
                    if crowded {
                        return ProbeClass::Kink;
                    }
                } else if (pred[voxel] - value).abs() <= 2.0 * h {
                    return ProbeClass::Kink;
                }
            }
            Dependence::Sigmoid { alpha, threshold } => {
                if t.delta.abs() <= 2.0 * h * alpha / n {
                    return ProbeClass::Kink;
                }
                if (alpha * (pred[voxel] - threshold)).abs() > opts.saturation {
                    saturated = true;
                }
            }
        }
    }
    if saturated {
        ProbeClass::Saturated
    } else {
        ProbeClass::Smooth
    }
}

/// Compares the analytic gradient of the total loss with central
/// differences `(L(d + h) - L(d - h)) / 2h` at sampled voxels.
pub fn finite_difference_check(
    pred: &DoseGrid,
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    cfg: &LossConfig,
    opts: &FdOptions,
) -> Result<FdReport> {
    pred.ensure_compatible(gt)?;
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let p = pred.values();
    let mut traces = Vec::new();
    let cdm = cdm_eval(p, gt, rois, cfg, true, Some(&mut traces))?;
    let mae = mae_loss_values(p, gt, true)?;
    let analytic = combine(mae, cdm, cfg).gradient.expect("gradient requested");

    let mut pool: Vec<usize> = Vec::new();
    let mut seen = vec![false; p.len()];
    for t in &traces {
        for &m in &t.members {
            if !seen[m] {
                seen[m] = true;
                pool.push(m);
            }
        }
    }
    pool.sort_unstable();
    if pool.is_empty() {
        pool = (0..p.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let take = opts.probes.min(pool.len());
    let mut voxels: Vec<usize> = sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    for t in &traces {
        if let Dependence::Single { voxel, .. } = t.dependence {
            if !voxels.contains(&voxel) {
                voxels.push(voxel);
            }
        }
    }
    voxels.sort_unstable();

    let h = opts.step;
    let probes = par::map_slice(&voxels, |&v| -> Result<ProbeRecord> {
        let mut work = p.to_vec();
        work[v] = p[v] + h;
        let up = total_loss_values(&work, gt, rois, cfg, false)?.l_total;
        work[v] = p[v] - h;
        let down = total_loss_values(&work, gt, rois, cfg, false)?.l_total;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[v];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        Ok(ProbeRecord {
            voxel: v,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
            class: classify(v, p, gt.values(), cfg, &traces, opts),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let smooth: Vec<f64> = probes
        .iter()
        .filter(|r| r.class == ProbeClass::Smooth)
        .map(|r| r.rel_error)
        .collect();
    let count = |c| probes.iter().filter(|r| r.class == c).count();
    Ok(FdReport {
        step: h,
        smooth_probes: smooth.len(),
        kink_probes: count(ProbeClass::Kink),
        saturated_probes: count(ProbeClass::Saturated),
        max_rel_error: smooth.iter().copied().fold(0.0, f64::max),
        mean_rel_error: if smooth.is_empty() {
            0.0
        } else {
            smooth.iter().sum::<f64>() / smooth.len() as f64
        },
        probes,
    })
}
