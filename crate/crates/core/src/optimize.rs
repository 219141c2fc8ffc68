//! Projected gradient descent directly on voxel doses, minimizing the
//! total loss against a reference dose.

use serde::{Deserialize, Serialize};

use crate::bitmask::BitMaskVolume;
use crate::error::{Error, Result};
use crate::loss::{total_loss_values, LossConfig, LossResult};
use crate::metrics::evaluate_template;
use crate::par;
use crate::scoring::{constraint_report, BoundKind, ConstraintCheck};
use crate::template::{PlanTemplate, RoiClass};
use crate::volume::{Dims, DoseGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InitRule {
    Uniform { dose_gy: f64 },
    /// Separable box filter of half-width `radius_vox` applied to the
    /// reference dose.
    BlurOfGt { radius_vox: usize },
    Zero,
}

impl Default for InitRule {
    fn default() -> Self {
        InitRule::BlurOfGt { radius_vox: 3 }
    }
}

impl InitRule {
    pub fn build(&self, gt: &DoseGrid) -> Result<DoseGrid> {
        match *self {
            InitRule::Uniform { dose_gy } => {
                gt.with_values(vec![dose_gy / gt.unit_scale(); gt.len()])
            }
            InitRule::BlurOfGt { radius_vox } => box_blur(gt, radius_vox),
            InitRule::Zero => gt.with_values(vec![0.0; gt.len()]),
        }
    }
}

fn blur_axis(src: &[f64], dims: Dims, axis: usize, r: usize) -> Vec<f64> {
    let n = dims.0;
    let stride = [1, n[0], n[0] * n[1]][axis];
    let len = n[axis];
    let slab = n[0] * n[1];
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, slab, |z, plane| {
        for (k, o) in plane.iter_mut().enumerate() {
            let i = z * slab + k;
            let (x, y, _) = dims.coords(i);
            let p = [x, y, z][axis];
            let lo = p.saturating_sub(r);
            let hi = (p + r).min(len - 1);
            let base = i - p * stride;
            let s: f64 = (lo..=hi).map(|q| src[base + q * stride]).sum();
            *o = s / (hi - lo + 1) as f64;
        }
    });
    out
}

/// Mean over a `(2r+1)³` box truncated at the grid boundary.
pub fn box_blur(grid: &DoseGrid, radius_vox: usize) -> Result<DoseGrid> {
    let dims = grid.dims();
    let mut v = grid.values().to_vec();
    if radius_vox > 0 {
        for axis in 0..3 {
            v = blur_axis(&v, dims, axis, radius_vox);
        }
    }
    grid.with_values(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Multiplier on the gradient of the total loss.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stop once the total loss is at or below this value.
    pub tolerance: f64,
    /// Halve the step until the loss decreases; otherwise take fixed steps
    /// and watch for divergence. Monotone steps can stall where several
    /// absolute-value terms kink at once, so fixed steps are the default.
    pub backtracking: bool,
    /// Growth applied to the step after an accepted backtracking step,
    /// never beyond `step_size`.
    pub step_growth: f64,
    /// Backtracking gives up below this step.
    pub min_step: f64,
    /// Per-voxel bound on one update, Gy. Order-statistic and
    /// near-threshold sigmoid terms put large gradients on few voxels.
    pub max_voxel_step_gy: Option<f64>,
    /// Projection upper bound in Gy; defaults to 1.2 times the largest
    /// prescription.
    pub dose_cap_gy: Option<f64>,
    /// Consecutive loss increases tolerated without backtracking.
    pub divergence_patience: usize,
    /// Evaluate every template metric exactly at each recorded iteration.
    pub record_metrics: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 12.0,
            max_iterations: 2000,
            tolerance: 0.0,
            backtracking: false,
            step_growth: 2.0,
            min_step: 1e-9,
            max_voxel_step_gy: Some(2.0),
            dose_cap_gy: None,
            divergence_patience: 25,
            record_metrics: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step size must be positive");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be nonnegative");
        }
        if !(self.step_growth >= 1.0) || !(self.min_step > 0.0) {
            return bad("step growth must be at least 1 and the minimum step positive");
        }
        if matches!(self.max_voxel_step_gy, Some(c) if !(c > 0.0)) {
            return bad("voxel step bound must be positive");
        }
        if self.divergence_patience == 0 {
            return bad("divergence patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_total: f64,
    pub l_cdm: f64,
    pub l_mae: f64,
    pub step: f64,
    /// Exact template metrics (Gy or fraction), in spec order; empty when
    /// metric recording is off.
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    Budget,
    /// Backtracking could not find a decrease above the minimum step.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub final_dose: DoseGrid,
    pub trace: Vec<TraceRow>,
    pub metric_labels: Vec<String>,
    pub stop: StopReason,
    pub iterations: usize,
}

fn row(
    iteration: usize,
    step: f64,
    ev: &LossResult,
    x: &[f64],
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    template: &PlanTemplate,
    record: bool,
) -> Result<TraceRow> {
    let metrics = if record {
        let grid = gt.with_values(x.to_vec())?;
        evaluate_template(&grid, rois, template)?
            .into_iter()
            .map(|m| m.map_or(f64::NAN, |m| m.value))
            .collect()
    } else {
        Vec::new()
    };
    Ok(TraceRow {
        iteration,
        l_total: ev.l_total,
        l_cdm: ev.l_cdm,
        l_mae: ev.l_mae,
        step,
        metrics,
    })
}

fn descend(x: &[f64], grad: &[f64], step: f64, clip: Option<f64>, cap: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, par::CHUNK, |c, o| {
        let base = c * par::CHUNK;
        for (k, v) in o.iter_mut().enumerate() {
            let mut d = step * grad[base + k];
            if let Some(c) = clip {
                d = d.clamp(-c, c);
            }
            *v = (x[base + k] - d).clamp(0.0, cap);
        }
    });
    out
}

/// Minimizes the total loss of `loss_cfg` starting from `init`.
pub fn optimize_dose(
    init: &DoseGrid,
    gt: &DoseGrid,
    rois: &BitMaskVolume,
    loss_cfg: &LossConfig,
    cfg: &OptimizerConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    init.dims().ensure_same(&gt.dims())?;
    if init.unit_scale() != gt.unit_scale() {
        return Err(Error::UnitMismatch {
            left: init.unit_scale(),
            right: gt.unit_scale(),
        });
    }
    let template = &loss_cfg.template;
    let scale = gt.unit_scale();
    let max_presc = template.prescriptions.values().copied().fold(0.0, f64::max);
    let cap_gy = cfg.dose_cap_gy.unwrap_or(1.2 * max_presc);
    if !(cap_gy > 0.0) || cap_gy < max_presc {
        return Err(Error::InvalidArgument(format!(
            "dose cap {cap_gy} Gy is below the largest prescription {max_presc} Gy"
        )));
    }
    let cap = cap_gy / scale;
    let clip = cfg.max_voxel_step_gy.map(|c| c / scale);

    let mut x = init.values().to_vec();
    let mut ev = total_loss_values(&x, gt, rois, loss_cfg, true)?;
    let mut trace = vec![row(0, 0.0, &ev, &x, gt, rois, template, cfg.record_metrics)?];
    let mut step = cfg.step_size;
    let mut streak = 0;
    let mut stop = StopReason::Budget;
    let mut iterations = 0;

    for it in 1..=cfg.max_iterations {
        if ev.l_total <= cfg.tolerance {
            stop = StopReason::Tolerance;
            break;
        }
        let grad = ev.gradient.as_deref().expect("gradient requested");
        let (trial, trial_ev) = if cfg.backtracking {
            loop {
                let t = descend(&x, grad, step, clip.map(|c| c * step / cfg.step_size), cap);
                let e = total_loss_values(&t, gt, rois, loss_cfg, true)?;
                if e.l_total < ev.l_total {
                    break (t, e);
                }
                step *= 0.5;
                if step < cfg.min_step {
                    stop = StopReason::Stalled;
                    break (Vec::new(), e);
                }
            }
        } else {
            let t = descend(&x, grad, step, clip, cap);
            let e = total_loss_values(&t, gt, rois, loss_cfg, true)?;
            if e.l_total > ev.l_total {
                streak += 1;
                if streak >= cfg.divergence_patience {
                    return Err(Error::Diverged { iteration: it, streak });
                }
            } else {
                streak = 0;
            }
            (t, e)
        };
        if stop == StopReason::Stalled {
            break;
        }
        x = trial;
        ev = trial_ev;
        iterations = it;
        trace.push(row(it, step, &ev, &x, gt, rois, template, cfg.record_metrics)?);
        if cfg.backtracking {
            step = (step * cfg.step_growth).min(cfg.step_size);
        }
    }
    if stop == StopReason::Budget && ev.l_total <= cfg.tolerance {
        stop = StopReason::Tolerance;
    }

    Ok(OptimizeOutcome {
        final_dose: gt.with_values(x)?,
        trace,
        metric_labels: template.specs.iter().map(|s| s.label()).collect(),
        stop,
        iterations,
    })
}

/// Smallest slack over the PTV constraints, in the bounds' percent units.
/// Negative when a constraint fails; `None` without PTV constraints.
pub fn ptv_constraint_margin(checks: &[ConstraintCheck]) -> Option<f64> {
    checks
        .iter()
        .filter(|c| c.class == RoiClass::Ptv && c.kind == BoundKind::Constraint)
        .map(|c| c.slack)
        .reduce(f64::min)
}

/// Constraint report plus PTV margin for a dose.
pub fn ptv_margin(dose: &DoseGrid, rois: &BitMaskVolume, template: &PlanTemplate) -> Result<(Vec<ConstraintCheck>, f64)> {
    let checks = constraint_report(dose, rois, template)?;
    let margin = ptv_constraint_margin(&checks).unwrap_or(f64::INFINITY);
    Ok((checks, margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec, PtvDef};

    fn small() -> crate::phantom::Phantom {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            spacing_mm: [2.0; 3],
            ptvs: vec![PtvDef {
                name: "PTV_60".into(),
                center: [8.0, 8.0, 8.0],
                radius_vox: 4.0,
                prescription_gy: 60.0,
            }],
            oars: vec![],
            decay_vox: 2.0,
            noise_gy: 0.2,
            unit_scale: 1.0,
            margin_m: 0.5,
            tolerance_eps: 0.01,
        };
        make_phantom(&spec, 5).unwrap()
    }

    #[test]
    fn box_blur_preserves_constants_and_averages() {
        let g = DoseGrid::filled(Dims::cube(5), [1.0; 3], 3.0).unwrap();
        assert!(box_blur(&g, 2).unwrap().values().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let mut v = vec![0.0; 27];
        v[13] = 27.0;
        let g = DoseGrid::new(Dims::cube(3), [1.0; 3], 1.0, v).unwrap();
        // Every window of radius 1 on a 3³ grid contains the centre voxel.
        let b = box_blur(&g, 1).unwrap();
        assert!((b.values()[13] - 1.0).abs() < 1e-12);
        assert!((b.values()[0] - 27.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_at_gt() {
        let p = small();
        let cfg = LossConfig::from_template(p.template.clone()).unwrap();
        let out = optimize_dose(&p.gt, &p.gt, &p.rois, &cfg, &OptimizerConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.stop, StopReason::Tolerance);
        assert_eq!(out.trace[0].l_total, 0.0);
        assert_eq!(out.final_dose, p.gt);
    }

    #[test]
    fn backtracking_is_monotone() {
        let p = small();
        let cfg = LossConfig::from_template(p.template.clone()).unwrap();
        let init = InitRule::BlurOfGt { radius_vox: 2 }.build(&p.gt).unwrap();
        let opt = OptimizerConfig {
            step_size: 100.0,
            backtracking: true,
            max_iterations: 60,
            record_metrics: false,
            ..OptimizerConfig::default()
        };
        let out = optimize_dose(&init, &p.gt, &p.rois, &cfg, &opt).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].l_total <= w[0].l_total));
        assert!(out.trace.last().unwrap().l_total < out.trace[0].l_total);
    }

    #[test]
    fn fixed_step_divergence_is_reported() {
        let p = small();
        let cfg = LossConfig::from_template(p.template.clone()).unwrap();
        let init = p.gt.with_values(p.gt.values().iter().map(|v| v + 0.1).collect()).unwrap();
        let opt = OptimizerConfig {
            step_size: 1e7,
            max_voxel_step_gy: None,
            backtracking: false,
            divergence_patience: 1,
            max_iterations: 50,
            record_metrics: false,
            ..OptimizerConfig::default()
        };
        assert!(matches!(
            optimize_dose(&init, &p.gt, &p.rois, &cfg, &opt),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn projection_respects_cap() {
        let p = small();
        let cfg = LossConfig::from_template(p.template.clone()).unwrap();
        let init = InitRule::Uniform { dose_gy: 200.0 }.build(&p.gt).unwrap();
        let opt = OptimizerConfig {
            max_iterations: 1,
            record_metrics: false,
            ..OptimizerConfig::default()
        };
        let out = optimize_dose(&init, &p.gt, &p.rois, &cfg, &opt).unwrap();
        assert!(out.final_dose.values().iter().all(|&v| v <= 72.0));
    }
}
