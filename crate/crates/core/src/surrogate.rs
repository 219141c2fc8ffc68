//! Sigmoid relaxation of V-metrics and slope selection.
//!
//! The hard count `1/N * #{d_i >= T}` is replaced by the mean of
//! `sigma(alpha * (d_i - T))`. With `q_m` the fraction of voxels within
//! `m` Gy of the threshold, the surrogate error is bounded by
//! `q_m / 2 + (1 - q_m) * exp(-alpha * m)`; inverting that bound gives the
//! smallest slope meeting a tolerance `eps`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{gather_roi_doses, RoiSource};
use crate::volume::DoseGrid;

/// Published slope (1/Gy) for the 54.25 Gy target.
pub const PAPER_ALPHA_PTV_54_25: f64 = 209.0;
/// Published slope (1/Gy) for the 70 Gy target.
pub const PAPER_ALPHA_PTV_70: f64 = 176.0;
pub const DEFAULT_MARGIN_GY: f64 = 0.5;
pub const DEFAULT_TOLERANCE: f64 = 0.01;

/// Logistic sigmoid of `alpha * z`, finite for any finite argument.
#[inline]
pub fn sigmoid_indicator(z: f64, alpha: f64) -> f64 {
    let t = alpha * z;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `sigma(t) * (1 - sigma(t))` at `t = alpha * z`, without cancellation.
#[inline]
pub fn sigmoid_slope_factor(z: f64, alpha: f64) -> f64 {
    let e = (-(alpha * z).abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// `|H(z) - sigma(alpha z)|` with `H(0) = 1`.
#[inline]
fn indicator_gap(z: f64, alpha: f64) -> f64 {
    if z >= 0.0 {
        sigmoid_indicator(-z, alpha)
    } else {
        sigmoid_indicator(z, alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurrogateConfig {
    /// Slope in 1/Gy.
    pub alpha: f64,
    pub margin_m: f64,
    pub tolerance_eps: f64,
    /// Threshold dose in Gy.
    pub threshold: f64,
}

impl SurrogateConfig {
    pub fn new(alpha: f64, margin_m: f64, tolerance_eps: f64, threshold: f64) -> Result<Self> {
        let cfg = SurrogateConfig {
            alpha,
            margin_m,
            tolerance_eps,
            threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.margin_m.is_finite() && self.margin_m > 0.0) {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin_m)));
        }
        if !(self.tolerance_eps > 0.0 && self.tolerance_eps < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be in (0, 1), got {}",
                self.tolerance_eps
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }
}

fn non_empty(doses: &[f64]) -> Result<()> {
    if doses.is_empty() {
        Err(Error::EmptyDoses)
    } else {
        Ok(())
    }
}

pub fn v_approx(doses: &[f64], cfg: &SurrogateConfig) -> Result<f64> {
    non_empty(doses)?;
    let s: f64 = doses
        .iter()
        .map(|&d| sigmoid_indicator(d - cfg.threshold, cfg.alpha))
        .sum();
    Ok(s / doses.len() as f64)
}

/// Mean pointwise gap between the step and the sigmoid, `delta(alpha)`.
pub fn pointwise_error(doses: &[f64], cfg: &SurrogateConfig) -> Result<f64> {
    non_empty(doses)?;
    let s: f64 = doses
        .iter()
        .map(|&d| indicator_gap(d - cfg.threshold, cfg.alpha))
        .sum();
    Ok(s / doses.len() as f64)
}

/// Fraction of doses with `|d - T| <= m`.
pub fn margin_fraction_qm(doses: &[f64], threshold: f64, margin_m: f64) -> Result<f64> {
    non_empty(doses)?;
    if !(margin_m > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {margin_m}")));
    }
    let inside = doses
        .iter()
        .filter(|&&d| (d - threshold).abs() <= margin_m)
        .count();
    Ok(inside as f64 / doses.len() as f64)
}

/// `q_m / 2 + (1 - q_m) exp(-alpha m)`.
pub fn error_bound(alpha: f64, q_m: f64, margin_m: f64) -> f64 {
    0.5 * q_m + (1.0 - q_m) * (-alpha * margin_m).exp()
}

/// Smallest slope for which [`error_bound`] does not exceed `eps`.
pub fn alpha_min(q_m: f64, margin_m: f64, eps: f64) -> Result<f64> {
    if !(margin_m.is_finite() && margin_m > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {margin_m}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be in (0, 1), got {eps}")));
    }
    if !(0.0..=1.0).contains(&q_m) {
        return Err(Error::InvalidArgument(format!("q_m must be a fraction, got {q_m}")));
    }
    let slack = eps - 0.5 * q_m;
    if slack <= 0.0 {
        return Err(Error::InfeasibleTolerance {
            eps,
            q_m,
            min_eps: 0.5 * q_m,
        });
    }
    // (1 - q_m) / slack can dip below 1 when q_m is large; any alpha then works.
    Ok((((1.0 - q_m) / slack).ln() / margin_m).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaSelection {
    pub q_m: f64,
    pub alpha_min: f64,
    pub bound_at_alpha: f64,
    pub pooled_voxels: usize,
    #[serde(skip)]
    pub config: SurrogateConfig,
}

/// Pools the ROI doses of every cohort member and derives the slope from
/// the pooled `q_m`.
pub fn select_alpha_from_cohort(
    cohort: &[(&DoseGrid, RoiSource<'_>)],
    threshold: f64,
    margin_m: f64,
    eps: f64,
) -> Result<AlphaSelection> {
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("cohort is empty".into()));
    }
    let mut pooled = Vec::new();
    for (grid, source) in cohort {
        pooled.extend(gather_roi_doses(grid, *source)?.doses);
    }
    let q_m = margin_fraction_qm(&pooled, threshold, margin_m)?;
    let alpha = alpha_min(q_m, margin_m, eps)?;
    Ok(AlphaSelection {
        q_m,
        alpha_min: alpha,
        bound_at_alpha: error_bound(alpha, q_m, margin_m),
        pooled_voxels: pooled.len(),
        config: SurrogateConfig {
            alpha,
            margin_m,
            tolerance_eps: eps,
            threshold,
        },
    })
}
