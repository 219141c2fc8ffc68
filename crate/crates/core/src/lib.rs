//! Clinical DVH metrics, their differentiable surrogates and the CDM loss,
//! together with the packed bit-mask ROI encoding used to feed them.

pub mod bench;
pub mod bitmask;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod optimize;
pub mod par;
pub mod phantom;
pub mod scoring;
pub mod surrogate;
pub mod template;
pub mod volume;

pub use bitmask::{encode, Axis, BitMaskVolume, Plane, RoiSelector, VoxelPermutation, MAX_ROIS};
pub use error::{Error, Result};
pub use loss::{
    cdm_loss, finite_difference_check, mae_loss, total_loss, total_loss_into, total_loss_values, EmptyRoiPolicy, FdOptions, FdReport,
    LossConfig, LossResult,
};
pub use metrics::{evaluate_template, gather_roi_doses, MetricValue, RoiSource};
pub use surrogate::{alpha_min, error_bound, select_alpha_from_cohort, v_approx, SurrogateConfig};
pub use template::{default_paper_template, parse_template, MetricKind, MetricSpec, PlanTemplate, RoiClass};
pub use volume::{load_volume, save_volume, Dims, DoseGrid, RoiMask, Volume, VolumeKind};
pub use scoring::{
    cohort_summary, constraint_report, score_pair, wilcoxon_signed_rank, CohortSummary, ConstraintCheck, ScoreReport,
    WilcoxonResult,
};
pub use optimize::{optimize_dose, InitRule, OptimizeOutcome, OptimizerConfig, StopReason};
pub use phantom::{make_phantom, Phantom, PhantomSpec};
