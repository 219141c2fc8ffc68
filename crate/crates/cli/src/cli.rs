use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cdm", version, about = "Clinical DVH metrics, CDM loss and bit-mask ROI tools")]
pub struct Cli {
    /// Print the primary result as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Exit with status 2 when a clinical constraint fails.
    #[arg(long, global = true)]
    pub strict: bool,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct TemplateArg {
    /// Plan template JSON. Falls back to the bundled head-and-neck template.
    #[arg(long, env = "CDM_TEMPLATE")]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Weight of the voxel MAE term (template value by default).
    #[arg(long)]
    pub lambda_mae: Option<f64>,
    /// Weight of the clinical metric term (template value by default).
    #[arg(long)]
    pub lambda_cdm: Option<f64>,
    /// Surrogate slope override in 1/Gy, as ROI=ALPHA (repeatable).
    #[arg(long = "alpha", value_name = "ROI=ALPHA")]
    pub alphas: Vec<String>,
    /// Evaluate ground-truth V-metrics exactly instead of with the surrogate.
    #[arg(long)]
    pub exact_gt: bool,
    /// Fail instead of skipping ROIs that are empty.
    #[arg(long)]
    pub error_on_empty: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitKind {
    Blur,
    Uniform,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ThreadMode {
    Single,
    Parallel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate every template metric and constraint on a dose.
    Eval {
        #[arg(long)]
        dose: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
        /// Write the per-metric table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a prediction against a reference, or a whole cohort.
    Score {
        #[arg(long, required_unless_present = "cohort")]
        pred: Option<PathBuf>,
        #[arg(long, required_unless_present = "cohort")]
        gt: Option<PathBuf>,
        #[arg(long, required_unless_present = "cohort")]
        rois: Option<PathBuf>,
        /// Case label used in reports.
        #[arg(long, default_value = "case")]
        id: String,
        /// Directory with one sub-directory per case holding pred, gt and rois volumes.
        #[arg(long, conflicts_with_all = ["pred", "gt", "rois"])]
        cohort: Option<PathBuf>,
        /// With --cohort: name of a second prediction in each case to compare against.
        #[arg(long, requires = "cohort")]
        against: Option<String>,
        #[command(flatten)]
        template: TemplateArg,
        /// Write the per-metric table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate L_MAE, L_CDM and L_total, optionally writing the gradient.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
        #[command(flatten)]
        loss: LossArgs,
        /// Write dL_total/d pred as a volume.
        #[arg(long)]
        grad_out: Option<PathBuf>,
        /// Write the per-term table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients.
    Gradcheck {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        /// Half step in native units. Steep V95 slopes need it small.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative error allowed on smooth probes under --strict.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Select the sigmoid slope for a V-metric from pooled doses.
    Alpha {
        /// Dose volumes to pool (repeatable).
        #[arg(long = "doses", required = true)]
        doses: Vec<PathBuf>,
        /// Bit-mask volume shared by the dose volumes; all voxels when omitted.
        #[arg(long)]
        rois: Option<PathBuf>,
        /// ROI to pool; requires --rois.
        #[arg(long, requires = "rois")]
        roi: Option<String>,
        /// Threshold dose in Gy.
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
    },
    /// Pack binary masks into one bit-mask volume.
    Encode {
        /// Mask volume as NAME=PATH; nonzero voxels are members (repeatable, order kept).
        #[arg(long = "mask", value_name = "NAME=PATH", required = true)]
        masks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List ROIs of a bit-mask volume or extract one as a 0/1 volume.
    Decode {
        #[arg(long)]
        rois: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// Output volume for --name.
        #[arg(long, requires = "name")]
        out: Option<PathBuf>,
    },
    /// Projected subgradient descent on the total loss from an initial dose.
    Optimize {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long, value_enum, default_value = "blur")]
        init: InitKind,
        /// Blur half-width in voxels for --init blur.
        #[arg(long, default_value_t = 3)]
        radius: usize,
        /// Dose in Gy for --init uniform.
        #[arg(long, default_value_t = 40.0)]
        init_dose: f64,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Stop once L_total is at or below this value.
        #[arg(long)]
        tol: Option<f64>,
        /// Halve the step on increase instead of taking fixed steps.
        #[arg(long)]
        backtracking: bool,
        /// Per-voxel update bound in Gy; 0 disables it.
        #[arg(long)]
        clip: Option<f64>,
        /// Projection upper bound in Gy.
        #[arg(long)]
        cap: Option<f64>,
        /// Final dose volume.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Time per-channel against packed transforms and report mask memory.
    Bench {
        /// Cube edge in voxels.
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Largest ROI count; counts 1, 2, 4, ... up to it are timed.
        #[arg(long, default_value_t = 30)]
        rois: usize,
        #[arg(long, default_value_t = 7)]
        reps: usize,
        #[arg(long, value_enum, default_value = "single")]
        threads: ThreadMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the reference phantom: gt dose, ROIs and template.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}
