use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Serialize;

use cdm_core::bench::{bench_memory, bench_transform, transform_speedup, BenchReport, Threads};
use cdm_core::loss::FdOptions;
use cdm_core::optimize::ptv_margin;
use cdm_core::scoring::{wilcoxon_signed_rank, BoundKind, ConstraintCheck};
use cdm_core::surrogate::AlphaSelection;
use cdm_core::{
    cohort_summary, constraint_report, default_paper_template, encode, evaluate_template, finite_difference_check,
    load_volume, make_phantom, optimize_dose, parse_template, save_volume, score_pair, select_alpha_from_cohort,
    total_loss, Axis, BitMaskVolume, Dims, DoseGrid, EmptyRoiPolicy, InitRule, LossConfig, OptimizerConfig,
    PhantomSpec, PlanTemplate, Plane, RoiMask, RoiSource, ScoreReport, Volume, VolumeKind, VoxelPermutation,
};

use crate::cli::{Cli, Command, InitKind, LossArgs, TemplateArg, ThreadMode};
use crate::output::{print_json, write_atomic, write_csv, write_csv_records};
use crate::Status;

pub fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Eval { dose, rois, template, csv } => eval(cli, dose, rois, template, csv.as_deref()),
        Command::Score { pred, gt, rois, id, cohort, against, template, csv } => match cohort {
            Some(dir) => score_cohort(cli, dir, against.as_deref(), template, csv.as_deref()),
            None => {
                let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| anyhow!("--{flag} is required"));
                score_single(cli, &need(pred, "pred")?, &need(gt, "gt")?, &need(rois, "rois")?, id, template, csv.as_deref())
            }
        },
        Command::Loss { pred, gt, rois, template, loss, grad_out, csv } => {
            loss_cmd(cli, pred, gt, rois, template, loss, grad_out.as_deref(), csv.as_deref())
        }
        Command::Gradcheck { pred, gt, rois, template, loss, probes, step, seed, tol } => {
            let opts = FdOptions { probes: *probes, step: *step, seed: *seed, ..FdOptions::default() };
            gradcheck(cli, pred, gt, rois, template, loss, &opts, *tol)
        }
        Command::Alpha { doses, rois, roi, threshold, margin, eps } => {
            alpha(cli, doses, rois.as_deref(), roi.as_deref(), *threshold, *margin, *eps)
        }
        Command::Encode { masks, out } => encode_cmd(cli, masks, out),
        Command::Decode { rois, name, out } => decode_cmd(cli, rois, name.as_deref(), out.as_deref()),
        Command::Optimize { .. } => optimize_cmd(cli),
        Command::Bench { size, rois, reps, threads, seed, csv } => {
            bench_cmd(cli, *size, *rois, *reps, *threads, *seed, csv.as_deref())
        }
        Command::Phantom { out_dir, seed } => phantom_cmd(cli, out_dir, *seed),
    }
}

fn load_template(arg: &TemplateArg) -> Result<PlanTemplate> {
    match &arg.template {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading template {}", p.display()))?;
            parse_template(&text).with_context(|| format!("template {}", p.display()))
        }
        None => Ok(default_paper_template()),
    }
}

fn load_dose(p: &Path) -> Result<DoseGrid> {
    load_volume(p, VolumeKind::Dose)
        .and_then(Volume::into_dose)
        .with_context(|| format!("dose volume {}", p.display()))
}

fn load_rois(p: &Path) -> Result<BitMaskVolume> {
    load_volume(p, VolumeKind::Bitmask)
        .and_then(Volume::into_bitmask)
        .with_context(|| format!("bit-mask volume {}", p.display()))
}

fn split_pair<'a>(s: &'a str, what: &str) -> Result<(&'a str, &'a str)> {
    s.split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| anyhow!("{what} must look like NAME=VALUE, got {s:?}"))
}

fn loss_config(mut template: PlanTemplate, a: &LossArgs) -> Result<LossConfig> {
    // Overrides go into the template first so specs without a slope can be completed.
    for o in &a.alphas {
        let (roi, v) = split_pair(o, "--alpha")?;
        let alpha: f64 = v.parse().with_context(|| format!("--alpha value {v:?}"))?;
        let mut hit = false;
        for s in template.specs.iter_mut().filter(|s| s.roi == roi && s.metric.is_volume_metric()) {
            s.alpha = Some(alpha);
            hit = true;
        }
        if !hit {
            bail!("--alpha {roi}: the template has no V-metric on that ROI");
        }
    }
    let mut cfg = LossConfig::from_template(template)?;
    let (l1, l2) = (a.lambda_mae.unwrap_or(cfg.lambda_mae), a.lambda_cdm.unwrap_or(cfg.lambda_cdm));
    cfg = cfg.with_lambdas(l1, l2)?;
    cfg.use_surrogate_for_gt = !a.exact_gt;
    cfg.empty_roi = if a.error_on_empty { EmptyRoiPolicy::Error } else { EmptyRoiPolicy::Skip };
    Ok(cfg)
}

fn constraints_fail(checks: &[ConstraintCheck]) -> bool {
    checks.iter().any(|c| c.kind == BoundKind::Constraint && !c.satisfied)
}

fn strict_status(cli: &Cli, failed: bool) -> Status {
    if cli.strict && failed {
        Status::Failed
    } else {
        Status::Ok
    }
}

fn opt_bool(b: Option<bool>) -> &'static str {
    match b {
        Some(true) => "pass",
        Some(false) => "FAIL",
        None => "-",
    }
}

// ------------------------------------------------------------------ eval

#[derive(Serialize)]
struct EvalRow {
    roi: String,
    metric: String,
    /// Gy for D-metrics, fraction for V-metrics; empty for empty ROIs.
    value: Option<f64>,
    voxels: usize,
    aim: Option<String>,
    aim_pass: Option<bool>,
    constraint: Option<String>,
    constraint_pass: Option<bool>,
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: Vec<EvalRow>,
    checks: Vec<ConstraintCheck>,
    constraints_pass: bool,
}

fn eval(cli: &Cli, dose: &Path, rois: &Path, t: &TemplateArg, csv: Option<&Path>) -> Result<Status> {
    let template = load_template(t)?;
    let (grid, masks) = (load_dose(dose)?, load_rois(rois)?);
    let values = evaluate_template(&grid, &masks, &template)?;
    let checks = constraint_report(&grid, &masks, &template)?;
    let pass_of = |spec_roi: &str, metric: &str, kind: BoundKind| {
        checks
            .iter()
            .find(|c| c.roi == spec_roi && c.metric == metric && c.kind == kind)
            .map(|c| c.satisfied)
    };
    let rows: Vec<EvalRow> = template
        .specs
        .iter()
        .zip(&values)
        .map(|(s, v)| {
            let metric = s.metric.to_string();
            EvalRow {
                roi: s.roi.clone(),
                value: v.as_ref().map(|m| m.value),
                voxels: v.as_ref().map_or(0, |m| m.roi_voxel_count),
                aim: s.aim.map(|b| b.to_string()),
                aim_pass: pass_of(&s.roi, &metric, BoundKind::Aim),
                constraint: s.constraint.map(|b| b.to_string()),
                constraint_pass: pass_of(&s.roi, &metric, BoundKind::Constraint),
                metric,
            }
        })
        .collect();
    if let Some(p) = csv {
        write_csv(p, &rows)?;
    }
    let failed = constraints_fail(&checks);
    if cli.json {
        print_json(&EvalOutput { metrics: rows, checks, constraints_pass: !failed })?;
    } else {
        for r in &rows {
            let v = r.value.map_or("empty".to_string(), |v| format!("{v:.4}"));
            println!(
                "{:<22} {:<14} {:>12}  aim {:<4}  constraint {}",
                r.roi, r.metric, v, opt_bool(r.aim_pass), opt_bool(r.constraint_pass)
            );
        }
        println!("constraints: {}", if failed { "FAIL" } else { "pass" });
    }
    Ok(strict_status(cli, failed))
}

// ------------------------------------------------------------------ score

#[derive(Serialize)]
struct ScoreRow<'a> {
    patient_id: &'a str,
    roi: &'a str,
    metric: &'a str,
    pred: f64,
    gt: f64,
    abs_diff: f64,
    unit: String,
    aim_pass: Option<bool>,
    constraint_pass: Option<bool>,
    skipped: bool,
}

fn score_rows(r: &ScoreReport) -> Vec<ScoreRow<'_>> {
    r.per_metric
        .iter()
        .map(|m| ScoreRow {
            patient_id: &r.patient_id,
            roi: &m.roi,
            metric: &m.metric,
            pred: m.pred,
            gt: m.gt,
            abs_diff: m.abs_diff,
            unit: serde_json::to_value(m.unit).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            aim_pass: m.aim_pass,
            constraint_pass: m.constraint_pass,
            skipped: m.skipped,
        })
        .collect()
}

fn report_fails(r: &ScoreReport) -> bool {
    r.per_metric.iter().any(|m| m.constraint_pass == Some(false))
}

fn score_case(pred: &Path, gt: &Path, rois: &Path, id: &str, template: &PlanTemplate) -> Result<ScoreReport> {
    let mut r = score_pair(&load_dose(pred)?, &load_dose(gt)?, &load_rois(rois)?, template)
        .with_context(|| format!("scoring {id}"))?;
    r.patient_id = id.to_string();
    Ok(r)
}

fn score_single(
    cli: &Cli,
    pred: &Path,
    gt: &Path,
    rois: &Path,
    id: &str,
    t: &TemplateArg,
    csv: Option<&Path>,
) -> Result<Status> {
    let template = load_template(t)?;
    let r = score_case(pred, gt, rois, id, &template)?;
    if let Some(p) = csv {
        write_csv(p, &score_rows(&r))?;
    }
    if cli.json {
        print_json(&r)?;
    } else {
        println!("ptv_score  {:.6} %", r.ptv_score);
        println!("oar_score  {:.6} Gy", r.oar_score);
        println!("dose_score {:.6} Gy", r.dose_score);
    }
    Ok(strict_status(cli, report_fails(&r)))
}

#[derive(Serialize)]
struct Comparison {
    against: String,
    ptv_score: cdm_core::WilcoxonResult,
    oar_score: cdm_core::WilcoxonResult,
    dose_score: cdm_core::WilcoxonResult,
}

#[derive(Serialize)]
struct CohortOutput {
    cases: Vec<ScoreReport>,
    summary: cdm_core::CohortSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison>,
}

fn score_cohort(cli: &Cli, dir: &Path, against: Option<&str>, t: &TemplateArg, csv: Option<&Path>) -> Result<Status> {
    let template = load_template(t)?;
    let mut cases: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading cohort {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    cases.retain(|p| p.is_dir());
    cases.sort();
    if cases.is_empty() {
        bail!("cohort {} has no case directories", dir.display());
    }
    let mut reports = Vec::new();
    let mut other = Vec::new();
    for c in &cases {
        let id = c.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        info!("scoring {id}");
        reports.push(score_case(&c.join("pred"), &c.join("gt"), &c.join("rois"), &id, &template)?);
        if let Some(name) = against {
            other.push(score_case(&c.join(name), &c.join("gt"), &c.join("rois"), &id, &template)?);
        }
    }
    let summary = cohort_summary(&reports)?;
    let comparison = match against {
        Some(name) => {
            let pairs = |f: fn(&ScoreReport) -> f64| -> Vec<(f64, f64)> {
                reports.iter().zip(&other).map(|(a, b)| (f(a), f(b))).collect()
            };
            Some(Comparison {
                against: name.to_string(),
                ptv_score: wilcoxon_signed_rank(&pairs(|r| r.ptv_score))?,
                oar_score: wilcoxon_signed_rank(&pairs(|r| r.oar_score))?,
                dose_score: wilcoxon_signed_rank(&pairs(|r| r.dose_score))?,
            })
        }
        None => None,
    };
    if let Some(p) = csv {
        let rows: Vec<ScoreRow<'_>> = reports.iter().flat_map(score_rows).collect();
        write_csv(p, &rows)?;
    }
    let failed = reports.iter().any(report_fails);
    let out = CohortOutput { cases: reports, summary, comparison };
    if cli.json {
        print_json(&out)?;
    } else {
        let s = &out.summary;
        println!("cases      {}", s.cases);
        println!("ptv_score  {:.6} ± {:.6} %", s.ptv_score.mean, s.ptv_score.sd);
        println!("oar_score  {:.6} ± {:.6} Gy", s.oar_score.mean, s.oar_score.sd);
        println!("dose_score {:.6} ± {:.6} Gy", s.dose_score.mean, s.dose_score.sd);
        if let Some(c) = &out.comparison {
            println!(
                "vs {}: p(ptv) {:.4}  p(oar) {:.4}  p(dose) {:.4}",
                c.against, c.ptv_score.p_value, c.oar_score.p_value, c.dose_score.p_value
            );
        }
    }
    Ok(strict_status(cli, failed))
}

// ------------------------------------------------------------------ loss

#[derive(Serialize)]
struct TermRow<'a> {
    roi: &'a str,
    metric: &'a str,
    pred: f64,
    gt: f64,
    weighted_abs_diff: f64,
    skipped: bool,
}

#[allow(clippy::too_many_arguments)]
fn loss_cmd(
    cli: &Cli,
    pred: &Path,
    gt: &Path,
    rois: &Path,
    t: &TemplateArg,
    a: &LossArgs,
    grad_out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<Status> {
    let cfg = loss_config(load_template(t)?, a)?;
    let (p, g, b) = (load_dose(pred)?, load_dose(gt)?, load_rois(rois)?);
    let r = total_loss(&p, &g, &b, &cfg, grad_out.is_some())?;
    if let (Some(path), Some(grad)) = (grad_out, &r.gradient) {
        let vol = DoseGrid::new(p.dims(), p.spacing_mm(), 1.0, grad.clone())?;
        save_volume(&Volume::from(vol), path)?;
    }
    if let Some(path) = csv {
        let rows: Vec<TermRow<'_>> = r
            .terms
            .iter()
            .map(|t| TermRow {
                roi: &t.roi,
                metric: &t.metric,
                pred: t.pred,
                gt: t.gt,
                weighted_abs_diff: t.weighted_abs_diff,
                skipped: t.skipped,
            })
            .collect();
        write_csv(path, &rows)?;
    }
    if cli.json {
        print_json(&r)?;
    } else {
        println!("l_mae   {:.9}", r.l_mae);
        println!("l_cdm   {:.9}", r.l_cdm);
        println!("l_total {:.9}", r.l_total);
    }
    Ok(Status::Ok)
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    cli: &Cli,
    pred: &Path,
    gt: &Path,
    rois: &Path,
    t: &TemplateArg,
    a: &LossArgs,
    opts: &FdOptions,
    tol: f64,
) -> Result<Status> {
    let cfg = loss_config(load_template(t)?, a)?;
    let r = finite_difference_check(&load_dose(pred)?, &load_dose(gt)?, &load_rois(rois)?, &cfg, opts)?;
    if cli.json {
        print_json(&r)?;
    } else {
        println!(
            "{} smooth, {} kink, {} saturated probes; max rel error {:.3e}, mean {:.3e}",
            r.smooth_probes, r.kink_probes, r.saturated_probes, r.max_rel_error, r.mean_rel_error
        );
    }
    Ok(strict_status(cli, r.max_rel_error > tol))
}

// ------------------------------------------------------------------ alpha

fn alpha(
    cli: &Cli,
    doses: &[PathBuf],
    rois: Option<&Path>,
    roi: Option<&str>,
    threshold: f64,
    margin: f64,
    eps: f64,
) -> Result<Status> {
    let grids: Vec<DoseGrid> = doses.iter().map(|p| load_dose(p)).collect::<Result<_>>()?;
    let packed = rois.map(load_rois).transpose()?;
    let whole: Vec<RoiMask> = grids
        .iter()
        .map(|g| RoiMask::from_fn("all", g.dims(), |_, _, _| true))
        .collect();
    let cohort: Vec<(&DoseGrid, RoiSource<'_>)> = match (&packed, roi) {
        (Some(b), Some(name)) => grids.iter().map(|g| (g, RoiSource::Packed(b, name))).collect(),
        (Some(_), None) => bail!("--rois needs --roi to pick the ROI to pool"),
        (None, _) => grids.iter().zip(&whole).map(|(g, m)| (g, RoiSource::Mask(m))).collect(),
    };
    let sel: AlphaSelection = select_alpha_from_cohort(&cohort, threshold, margin, eps)?;
    if cli.json {
        print_json(&sel)?;
    } else {
        println!("q_m        {:.6}", sel.q_m);
        println!("alpha_min  {:.6} /Gy", sel.alpha_min);
        println!("bound      {:.6}", sel.bound_at_alpha);
        println!("voxels     {}", sel.pooled_voxels);
    }
    Ok(Status::Ok)
}

// ------------------------------------------------------------------ codec

#[derive(Serialize)]
struct RoiEntry {
    name: String,
    bit: usize,
    voxels: usize,
}

fn roi_table(b: &BitMaskVolume) -> Result<Vec<RoiEntry>> {
    b.roi_names()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            Ok(RoiEntry { name: n.clone(), bit: i + 1, voxels: b.roi_voxel_count(n)? })
        })
        .collect()
}

fn print_table(cli: &Cli, table: &[RoiEntry]) -> Result<()> {
    if cli.json {
        print_json(&table)
    } else {
        for e in table {
            println!("{:>2}  {:<24} {:>9} voxels", e.bit, e.name, e.voxels);
        }
        Ok(())
    }
}

fn encode_cmd(cli: &Cli, specs: &[String], out: &Path) -> Result<Status> {
    let mut masks = Vec::with_capacity(specs.len());
    let mut spacing = None;
    for s in specs {
        let (name, path) = split_pair(s, "--mask")?;
        let g = load_dose(Path::new(path))?;
        spacing.get_or_insert(g.spacing_mm());
        let occ = g.values().iter().map(|&v| v != 0.0).collect();
        masks.push(RoiMask::new(name, g.dims(), occ)?);
    }
    let b = encode(&masks)?.with_spacing(spacing.unwrap_or([1.0; 3]));
    save_volume(&Volume::from(b.clone()), out)?;
    print_table(cli, &roi_table(&b)?)?;
    Ok(Status::Ok)
}

fn decode_cmd(cli: &Cli, rois: &Path, name: Option<&str>, out: Option<&Path>) -> Result<Status> {
    let b = load_rois(rois)?;
    let Some(name) = name else {
        print_table(cli, &roi_table(&b)?)?;
        return Ok(Status::Ok);
    };
    let m = b.decode(name)?;
    if let Some(path) = out {
        let values = m.occupancy().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        save_volume(&Volume::from(DoseGrid::new(b.dims(), b.spacing_mm(), 1.0, values)?), path)?;
    }
    let entry = RoiEntry { name: name.to_string(), bit: b.bit_index(name)?, voxels: m.voxel_count() };
    print_table(cli, &[entry])?;
    Ok(Status::Ok)
}

// ------------------------------------------------------------------ optimize

#[derive(Serialize)]
struct OptimizeOutput {
    iterations: usize,
    stop: cdm_core::StopReason,
    l_total: f64,
    l_cdm: f64,
    l_mae: f64,
    ptv_margin: f64,
    checks: Vec<ConstraintCheck>,
}

fn optimize_cmd(cli: &Cli) -> Result<Status> {
    let Command::Optimize {
        gt, rois, template, loss, init, radius, init_dose, step, iters, tol, backtracking, clip, cap, out, trace,
    } = &cli.command
    else {
        unreachable!("dispatched on Optimize");
    };
    let template = load_template(template)?;
    let cfg = loss_config(template.clone(), loss)?;
    let (g, b) = (load_dose(gt)?, load_rois(rois)?);
    let rule = match init {
        InitKind::Blur => InitRule::BlurOfGt { radius_vox: *radius },
        InitKind::Uniform => InitRule::Uniform { dose_gy: *init_dose },
        InitKind::Zero => InitRule::Zero,
    };
    let d = OptimizerConfig::default();
    let opt = OptimizerConfig {
        step_size: step.unwrap_or(d.step_size),
        max_iterations: iters.unwrap_or(d.max_iterations),
        tolerance: tol.unwrap_or(d.tolerance),
        backtracking: *backtracking,
        max_voxel_step_gy: match clip {
            Some(c) if *c == 0.0 => None,
            Some(c) => Some(*c),
            None => d.max_voxel_step_gy,
        },
        dose_cap_gy: cap.or(d.dose_cap_gy),
        record_metrics: trace.is_some(),
        ..d
    };
    let res = optimize_dose(&rule.build(&g)?, &g, &b, &cfg, &opt)?;
    let (checks, margin) = ptv_margin(&res.final_dose, &b, &template)?;

    if let Some(path) = trace {
        let mut header: Vec<String> = ["iteration", "l_total", "l_cdm", "l_mae", "step"].map(String::from).to_vec();
        header.extend(res.metric_labels.iter().cloned());
        let rows: Vec<Vec<String>> = res
            .trace
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.iteration.to_string(),
                    r.l_total.to_string(),
                    r.l_cdm.to_string(),
                    r.l_mae.to_string(),
                    r.step.to_string(),
                ];
                row.extend(r.metrics.iter().map(f64::to_string));
                row
            })
            .collect();
        write_csv_records(path, &header, &rows)?;
    }
    save_volume(&Volume::from(res.final_dose.clone()), out)?;

    let last = res.trace.last();
    let output = OptimizeOutput {
        iterations: res.iterations,
        stop: res.stop,
        l_total: last.map_or(f64::NAN, |r| r.l_total),
        l_cdm: last.map_or(f64::NAN, |r| r.l_cdm),
        l_mae: last.map_or(f64::NAN, |r| r.l_mae),
        ptv_margin: margin,
        checks,
    };
    let failed = constraints_fail(&output.checks);
    if cli.json {
        print_json(&output)?;
    } else {
        println!("iterations {} ({:?})", output.iterations, output.stop);
        println!("l_total    {:.9}", output.l_total);
        println!("ptv margin {:.4}", output.ptv_margin);
        for c in output.checks.iter().filter(|c| c.kind == BoundKind::Constraint) {
            println!("{:<22} {:<14} {:>10.4} {}  {}", c.roi, c.metric, c.value, c.bound, opt_bool(Some(c.satisfied)));
        }
    }
    Ok(strict_status(cli, failed))
}

// ------------------------------------------------------------------ bench

#[derive(Serialize)]
struct BenchRow<'a> {
    scenario: &'a str,
    roi_count: usize,
    size: usize,
    repetitions: usize,
    median_ns: u128,
    min_ns: u128,
    max_ns: u128,
    bytes_moved: usize,
    peak_mask_bytes: usize,
    speedup: f64,
}

fn bench_row(r: &BenchReport, size: usize, speedup: f64) -> BenchRow<'_> {
    BenchRow {
        scenario: &r.scenario,
        roi_count: r.roi_count,
        size,
        repetitions: r.repetitions,
        median_ns: r.median_ns,
        min_ns: r.min_ns,
        max_ns: r.max_ns,
        bytes_moved: r.bytes_moved,
        peak_mask_bytes: r.peak_mask_bytes,
        speedup,
    }
}

#[derive(Serialize)]
struct BenchPair {
    roi_count: usize,
    speedup: f64,
    one_hot: BenchReport,
    bit_mask: BenchReport,
}

#[derive(Serialize)]
struct BenchOutput {
    transform: Vec<BenchPair>,
    memory: cdm_core::bench::MemoryReport,
}

fn bench_cmd(
    cli: &Cli,
    size: usize,
    max_rois: usize,
    reps: usize,
    threads: ThreadMode,
    seed: u64,
    csv: Option<&Path>,
) -> Result<Status> {
    let dims = Dims::cube(size);
    let t = VoxelPermutation::rotate(Plane::Xy, 1)
        .then(VoxelPermutation::flip(Axis::Z))
        .then(VoxelPermutation::translate([3, -2, 5]));
    let threads = match threads {
        ThreadMode::Single => Threads::Single,
        ThreadMode::Parallel => Threads::Parallel,
    };
    let mut counts: Vec<usize> = std::iter::successors(Some(1usize), |n| Some(n * 2)).take_while(|&n| n < max_rois).collect();
    counts.push(max_rois);
    let mut transform = Vec::new();
    for n in counts {
        info!("timing {n} ROIs");
        let pair = bench_transform(dims, n, &t, reps, threads, seed)?;
        transform.push(BenchPair { roi_count: n, speedup: transform_speedup(&pair), one_hot: pair.0, bit_mask: pair.1 });
    }
    let memory = bench_memory(dims, max_rois, seed)?;
    if let Some(path) = csv {
        let mut rows = Vec::new();
        for p in &transform {
            rows.push(bench_row(&p.one_hot, size, 1.0));
            rows.push(bench_row(&p.bit_mask, size, p.speedup));
        }
        rows.push(bench_row(&memory.one_hot, size, 1.0));
        rows.push(bench_row(&memory.bit_mask, size, memory.storage_ratio));
        write_csv(path, &rows)?;
    }
    let out = BenchOutput { transform, memory };
    if cli.json {
        print_json(&out)?;
    } else {
        for p in &out.transform {
            println!(
                "{:>2} ROIs  one-hot {:>10.3} ms  bit-mask {:>8.3} ms  speedup {:>6.2}x",
                p.roi_count,
                p.one_hot.median_ns as f64 / 1e6,
                p.bit_mask.median_ns as f64 / 1e6,
                p.speedup
            );
        }
        println!(
            "storage ratio {:.1}x, peak resident decoded masks {}",
            out.memory.storage_ratio, out.memory.peak_resident_masks
        );
    }
    Ok(Status::Ok)
}

// ------------------------------------------------------------------ phantom

#[derive(Serialize)]
struct PhantomOutput {
    gt: PathBuf,
    rois: PathBuf,
    template: PathBuf,
    roi_table: Vec<RoiEntry>,
}

fn phantom_cmd(cli: &Cli, dir: &Path, seed: u64) -> Result<Status> {
    let ph = make_phantom(&PhantomSpec::reference(), seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (gt, rois, template) = (dir.join("gt.json"), dir.join("rois.json"), dir.join("template.json"));
    save_volume(&Volume::from(ph.gt.clone()), &gt)?;
    save_volume(&Volume::from(ph.rois.clone()), &rois)?;
    write_atomic(&template, ph.template.to_json().as_bytes())?;
    let out = PhantomOutput { gt, rois, template, roi_table: roi_table(&ph.rois)? };
    if cli.json {
        print_json(&out)?;
    } else {
        println!("wrote {}, {} and {}", out.gt.display(), out.rois.display(), out.template.display());
        print_table(cli, &out.roi_table)?;
    }
    Ok(Status::Ok)
}
