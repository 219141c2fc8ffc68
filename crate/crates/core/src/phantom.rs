//! Synthetic phantoms: spherical PTVs and OARs on a regular grid with an
//! additive, exponentially decaying reference dose.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitmask::{encode, BitMaskVolume, MAX_ROIS};
use crate::error::{Error, Result};
use crate::metrics::RoiSource;
use crate::scoring::{constraint_report, BoundKind};
use crate::surrogate::{select_alpha_from_cohort, DEFAULT_MARGIN_GY, DEFAULT_TOLERANCE};
use crate::template::{Bound, BoundOp, BoundUnit, LossWeights, MetricKind, MetricSpec, PlanTemplate, RoiClass};
use crate::volume::{Dims, DoseGrid, RoiMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtvDef {
    pub name: String,
    /// Voxel coordinates `[x, y, z]`.
    pub center: [f64; 3],
    pub radius_vox: f64,
    pub prescription_gy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OarDef {
    pub name: String,
    pub center: [f64; 3],
    pub radius_vox: f64,
    pub metric: MetricKind,
    pub limit_gy: f64,
    /// Mandatory constraint rather than an aim.
    pub constraint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub ptvs: Vec<PtvDef>,
    pub oars: Vec<OarDef>,
    /// Falloff length outside each PTV, voxels.
    pub decay_vox: f64,
    /// Uniform noise amplitude added to every voxel, Gy.
    pub noise_gy: f64,
    /// Stored values are `dose / unit_scale`.
    pub unit_scale: f64,
    pub margin_m: f64,
    pub tolerance_eps: f64,
}

impl PhantomSpec {
    /// 48³ grid at 2 mm with PTVs at 70 and 54.25 Gy and three OARs, stored
    /// normalized by 70 Gy.
    pub fn reference() -> Self {
        let oar = |name: &str, center, radius_vox, metric, limit_gy, constraint| OarDef {
            name: name.into(),
            center,
            radius_vox,
            metric,
            limit_gy,
            constraint,
        };
        PhantomSpec {
            dims: [48, 48, 48],
            spacing_mm: [2.0; 3],
            ptvs: vec![
                PtvDef {
                    name: "PTV_70".into(),
                    center: [16.0, 24.0, 24.0],
                    radius_vox: 6.0,
                    prescription_gy: 70.0,
                },
                PtvDef {
                    name: "PTV_54.25".into(),
                    center: [33.0, 24.0, 24.0],
                    radius_vox: 5.0,
                    prescription_gy: 54.25,
                },
            ],
            oars: vec![
                oar("SpinalCord", [24.0, 38.0, 24.0], 3.0, MetricKind::DHottestCc(0.03), 50.0, true),
                oar("Parotid_L", [10.0, 24.0, 35.0], 3.0, MetricKind::DMean, 26.0, false),
                oar("Brainstem", [24.0, 24.0, 10.0], 3.0, MetricKind::DHottestCc(0.03), 54.0, true),
            ],
            decay_vox: 2.0,
            noise_gy: 0.5,
            unit_scale: 70.0,
            margin_m: DEFAULT_MARGIN_GY,
            tolerance_eps: DEFAULT_TOLERANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = Dims(self.dims);
        dims.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.ptvs.is_empty() {
            return bad("phantom needs at least one PTV".into());
        }
        if self.ptvs.len() + self.oars.len() > MAX_ROIS {
            return Err(Error::TooManyRois {
                count: self.ptvs.len() + self.oars.len(),
            });
        }
        if !(self.decay_vox > 0.0) || !(self.noise_gy >= 0.0) || !(self.unit_scale > 0.0) {
            return bad("decay and unit scale must be positive, noise nonnegative".into());
        }
        let mut names: Vec<&str> = Vec::new();
        let shapes = self
            .ptvs
            .iter()
            .map(|p| (&p.name, p.center, p.radius_vox))
            .chain(self.oars.iter().map(|o| (&o.name, o.center, o.radius_vox)));
        for (name, c, r) in shapes {
            if names.contains(&name.as_str()) {
                return Err(Error::DuplicateRoi(name.clone()));
            }
            names.push(name);
            if !(r > 0.0) {
                return bad(format!("{name}: radius must be positive"));
            }
            for a in 0..3 {
                if c[a] - r < 0.0 || c[a] + r > (self.dims[a] - 1) as f64 {
                    return bad(format!("{name} does not fit inside the grid"));
                }
            }
        }
        for p in &self.ptvs {
            if !(p.prescription_gy.is_finite() && p.prescription_gy > 0.0) {
                return bad(format!("{}: prescription must be positive", p.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub gt: DoseGrid,
    pub rois: BitMaskVolume,
    pub template: PlanTemplate,
}

fn distance(x: usize, y: usize, z: usize, c: [f64; 3]) -> f64 {
    let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn sphere(name: &str, dims: Dims, c: [f64; 3], r: f64) -> RoiMask {
    RoiMask::from_fn(name, dims, |x, y, z| distance(x, y, z, c) <= r)
}

fn bound(op: BoundOp, value: f64, unit: BoundUnit) -> Option<Bound> {
    Some(Bound { op, value, unit })
}

/// Builds the reference dose, masks and template; deterministic in `seed`.
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let dims = Dims(spec.dims);

    let mut masks: Vec<RoiMask> = spec
        .ptvs
        .iter()
        .map(|p| sphere(&p.name, dims, p.center, p.radius_vox))
        .collect();
    masks.extend(spec.oars.iter().map(|o| sphere(&o.name, dims, o.center, o.radius_vox)));
    if let Some(m) = masks.iter().find(|m| m.voxel_count() == 0) {
        return Err(Error::EmptyRoi(m.name.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let base: f64 = spec
                .ptvs
                .iter()
                .map(|p| {
                    let outside = distance(x, y, z, p.center) - p.radius_vox;
                    if outside <= 0.0 {
                        p.prescription_gy
                    } else {
                        p.prescription_gy * (-outside / spec.decay_vox).exp()
                    }
                })
                .sum();
            let noise = if spec.noise_gy > 0.0 {
                rng.random_range(0.0..spec.noise_gy)
            } else {
                0.0
            };
            (base + noise) / spec.unit_scale
        })
        .collect();
    let gt = DoseGrid::new(dims, spec.spacing_mm, spec.unit_scale, values)?;
    let rois = encode(&masks)?.with_spacing(spec.spacing_mm);

    let hottest = spec
        .ptvs
        .iter()
        .max_by(|a, b| a.prescription_gy.total_cmp(&b.prescription_gy))
        .map(|p| p.name.clone());
    let mut prescriptions = BTreeMap::new();
    let mut specs = Vec::new();
    for (p, mask) in spec.ptvs.iter().zip(&masks) {
        prescriptions.insert(p.name.clone(), p.prescription_gy);
        let threshold = 0.95 * p.prescription_gy;
        let sel = select_alpha_from_cohort(
            &[(&gt, RoiSource::Mask(mask))],
            threshold,
            spec.margin_m,
            spec.tolerance_eps,
        )?;
        let ptv = |metric, aim, constraint, alpha| MetricSpec {
            roi: p.name.clone(),
            class: RoiClass::Ptv,
            metric,
            aim,
            constraint,
            loss_weight: 1.0,
            alpha,
        };
        specs.push(ptv(
            MetricKind::VPctOfPrescription(95.0),
            None,
            bound(BoundOp::Ge, 98.0, BoundUnit::PctVolume),
            Some(sel.alpha_min),
        ));
        if Some(&p.name) == hottest.as_ref() {
            specs.push(ptv(
                MetricKind::DHottestCc(0.03),
                bound(BoundOp::Le, 107.0, BoundUnit::PctPresc),
                bound(BoundOp::Le, 110.0, BoundUnit::PctPresc),
                None,
            ));
        }
        specs.push(ptv(
            MetricKind::DMean,
            bound(BoundOp::Le, 102.0, BoundUnit::PctPresc),
            None,
            None,
        ));
    }
    for o in &spec.oars {
        let b = bound(BoundOp::Le, o.limit_gy, BoundUnit::Gy);
        let (aim, constraint) = if o.constraint { (None, b) } else { (b, None) };
        specs.push(MetricSpec {
            roi: o.name.clone(),
            class: RoiClass::Oar,
            metric: o.metric,
            aim,
            constraint,
            loss_weight: 0.1,
            alpha: None,
        });
    }
    let template = PlanTemplate::new(prescriptions, LossWeights::default(), specs)?;

    for c in constraint_report(&gt, &rois, &template)? {
        if c.kind == BoundKind::Constraint && !c.satisfied {
            return Err(Error::PhantomInfeasible(format!(
                "{} {} = {:.4} violates {}",
                c.roi, c.metric, c.value, c.bound
            )));
        }
    }
    Ok(Phantom { gt, rois, template })
}
