//! Clinical plan-evaluation template: prescriptions, per-ROI metric specs
//! with aims and constraints, and the loss weights that drive the CDM loss.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bitmask::MAX_ROIS;
use crate::error::{Error, Result};

/// Which dose statistic a spec asks for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetric", into = "RawMetric")]
pub enum MetricKind {
    DMean,
    DMax,
    DMin,
    /// Minimum dose to the hottest `x` percent of the ROI.
    DQuantilePct(f64),
    /// Minimum dose to the hottest `x` cc of the ROI.
    DHottestCc(f64),
    /// Fraction of the ROI receiving at least `x` percent of prescription.
    VPctOfPrescription(f64),
    /// Fraction of the ROI receiving at least `x` Gy.
    VAbsGy(f64),
}

impl MetricKind {
    pub fn is_volume_metric(&self) -> bool {
        matches!(self, MetricKind::VPctOfPrescription(_) | MetricKind::VAbsGy(_))
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            MetricKind::DMean | MetricKind::DMax | MetricKind::DMin => None,
            MetricKind::DQuantilePct(x)
            | MetricKind::DHottestCc(x)
            | MetricKind::VPctOfPrescription(x)
            | MetricKind::VAbsGy(x) => Some(x),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            MetricKind::DMean => "D_mean",
            MetricKind::DMax => "D_max",
            MetricKind::DMin => "D_min",
            MetricKind::DQuantilePct(_) => "D_pct",
            MetricKind::DHottestCc(_) => "D_cc",
            MetricKind::VPctOfPrescription(_) => "V_pct",
            MetricKind::VAbsGy(_) => "V_gy",
        }
    }

    fn same_request(&self, other: &MetricKind) -> bool {
        self.tag() == other.tag() && self.param() == other.param()
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::DMean => write!(f, "D_mean"),
            MetricKind::DMax => write!(f, "D_max"),
            MetricKind::DMin => write!(f, "D_min"),
            MetricKind::DQuantilePct(x) => write!(f, "D_{x}%"),
            MetricKind::DHottestCc(x) => write!(f, "D_{x}cc"),
            MetricKind::VPctOfPrescription(x) => write!(f, "V_{x}%"),
            MetricKind::VAbsGy(x) => write!(f, "V_{x}Gy"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    param: Option<f64>,
}

impl TryFrom<RawMetric> for MetricKind {
    type Error = String;

    fn try_from(raw: RawMetric) -> std::result::Result<Self, String> {
        let need = |p: Option<f64>| p.ok_or_else(|| format!("metric {} requires a param", raw.kind));
        let none = |p: Option<f64>, k: MetricKind| match p {
            None => Ok(k),
            Some(_) => Err(format!("metric {} takes no param", raw.kind)),
        };
        let kind = match raw.kind.as_str() {
            "D_mean" => none(raw.param, MetricKind::DMean)?,
            "D_max" => none(raw.param, MetricKind::DMax)?,
            "D_min" => none(raw.param, MetricKind::DMin)?,
            "D_pct" => MetricKind::DQuantilePct(need(raw.param)?),
            "D_cc" => MetricKind::DHottestCc(need(raw.param)?),
            "V_pct" => MetricKind::VPctOfPrescription(need(raw.param)?),
            "V_gy" => MetricKind::VAbsGy(need(raw.param)?),
            other => return Err(format!("unknown metric kind {other:?}")),
        };
        let ok = match kind {
            MetricKind::DQuantilePct(x) => x > 0.0 && x <= 100.0,
            MetricKind::DHottestCc(x) | MetricKind::VPctOfPrescription(x) | MetricKind::VAbsGy(x) => {
                x.is_finite() && x > 0.0
            }
            _ => true,
        };
        if !ok {
            return Err(format!("parameter out of range for {kind}"));
        }
        Ok(kind)
    }
}

impl From<MetricKind> for RawMetric {
    fn from(k: MetricKind) -> Self {
        RawMetric {
            kind: k.tag().to_string(),
            param: k.param(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundOp {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundUnit {
    /// Percent of the owning PTV's prescription dose.
    PctPresc,
    Gy,
    /// Percent of the ROI volume.
    PctVolume,
}

/// An aim or constraint. Comparisons are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    pub op: BoundOp,
    pub value: f64,
    pub unit: BoundUnit,
}

impl Bound {
    pub fn is_satisfied(&self, value: f64) -> bool {
        match self.op {
            BoundOp::Le => value <= self.value,
            BoundOp::Ge => value >= self.value,
        }
    }

    /// Signed slack, positive when satisfied.
    pub fn slack(&self, value: f64) -> f64 {
        match self.op {
            BoundOp::Le => self.value - value,
            BoundOp::Ge => value - self.value,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            BoundOp::Le => "<=",
            BoundOp::Ge => ">=",
        };
        let unit = match self.unit {
            BoundUnit::PctPresc => "% of prescription",
            BoundUnit::Gy => " Gy",
            BoundUnit::PctVolume => "% volume",
        };
        write!(f, "{op} {}{unit}", self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiClass {
    Ptv,
    Oar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub roi: String,
    pub class: RoiClass,
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aim: Option<Bound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Bound>,
    pub loss_weight: f64,
    /// Sigmoid slope in 1/Gy for the V-metric surrogate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl MetricSpec {
    pub fn label(&self) -> String {
        format!("{} {}", self.roi, self.metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the voxel-wise MAE term.
    pub mae: f64,
    /// Weight of the clinical metric term.
    pub cdm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mae: 1.0, cdm: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanTemplate {
    pub prescriptions: BTreeMap<String, f64>,
    #[serde(default)]
    pub lambda: LossWeights,
    pub specs: Vec<MetricSpec>,
}

const PAIRED: &str = "(L/R)";

impl PlanTemplate {
    /// Builds and validates a template, expanding paired-organ shorthand.
    pub fn new(
        prescriptions: BTreeMap<String, f64>,
        lambda: LossWeights,
        specs: Vec<MetricSpec>,
    ) -> Result<Self> {
        let mut t = PlanTemplate {
            prescriptions,
            lambda,
            specs,
        };
        t.expand_pairs();
        t.validate()?;
        Ok(t)
    }

    fn expand_pairs(&mut self) {
        let mut out = Vec::with_capacity(self.specs.len());
        for spec in self.specs.drain(..) {
            if spec.roi.contains(PAIRED) {
                for side in ["L", "R"] {
                    let mut s = spec.clone();
                    s.roi = spec.roi.replace(PAIRED, side);
                    out.push(s);
                }
            } else {
                out.push(spec);
            }
        }
        self.specs = out;
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Template(m));
        for (name, &d) in &self.prescriptions {
            if !(d.is_finite() && d > 0.0) {
                return bad(format!("prescription for {name} must be positive, got {d}"));
            }
        }
        for (what, v) in [("mae", self.lambda.mae), ("cdm", self.lambda.cdm)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("lambda.{what} must be nonnegative, got {v}"));
            }
        }
        let mut class_of: BTreeMap<&str, RoiClass> = BTreeMap::new();
        for (i, s) in self.specs.iter().enumerate() {
            let label = s.label();
            if s.roi.is_empty() {
                return bad(format!("spec {i} has an empty roi name"));
            }
            if let Some(prev) = class_of.insert(&s.roi, s.class) {
                if prev != s.class {
                    return bad(format!("ROI {} is listed as both ptv and oar", s.roi));
                }
            }
            if s.aim.is_none() && s.constraint.is_none() {
                return bad(format!("{label}: needs an aim or a constraint"));
            }
            if !(s.loss_weight.is_finite() && s.loss_weight >= 0.0) {
                return bad(format!("{label}: loss_weight must be nonnegative"));
            }
            if let Some(a) = s.alpha {
                if !s.metric.is_volume_metric() {
                    return bad(format!("{label}: alpha only applies to V-metrics"));
                }
                if !(a.is_finite() && a > 0.0) {
                    return bad(format!("{label}: alpha must be positive"));
                }
            }
            let has_presc = self.prescriptions.contains_key(&s.roi);
            if matches!(s.metric, MetricKind::VPctOfPrescription(_)) && !has_presc {
                return Err(Error::MissingPrescription(s.roi.clone()));
            }
            for b in s.aim.iter().chain(s.constraint.iter()) {
                if !b.value.is_finite() {
                    return bad(format!("{label}: bound value must be finite"));
                }
                let unit_ok = match b.unit {
                    BoundUnit::PctVolume => s.metric.is_volume_metric(),
                    BoundUnit::Gy | BoundUnit::PctPresc => !s.metric.is_volume_metric(),
                };
                if !unit_ok {
                    return bad(format!("{label}: bound unit {:?} does not fit the metric", b.unit));
                }
                if b.unit == BoundUnit::PctPresc && !has_presc {
                    return Err(Error::MissingPrescription(s.roi.clone()));
                }
            }
            if self.specs[..i]
                .iter()
                .any(|o| o.roi == s.roi && o.metric.same_request(&s.metric))
            {
                return bad(format!("duplicate spec {label}"));
            }
        }
        let rois = self.roi_names().len();
        if rois > MAX_ROIS {
            return Err(Error::TooManyRois { count: rois });
        }
        Ok(())
    }

    /// Distinct ROI names in order of first appearance; this is also the
    /// bit assignment order for encoding.
    pub fn roi_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.specs {
            if !out.contains(&s.roi) {
                out.push(s.roi.clone());
            }
        }
        out
    }

    pub fn ptv_set(&self) -> Vec<String> {
        self.rois_of(RoiClass::Ptv)
    }

    pub fn oar_set(&self) -> Vec<String> {
        self.rois_of(RoiClass::Oar)
    }

    fn rois_of(&self, class: RoiClass) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.specs.iter().filter(|s| s.class == class) {
            if !out.contains(&s.roi) {
                out.push(s.roi.clone());
            }
        }
        out
    }

    /// Spec indices grouped by ROI, in first-appearance order.
    pub fn specs_by_roi(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in self.specs.iter().enumerate() {
            match groups.iter_mut().find(|(r, _)| *r == s.roi) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((s.roi.clone(), vec![i])),
            }
        }
        groups
    }

    pub fn prescription(&self, roi: &str) -> Result<f64> {
        self.prescriptions
            .get(roi)
            .copied()
            .ok_or_else(|| Error::MissingPrescription(roi.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }
}

pub fn parse_template(json_text: &str) -> Result<PlanTemplate> {
    let raw: PlanTemplate =
        serde_json::from_str(json_text).map_err(|e| Error::Template(e.to_string()))?;
    PlanTemplate::new(raw.prescriptions, raw.lambda, raw.specs)
}

/// The head-and-neck evaluation template with default weights
/// (PTV metrics 1.0, OAR metrics 0.1, lambda 1 / 0.5) and the published
/// surrogate slopes for both PTV V95 metrics.
pub fn default_paper_template() -> PlanTemplate {
    parse_template(include_str!("default_template.json")).expect("bundled template is valid")
}
