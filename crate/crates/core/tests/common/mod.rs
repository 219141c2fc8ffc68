//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use cdm_core::template::parse_template;
use cdm_core::PlanTemplate;

/// k-th largest (1-based) via a full descending sort.
pub fn sorted_kth(doses: &[f64], k: usize) -> f64 {
    let mut s = doses.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[k - 1]
}

pub fn count_at_least(doses: &[f64], t: f64) -> f64 {
    let mut c = 0usize;
    for &d in doses {
        if d >= t {
            c += 1;
        }
    }
    c as f64 / doses.len() as f64
}

/// Rank for "hottest fraction": smallest integer k with k >= r, by linear scan.
pub fn smallest_rank_at_least(r: f64, n: usize) -> usize {
    let mut k = 1;
    while (k as f64) < r - 1e-9 && k < n {
        k += 1;
    }
    k
}

/// Two-sided signed-rank p-value by enumerating every sign assignment.
pub fn wilcoxon_enumerated(diffs: &[f64]) -> Option<(f64, f64)> {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return None;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let p = (2.0 * (le.min(ge) as f64) / total).min(1.0);
    Some((observed, p))
}

pub fn template(prescriptions: &str, specs: &[&str]) -> PlanTemplate {
    parse_template(&format!(r#"{{"prescriptions": {{{prescriptions}}}, "specs": [{}]}}"#, specs.join(","))).unwrap()
}

pub fn spec(roi: &str, class: &str, metric: &str, bound: &str, weight: f64, alpha: Option<f64>) -> String {
    let alpha = alpha.map(|a| format!(r#", "alpha": {a}"#)).unwrap_or_default();
    format!(r#"{{"roi": "{roi}", "class": "{class}", "metric": {metric}, "aim": {bound}, "loss_weight": {weight}{alpha}}}"#)
}
