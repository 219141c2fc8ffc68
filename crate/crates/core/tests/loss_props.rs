mod common;

use cdm_core::loss::{cdm_loss_values, mae_loss_values};
use cdm_core::{encode, total_loss_values, BitMaskVolume, Dims, DoseGrid, LossConfig, RoiMask};
use common::{spec, template};
use proptest::prelude::*;

const DIMS: Dims = Dims([6, 5, 4]);

fn config(lambda_mae: f64, lambda_cdm: f64) -> LossConfig {
    let le = r#"{"op": "<=", "value": 100.0, "unit": "gy"}"#;
    let specs = [
        spec("A", "ptv", r#"{"kind": "V_pct", "param": 95.0}"#, r#"{"op": ">=", "value": 98.0, "unit": "pct_volume"}"#, 1.0, Some(2.0)),
        spec("A", "ptv", r#"{"kind": "D_cc", "param": 0.03}"#, le, 1.0, None),
        spec("A", "ptv", r#"{"kind": "D_mean"}"#, le, 1.0, None),
        spec("B", "oar", r#"{"kind": "D_max"}"#, le, 0.1, None),
        spec("B", "oar", r#"{"kind": "D_pct", "param": 50.0}"#, le, 0.1, None),
        spec("C", "oar", r#"{"kind": "D_min"}"#, le, 0.1, None),
        spec("C", "oar", r#"{"kind": "V_gy", "param": 20.0}"#, r#"{"op": "<=", "value": 50.0, "unit": "pct_volume"}"#, 0.1, Some(1.5)),
    ];
    let refs: Vec<&str> = specs.iter().map(String::as_str).collect();
    let t = template(r#""A": 40.0"#, &refs);
    LossConfig::from_template(t).unwrap().with_lambdas(lambda_mae, lambda_cdm).unwrap()
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, BitMaskVolume)> {
    let n = DIMS.len();
    (
        proptest::collection::vec(0.0f64..60.0, n),
        proptest::collection::vec(0.0f64..60.0, n),
        proptest::collection::vec(0u8..8, n),
    )
        .prop_map(move |(p, g, bits)| {
            // guarantee every ROI is non-empty
            let mask = |name: &str, bit: u8| {
                let mut occ: Vec<bool> = bits.iter().map(|b| b >> bit & 1 == 1).collect();
                occ[bit as usize] = true;
                RoiMask::new(name, DIMS, occ).unwrap()
            };
            let rois = encode(&[mask("A", 0), mask("B", 1), mask("C", 2)]).unwrap();
            (p, g, rois)
        })
}

fn grid(v: Vec<f64>) -> DoseGrid {
    DoseGrid::new(DIMS, [2.0; 3], 1.0, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn components_are_nonnegative((p, g, rois) in case(), l1 in 0.0f64..3.0, l2 in 0.0f64..3.0) {
        let gt = grid(g);
        let r = total_loss_values(&p, &gt, &rois, &config(l1, l2), false).unwrap();
        prop_assert!(r.l_mae >= 0.0 && r.l_cdm >= 0.0 && r.l_total >= 0.0);
        prop_assert!(r.terms.iter().all(|t| t.weighted_abs_diff >= 0.0));
    }

    #[test]
    fn zero_iff_metrics_agree((p, g, rois) in case()) {
        let gt = grid(g.clone());
        let cfg = config(1.0, 0.5);
        let same = cdm_loss_values(&g, &gt, &rois, &cfg, false).unwrap();
        prop_assert_eq!(same.value, 0.0);
        let r = cdm_loss_values(&p, &gt, &rois, &cfg, false).unwrap();
        let all_agree = r.terms.iter().all(|t| t.pred == t.gt);
        prop_assert_eq!(r.value == 0.0, all_agree);
    }

    #[test]
    fn cdm_gradient_lives_on_roi_union((p, g, rois) in case()) {
        let gt = grid(g);
        let r = cdm_loss_values(&p, &gt, &rois, &config(1.0, 0.5), true).unwrap();
        let grad = r.gradient.unwrap();
        let union: Vec<bool> = (0..DIMS.len())
            .map(|i| rois.decode_all().iter().any(|m| m.contains(i)))
            .collect();
        for (i, gi) in grad.iter().enumerate() {
            if !union[i] {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn total_gradient_is_exact_combination((p, g, rois) in case(), l1 in 0.0f64..3.0, l2 in 0.0f64..3.0) {
        let gt = grid(g);
        let cfg = config(l1, l2);
        let total = total_loss_values(&p, &gt, &rois, &cfg, true).unwrap();
        let mae = mae_loss_values(&p, &gt, true).unwrap();
        let cdm = cdm_loss_values(&p, &gt, &rois, &cfg, true).unwrap();
        let (a, b) = (mae.gradient.unwrap(), cdm.gradient.unwrap());
        for (i, t) in total.gradient.unwrap().iter().enumerate() {
            prop_assert_eq!(*t, l1 * a[i] + l2 * b[i]);
        }
        prop_assert_eq!(total.l_total, l1 * mae.value + l2 * cdm.value);
    }

    #[test]
    fn at_most_one_mask_resident((p, g, rois) in case()) {
        let gt = grid(g);
        rois.residency().reset();
        total_loss_values(&p, &gt, &rois, &config(1.0, 0.5), true).unwrap();
        prop_assert_eq!(rois.residency().peak(), 1);
        prop_assert_eq!(rois.residency().live(), 0);
    }

    #[test]
    fn repeated_calls_are_identical((p, g, rois) in case()) {
        let gt = grid(g);
        let cfg = config(1.0, 0.5);
        let a = total_loss_values(&p, &gt, &rois, &cfg, true).unwrap();
        let b = total_loss_values(&p, &gt, &rois, &cfg, true).unwrap();
        prop_assert_eq!(a, b);
    }
}
