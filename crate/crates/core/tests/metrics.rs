use pointmap_core::geom::DepthMap;
use pointmap_core::metrics::{depth_metrics, maa, DepthAlign, MetricReport};
use proptest::prelude::*;

fn brute_maa(errors: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for tau in 1..=30 {
        let mut hits = 0;
        for (r, t) in errors {
            if r.max(*t) < tau as f64 {
                hits += 1;
            }
        }
        total += hits as f64 / errors.len() as f64;
    }
    100.0 * total / 30.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn maa_matches_brute_force(errors in prop::collection::vec((0.0f64..45.0, 0.0f64..45.0), 1..40)) {
        prop_assert!((maa(&errors, 30) - brute_maa(&errors)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn median_alignment_ignores_rescale(vals in prop::collection::vec(0.5f64..10.0, 24), noise in prop::collection::vec(0.9f64..1.1, 24), s in 1e-3f64..1e3) {
        let gt = DepthMap::dense(6, 4, vals.clone()).unwrap();
        let pred = DepthMap::dense(6, 4, vals.iter().zip(&noise).map(|(v, n)| v * n).collect()).unwrap();
        let a = depth_metrics(&pred, &gt, DepthAlign::Median).unwrap();
        let b = depth_metrics(&pred.scaled(s), &gt, DepthAlign::Median).unwrap();
        prop_assert!((a.rel - b.rel).abs() < 1e-9);
        prop_assert_eq!(a.tau, b.tau);
    }

    #[test]
    fn report_json_round_trip(x in prop::array::uniform6(0.0f64..100.0)) {
        let r = MetricReport {
            label: "K1+K2".into(),
            depth_rel: x[0], depth_tau: x[1], focal_acc: x[2], rra_at: x[3], rta_at: x[4], maa30: x[5],
        };
        let s = serde_json::to_string(&r).unwrap();
        prop_assert_eq!(serde_json::from_str::<MetricReport>(&s).unwrap(), r);
    }
}

#[test]
fn report_keys_in_fixed_order() {
    let r = MetricReport { label: "none".into(), depth_rel: 1.0, depth_tau: 2.0, focal_acc: 3.0, rra_at: 4.0, rta_at: 5.0, maa30: 6.0 };
    let s = serde_json::to_string(&r).unwrap();
    let keys = ["label", "depth_rel", "depth_tau", "focal_acc", "rra_at", "rta_at", "maa30"];
    let pos: Vec<usize> = keys.iter().map(|k| s.find(&format!("\"{k}\"")).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}
