use nalgebra::Vector3;
use pointmap_core::geom::{ConfidenceMap, PointMap};
use pointmap_core::loss::{
    confidence_loss, regression_loss, total_loss, total_loss_with_grad, znorm, LossConfig, Residuals,
};
use pointmap_core::PairPrediction;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: usize = 5;
const H: usize = 4;

fn random_map(rng: &mut ChaCha8Rng, subject: usize, frame: usize, holes: bool) -> PointMap {
    let pts = (0..W * H)
        .map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(1.0..5.0)))
        .collect();
    let valid = (0..W * H).map(|_| !holes || rng.gen_bool(0.8)).collect();
    PointMap::new(W, H, pts, valid, subject, frame).unwrap()
}

fn random_conf(rng: &mut ChaCha8Rng) -> ConfidenceMap {
    ConfidenceMap::new(W, H, (0..W * H).map(|_| rng.gen_range(1.05..4.0)).collect()).unwrap()
}

fn random_case(seed: u64) -> (PairPrediction, [PointMap; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = PairPrediction::new(
        random_map(&mut rng, 0, 0, false),
        random_map(&mut rng, 1, 0, false),
        random_map(&mut rng, 1, 1, false),
        random_conf(&mut rng),
        random_conf(&mut rng),
        random_conf(&mut rng),
    )
    .unwrap();
    let gt = [
        random_map(&mut rng, 0, 0, true),
        random_map(&mut rng, 1, 0, true),
        random_map(&mut rng, 1, 1, true),
    ];
    (pred, gt)
}

/// Direct transcription of the objective with naive summation.
fn brute_total(pred: &PairPrediction, gt: &[PointMap; 3], alpha: f64, beta: f64) -> f64 {
    let mean_norm = |maps: &[(&PointMap, &PointMap)]| {
        let mut s = 0.0;
        let mut n = 0.0;
        for (m, mask) in maps {
            for k in 0..m.points.len() {
                if mask.valid[k] {
                    s += m.points[k].norm();
                    n += 1.0;
                }
            }
        }
        s / n
    };
    let z1 = mean_norm(&[(&pred.x11, &gt[0]), (&pred.x21, &gt[1])]);
    let zb1 = mean_norm(&[(&gt[0], &gt[0]), (&gt[1], &gt[1])]);
    let z2 = mean_norm(&[(&pred.x22, &gt[2])]);
    let zb2 = mean_norm(&[(&gt[2], &gt[2])]);
    let term = |p: &PointMap, g: &PointMap, c: &ConfidenceMap, z: f64, zb: f64| {
        let mut s = 0.0;
        for k in 0..p.points.len() {
            if g.valid[k] {
                let l = (p.points[k] / z - g.points[k] / zb).norm();
                s += c.values[k] * l - alpha * c.values[k].ln();
            }
        }
        s
    };
    term(&pred.x11, &gt[0], &pred.c11, z1, zb1)
        + term(&pred.x21, &gt[1], &pred.c21, z1, zb1)
        + beta * term(&pred.x22, &gt[2], &pred.c22, z2, zb2)
}

#[test]
fn total_matches_brute_force() {
    for seed in 0..20 {
        let (pred, gt) = random_case(seed);
        let cfg = LossConfig::default();
        let b = total_loss(&pred, [&gt[0], &gt[1], &gt[2]], &cfg).unwrap();
        let want = brute_total(&pred, &gt, 0.2, 1.0);
        assert!((b.total - want).abs() <= 1e-10 * want.abs().max(1.0));
        assert_eq!(b.total, b.l11 + b.l21 + b.beta * b.l22);
    }
}

#[test]
fn perfect_prediction_unit_confidence_is_zero() {
    let (_, gt) = random_case(3);
    let pred = PairPrediction::from_points(gt[0].clone(), gt[1].clone(), gt[2].clone()).unwrap();
    let b = total_loss(&pred, [&gt[0], &gt[1], &gt[2]], &LossConfig::default()).unwrap();
    assert_eq!(b.total, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_invariance(seed in any::<u64>(), s in 1e-3f64..1e3) {
        let (pred, gt) = random_case(seed);
        let cfg = LossConfig::default();
        let a = total_loss(&pred, [&gt[0], &gt[1], &gt[2]], &cfg).unwrap().total;
        let scaled: Vec<PointMap> = gt.iter().map(|g| g.scaled(s)).collect();
        let b = total_loss(&pred, [&scaled[0], &scaled[1], &scaled[2]], &cfg).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
    }

    #[test]
    fn znorm_homogeneous(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_map(&mut rng, 0, 0, true);
        if m.valid_count() > 0 {
            let a = znorm(&[&m]).unwrap();
            let b = znorm(&[&m.scaled(7.0)]).unwrap();
            prop_assert!((b - 7.0 * a).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn regression_matches_formula(seed in any::<u64>(), zp in 0.1f64..10.0, zg in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_map(&mut rng, 0, 0, false);
        let g = random_map(&mut rng, 0, 0, true);
        let r = regression_loss(&p, &g, zp, zg).unwrap();
        for k in 0..W * H {
            if g.valid[k] {
                let want = ((p.points[k].x / zp - g.points[k].x / zg).powi(2)
                    + (p.points[k].y / zp - g.points[k].y / zg).powi(2)
                    + (p.points[k].z / zp - g.points[k].z / zg).powi(2)).sqrt();
                prop_assert!((r.values[k] - want).abs() <= 1e-12);
            }
        }
    }
}

/// Kahan-compensated sum of the confidence objective.
fn compensated_conf_loss(l: &[f64], c: &[f64], alpha: f64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (li, ci) in l.iter().zip(c) {
        let y = (ci * li - alpha * ci.ln()) - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[test]
fn confidence_loss_matches_compensated_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = 4096;
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..50.0)).collect();
        let res = Residuals { width: n, height: 1, values: l.clone(), valid: vec![true; n] };
        let got = confidence_loss(&res, &ConfidenceMap::new(n, 1, c.clone()).unwrap(), 0.2);
        let want = compensated_conf_loss(&l, &c, 0.2);
        assert!((got - want).abs() <= 1e-10 * want.abs());
    }
}

#[test]
fn confidence_optimum_by_dense_scan() {
    let alpha = 0.2;
    for &l in &[0.01, 0.05, 0.1, 0.19, 0.25, 1.0] {
        let f = |c: f64| c * l - alpha * c.ln();
        let (mut best_c, mut best) = (1.0, f(1.0));
        let mut c = 1.0;
        while c < 40.0 {
            if f(c) < best {
                best = f(c);
                best_c = c;
            }
            c += 1e-4;
        }
        let expect = (alpha / l).max(1.0);
        assert!((best_c - expect).abs() < 2e-4, "l={l}: scan {best_c} vs {expect}");
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for (seed, mean_reduce, beta) in [(1, false, 1.0), (2, true, 1.0), (3, false, 0.5)] {
        let (pred, gt) = random_case(seed);
        let cfg = LossConfig { mean_reduce, beta, ..Default::default() };
        let gts = [&gt[0], &gt[1], &gt[2]];
        let (_, grad) = total_loss_with_grad(&pred, gts, &cfg).unwrap();
        let h = 1e-5;
        let eval = |p: &PairPrediction| total_loss(p, gts, &cfg).unwrap().total;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "analytic {analytic} fd {fd}");
        };
        for k in 0..W * H {
            for a in 0..3 {
                for which in 0..3 {
                    let mut p1 = pred.clone();
                    let mut p2 = pred.clone();
                    let (m1, m2, g) = match which {
                        0 => (&mut p1.x11, &mut p2.x11, &grad.x11),
                        1 => (&mut p1.x21, &mut p2.x21, &grad.x21),
                        _ => (&mut p1.x22, &mut p2.x22, &grad.x22),
                    };
                    m1.points[k][a] += h;
                    m2.points[k][a] -= h;
                    check(g[k][a], eval(&p1), eval(&p2));
                }
            }
            for which in 0..3 {
                let mut p1 = pred.clone();
                let mut p2 = pred.clone();
                let (m1, m2, g) = match which {
                    0 => (&mut p1.c11, &mut p2.c11, &grad.c11),
                    1 => (&mut p1.c21, &mut p2.c21, &grad.c21),
                    _ => (&mut p1.c22, &mut p2.c22, &grad.c22),
                };
                m1.values[k] += h;
                m2.values[k] -= h;
                check(g[k], eval(&p1), eval(&p2));
            }
        }
    }
}
