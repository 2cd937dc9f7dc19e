use nalgebra::Vector3;
use pointmap_core::geom::{unproject, CameraIntrinsics, ConfidenceMap, DepthMap, PointMap};
use pointmap_core::stitch::{blend, resolve_scales, schedule_crops, BlendMode, CropSpec, TilePrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle(w: usize, h: usize) -> (CameraIntrinsics, PointMap) {
    let k = CameraIntrinsics::centered(0.9 * w as f64, w, h).unwrap();
    let d = DepthMap::dense(
        w,
        h,
        (0..w * h)
            .map(|i| 3.0 + 0.5 * ((i % w) as f64 * 0.05).sin() + 0.3 * ((i / w) as f64 * 0.07).cos())
            .collect(),
    )
    .unwrap();
    (k, unproject(&d, &k, 0).unwrap())
}

fn cut_tile(c: &CropSpec, pm: &PointMap, scale: f64) -> TilePrediction {
    let pts = c.cut(&pm.points, pm.width).into_iter().map(|p| p * scale).collect();
    let valid = c.cut(&pm.valid, pm.width);
    let tile = PointMap::new(c.w, c.h, pts, valid, 0, 0).unwrap();
    TilePrediction::new(*c, tile, ConfidenceMap::ones(c.w, c.h)).unwrap()
}

fn check_schedule(pw: usize, ph: usize, tw: usize, th: usize, ov: usize) {
    let k = CameraIntrinsics::centered(100.0, pw, ph).unwrap();
    let crops = schedule_crops(&k, (tw, th), ov).unwrap();
    let mut cover = vec![0u32; pw * ph];
    for c in &crops {
        assert!(c.x0 + c.w <= pw && c.y0 + c.h <= ph);
        for y in c.y0..c.y0 + c.h {
            for x in c.x0..c.x0 + c.w {
                cover[y * pw + x] += 1;
            }
        }
    }
    assert!(cover.iter().all(|&n| n >= 1), "uncovered pixel for {pw}x{ph} {tw}x{th} {ov}");
    // Row-major ordering and neighbour overlap.
    let xs: Vec<usize> = crops.iter().filter(|c| c.y0 == crops[0].y0).map(|c| c.x0).collect();
    let ys: Vec<usize> = crops.iter().filter(|c| c.x0 == crops[0].x0).map(|c| c.y0).collect();
    assert_eq!(xs.len() * ys.len(), crops.len());
    for w in xs.windows(2) {
        assert!(w[0] < w[1] && w[0] + tw >= w[1] + ov);
    }
    for w in ys.windows(2) {
        assert!(w[0] < w[1] && w[0] + th >= w[1] + ov);
    }
    assert_eq!(*xs.last().unwrap() + tw, pw);
    assert_eq!(*ys.last().unwrap() + th, ph);
}

#[test]
fn wide_parent_example() {
    check_schedule(1024, 512, 512, 512, 64);
    let k = CameraIntrinsics::centered(500.0, 1024, 512).unwrap();
    let xs: Vec<usize> = schedule_crops(&k, (512, 512), 64).unwrap().iter().map(|c| c.x0).collect();
    assert_eq!(xs.len(), 3);
    assert_eq!((xs[0], xs[2]), (0, 512));
    assert!(xs[1] <= 448);
}

#[test]
fn coverage_on_random_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let pw = rng.gen_range(8..200);
        let ph = rng.gen_range(8..200);
        let tw = rng.gen_range(4..=pw);
        let th = rng.gen_range(4..=ph);
        let ov = rng.gen_range(0..tw.min(th));
        check_schedule(pw, ph, tw, th, ov);
    }
}

#[test]
fn four_tile_end_to_end() {
    let (k, full) = oracle(96, 64);
    let crops = schedule_crops(&k, (56, 40), 12).unwrap();
    assert_eq!(crops.len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tiles: Vec<_> = crops.iter().map(|c| cut_tile(c, &full, rng.gen_range(0.2..5.0))).collect();
    let scales = resolve_scales(&tiles, 0).unwrap();
    for (t, s) in tiles.iter_mut().zip(&scales) {
        t.scale = Some(*s);
    }
    let (pm, conf) = blend(&tiles, (96, 64), BlendMode::WeightedMean).unwrap();
    assert!(conf.values.iter().all(|c| *c == 1.0));
    // One global factor remains: fix it on pixel 0.
    let g = full.points[0].z / pm.points[0].z;
    for (a, b) in pm.points.iter().zip(&full.points) {
        assert!(((a.z * g) - b.z).abs() / b.z < 1e-6);
    }
}

#[test]
fn ratios_independent_of_reference() {
    let (k, full) = oracle(80, 60);
    let crops = schedule_crops(&k, (40, 30), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tiles: Vec<_> = crops.iter().map(|c| cut_tile(c, &full, rng.gen_range(0.5..2.0))).collect();
    let a = resolve_scales(&tiles, 0).unwrap();
    let b = resolve_scales(&tiles, tiles.len() - 1).unwrap();
    for i in 0..tiles.len() {
        for j in 0..tiles.len() {
            let (ra, rb) = (a[i] / a[j], b[i] / b[j]);
            assert!((ra - rb).abs() <= 1e-9 * ra);
        }
    }
}

#[test]
fn single_cover_pixels_pass_through() {
    let (k, full) = oracle(60, 20);
    let crops = schedule_crops(&k, (40, 20), 20).unwrap();
    let mut tiles: Vec<_> = crops.iter().map(|c| cut_tile(c, &full, 1.0)).collect();
    tiles[1].confidence = ConfidenceMap::new(40, 20, vec![3.0; 800]).unwrap();
    for t in tiles.iter_mut() {
        t.scale = Some(1.0);
    }
    let (pm, conf) = blend(&tiles, (60, 20), BlendMode::WeightedMean).unwrap();
    assert_eq!(pm.points[0], full.points[0]);
    assert_eq!(conf.values[59], 3.0);
    assert_eq!(conf.values[30], 3.0);
    let _ = Vector3::<f64>::zeros();
}
