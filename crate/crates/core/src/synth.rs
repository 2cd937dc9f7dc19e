//! Procedural scenes with exact ground truth: a smooth textured heightfield
//! viewed by pinhole cameras, rendered by ray casting.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{
    compose_relative, swap_frame, unproject, CameraIntrinsics, DepthMap, FrameTransform, Grid,
    PointMap, RigidPose,
};
use crate::stitch::CropSpec;

pub type RgbImage = Grid<[f64; 3]>;

const MIN_OVERLAP: f64 = 0.2;
const MAX_ATTEMPTS: usize = 64;
const MARCH_STEPS: usize = 400;
const REFINE_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut impl Rng, amp: f64, freq: (f64, f64)) -> Self {
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let f = rng.gen_range(freq.0..freq.1);
        Wave {
            amp: amp * rng.gen_range(0.5..1.0),
            kx: f * dir.cos(),
            ky: f * dir.sin(),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    #[inline]
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let a = self.kx * x + self.ky * y + self.phase;
        let (s, c) = a.sin_cos();
        (self.amp * s, self.amp * c * self.kx, self.amp * c * self.ky)
    }
}

/// Surface `z = base + gx x + gy y + sum of waves` in world coordinates,
/// with an albedo pattern attached to the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightfieldScene {
    pub base_depth: f64,
    slope: (f64, f64),
    relief: Vec<Wave>,
    texture: Vec<Wave>,
    tint: [f64; 3],
    light: Vector3<f64>,
}

impl HeightfieldScene {
    pub fn random(rng: &mut impl Rng) -> Self {
        let d0 = rng.gen_range(2.0..6.0);
        let relief = (0..4)
            .map(|_| Wave::random(rng, 0.08 * d0, (2.0 / d0, 6.0 / d0)))
            .collect();
        let texture = (0..5)
            .map(|_| Wave::random(rng, 1.0, (6.0 / d0, 20.0 / d0)))
            .collect();
        let light = Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), -1.0).normalize();
        HeightfieldScene {
            base_depth: d0,
            slope: (rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35)),
            relief,
            texture,
            tint: [
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
                rng.gen_range(0.6..1.0),
            ],
            light,
        }
    }

    /// Height and its gradient at world `(x, y)`.
    pub fn height(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let mut h = self.base_depth + self.slope.0 * x + self.slope.1 * y;
        let (mut hx, mut hy) = self.slope;
        for w in &self.relief {
            let (v, dx, dy) = w.eval(x, y);
            h += v;
            hx += dx;
            hy += dy;
        }
        (h, hx, hy)
    }

    fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let mut v = [0.0; 3];
        for (k, w) in self.texture.iter().enumerate() {
            let s = w.eval(x, y).0;
            v[k % 3] += s;
            v[(k + 1) % 3] += 0.5 * s;
        }
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.tint[c] * (0.55 + 0.2 * v[c].tanh());
        }
        out
    }

    /// Upper bound on the slope of the surface.
    fn lipschitz(&self) -> f64 {
        let (gx, gy) = self.slope;
        (gx * gx + gy * gy).sqrt()
            + self
                .relief
                .iter()
                .map(|w| w.amp * (w.kx * w.kx + w.ky * w.ky).sqrt())
                .sum::<f64>()
    }

    /// Parameter `s` of the first hit of `origin + s dir`, if any.
    ///
    /// Marches with steps bounded by the surface slope, so no crossing is
    /// skipped unless it is thinner than the fixed minimum step.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let g = |s: f64| {
            let p = origin + dir * s;
            p.z - self.height(p.x, p.y).0
        };
        let s_max = 4.0 * self.base_depth / dir.norm();
        let min_step = s_max / MARCH_STEPS as f64;
        let rate = dir.z.abs() + self.lipschitz() * (dir.x * dir.x + dir.y * dir.y).sqrt();
        let mut lo = 0.0;
        let mut g_lo = g(lo);
        if g_lo >= 0.0 {
            return None;
        }
        while lo < s_max {
            let hi = (lo + (-g_lo / rate).max(min_step)).min(s_max);
            let g_hi = g(hi);
            if g_hi >= 0.0 {
                return Some(refine_root(&g, (lo, g_lo), (hi, g_hi), 1e-13 * s_max));
            }
            lo = hi;
            g_lo = g_hi;
        }
        None
    }

    /// Depth and colour as seen by a camera with world-to-camera `pose`.
    /// `noise` is the per-pixel colour noise amplitude.
    pub fn render(
        &self,
        k: &CameraIntrinsics,
        pose: &RigidPose,
        view: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Result<RenderedView> {
        let (w, h) = (k.width, k.height);
        let cam_to_world = pose.inverse();
        let origin = cam_to_world.translation;
        let mut depth = vec![0.0; w * h];
        let mut mask = vec![false; w * h];
        let mut rgb = vec![[0.0; 3]; w * h];
        for j in 0..h {
            for i in 0..w {
                let idx = j * w + i;
                // Camera-frame ray with unit z, so the hit parameter is the depth.
                let ray_cam = k.ray(i as f64, j as f64);
                let dir = cam_to_world.rotation * ray_cam;
                let mut jitter = [0.0; 3];
                if noise > 0.0 {
                    for v in jitter.iter_mut() {
                        *v = rng.gen_range(-noise..noise);
                    }
                }
                match self.intersect(&origin, &dir) {
                    Some(s) if s > 0.0 => {
                        depth[idx] = s;
                        mask[idx] = true;
                        let p = origin + dir * s;
                        let (_, hx, hy) = self.height(p.x, p.y);
                        let normal = Vector3::new(hx, hy, -1.0).normalize();
                        let shade = 0.35 + 0.65 * normal.dot(&self.light).max(0.0);
                        let a = self.albedo(p.x, p.y);
                        for c in 0..3 {
                            rgb[idx][c] = (a[c] * shade + jitter[c]).clamp(0.0, 1.0);
                        }
                    }
                    _ => {
                        for c in 0..3 {
                            rgb[idx][c] = (0.05 + jitter[c]).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        let depth = DepthMap::new(w, h, depth, mask)?;
        let points = unproject(&depth, k, view)?;
        Ok(RenderedView {
            rgb: Grid::from_vec(w, h, rgb)?,
            depth,
            points,
        })
    }
}

/// Root of `g` in a bracket with `g(a) < 0 <= g(b)`, by the Illinois
/// variant of false position.
fn refine_root(g: &impl Fn(f64) -> f64, (mut a, mut ga): (f64, f64), (mut b, mut gb): (f64, f64), tol: f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..REFINE_STEPS {
        if b - a <= tol {
            break;
        }
        let mut m = (a * gb - b * ga) / (gb - ga);
        if !(m > a && m < b) {
            m = 0.5 * (a + b);
        }
        let gm = g(m);
        if gm >= 0.0 {
            if gm == 0.0 {
                return m;
            }
            b = m;
            gb = gm;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        } else {
            a = m;
            ga = gm;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        }
    }
    if ga.abs() < gb.abs() {
        a
    } else {
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    /// Camera-frame pointmap of the view.
    pub points: PointMap,
}

/// Generator settings for two-view samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    pub width: usize,
    pub height: usize,
    /// Probability of rendering each view as an off-centre crop of a larger image.
    pub crop_probability: f64,
    pub color_noise: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            width: 64,
            height: 64,
            crop_probability: 0.0,
            color_noise: 0.02,
        }
    }
}

/// One training or evaluation pair with mutually consistent ground truth.
/// World coordinates coincide with camera 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub rgb1: RgbImage,
    pub rgb2: RgbImage,
    pub x11: PointMap,
    pub x21: PointMap,
    pub x22: PointMap,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    /// Maps camera-2 coordinates into camera 1: `X21 = P12 X22`.
    pub p12: RigidPose,
    pub d1: DepthMap,
    pub d2: DepthMap,
    /// Parent-image crops the views were cut from, if any.
    pub crop1: Option<CropSpec>,
    pub crop2: Option<CropSpec>,
}

fn random_camera(
    rng: &mut impl Rng,
    cfg: &PairConfig,
) -> Result<(CameraIntrinsics, Option<CropSpec>)> {
    let (w, h) = (cfg.width, cfg.height);
    let focal = rng.gen_range(0.8..1.4) * w.max(h) as f64;
    if cfg.crop_probability > 0.0 && rng.gen_bool(cfg.crop_probability.min(1.0)) {
        let (pw, ph) = (w + w / 2, h + h / 2);
        let parent = CameraIntrinsics::centered(focal * 1.5, pw, ph)?;
        let x0 = rng.gen_range(0..=pw - w);
        let y0 = rng.gen_range(0..=ph - h);
        let crop = CropSpec::new(x0, y0, w, h, parent)?;
        Ok((crop.intrinsics(), Some(crop)))
    } else {
        Ok((CameraIntrinsics::centered(focal, w, h)?, None))
    }
}

/// Second camera looking back at the scene centre from a lateral offset,
/// with a small random roll. Returned as world-to-camera.
fn random_second_pose(rng: &mut impl Rng, scene: &HeightfieldScene) -> Result<RigidPose> {
    let d0 = scene.base_depth;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let baseline = rng.gen_range(0.12..0.4) * d0;
    let eye = Vector3::new(
        baseline * angle.cos(),
        baseline * angle.sin(),
        rng.gen_range(-0.1..0.1) * d0,
    );
    let target = Vector3::new(
        rng.gen_range(-0.1..0.1) * d0,
        rng.gen_range(-0.1..0.1) * d0,
        d0,
    );
    let look = RigidPose::look_at(eye, target, Vector3::y())?;
    let roll = RigidPose::from_axis_angle(
        Vector3::new(0.0, 0.0, rng.gen_range(-0.15..0.15)),
        Vector3::zeros(),
    );
    Ok(roll.compose(&look))
}

/// Fraction of view-2 valid pixels that land inside view 1 in front of it.
fn overlap(x21: &PointMap, k1: &CameraIntrinsics) -> f64 {
    let total = x21.valid_count();
    if total == 0 {
        return 0.0;
    }
    let inside = x21
        .valid_points()
        .filter(|p| {
            k1.project_point(p).is_some_and(|q| {
                q.x >= 0.0 && q.y >= 0.0 && q.x <= (k1.width - 1) as f64 && q.y <= (k1.height - 1) as f64
            })
        })
        .count();
    inside as f64 / total as f64
}

pub fn gen_synthetic_pair(seed: u64) -> Result<SyntheticPair> {
    gen_synthetic_pair_with(seed, &PairConfig::default())
}

/// Deterministic per `(seed, cfg)`; resamples until views overlap by 20%.
pub fn gen_synthetic_pair_with(seed: u64, cfg: &PairConfig) -> Result<SyntheticPair> {
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let scene = HeightfieldScene::random(&mut rng);
        let (k1, crop1) = random_camera(&mut rng, cfg)?;
        let (k2, crop2) = random_camera(&mut rng, cfg)?;
        let pose1 = RigidPose::identity();
        let pose2 = random_second_pose(&mut rng, &scene)?;
        let v1 = scene.render(&k1, &pose1, 0, cfg.color_noise, &mut rng)?;
        let v2 = scene.render(&k2, &pose2, 1, cfg.color_noise, &mut rng)?;
        if v1.depth.density() < 0.9 || v2.depth.density() < 0.9 {
            continue;
        }
        let p12 = compose_relative(&pose2, &pose1);
        let x21 = swap_frame(&v2.points, &FrameTransform::new(1, 0, p12))?;
        if overlap(&x21, &k1) < MIN_OVERLAP {
            continue;
        }
        return Ok(SyntheticPair {
            rgb1: v1.rgb,
            rgb2: v2.rgb,
            x11: v1.points,
            x21,
            x22: v2.points,
            k1,
            k2,
            p12,
            d1: v1.depth,
            d2: v2.depth,
            crop1,
            crop2,
        });
    }
    Err(Error::Degenerate(format!(
        "no overlapping view pair after {MAX_ATTEMPTS} attempts"
    )))
}

/// Several cameras observing one scene, with world-to-camera poses.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewScene {
    pub intrinsics: Vec<CameraIntrinsics>,
    pub poses: Vec<RigidPose>,
    pub views: Vec<RenderedView>,
}

impl MultiViewScene {
    /// Ground-truth pointmap of image `n` expressed in camera `m`.
    pub fn pointmap(&self, n: usize, m: usize) -> Result<PointMap> {
        if n == m {
            return Ok(self.views[n].points.clone());
        }
        let rel = compose_relative(&self.poses[n], &self.poses[m]);
        swap_frame(&self.views[n].points, &FrameTransform::new(n, m, rel))
    }
}

/// `n` cameras on a ring around the optical axis of camera 0, all aimed at
/// the scene centre. Camera 0 is the world frame.
pub fn gen_multiview(seed: u64, n: usize, width: usize, height: usize) -> Result<MultiViewScene> {
    if n < 2 {
        return Err(Error::invalid("multi-view scene needs at least two cameras"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = HeightfieldScene::random(&mut rng);
    let d0 = scene.base_depth;
    let mut intrinsics = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut views = Vec::with_capacity(n);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for v in 0..n {
        let focal = rng.gen_range(0.9..1.3) * width.max(height) as f64;
        let k = CameraIntrinsics::centered(focal, width, height)?;
        let pose = if v == 0 {
            RigidPose::identity()
        } else {
            let a = phase + std::f64::consts::TAU * (v - 1) as f64 / (n - 1) as f64;
            let r = rng.gen_range(0.15..0.3) * d0;
            let eye = Vector3::new(r * a.cos(), r * a.sin(), rng.gen_range(-0.05..0.05) * d0);
            RigidPose::look_at(eye, Vector3::new(0.0, 0.0, d0), Vector3::y())?
        };
        views.push(scene.render(&k, &pose, v, 0.0, &mut rng)?);
        intrinsics.push(k);
        poses.push(pose);
    }
    Ok(MultiViewScene {
        intrinsics,
        poses,
        views,
    })
}
