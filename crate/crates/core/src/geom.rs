//! Pinhole cameras, rigid poses, depth maps and pointmaps.
//!
//! Pixel `(i, j)` is column `i`, row `j`, and refers to the pixel centre at
//! continuous image coordinate `(i, j)` (no half-pixel offset). Grids are
//! stored row-major, `index = j * width + i`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a matrix is a rotation.
const ORTHONORMAL_TOL: f64 = 1e-9;

/// Dense row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "grid of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[j * self.width + i]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        let w = self.width;
        &mut self.data[j * w + i]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Grid of continuous pixel coordinates.
pub type PixelGrid = Grid<Vector2<f64>>;

impl PixelGrid {
    /// The integer pixel lattice `(i, j)` of a `width x height` image.
    pub fn lattice(width: usize, height: usize) -> Self {
        Grid::from_fn(width, height, |i, j| Vector2::new(i as f64, j as f64))
    }
}

/// Zero-skew pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!(
                "intrinsics need finite positive focals, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("intrinsics need a nonempty image size"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Unnormalized viewing ray `K^-1 [u, v, 1]`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    #[inline]
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 || !p.z.is_finite() {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !is_rotation(&rotation) {
            return Err(Error::invalid("pose rotation is not orthonormal with det +1"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose translation is not finite"));
        }
        Ok(RigidPose {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        RigidPose {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    /// Camera orientation looking from `eye` towards `target`, as a world-to-camera pose.
    /// The camera's +y axis points along `down` projected onto the image plane.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::Degenerate("look_at with eye == target".into()));
        }
        let z = forward.normalize();
        let y_raw = down - z * down.dot(&z);
        if y_raw.norm() < 1e-12 {
            return Err(Error::Degenerate("look_at down vector parallel to view".into()));
        }
        let y = y_raw.normalize();
        let x = y.cross(&z);
        // Rows of the world-to-camera rotation are the camera axes in world coordinates.
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(RigidPose {
            rotation,
            translation: -(rotation * eye),
        })
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        rotation_log(&self.rotation)
    }
}

/// Returns true when `r` is orthonormal with determinant +1 within 1e-9.
pub fn is_rotation(r: &Matrix3<f64>) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho <= ORTHONORMAL_TOL && (r.determinant() - 1.0).abs() <= ORTHONORMAL_TOL
}

/// Axis-angle vector of a rotation matrix.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Geodesic angle in radians between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    // atan2 form stays accurate for tiny angles where acos((tr-1)/2) loses precision.
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin2 = skew.norm();
    let cos2 = rel.trace() - 1.0;
    sin2.atan2(cos2)
}

/// Angle in radians between two nonzero vectors.
pub fn vector_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> Option<f64> {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return None;
    }
    Some(a.cross(b).norm().atan2(a.dot(b)))
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn rotation_about(axis: &Unit<Vector3<f64>>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(axis, angle).into_inner()
}

/// `P_k P_m^-1`: maps coordinates of camera `m` into camera `k`, given both
/// world-to-camera extrinsics.
pub fn compose_relative(p_m: &RigidPose, p_k: &RigidPose) -> RigidPose {
    p_k.compose(&p_m.inverse())
}

/// A rigid transform tagged with the camera frames it maps between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    pub from: usize,
    pub to: usize,
    pub pose: RigidPose,
}

impl FrameTransform {
    pub fn new(from: usize, to: usize, pose: RigidPose) -> Self {
        FrameTransform { from, to, pose }
    }

    /// Transform from camera `m` to camera `k` given their world-to-camera extrinsics.
    pub fn between(m: usize, p_m: &RigidPose, k: usize, p_k: &RigidPose) -> Self {
        FrameTransform {
            from: m,
            to: k,
            pose: compose_relative(p_m, p_k),
        }
    }

    pub fn inverse(&self) -> Self {
        FrameTransform {
            from: self.to,
            to: self.from,
            pose: self.pose.inverse(),
        }
    }
}

/// Depth values plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    /// Validates that every masked pixel holds a finite positive depth.
    /// Masked-out pixels are zero-filled.
    pub fn new(width: usize, height: usize, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || mask.len() != n {
            return Err(Error::invalid(format!(
                "depth map of {width}x{height} needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        for (idx, (v, &m)) in values.iter_mut().zip(&mask).enumerate() {
            if m {
                if !v.is_finite() || *v <= 0.0 {
                    return Err(Error::invalid(format!(
                        "depth at pixel ({}, {}) is {v}, expected finite and > 0",
                        idx % width,
                        idx / width
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(DepthMap {
            width,
            height,
            values,
            mask,
        })
    }

    /// Fully valid depth map.
    pub fn dense(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(width, height, values, mask)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let idx = j * self.width + i;
        self.mask[idx].then(|| self.values[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn density(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.mask.len() as f64
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * s).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Per-pixel 3D points of image `subject`, expressed in the frame of camera `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    pub subject: usize,
    pub frame: usize,
}

impl PointMap {
    /// Invalid pixels are reset to the origin sentinel.
    pub fn new(
        width: usize,
        height: usize,
        mut points: Vec<Vector3<f64>>,
        valid: Vec<bool>,
        subject: usize,
        frame: usize,
    ) -> Result<Self> {
        let n = width * height;
        if points.len() != n || valid.len() != n {
            return Err(Error::invalid(format!(
                "pointmap of {width}x{height} needs {n} points and flags, got {} and {}",
                points.len(),
                valid.len()
            )));
        }
        for (p, &v) in points.iter_mut().zip(&valid) {
            if v {
                if !p.iter().all(|c| c.is_finite()) {
                    return Err(Error::invalid("valid pointmap entry is not finite"));
                }
            } else {
                *p = Vector3::zeros();
            }
        }
        Ok(PointMap {
            width,
            height,
            points,
            valid,
            subject,
            frame,
        })
    }

    /// Every pixel valid.
    pub fn dense(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        subject: usize,
        frame: usize,
    ) -> Result<Self> {
        let valid = vec![true; points.len()];
        Self::new(width, height, points, valid, subject, frame)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<&Vector3<f64>> {
        let idx = j * self.width + i;
        self.valid[idx].then(|| &self.points[idx])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points
            .iter()
            .zip(&self.valid)
            .filter_map(|(p, &v)| v.then_some(p))
    }

    pub fn scaled(&self, s: f64) -> PointMap {
        PointMap {
            points: self.points.iter().map(|p| p * s).collect(),
            ..self.clone()
        }
    }

    /// Same points under different (subject, frame) tags.
    pub fn retagged(mut self, subject: usize, frame: usize) -> PointMap {
        self.subject = subject;
        self.frame = frame;
        self
    }

    /// Z-components as a depth map; points with `z <= 0` become invalid.
    pub fn depth(&self) -> DepthMap {
        let mut values = vec![0.0; self.points.len()];
        let mut mask = vec![false; self.points.len()];
        for (idx, p) in self.points.iter().enumerate() {
            if self.valid[idx] && p.z > 0.0 {
                values[idx] = p.z;
                mask[idx] = true;
            }
        }
        DepthMap {
            width: self.width,
            height: self.height,
            values,
            mask,
        }
    }
}

/// Per-pixel confidence, every value finite and `>= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid("confidence map size mismatch"));
        }
        if let Some(bad) = values.iter().find(|c| !c.is_finite() || **c < 1.0) {
            return Err(Error::invalid(format!(
                "confidence {bad} is below 1 or not finite"
            )));
        }
        Ok(ConfidenceMap {
            width,
            height,
            values,
        })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        ConfidenceMap {
            width,
            height,
            values: vec![1.0; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn mean(&self) -> f64 {
        crate::numeric::pairwise_sum(&self.values) / self.values.len().max(1) as f64
    }
}

/// Lifts a depth map to a pointmap in the camera frame of `view`:
/// `X_ij = K^-1 [i D_ij, j D_ij, D_ij]`.
pub fn unproject(depth: &DepthMap, k: &CameraIntrinsics, view: usize) -> Result<PointMap> {
    k.validate()?;
    if depth.dims() != (k.width, k.height) {
        return Err(Error::DimensionMismatch {
            expected: (k.width, k.height),
            got: depth.dims(),
        });
    }
    let (w, h) = depth.dims();
    let mut points = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let idx = j * w + i;
            if depth.mask[idx] {
                let d = depth.values[idx];
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::invalid(format!(
                        "nonpositive depth {d} at valid pixel ({i}, {j})"
                    )));
                }
                points.push(k.ray(i as f64, j as f64) * d);
            } else {
                points.push(Vector3::zeros());
            }
        }
    }
    Ok(PointMap {
        width: w,
        height: h,
        points,
        valid: depth.mask.clone(),
        subject: view,
        frame: view,
    })
}

/// Projects a camera-frame pointmap: depth is the z-component, pixel is the
/// pinhole projection. Points with `z <= 0` come back invalid.
pub fn project(pm: &PointMap, k: &CameraIntrinsics) -> (DepthMap, PixelGrid) {
    let n = pm.points.len();
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    let mut pixels = vec![Vector2::zeros(); n];
    for idx in 0..n {
        if !pm.valid[idx] {
            continue;
        }
        if let Some(px) = k.project_point(&pm.points[idx]) {
            values[idx] = pm.points[idx].z;
            mask[idx] = true;
            pixels[idx] = px;
        }
    }
    (
        DepthMap {
            width: pm.width,
            height: pm.height,
            values,
            mask,
        },
        Grid {
            width: pm.width,
            height: pm.height,
            data: pixels,
        },
    )
}

/// Re-expresses a pointmap in another camera frame: `X^{n,k} = P_{m,k} X^{n,m}`.
pub fn swap_frame(pm: &PointMap, transform: &FrameTransform) -> Result<PointMap> {
    if pm.frame != transform.from {
        return Err(Error::FrameMismatch {
            expected: transform.from,
            actual: pm.frame,
        });
    }
    let points = pm
        .points
        .iter()
        .zip(&pm.valid)
        .map(|(p, &v)| {
            if v {
                transform.pose.transform_point(p)
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    Ok(PointMap {
        points,
        frame: transform.to,
        ..pm.clone()
    })
}
