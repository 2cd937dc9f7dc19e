//! Camera parameters recovered from predicted pointmaps: focal length,
//! scaled relative pose, and the PnP-RANSAC baseline.

mod pnp;
mod procrustes;
mod weiszfeld;

use nalgebra::{Matrix3, Vector3};

use crate::geom::{rotation_angle_between, vector_angle, RigidPose};

pub use pnp::{pnp_ransac, pnp_ransac_pose, PnpResult, RansacConfig};
pub use procrustes::{procrustes_objective, procrustes_pose, weighted_similarity};
pub use weiszfeld::{least_squares_focal, weiszfeld_focal, FocalEstimate};

/// Similarity `p -> scale * (R p + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl ScaledPose {
    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation * p + self.translation) * self.scale
    }

    /// Rigid part, translation in the source (unscaled) units.
    pub fn rigid(&self) -> RigidPose {
        RigidPose {
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    pub fn from_rigid(p: &RigidPose) -> Self {
        ScaledPose {
            rotation: p.rotation,
            translation: p.translation,
            scale: 1.0,
        }
    }

    /// Inverse of the rigid part (scale ignored).
    pub fn inverse_rigid(&self) -> ScaledPose {
        Self::from_rigid(&self.rigid().inverse())
    }
}

/// Angular errors of a relative pose, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    pub rra_deg: f64,
    /// `None` when either translation is zero.
    pub rta_deg: Option<f64>,
}

impl PoseErrors {
    /// Error used for accuracy curves: the worse of the two angles, with an
    /// undefined translation angle counted as 180 degrees.
    pub fn max_deg(&self) -> f64 {
        self.rra_deg.max(self.rta_deg.unwrap_or(180.0))
    }
}

/// Rotation geodesic and translation-direction angle between two poses.
pub fn pose_metrics(pred: &ScaledPose, gt: &RigidPose) -> PoseErrors {
    PoseErrors {
        rra_deg: rotation_angle_between(&pred.rotation, &gt.rotation).to_degrees(),
        rta_deg: vector_angle(&pred.translation, &gt.translation).map(f64::to_degrees),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    #[test]
    fn metric_examples() {
        let gt = RigidPose::from_axis_angle(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let e = pose_metrics(&ScaledPose::from_rigid(&gt), &gt);
        assert!(e.rra_deg.abs() < 1e-9 && e.rta_deg.unwrap().abs() < 1e-9);

        let rz = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::z()), 10f64.to_radians());
        let pred = ScaledPose {
            rotation: rz.into_inner(),
            translation: gt.translation * 3.0,
            scale: 1.0,
        };
        let id = RigidPose {
            rotation: Matrix3::identity(),
            translation: gt.translation,
        };
        let e = pose_metrics(&pred, &id);
        assert!((e.rra_deg - 10.0).abs() < 1e-9);
        assert!(e.rta_deg.unwrap().abs() < 1e-6);
    }

    #[test]
    fn zero_translation_flags_rta() {
        let e = pose_metrics(&ScaledPose::from_rigid(&RigidPose::identity()), &RigidPose::identity());
        assert!(e.rta_deg.is_none());
        assert_eq!(e.max_deg(), 180.0);
    }
}
