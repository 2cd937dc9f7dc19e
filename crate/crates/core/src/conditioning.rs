//! Encodings of the optional priors (intrinsics, depth, relative pose) into
//! the dense or global inputs the network consumes.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, DepthMap, Grid, RigidPose};
use crate::numeric::pairwise_sum;
use crate::stitch::CropSpec;

/// Per-pixel camera rays `K^-1 [i, j, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    pub directions: Vec<Vector3<f64>>,
}

impl RayMap {
    /// One component of every ray as a grid (`c` in 0..3).
    pub fn channel(&self, c: usize) -> Grid<f64> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.directions.iter().map(|d| d[c]).collect(),
        }
    }
}

/// Rays of an image, or of a crop of it. Crop pixels are addressed in the
/// parent frame, so a non-centred crop yields off-axis rays.
pub fn rays_from_intrinsics(k: &CameraIntrinsics, crop: Option<&CropSpec>) -> Result<RayMap> {
    k.validate()?;
    let (x0, y0, w, h) = match crop {
        Some(c) => {
            if c.x0 + c.w > k.width || c.y0 + c.h > k.height || c.w == 0 || c.h == 0 {
                return Err(Error::invalid(format!(
                    "crop {}x{}+{}+{} exceeds parent {}x{}",
                    c.w, c.h, c.x0, c.y0, k.width, k.height
                )));
            }
            (c.x0, c.y0, c.w, c.h)
        }
        None => (0, 0, k.width, k.height),
    };
    let mut directions = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            directions.push(k.ray((i + x0) as f64, (j + y0) as f64));
        }
    }
    Ok(RayMap {
        width: w,
        height: h,
        directions,
    })
}

/// Scale-normalized depth `D' = D / Z(D)` with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDepthInput {
    pub width: usize,
    pub height: usize,
    /// Zero at invalid pixels.
    pub dprime: Vec<f64>,
    pub mask: Vec<bool>,
    /// The normalizer `Z(D)`: mean of the valid depths.
    pub scale: f64,
}

/// Normalizes a depth prior by the mean norm of its valid entries. For a
/// depth map the norm of a value is the value itself.
pub fn normalize_depth_input(d: &DepthMap) -> Result<NormalizedDepthInput> {
    let valid: Vec<f64> = d
        .values
        .iter()
        .zip(&d.mask)
        .filter_map(|(v, &m)| m.then_some(*v))
        .collect();
    if valid.is_empty() {
        return Err(Error::Degenerate(
            "depth prior has no valid pixel; drop the modality instead".into(),
        ));
    }
    let scale = pairwise_sum(&valid) / valid.len() as f64;
    let dprime = d
        .values
        .iter()
        .zip(&d.mask)
        .map(|(v, &m)| if m { v / scale } else { 0.0 })
        .collect();
    Ok(NormalizedDepthInput {
        width: d.width,
        height: d.height,
        dprime,
        mask: d.mask.clone(),
        scale,
    })
}

/// Keeps `round(keep_ratio * valid)` uniformly chosen valid pixels.
pub fn sparsify(d: &DepthMap, keep_ratio: f64, seed: u64) -> Result<DepthMap> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    let valid_idx: Vec<usize> = d
        .mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if valid_idx.is_empty() {
        return Err(Error::invalid("cannot sparsify a depth map without valid pixels"));
    }
    let keep = (keep_ratio * valid_idx.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; d.mask.len()];
    for k in sample(&mut rng, valid_idx.len(), keep).into_iter() {
        mask[valid_idx[k]] = true;
    }
    let values = d
        .values
        .iter()
        .zip(&mask)
        .map(|(v, &m)| if m { *v } else { 0.0 })
        .collect();
    Ok(DepthMap {
        width: d.width,
        height: d.height,
        values,
        mask,
    })
}

/// Relative pose with the translation scale removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseToken {
    pub rotation: Matrix3<f64>,
    pub tnorm: Vector3<f64>,
    /// Set when the translation is exactly zero; `tnorm` is then zero.
    pub degenerate: bool,
}

impl PoseToken {
    /// Nine row-major rotation entries followed by the unit translation.
    pub fn features(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.tnorm.x,
            self.tnorm.y,
            self.tnorm.z,
        ]
    }
}

pub fn encode_pose(p: &RigidPose) -> PoseToken {
    let n = p.translation.norm();
    let degenerate = n == 0.0;
    PoseToken {
        rotation: p.rotation,
        tnorm: if degenerate {
            Vector3::zeros()
        } else {
            p.translation / n
        },
        degenerate,
    }
}

/// Which of the five prior slots are present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub k1: bool,
    pub k2: bool,
    pub d1: bool,
    pub d2: bool,
    pub p12: bool,
}

impl ModalityMask {
    pub const NONE: ModalityMask = ModalityMask {
        k1: false,
        k2: false,
        d1: false,
        d2: false,
        p12: false,
    };
    pub const ALL: ModalityMask = ModalityMask {
        k1: true,
        k2: true,
        d1: true,
        d2: true,
        p12: true,
    };

    pub fn from_slots(slots: [bool; 5]) -> Self {
        ModalityMask {
            k1: slots[0],
            k2: slots[1],
            d1: slots[2],
            d2: slots[3],
            p12: slots[4],
        }
    }

    pub fn slots(&self) -> [bool; 5] {
        [self.k1, self.k2, self.d1, self.d2, self.p12]
    }

    pub fn count(&self) -> usize {
        self.slots().iter().filter(|&&s| s).count()
    }

    /// Compact label such as `K1+K2+RT`, or `none`.
    pub fn label(&self) -> String {
        let names = ["K1", "K2", "D1", "D2", "RT"];
        let parts: Vec<&str> = self
            .slots()
            .iter()
            .zip(names)
            .filter_map(|(&s, n)| s.then_some(n))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// The twelve subsets reported in the guidance study, in row order.
    pub fn guidance_rows() -> [ModalityMask; 12] {
        let m = |s: [u8; 5]| ModalityMask::from_slots(s.map(|v| v == 1));
        [
            m([0, 0, 0, 0, 0]),
            m([1, 0, 0, 0, 0]),
            m([0, 1, 0, 0, 0]),
            m([1, 1, 0, 0, 0]),
            m([0, 0, 1, 0, 0]),
            m([0, 0, 0, 1, 0]),
            m([0, 0, 1, 1, 0]),
            m([0, 0, 0, 0, 1]),
            m([1, 1, 1, 1, 0]),
            m([1, 1, 0, 0, 1]),
            m([0, 0, 1, 1, 1]),
            m([1, 1, 1, 1, 1]),
        ]
    }
}

/// Draws the number of priors uniformly from 0..=5, then that many slots
/// uniformly without replacement.
pub fn sample_modality_subset(seed: u64) -> ModalityMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_modality_subset_with(&mut rng)
}

pub fn sample_modality_subset_with(rng: &mut impl Rng) -> ModalityMask {
    let m = rng.gen_range(0..=5usize);
    let mut slots = [false; 5];
    for k in sample(rng, 5, m).into_iter() {
        slots[k] = true;
    }
    ModalityMask::from_slots(slots)
}

/// Any subset of the optional priors for an image pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuxiliaryBundle {
    pub k1: Option<CameraIntrinsics>,
    pub k2: Option<CameraIntrinsics>,
    pub d1: Option<DepthMap>,
    pub d2: Option<DepthMap>,
    /// Maps camera-2 coordinates into camera 1: `X^{2,1} = p12 X^{2,2}`.
    pub p12: Option<RigidPose>,
}

impl AuxiliaryBundle {
    pub fn mask(&self) -> ModalityMask {
        ModalityMask {
            k1: self.k1.is_some(),
            k2: self.k2.is_some(),
            d1: self.d1.is_some(),
            d2: self.d2.is_some(),
            p12: self.p12.is_some(),
        }
    }

    /// Drops every prior whose slot is off in `mask`.
    pub fn restrict(&self, mask: ModalityMask) -> AuxiliaryBundle {
        AuxiliaryBundle {
            k1: self.k1.filter(|_| mask.k1),
            k2: self.k2.filter(|_| mask.k2),
            d1: self.d1.clone().filter(|_| mask.d1),
            d2: self.d2.clone().filter(|_| mask.d2),
            p12: self.p12.filter(|_| mask.p12),
        }
    }
}

/// Non-overlapping square patches of one or more channels, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub tokens: usize,
    pub patch_dim: usize,
    /// Row-major `tokens x patch_dim`. Within a row: pixel-major, channel-minor.
    pub data: Vec<f64>,
}

/// Splits `channels` (each `width x height`, row-major) into `patch x patch`
/// tiles. Tokens are ordered row-major over the patch grid.
pub fn patchify(channels: &[&[f64]], width: usize, height: usize, patch: usize) -> Result<Patches> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(Error::invalid(format!(
            "image {width}x{height} is not divisible by patch size {patch}"
        )));
    }
    if channels.iter().any(|c| c.len() != width * height) {
        return Err(Error::invalid("channel size does not match image"));
    }
    let (gw, gh) = (width / patch, height / patch);
    let nc = channels.len();
    let patch_dim = patch * patch * nc;
    let mut data = Vec::with_capacity(gw * gh * patch_dim);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let idx = (ty * patch + py) * width + tx * patch + px;
                    for c in channels {
                        data.push(c[idx]);
                    }
                }
            }
        }
    }
    Ok(Patches {
        tokens: gw * gh,
        patch_dim,
        data,
    })
}

/// Depth prior as the stacked `[D', M]` patch input.
pub fn depth_patches(d: &NormalizedDepthInput, patch: usize) -> Result<Patches> {
    let mask: Vec<f64> = d.mask.iter().map(|&m| m as u8 as f64).collect();
    patchify(&[&d.dprime, &mask], d.width, d.height, patch)
}

/// Ray directions as a three-channel patch input.
pub fn ray_patches(r: &RayMap, patch: usize) -> Result<Patches> {
    let chans: Vec<Vec<f64>> = (0..3).map(|c| r.channel(c).data).collect();
    patchify(
        &[&chans[0], &chans[1], &chans[2]],
        r.width,
        r.height,
        patch,
    )
}
