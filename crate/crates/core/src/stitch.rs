//! Sliding-window inference support: crop scheduling, crop intrinsics,
//! per-tile scale resolution and confidence blending.

use std::collections::VecDeque;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, ConfidenceMap, PointMap};
use crate::numeric::median_in_place;

/// A window of a parent image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub parent_k: CameraIntrinsics,
}

impl CropSpec {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize, parent_k: CameraIntrinsics) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > parent_k.width || y0 + h > parent_k.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} does not fit in {}x{}",
                parent_k.width, parent_k.height
            )));
        }
        Ok(CropSpec {
            x0,
            y0,
            w,
            h,
            parent_k,
        })
    }

    /// Intrinsics of the crop: same focals, principal point shifted by the offset.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.parent_k.fx,
            fy: self.parent_k.fy,
            cx: self.parent_k.cx - self.x0 as f64,
            cy: self.parent_k.cy - self.y0 as f64,
            width: self.w,
            height: self.h,
        }
    }

    /// Parent-frame pixel of crop pixel `(i, j)`.
    #[inline]
    pub fn to_parent(&self, i: usize, j: usize) -> (usize, usize) {
        (i + self.x0, j + self.y0)
    }

    /// Overlapping parent-frame rectangle `(x0, y0, x1, y1)`, half-open.
    pub fn intersection(&self, other: &CropSpec) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = (self.x0 + self.w).min(other.x0 + other.w);
        let y1 = (self.y0 + self.h).min(other.y0 + other.h);
        (x0 < x1 && y0 < y1).then_some((x0, y0, x1, y1))
    }

    /// Cuts the matching window out of a parent-resolution row-major buffer.
    pub fn cut<T: Clone>(&self, parent: &[T], parent_width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.w * self.h);
        for j in 0..self.h {
            let row = (j + self.y0) * parent_width + self.x0;
            out.extend_from_slice(&parent[row..row + self.w]);
        }
        out
    }
}

fn axis_offsets(parent: usize, tile: usize, min_overlap: usize) -> Vec<usize> {
    if tile == parent {
        return vec![0];
    }
    let stride = tile - min_overlap;
    let n = 1 + (parent - tile).div_ceil(stride);
    // Evenly spread; consecutive gaps are at most ceil((parent - tile) / (n - 1)) <= stride.
    (0..n).map(|k| k * (parent - tile) / (n - 1)).collect()
}

/// Row-major tiling of the parent image with at least `min_overlap` pixels
/// shared between neighbours; the last row and column touch the border.
pub fn schedule_crops(
    parent_k: &CameraIntrinsics,
    tile: (usize, usize),
    min_overlap: usize,
) -> Result<Vec<CropSpec>> {
    let (tw, th) = tile;
    let (pw, ph) = (parent_k.width, parent_k.height);
    if tw == 0 || th == 0 || tw > pw || th > ph {
        return Err(Error::invalid(format!(
            "tile {tw}x{th} does not fit parent {pw}x{ph}"
        )));
    }
    if (tw < pw && min_overlap >= tw) || (th < ph && min_overlap >= th) {
        return Err(Error::invalid(format!(
            "overlap {min_overlap} must be smaller than the tile {tw}x{th}"
        )));
    }
    let xs = axis_offsets(pw, tw, min_overlap.min(tw.saturating_sub(1)));
    let ys = axis_offsets(ph, th, min_overlap.min(th.saturating_sub(1)));
    let mut crops = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            crops.push(CropSpec::new(x, y, tw, th, *parent_k)?);
        }
    }
    Ok(crops)
}

/// One tile's prediction, in the (shared) camera frame of the parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePrediction {
    pub crop: CropSpec,
    pub pointmap: PointMap,
    pub confidence: ConfidenceMap,
    pub scale: Option<f64>,
}

impl TilePrediction {
    pub fn new(crop: CropSpec, pointmap: PointMap, confidence: ConfidenceMap) -> Result<Self> {
        if pointmap.dims() != (crop.w, crop.h) || confidence.dims() != (crop.w, crop.h) {
            return Err(Error::DimensionMismatch {
                expected: (crop.w, crop.h),
                got: pointmap.dims(),
            });
        }
        Ok(TilePrediction {
            crop,
            pointmap,
            confidence,
            scale: None,
        })
    }

    fn depth_at_parent(&self, x: usize, y: usize) -> Option<f64> {
        let i = x - self.crop.x0;
        let j = y - self.crop.y0;
        self.pointmap
            .get(i, j)
            .map(|p| p.z)
            .filter(|z| *z > 0.0 && z.is_finite())
    }
}

fn overlap_ratios(a: &TilePrediction, b: &TilePrediction) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some((x0, y0, x1, y1)) = a.crop.intersection(&b.crop) {
        for y in y0..y1 {
            for x in x0..x1 {
                if let (Some(za), Some(zb)) = (a.depth_at_parent(x, y), b.depth_at_parent(x, y)) {
                    out.push(za / zb);
                }
            }
        }
    }
    out
}

fn overlap_area(a: &CropSpec, b: &CropSpec) -> usize {
    a.intersection(b)
        .map_or(0, |(x0, y0, x1, y1)| (x1 - x0) * (y1 - y0))
}

/// Per-tile scale factors bringing every tile to the reference tile's scale.
///
/// Walks the tile-overlap graph breadth-first from `reference`, visiting
/// neighbours by decreasing overlap area; each newly reached tile gets the
/// median depth ratio against its (already scaled) parent.
pub fn resolve_scales(tiles: &[TilePrediction], reference: usize) -> Result<Vec<f64>> {
    let n = tiles.len();
    if reference >= n {
        return Err(Error::invalid(format!(
            "reference tile {reference} out of range for {n} tiles"
        )));
    }
    let mut scales: Vec<Option<f64>> = vec![None; n];
    scales[reference] = Some(1.0);
    let mut queue = VecDeque::from([reference]);
    while let Some(a) = queue.pop_front() {
        let mut nbrs: Vec<(usize, usize)> = (0..n)
            .filter(|&b| scales[b].is_none())
            .map(|b| (overlap_area(&tiles[a].crop, &tiles[b].crop), b))
            .filter(|&(area, _)| area > 0)
            .collect();
        nbrs.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        let sa = scales[a].expect("queued tiles are scaled");
        for (_, b) in nbrs {
            if scales[b].is_some() {
                continue;
            }
            let mut ratios = overlap_ratios(&tiles[a], &tiles[b]);
            let m = median_in_place(&mut ratios).ok_or_else(|| {
                Error::Degenerate(format!("tiles {a} and {b} share no valid overlap pixel"))
            })?;
            scales[b] = Some(sa * m);
            queue.push_back(b);
        }
    }
    scales
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| Error::Disconnected(format!("tile {i} is not reachable from tile {reference}")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BlendMode {
    /// Confidence-weighted mean of the covering tiles.
    #[default]
    WeightedMean,
    /// The most confident covering tile wins.
    WinnerTakeAll,
}

/// Fuses scaled tiles into one parent-resolution pointmap. Output confidence
/// is the max over covering tiles; uncovered pixels are invalid.
pub fn blend(
    tiles: &[TilePrediction],
    parent: (usize, usize),
    mode: BlendMode,
) -> Result<(PointMap, ConfidenceMap)> {
    let (pw, ph) = parent;
    let n = pw * ph;
    let mut weight = vec![0.0f64; n];
    let mut best = vec![0.0f64; n];
    for t in tiles {
        if t.scale.is_none() {
            return Err(Error::invalid("blend needs resolved tile scales"));
        }
        if t.crop.x0 + t.crop.w > pw || t.crop.y0 + t.crop.h > ph {
            return Err(Error::invalid("tile exceeds the parent image"));
        }
        for j in 0..t.crop.h {
            for i in 0..t.crop.w {
                let ti = j * t.crop.w + i;
                if t.pointmap.valid[ti] {
                    let (x, y) = t.crop.to_parent(i, j);
                    let c = t.confidence.values[ti];
                    weight[y * pw + x] += c;
                    best[y * pw + x] = best[y * pw + x].max(c);
                }
            }
        }
    }
    let mut points = vec![Vector3::zeros(); n];
    let mut valid = vec![false; n];
    let mut winner = vec![0.0f64; n];
    for t in tiles {
        let s = t.scale.unwrap();
        for j in 0..t.crop.h {
            for i in 0..t.crop.w {
                let ti = j * t.crop.w + i;
                if !t.pointmap.valid[ti] {
                    continue;
                }
                let (x, y) = t.crop.to_parent(i, j);
                let pi = y * pw + x;
                let c = t.confidence.values[ti];
                let p = t.pointmap.points[ti] * s;
                match mode {
                    BlendMode::WeightedMean => {
                        points[pi] += p * (c / weight[pi]);
                    }
                    BlendMode::WinnerTakeAll => {
                        if c > winner[pi] {
                            winner[pi] = c;
                            points[pi] = p;
                        }
                    }
                }
                valid[pi] = true;
            }
        }
    }
    let conf: Vec<f64> = best.iter().map(|&c| c.max(1.0)).collect();
    let frame = tiles.first().map_or(0, |t| t.pointmap.frame);
    let subject = tiles.first().map_or(0, |t| t.pointmap.subject);
    Ok((
        PointMap::new(pw, ph, points, valid, subject, frame)?,
        ConfidenceMap::new(pw, ph, conf)?,
    ))
}
