//! File formats: binary PLY pointmaps, raw float32 depth with a u8 mask
//! sidecar, and JSON intrinsics / poses.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, ConfidenceMap, DepthMap, Grid, PointMap, RigidPose};

/// Writes a pointmap as a binary little-endian PLY with one vertex per pixel
/// in row-major order. Properties are `x y z confidence` as float32; invalid
/// pixels are written as the origin with confidence 0. Grid size and frame
/// tags travel in header comments.
pub fn write_pointmap_ply(
    path: impl AsRef<Path>,
    pm: &PointMap,
    conf: Option<&ConfidenceMap>,
) -> Result<()> {
    if let Some(c) = conf {
        if c.dims() != pm.dims() {
            return Err(Error::DimensionMismatch {
                expected: pm.dims(),
                got: c.dims(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\ncomment width {}\ncomment height {}\n\
         comment subject {}\ncomment frame {}\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nproperty float confidence\nend_header\n",
        pm.width,
        pm.height,
        pm.subject,
        pm.frame,
        pm.points.len()
    )?;
    for (idx, p) in pm.points.iter().enumerate() {
        let (xyz, c) = if pm.valid[idx] {
            (*p, conf.map_or(1.0, |c| c.values[idx]))
        } else {
            (Vector3::zeros(), 0.0)
        };
        for v in [xyz.x, xyz.y, xyz.z, c] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum PlyScalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl PlyScalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            "uchar" | "uint8" => PlyScalar::U8,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::U8 => 1,
            PlyScalar::F32 | PlyScalar::I32 | PlyScalar::U32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyScalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            PlyScalar::U8 => b[0] as f64,
            PlyScalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

/// Reads a pointmap written by [`write_pointmap_ply`]. Vertices with
/// confidence 0 are invalid; their confidence comes back as 1.
pub fn read_pointmap_ply(path: impl AsRef<Path>) -> Result<(PointMap, ConfidenceMap)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::Format("missing ply magic".into()));
    }
    let (mut width, mut height, mut subject, mut frame) = (None, None, 0usize, 0usize);
    let mut count = None;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let mut it = l.split_whitespace();
        match it.next() {
            Some("format") => {
                if it.next() != Some("binary_little_endian") {
                    return Err(Error::Format("only binary_little_endian PLY is supported".into()));
                }
            }
            Some("comment") => {
                let key = it.next();
                let val = it.next().and_then(|v| v.parse::<usize>().ok());
                match (key, val) {
                    (Some("width"), Some(v)) => width = Some(v),
                    (Some("height"), Some(v)) => height = Some(v),
                    (Some("subject"), Some(v)) => subject = v,
                    (Some("frame"), Some(v)) => frame = v,
                    _ => {}
                }
            }
            Some("element") => {
                if it.next() != Some("vertex") {
                    return Err(Error::Format("only a vertex element is supported".into()));
                }
                count = it.next().and_then(|v| v.parse::<usize>().ok());
            }
            Some("property") => {
                let ty = it
                    .next()
                    .and_then(PlyScalar::parse)
                    .ok_or_else(|| Error::Format(format!("unsupported property line '{l}'")))?;
                let name = it
                    .next()
                    .ok_or_else(|| Error::Format("property without a name".into()))?;
                props.push((name.to_string(), ty));
            }
            Some("end_header") => break,
            _ => return Err(Error::Format(format!("unexpected header line '{l}'"))),
        }
    }
    let count = count.ok_or_else(|| Error::Format("missing vertex count".into()))?;
    let (width, height) = match (width, height) {
        (Some(w), Some(h)) => (w, h),
        _ => (count, 1),
    };
    if width * height != count {
        return Err(Error::Format(format!(
            "vertex count {count} does not match grid {width}x{height}"
        )));
    }
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Format("PLY needs x, y and z properties".into())),
    };
    let ic = find("confidence");
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, t)| {
            let o = *acc;
            *acc += t.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut buf = vec![0u8; stride * count];
    r.read_exact(&mut buf)?;

    let mut points = Vec::with_capacity(count);
    let mut valid = Vec::with_capacity(count);
    let mut confs = Vec::with_capacity(count);
    for v in 0..count {
        let rec = &buf[v * stride..(v + 1) * stride];
        let get = |k: usize| props[k].1.read(&rec[offsets[k]..]);
        let p = Vector3::new(get(ix), get(iy), get(iz));
        let c = ic.map_or(1.0, get);
        let ok = c > 0.0 && p.iter().all(|x| x.is_finite());
        points.push(p);
        valid.push(ok);
        confs.push(if ok { c.max(1.0) } else { 1.0 });
    }
    Ok((
        PointMap::new(width, height, points, valid, subject, frame)?,
        ConfidenceMap::new(width, height, confs)?,
    ))
}

/// Writes an unstructured point cloud (e.g. a fused reconstruction).
pub fn write_point_cloud_ply(path: impl AsRef<Path>, points: &[Vector3<f64>]) -> Result<()> {
    let pm = PointMap::dense(points.len(), 1, points.to_vec(), 0, 0)?;
    write_pointmap_ply(path, &pm, None)
}

/// Sidecar mask path for a raw depth file: same stem, `.mask` extension.
pub fn mask_path_for(depth_path: impl AsRef<Path>) -> PathBuf {
    depth_path.as_ref().with_extension("mask")
}

fn write_header(w: &mut impl Write, width: usize, height: usize) -> Result<()> {
    let w32 = u32::try_from(width).map_err(|_| Error::invalid("width exceeds u32"))?;
    let h32 = u32::try_from(height).map_err(|_| Error::invalid("height exceeds u32"))?;
    w.write_all(&w32.to_le_bytes())?;
    w.write_all(&h32.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(usize, usize)> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let w = u32::from_le_bytes(b[..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(b[4..].try_into().unwrap()) as usize;
    Ok((w, h))
}

/// Raw float32 grid: `u32 width, u32 height` (little-endian) then row-major values.
pub fn write_raw_f32(path: impl AsRef<Path>, grid: &Grid<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, grid.width, grid.height)?;
    for v in &grid.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_f32(path: impl AsRef<Path>) -> Result<Grid<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h) = read_header(&mut r)?;
    let mut buf = vec![0u8; 4 * w * h];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Grid::from_vec(w, h, data)
}

/// Writes depth values to `path` and the validity mask to [`mask_path_for`]`(path)`.
pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    write_raw_f32(
        path,
        &Grid {
            width: depth.width,
            height: depth.height,
            data: depth.values.clone(),
        },
    )?;
    let mut w = BufWriter::new(File::create(mask_path_for(path))?);
    write_header(&mut w, depth.width, depth.height)?;
    let bytes: Vec<u8> = depth.mask.iter().map(|&m| m as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a raw depth file. Without a mask sidecar, every finite positive
/// value counts as valid.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let grid = read_raw_f32(path)?;
    let mask_path = mask_path_for(path);
    let mask = if mask_path.exists() {
        let mut r = BufReader::new(File::open(&mask_path)?);
        let (w, h) = read_header(&mut r)?;
        if (w, h) != grid.dims() {
            return Err(Error::DimensionMismatch {
                expected: grid.dims(),
                got: (w, h),
            });
        }
        let mut buf = vec![0u8; w * h];
        r.read_exact(&mut buf)?;
        buf.into_iter().map(|b| b != 0).collect()
    } else {
        grid.data.iter().map(|v| v.is_finite() && *v > 0.0).collect()
    };
    DepthMap::new(grid.width, grid.height, grid.data, mask)
}

pub fn write_intrinsics(path: impl AsRef<Path>, k: &CameraIntrinsics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(k)?)?;
    Ok(())
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    k.validate()?;
    Ok(k)
}

/// JSON form of a pose: rotation as 9 row-major floats, translation as 3.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&RigidPose> for PoseJson {
    fn from(p: &RigidPose) -> Self {
        let m = &p.rotation;
        PoseJson {
            r: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<&PoseJson> for RigidPose {
    type Error = Error;

    fn try_from(j: &PoseJson) -> Result<Self> {
        RigidPose::new(
            Matrix3::from_row_slice(&j.r),
            Vector3::new(j.t[0], j.t[1], j.t[2]),
        )
    }
}

pub fn write_pose(path: impl AsRef<Path>, pose: &RigidPose) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&PoseJson::from(pose))?)?;
    Ok(())
}

pub fn read_pose(path: impl AsRef<Path>) -> Result<RigidPose> {
    let j: PoseJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    RigidPose::try_from(&j)
}
