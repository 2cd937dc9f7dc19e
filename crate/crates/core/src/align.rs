//! Fusion of many pairwise predictions into one world frame.
//!
//! Each edge `e = (i, j)` carries `X^{i,i}` and `X^{j,i}` in the frame of
//! image `i`. The energy
//!
//! `E = sum_e sum_{v in e} sum_p C_v(p) || chi_v(p) - sigma_e (R_e x_v(p) + t_e) ||`
//!
//! is minimized over world pointmaps `chi`, edge rotations, translations and
//! log-scales by gradient descent, preconditioned with reweighted curvatures
//! and safeguarded by a step-halving line search. The first edge touching
//! image 0 has its rotation and translation frozen, and the product of edge
//! scales is held at 1.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{ConfidenceMap, DepthMap, PointMap, RigidPose};
use crate::numeric::pairwise_sum;
use crate::prediction::PairPrediction;
use crate::solvers::{weighted_similarity, weiszfeld_focal, ScaledPose};

/// Frame tag carried by world pointmaps.
pub const WORLD_FRAME: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct PairEdge {
    pub i: usize,
    pub j: usize,
    pub pred: PairPrediction,
}

impl PairEdge {
    /// The two observations of this edge: `(image, points, confidence)`.
    fn views(&self) -> [(usize, &PointMap, &ConfidenceMap); 2] {
        [
            (self.i, &self.pred.x11, &self.pred.c11),
            (self.j, &self.pred.x21, &self.pred.c21),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGraph {
    pub n_images: usize,
    pub edges: Vec<PairEdge>,
    dims: Vec<(usize, usize)>,
}

/// Validates indices, dimensions and connectivity. Edges are ordered by
/// `(i, j)`, duplicates keeping their input order.
pub fn build_graph(pairs: Vec<(usize, usize, PairPrediction)>) -> Result<PairGraph> {
    if pairs.is_empty() {
        return Err(Error::invalid("pair graph has no edges"));
    }
    let n_images = pairs.iter().map(|(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
    let mut dims: Vec<Option<(usize, usize)>> = vec![None; n_images];
    let mut edges = Vec::with_capacity(pairs.len());
    for (i, j, pred) in pairs {
        if i == j {
            return Err(Error::invalid(format!("self-edge on image {i}")));
        }
        for (v, d) in [(i, pred.x11.dims()), (j, pred.x21.dims())] {
            match dims[v] {
                Some(prev) if prev != d => {
                    return Err(Error::DimensionMismatch {
                        expected: prev,
                        got: d,
                    })
                }
                _ => dims[v] = Some(d),
            }
        }
        edges.push(PairEdge { i, j, pred });
    }
    edges.sort_by_key(|e| (e.i, e.j));

    let mut adj = vec![Vec::new(); n_images];
    for e in &edges {
        adj[e.i].push(e.j);
        adj[e.j].push(e.i);
    }
    let mut seen = vec![false; n_images];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Disconnected(format!(
            "image {missing} is not connected to image 0"
        )));
    }
    Ok(PairGraph {
        n_images,
        edges,
        dims: dims.into_iter().map(|d| d.unwrap_or((0, 0))).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub iters: usize,
    /// Initial step relative to the majorizer minimum (1 is a full step).
    pub lr: f64,
    pub focal_iters: usize,
    /// Optional `(magnitude, seed)` perturbation of the initial state:
    /// world points move by up to `magnitude` times their mean norm, edge
    /// rotations by up to `magnitude` radians per axis, log-scales by up to
    /// `magnitude`.
    pub init_jitter: Option<(f64, u64)>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            iters: 2000,
            lr: 1.0,
            focal_iters: 100,
            init_jitter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalScene {
    /// World-frame pointmap per image.
    pub points: Vec<PointMap>,
    /// World-to-camera pose per image, in world units.
    pub poses: Vec<RigidPose>,
    pub focals: Vec<f64>,
    pub edge_scales: Vec<f64>,
    /// Edge frame to world.
    pub edge_poses: Vec<RigidPose>,
    /// Energy at initialization followed by every accepted step.
    pub energy_trace: Vec<f64>,
}

impl GlobalScene {
    pub fn energy(&self) -> f64 {
        *self.energy_trace.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, Clone)]
struct State {
    chi: Vec<Vec<Vector3<f64>>>,
    rot: Vec<Matrix3<f64>>,
    trans: Vec<Vector3<f64>>,
    log_scale: Vec<f64>,
}

struct Gradient {
    chi: Vec<Vec<Vector3<f64>>>,
    rot: Vec<Vector3<f64>>,
    trans: Vec<Vector3<f64>>,
    log_scale: Vec<f64>,
}

fn energy(graph: &PairGraph, s: &State) -> f64 {
    let per_edge: Vec<f64> = graph
        .edges
        .iter()
        .enumerate()
        .map(|(e, edge)| {
            let sigma = s.log_scale[e].exp();
            let mut terms = Vec::new();
            for (v, x, c) in edge.views() {
                for p in 0..x.points.len() {
                    if x.valid[p] {
                        let model = (s.rot[e] * x.points[p] + s.trans[e]) * sigma;
                        terms.push(c.values[p] * (s.chi[v][p] - model).norm());
                    }
                }
            }
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&per_edge)
}

fn gradient(graph: &PairGraph, s: &State) -> Gradient {
    let mut g = Gradient {
        chi: s.chi.iter().map(|c| vec![Vector3::zeros(); c.len()]).collect(),
        rot: vec![Vector3::zeros(); graph.edges.len()],
        trans: vec![Vector3::zeros(); graph.edges.len()],
        log_scale: vec![0.0; graph.edges.len()],
    };
    for (e, edge) in graph.edges.iter().enumerate() {
        let sigma = s.log_scale[e].exp();
        for (v, x, c) in edge.views() {
            for p in 0..x.points.len() {
                if !x.valid[p] {
                    continue;
                }
                let rx = s.rot[e] * x.points[p];
                let q = rx + s.trans[e];
                let r = s.chi[v][p] - q * sigma;
                let n = r.norm();
                if n == 0.0 {
                    continue;
                }
                let gp = r * (c.values[p] / n);
                g.chi[v][p] += gp;
                g.trans[e] -= gp * sigma;
                g.log_scale[e] -= sigma * q.dot(&gp);
                g.rot[e] -= rx.cross(&gp) * sigma;
            }
        }
    }
    g
}

/// Diagonal majorizer of the energy at the current state: each norm term
/// `C ||r||` is bounded by the quadratic `C ||r'||^2 / (2 ||r||)`, which gives
/// Weiszfeld-style curvatures per parameter block.
struct Preconditioner {
    chi: Vec<Vec<f64>>,
    rot: Vec<f64>,
    trans: Vec<f64>,
    log_scale: Vec<f64>,
}

fn preconditioner(graph: &PairGraph, s: &State, floor: f64) -> Preconditioner {
    let mut chi: Vec<Vec<f64>> = s.chi.iter().map(|c| vec![0.0; c.len()]).collect();
    let ne = graph.edges.len();
    let (mut rot, mut trans, mut log_scale) = (vec![0.0; ne], vec![0.0; ne], vec![0.0; ne]);
    for (e, edge) in graph.edges.iter().enumerate() {
        let sigma = s.log_scale[e].exp();
        let s2 = sigma * sigma;
        for (v, x, c) in edge.views() {
            for p in 0..x.points.len() {
                if x.valid[p] {
                    let rx = s.rot[e] * x.points[p];
                    let q = rx + s.trans[e];
                    let rho = (s.chi[v][p] - q * sigma).norm().max(floor);
                    let w = c.values[p] / rho;
                    chi[v][p] += w;
                    trans[e] += w * s2;
                    rot[e] += w * s2 * rx.norm_squared();
                    log_scale[e] += w * s2 * q.norm_squared();
                }
            }
        }
    }
    Preconditioner {
        chi,
        rot,
        trans,
        log_scale,
    }
}

#[inline]
fn safe_inv(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / x
    } else {
        0.0
    }
}

fn step(s: &State, g: &Gradient, pc: &Preconditioner, anchor: usize, lr: f64) -> State {
    let mut next = s.clone();
    for (v, chi) in next.chi.iter_mut().enumerate() {
        for (p, x) in chi.iter_mut().enumerate() {
            *x -= g.chi[v][p] * (lr * safe_inv(pc.chi[v][p]));
        }
    }
    let ne = s.rot.len();
    // Projected to zero mean so the product of scales is preserved.
    let mut ds: Vec<f64> = (0..ne)
        .map(|e| -g.log_scale[e] * safe_inv(pc.log_scale[e]))
        .collect();
    let mean = ds.iter().sum::<f64>() / ne as f64;
    ds.iter_mut().for_each(|d| *d -= mean);
    for e in 0..ne {
        next.log_scale[e] += lr * ds[e];
        if e == anchor {
            continue;
        }
        next.trans[e] -= g.trans[e] * (lr * safe_inv(pc.trans[e]));
        let omega = g.rot[e] * (-lr * safe_inv(pc.rot[e]));
        next.rot[e] = Rotation3::new(omega).into_inner() * s.rot[e];
    }
    next
}

fn anchor_edge(graph: &PairGraph) -> usize {
    graph
        .edges
        .iter()
        .position(|e| e.i == 0 || e.j == 0)
        .unwrap_or(0)
}

/// Spanning-tree chaining of pairwise similarities, then world points as
/// the confidence-weighted mean of every observation.
fn initialize(graph: &PairGraph) -> Result<State> {
    let ne = graph.edges.len();
    let anchor = anchor_edge(graph);
    let mut edge_pose: Vec<Option<ScaledPose>> = vec![None; ne];
    let mut chi: Vec<Option<Vec<Vector3<f64>>>> = vec![None; graph.n_images];
    let mut chi_valid: Vec<Vec<bool>> = vec![Vec::new(); graph.n_images];

    let place = |edge: &PairEdge, pose: &ScaledPose, chi: &mut Vec<Option<Vec<Vector3<f64>>>>, chi_valid: &mut Vec<Vec<bool>>| {
        for (v, x, _) in edge.views() {
            if chi[v].is_none() {
                chi[v] = Some(x.points.iter().map(|p| pose.apply(p)).collect());
                chi_valid[v] = x.valid.clone();
            }
        }
    };
    let identity = ScaledPose::from_rigid(&RigidPose::identity());
    place(&graph.edges[anchor], &identity, &mut chi, &mut chi_valid);
    edge_pose[anchor] = Some(identity);

    loop {
        let mut progressed = false;
        for (e, edge) in graph.edges.iter().enumerate() {
            if edge_pose[e].is_some() {
                continue;
            }
            let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
            for (v, x, c) in edge.views() {
                if let Some(target) = &chi[v] {
                    for p in 0..x.points.len() {
                        if x.valid[p] && chi_valid[v][p] {
                            src.push(x.points[p]);
                            dst.push(target[p]);
                            w.push(c.values[p]);
                        }
                    }
                }
            }
            if src.is_empty() {
                continue;
            }
            let pose = weighted_similarity(&src, &dst, &w)?;
            place(edge, &pose, &mut chi, &mut chi_valid);
            edge_pose[e] = Some(pose);
            progressed = true;
        }
        if edge_pose.iter().all(Option::is_some) {
            break;
        }
        if !progressed {
            return Err(Error::Disconnected("edge chaining stalled".into()));
        }
    }
    let poses: Vec<ScaledPose> = edge_pose.into_iter().map(|p| p.unwrap()).collect();

    // Normalize the product of scales to 1 by rescaling the world.
    let g = (poses.iter().map(|p| p.scale.ln()).sum::<f64>() / ne as f64).exp();
    let mut sum: Vec<Vec<Vector3<f64>>> = graph
        .dims
        .iter()
        .map(|(w, h)| vec![Vector3::zeros(); w * h])
        .collect();
    let mut mass: Vec<Vec<f64>> = graph.dims.iter().map(|(w, h)| vec![0.0; w * h]).collect();
    for (edge, pose) in graph.edges.iter().zip(&poses) {
        for (v, x, c) in edge.views() {
            for p in 0..x.points.len() {
                if x.valid[p] {
                    sum[v][p] += pose.apply(&x.points[p]) * c.values[p];
                    mass[v][p] += c.values[p];
                }
            }
        }
    }
    let chi = sum
        .into_iter()
        .zip(&mass)
        .map(|(pts, m)| {
            pts.into_iter()
                .zip(m)
                .map(|(p, w)| if *w > 0.0 { p / (*w * g) } else { Vector3::zeros() })
                .collect()
        })
        .collect();
    Ok(State {
        chi,
        rot: poses.iter().map(|p| p.rotation).collect(),
        trans: poses.iter().map(|p| p.translation).collect(),
        log_scale: poses.iter().map(|p| (p.scale / g).ln()).collect(),
    })
}

fn jitter(s: &mut State, anchor: usize, mag: f64, unit: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = |rng: &mut ChaCha8Rng| Vector3::new(
        rng.gen_range(-mag..=mag),
        rng.gen_range(-mag..=mag),
        rng.gen_range(-mag..=mag),
    );
    for chi in s.chi.iter_mut() {
        for x in chi.iter_mut() {
            *x += u(&mut rng) * unit;
        }
    }
    for e in 0..s.rot.len() {
        if e != anchor {
            s.rot[e] = Rotation3::new(u(&mut rng)).into_inner() * s.rot[e];
            s.trans[e] += u(&mut rng) * unit;
        }
    }
    let ds: Vec<f64> = (0..s.log_scale.len()).map(|_| rng.gen_range(-mag..=mag)).collect();
    let mean = ds.iter().sum::<f64>() / ds.len() as f64;
    for (l, d) in s.log_scale.iter_mut().zip(ds) {
        *l += d - mean;
    }
}

/// Image `v` in its own camera frame, taken from the first edge providing it.
fn camera_frame_view(graph: &PairGraph, v: usize) -> Option<(&PointMap, &ConfidenceMap)> {
    graph
        .edges
        .iter()
        .find(|e| e.i == v)
        .map(|e| (&e.pred.x11, &e.pred.c11))
        .or_else(|| {
            graph
                .edges
                .iter()
                .find(|e| e.j == v)
                .map(|e| (&e.pred.x22, &e.pred.c22))
        })
}

pub fn align(graph: &PairGraph, cfg: &AlignConfig) -> Result<GlobalScene> {
    let anchor = anchor_edge(graph);
    let mut state = initialize(graph)?;
    let mut e_cur = energy(graph, &state);
    if !e_cur.is_finite() {
        return Err(Error::Divergence("initial alignment energy is not finite".into()));
    }
    let valid_mask = |v: usize| -> Vec<bool> {
        let mut m = vec![false; state.chi[v].len()];
        for edge in &graph.edges {
            for (u, x, _) in edge.views() {
                if u == v {
                    m.iter_mut().zip(&x.valid).for_each(|(a, b)| *a |= *b);
                }
            }
        }
        m
    };
    let masks: Vec<Vec<bool>> = (0..graph.n_images).map(valid_mask).collect();

    let scale_ref = {
        let norms: Vec<f64> = state
            .chi
            .iter()
            .zip(&masks)
            .flat_map(|(c, m)| c.iter().zip(m).filter(|(_, v)| **v).map(|(p, _)| p.norm()))
            .collect();
        (pairwise_sum(&norms) / norms.len().max(1) as f64).max(f64::MIN_POSITIVE)
    };
    if let Some((mag, seed)) = cfg.init_jitter {
        jitter(&mut state, anchor, mag, scale_ref, seed);
        e_cur = energy(graph, &state);
    }
    let lr_max = cfg.lr.max(0.0);
    let mut lr = lr_max;
    let mut trace = vec![e_cur];
    for _ in 0..cfg.iters {
        if e_cur == 0.0 || lr < 1e-15 {
            break;
        }
        let g = gradient(graph, &state);
        let pc = preconditioner(graph, &state, 1e-12 * scale_ref);
        let mut accepted = false;
        while lr >= 1e-15 {
            let cand = step(&state, &g, &pc, anchor, lr);
            let e_new = energy(graph, &cand);
            if e_new.is_finite() && e_new <= e_cur {
                state = cand;
                e_cur = e_new;
                trace.push(e_cur);
                lr = (lr * 1.5).min(lr_max);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut points = Vec::with_capacity(graph.n_images);
    let mut poses = Vec::with_capacity(graph.n_images);
    let mut focals = Vec::with_capacity(graph.n_images);
    for v in 0..graph.n_images {
        let (w, h) = graph.dims[v];
        let world = PointMap::new(w, h, state.chi[v].clone(), masks[v].clone(), v, WORLD_FRAME)?;
        let (cam, conf) = camera_frame_view(graph, v)
            .ok_or_else(|| Error::Disconnected(format!("image {v} has no observation")))?;
        let (mut src, mut dst, mut wts) = (Vec::new(), Vec::new(), Vec::new());
        for p in 0..cam.points.len() {
            if cam.valid[p] && world.valid[p] {
                src.push(cam.points[p]);
                dst.push(world.points[p]);
                wts.push(conf.values[p]);
            }
        }
        let sim = weighted_similarity(&src, &dst, &wts)?;
        let rt = sim.rotation.transpose();
        let pose = RigidPose {
            rotation: rt,
            translation: -(rt * sim.translation) * sim.scale,
        };
        let local = PointMap::new(
            w,
            h,
            world.points.iter().map(|p| pose.transform_point(p)).collect(),
            world.valid.clone(),
            v,
            v,
        )?;
        let principal = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let focal = weiszfeld_focal(&local, principal, cfg.focal_iters, 1e-12)?.focal;
        points.push(world);
        poses.push(pose);
        focals.push(focal);
    }
    Ok(GlobalScene {
        points,
        poses,
        focals,
        edge_scales: state.log_scale.iter().map(|l| l.exp()).collect(),
        edge_poses: state
            .rot
            .iter()
            .zip(&state.trans)
            .map(|(r, t)| RigidPose {
                rotation: *r,
                translation: *t,
            })
            .collect(),
        energy_trace: trace,
    })
}

/// Depth of image `v`: z of its world points in its own camera frame.
pub fn extract_depth(scene: &GlobalScene, v: usize) -> Result<DepthMap> {
    let pm = scene
        .points
        .get(v)
        .ok_or_else(|| Error::invalid(format!("no image {v} in scene")))?;
    let pose = &scene.poses[v];
    let mut values = vec![0.0; pm.points.len()];
    let mut mask = vec![false; pm.points.len()];
    for (idx, (p, ok)) in pm.points.iter().zip(&pm.valid).enumerate() {
        if *ok {
            let z = pose.transform_point(p).z;
            if z > 0.0 && z.is_finite() {
                values[idx] = z;
                mask[idx] = true;
            }
        }
    }
    DepthMap::new(pm.width, pm.height, values, mask)
}
