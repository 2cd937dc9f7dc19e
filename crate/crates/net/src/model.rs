//! Two-branch transformer regressing pointmaps from an image pair, with
//! optional prior conditioning.
//!
//! Layout: a Siamese ViT encoder, two decoders exchanging information via
//! cross-attention, and one linear head per decoder. Priors enter as
//! token-wise MLP embeddings: rays and depth in the encoder, relative pose
//! on the decoder CLS tokens.

use std::fmt;
use std::str::FromStr;

use pointmap_core::conditioning::{
    depth_patches, encode_pose, normalize_depth_input, patchify, ray_patches, rays_from_intrinsics,
    AuxiliaryBundle, ModalityMask, Patches,
};
use pointmap_core::geom::{ConfidenceMap, Grid, PointMap};
use pointmap_core::loss::LossGradients;
use pointmap_core::{Error, PairPrediction, Result};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParameterStore;
use crate::tape::{Tape, Tensor, Var};

/// Upper clamp on raw confidence logits before `1 + exp`.
pub const MAX_CONF_LOGIT: f64 = 40.0;

/// Where prior embeddings enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Added once, before the first block.
    Embed,
    /// Block-specific MLPs added between attention and MLP in the first n blocks.
    Inject(usize),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Embed => write!(f, "embed"),
            Variant::Inject(n) => write!(f, "inject{n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "embed" {
            return Ok(Variant::Embed);
        }
        let n = s
            .strip_prefix("inject")
            .map(|r| r.trim_start_matches(['-', '_']))
            .and_then(|r| r.parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}; use embed or injectN")))?;
        Ok(Variant::Inject(n))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Share every decoder and head parameter between the two branches.
    #[serde(default)]
    pub tie_decoders: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 64,
            height: 64,
            patch_size: 8,
            dim: 64,
            enc_blocks: 3,
            dec_blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            variant: Variant::Inject(1),
            seed: 0,
            tie_decoders: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.width == 0 || self.height == 0 || self.width % p != 0 || self.height % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.width, self.height
            )));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::invalid("width must be a multiple of 4 for the positional encoding"));
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("block counts and MLP ratio must be positive"));
        }
        if let Variant::Inject(n) = self.variant {
            if n == 0 || n > self.dec_blocks {
                return Err(Error::invalid(format!(
                    "inject{n} needs 1 <= n <= {} decoder blocks",
                    self.dec_blocks
                )));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.width / self.patch_size) * (self.height / self.patch_size)
    }

    fn grid_width(&self) -> usize {
        self.width / self.patch_size
    }

    fn inject_blocks(&self, blocks: usize) -> usize {
        match self.variant {
            Variant::Embed => 0,
            Variant::Inject(n) => n.min(blocks),
        }
    }
}

/// Network inputs for one image pair, already patchified.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub rgb: [Patches; 2],
    pub rays: [Option<Patches>; 2],
    pub depth: [Option<Patches>; 2],
    pub pose: Option<[f64; 12]>,
}

impl NetInput {
    /// Encodes the images and whichever priors `aux` carries. Intrinsics
    /// must describe the images as given (crop-adjusted if cropped).
    pub fn new(rgb1: &Grid<[f64; 3]>, rgb2: &Grid<[f64; 3]>, aux: &AuxiliaryBundle, patch: usize) -> Result<Self> {
        if rgb1.dims() != rgb2.dims() {
            return Err(Error::DimensionMismatch {
                expected: rgb1.dims(),
                got: rgb2.dims(),
            });
        }
        let (w, h) = rgb1.dims();
        let rgb = |img: &Grid<[f64; 3]>| -> Result<Patches> {
            let chans: Vec<Vec<f64>> = (0..3)
                .map(|c| img.data.iter().map(|px| 2.0 * px[c] - 1.0).collect())
                .collect();
            patchify(&[&chans[0], &chans[1], &chans[2]], w, h, patch)
        };
        let rays = |k: Option<&pointmap_core::CameraIntrinsics>| -> Result<Option<Patches>> {
            k.map(|k| {
                if (k.width, k.height) != (w, h) {
                    return Err(Error::DimensionMismatch {
                        expected: (w, h),
                        got: (k.width, k.height),
                    });
                }
                ray_patches(&rays_from_intrinsics(k, None)?, patch)
            })
            .transpose()
        };
        let depth = |d: Option<&pointmap_core::DepthMap>| -> Result<Option<Patches>> {
            d.map(|d| {
                if d.dims() != (w, h) {
                    return Err(Error::DimensionMismatch {
                        expected: (w, h),
                        got: d.dims(),
                    });
                }
                depth_patches(&normalize_depth_input(d)?, patch)
            })
            .transpose()
        };
        Ok(NetInput {
            rgb: [rgb(rgb1)?, rgb(rgb2)?],
            rays: [rays(aux.k1.as_ref())?, rays(aux.k2.as_ref())?],
            depth: [depth(aux.d1.as_ref())?, depth(aux.d2.as_ref())?],
            pose: aux.p12.as_ref().map(|p| encode_pose(p).features()),
        })
    }

    pub fn mask(&self) -> ModalityMask {
        ModalityMask {
            k1: self.rays[0].is_some(),
            k2: self.rays[1].is_some(),
            d1: self.depth[0].is_some(),
            d2: self.depth[1].is_some(),
            p12: self.pose.is_some(),
        }
    }
}

/// Kinds of prior embedding parameters, for dead-path checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Ray,
    Depth,
    Pose,
}

impl Modality {
    fn tag(&self) -> &'static str {
        match self {
            Modality::Ray => ".ray.",
            Modality::Depth => ".depth.",
            Modality::Pose => ".pose.",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub cfg: NetConfig,
    pub params: ParameterStore,
    pos_enc: Tensor,
}

fn linear(ps: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    ps.insert_normal(&format!("{name}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng);
    ps.insert_const(&format!("{name}.b"), 1, fan_out, 0.0);
}

fn layer_norm_params(ps: &mut ParameterStore, name: &str, d: usize) {
    ps.insert_const(&format!("{name}.g"), 1, d, 1.0);
    ps.insert_const(&format!("{name}.b"), 1, d, 0.0);
}

fn attention_params(ps: &mut ParameterStore, name: &str, d: usize, rng: &mut ChaCha8Rng) {
    for proj in ["q", "k", "v", "o"] {
        linear(ps, &format!("{name}.{proj}"), d, d, rng);
    }
}

fn mlp_params(ps: &mut ParameterStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    linear(ps, &format!("{name}.l1"), d_in, hidden, rng);
    linear(ps, &format!("{name}.l2"), hidden, d_out, rng);
}

/// 2D sinusoidal encoding: half the width for the column index, half for the row.
fn positional_encoding(gw: usize, gh: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut t = Tensor::zeros(gw * gh, d);
    for ty in 0..gh {
        for tx in 0..gw {
            let row = ty * gw + tx;
            for (half, pos) in [(0, tx as f64), (1, ty as f64)] {
                for k in 0..quarter {
                    let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                    let base = half * 2 * quarter;
                    t.data[row * d + base + k] = (pos * freq).sin();
                    t.data[row * d + base + quarter + k] = (pos * freq).cos();
                }
            }
        }
    }
    t
}

const RAY_CHANNELS: usize = 3;
const DEPTH_CHANNELS: usize = 2;
const POSE_FEATURES: usize = 12;
const HEAD1_CHANNELS: usize = 4;
const HEAD2_CHANNELS: usize = 8;

/// Offset of the first confidence logit within a pixel's head channels.
fn conf_offset(channels: usize) -> usize {
    if channels == HEAD1_CHANNELS {
        3
    } else {
        6
    }
}

impl ToyNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParameterStore::new();
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let p2 = cfg.patch_size * cfg.patch_size;

        linear(&mut ps, "enc.patch", p2 * 3, d, &mut rng);
        let enc_inject = cfg.inject_blocks(cfg.enc_blocks);
        if cfg.variant == Variant::Embed {
            mlp_params(&mut ps, "enc.ray", p2 * RAY_CHANNELS, d, d, &mut rng);
            mlp_params(&mut ps, "enc.depth", p2 * DEPTH_CHANNELS, d, d, &mut rng);
        }
        for b in 0..cfg.enc_blocks {
            let pre = format!("enc.{b}");
            layer_norm_params(&mut ps, &format!("{pre}.ln1"), d);
            attention_params(&mut ps, &format!("{pre}.attn"), d, &mut rng);
            if b < enc_inject {
                mlp_params(&mut ps, &format!("{pre}.ray"), p2 * RAY_CHANNELS, d, d, &mut rng);
                mlp_params(&mut ps, &format!("{pre}.depth"), p2 * DEPTH_CHANNELS, d, d, &mut rng);
            }
            layer_norm_params(&mut ps, &format!("{pre}.ln2"), d);
            mlp_params(&mut ps, &format!("{pre}.mlp"), d, hidden, d, &mut rng);
        }
        layer_norm_params(&mut ps, "enc.ln_out", d);

        let branches: &[usize] = if cfg.tie_decoders { &[1] } else { &[1, 2] };
        let dec_inject = cfg.inject_blocks(cfg.dec_blocks);
        for &k in branches {
            let pre = format!("dec{k}");
            ps.insert_normal(&format!("{pre}.cls"), 1, d, 0.02, &mut rng);
            linear(&mut ps, &format!("{pre}.embed"), d, d, &mut rng);
            if cfg.variant == Variant::Embed {
                mlp_params(&mut ps, &format!("{pre}.pose"), POSE_FEATURES, d, d, &mut rng);
            }
            for b in 0..cfg.dec_blocks {
                let bp = format!("{pre}.{b}");
                layer_norm_params(&mut ps, &format!("{bp}.ln1"), d);
                attention_params(&mut ps, &format!("{bp}.self"), d, &mut rng);
                layer_norm_params(&mut ps, &format!("{bp}.ln2"), d);
                layer_norm_params(&mut ps, &format!("{bp}.ln_kv"), d);
                attention_params(&mut ps, &format!("{bp}.cross"), d, &mut rng);
                if b < dec_inject {
                    mlp_params(&mut ps, &format!("{bp}.pose"), POSE_FEATURES, d, d, &mut rng);
                }
                layer_norm_params(&mut ps, &format!("{bp}.ln3"), d);
                mlp_params(&mut ps, &format!("{bp}.mlp"), d, hidden, d, &mut rng);
            }
            layer_norm_params(&mut ps, &format!("{pre}.ln_out"), d);
        }
        for &k in branches {
            // A tied head serves both branches, so it takes the wider layout.
            let ch = if k == 1 && !cfg.tie_decoders {
                HEAD1_CHANNELS
            } else {
                HEAD2_CHANNELS
            };
            let name = format!("head{k}");
            ps.insert_normal(&format!("{name}.w"), d, p2 * ch, 0.1 / (d as f64).sqrt(), &mut rng);
            let mut bias = vec![0.0; p2 * ch];
            for px in 0..p2 {
                bias[px * ch + 2] = 1.0;
                if ch == HEAD2_CHANNELS {
                    bias[px * ch + 5] = 1.0;
                }
            }
            ps.insert(&format!("{name}.b"), Tensor::from_vec(1, p2 * ch, bias));
        }

        let pos_enc = positional_encoding(cfg.grid_width(), cfg.height / cfg.patch_size, d);
        Ok(ToyNet {
            cfg,
            params: ps,
            pos_enc,
        })
    }

    /// Store indices of the embedding parameters of one prior kind.
    pub fn modality_params(&self, m: Modality) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params.name(i).contains(m.tag()))
            .collect()
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph {
            net: self,
            tape: Tape::new(),
            leaves: vec![None; self.params.len()],
        }
    }

    /// Full forward pass.
    pub fn forward(&self, input: &NetInput) -> Result<Forward<'_>> {
        let mut g = self.graph();
        let f1 = g.encode(&input.rgb[0], input.rays[0].as_ref(), input.depth[0].as_ref())?;
        let f2 = g.encode(&input.rgb[1], input.rays[1].as_ref(), input.depth[1].as_ref())?;
        let (g1, g2) = g.decode(f1, f2, input.pose.as_ref());
        let (h1, h2) = g.heads(g1, g2);
        let prediction = g.assemble(h1, h2)?;
        Ok(Forward {
            graph: g,
            head1: h1,
            head2: h2,
            prediction,
        })
    }

    pub fn predict(&self, input: &NetInput) -> Result<PairPrediction> {
        self.forward(input).map(|f| f.prediction)
    }
}

/// A forward pass in progress; caches one tape leaf per parameter.
pub struct Graph<'a> {
    net: &'a ToyNet,
    pub tape: Tape,
    leaves: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    fn p(&mut self, name: &str) -> Var {
        let id = self
            .net
            .params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.leaves[id] {
            return v;
        }
        let v = self.tape.param(id, self.net.params.value(id));
        self.leaves[id] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn mlp(&mut self, x: Var, name: &str) -> Var {
        let h = self.linear(x, &format!("{name}.l1"));
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{name}.l2"))
    }

    fn attention(&mut self, x: Var, kv: Var, name: &str) -> Var {
        let q = self.linear(x, &format!("{name}.q"));
        let k = self.linear(kv, &format!("{name}.k"));
        let v = self.linear(kv, &format!("{name}.v"));
        let a = self.tape.attention(q, k, v, self.net.cfg.heads);
        self.linear(a, &format!("{name}.o"))
    }

    fn patch_input(&mut self, p: &Patches, expect_dim: usize) -> Result<Var> {
        let cfg = &self.net.cfg;
        if p.tokens != cfg.tokens() || p.patch_dim != expect_dim {
            return Err(Error::invalid(format!(
                "patch input is {}x{}, expected {}x{expect_dim}",
                p.tokens,
                p.patch_dim,
                cfg.tokens()
            )));
        }
        Ok(self.tape.input(Tensor::from_vec(p.tokens, p.patch_dim, p.data.clone())))
    }

    /// Prior embedding tokens for one image: sum of the ray and depth MLPs
    /// that have an input.
    fn prior_embedding(&mut self, prefix: &str, rays: Option<Var>, depth: Option<Var>) -> Option<Var> {
        let r = rays.map(|x| self.mlp(x, &format!("{prefix}.ray")));
        let d = depth.map(|x| self.mlp(x, &format!("{prefix}.depth")));
        match (r, d) {
            (Some(a), Some(b)) => Some(self.tape.add(a, b)),
            (a, b) => a.or(b),
        }
    }

    /// Siamese encoder for one image and its own priors.
    pub fn encode(&mut self, rgb: &Patches, rays: Option<&Patches>, depth: Option<&Patches>) -> Result<Var> {
        let cfg = self.net.cfg.clone();
        let p2 = cfg.patch_size * cfg.patch_size;
        let x = self.patch_input(rgb, p2 * 3)?;
        let rays = rays.map(|r| self.patch_input(r, p2 * RAY_CHANNELS)).transpose()?;
        let depth = depth.map(|d| self.patch_input(d, p2 * DEPTH_CHANNELS)).transpose()?;

        let mut x = self.linear(x, "enc.patch");
        let pe = self.tape.input(self.net.pos_enc.clone());
        x = self.tape.add(x, pe);
        if cfg.variant == Variant::Embed {
            if let Some(e) = self.prior_embedding("enc", rays, depth) {
                x = self.tape.add(x, e);
            }
        }
        let inject = cfg.inject_blocks(cfg.enc_blocks);
        for b in 0..cfg.enc_blocks {
            let pre = format!("enc.{b}");
            let h = self.layer_norm(x, &format!("{pre}.ln1"));
            let a = self.attention(h, h, &format!("{pre}.attn"));
            x = self.tape.add(x, a);
            if b < inject {
                if let Some(e) = self.prior_embedding(&pre, rays, depth) {
                    x = self.tape.add(x, e);
                }
            }
            let h = self.layer_norm(x, &format!("{pre}.ln2"));
            let m = self.mlp(h, &format!("{pre}.mlp"));
            x = self.tape.add(x, m);
        }
        Ok(self.layer_norm(x, "enc.ln_out"))
    }

    fn branch(&self, k: usize) -> usize {
        if self.net.cfg.tie_decoders {
            1
        } else {
            k
        }
    }

    fn pose_embedding(&mut self, name: &str, pose: Option<&[f64; 12]>) -> Option<Var> {
        pose.map(|f| {
            let x = self.tape.input(Tensor::from_vec(1, POSE_FEATURES, f.to_vec()));
            self.mlp(x, name)
        })
    }

    fn decoder_block(&mut self, k: usize, b: usize, x: Var, other: Var, pose: Option<&[f64; 12]>) -> Var {
        let pre = format!("dec{}.{b}", self.branch(k));
        let h = self.layer_norm(x, &format!("{pre}.ln1"));
        let a = self.attention(h, h, &format!("{pre}.self"));
        let mut x = self.tape.add(x, a);
        let h = self.layer_norm(x, &format!("{pre}.ln2"));
        let kv = self.layer_norm(other, &format!("{pre}.ln_kv"));
        let c = self.attention(h, kv, &format!("{pre}.cross"));
        x = self.tape.add(x, c);
        if b < self.net.cfg.inject_blocks(self.net.cfg.dec_blocks) {
            if let Some(e) = self.pose_embedding(&format!("{pre}.pose"), pose) {
                x = self.tape.add_to_row(x, e, 0);
            }
        }
        let h = self.layer_norm(x, &format!("{pre}.ln3"));
        let m = self.mlp(h, &format!("{pre}.mlp"));
        self.tape.add(x, m)
    }

    /// Twin decoders; each block cross-attends to the other branch's
    /// previous-block output. Returns sequences with the CLS token first.
    pub fn decode(&mut self, f1: Var, f2: Var, pose: Option<&[f64; 12]>) -> (Var, Var) {
        let mut xs = [f1, f2];
        for (k, x) in xs.iter_mut().enumerate() {
            let pre = format!("dec{}", self.branch(k + 1));
            let e = self.linear(*x, &format!("{pre}.embed"));
            let cls = self.p(&format!("{pre}.cls"));
            let mut seq = self.tape.concat_rows(cls, e);
            if self.net.cfg.variant == Variant::Embed {
                if let Some(pe) = self.pose_embedding(&format!("{pre}.pose"), pose) {
                    seq = self.tape.add_to_row(seq, pe, 0);
                }
            }
            *x = seq;
        }
        for b in 0..self.net.cfg.dec_blocks {
            let [x1, x2] = xs;
            let y1 = self.decoder_block(1, b, x1, x2, pose);
            let y2 = self.decoder_block(2, b, x2, x1, pose);
            xs = [y1, y2];
        }
        let n = self.net.cfg.tokens();
        let mut out = [0; 2];
        for (k, x) in xs.into_iter().enumerate() {
            let pre = format!("dec{}", self.branch(k + 1));
            let y = self.layer_norm(x, &format!("{pre}.ln_out"));
            out[k] = y;
        }
        debug_assert_eq!(self.tape.value(out[0]).rows, n + 1);
        (out[0], out[1])
    }

    /// Linear heads on the patch tokens (CLS dropped). Outputs are
    /// `tokens x patch^2 * channels`, pixel-major then channel.
    pub fn heads(&mut self, g1: Var, g2: Var) -> (Var, Var) {
        let n = self.net.cfg.tokens();
        let t1 = self.tape.slice_rows(g1, 1, n);
        let t2 = self.tape.slice_rows(g2, 1, n);
        let h2 = self.linear(t2, &format!("head{}", self.branch(2)));
        let h1 = self.linear(t1, &format!("head{}", self.branch(1)));
        (h1, h2)
    }

    fn channels(&self, head: Var) -> usize {
        self.tape.value(head).cols / (self.net.cfg.patch_size * self.net.cfg.patch_size)
    }

    /// Pixel index and head-output offset of every (token, in-patch pixel).
    fn pixel_layout(&self) -> Vec<(usize, usize, usize)> {
        let cfg = &self.net.cfg;
        let (p, gw) = (cfg.patch_size, cfg.grid_width());
        let mut out = Vec::with_capacity(cfg.width * cfg.height);
        for t in 0..cfg.tokens() {
            let (tx, ty) = (t % gw, t / gw);
            for py in 0..p {
                for px in 0..p {
                    let pix = (ty * p + py) * cfg.width + tx * p + px;
                    out.push((pix, t, py * p + px));
                }
            }
        }
        out
    }

    /// Reshapes head outputs into the three pointmaps and confidences.
    pub fn assemble(&self, h1: Var, h2: Var) -> Result<PairPrediction> {
        let (w, h) = (self.net.cfg.width, self.net.cfg.height);
        let n = w * h;
        let (o1, o2) = (self.tape.value(h1), self.tape.value(h2));
        let (c1, c2) = (self.channels(h1), self.channels(h2));
        let mut pts = [vec![Vector3::zeros(); n], vec![Vector3::zeros(); n], vec![Vector3::zeros(); n]];
        let mut conf = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let act = |raw: f64| 1.0 + raw.min(MAX_CONF_LOGIT).exp();
        for (pix, t, q) in self.pixel_layout() {
            let a = &o1.row(t)[q * c1..(q + 1) * c1];
            let b = &o2.row(t)[q * c2..(q + 1) * c2];
            pts[0][pix] = Vector3::new(a[0], a[1], a[2]);
            conf[0][pix] = act(a[conf_offset(c1)]);
            pts[1][pix] = Vector3::new(b[0], b[1], b[2]);
            pts[2][pix] = Vector3::new(b[3], b[4], b[5]);
            conf[1][pix] = act(b[6]);
            conf[2][pix] = act(b[7]);
        }
        let [p11, p21, p22] = pts;
        let [k11, k21, k22] = conf;
        PairPrediction::new(
            PointMap::dense(w, h, p11, 0, 0)?,
            PointMap::dense(w, h, p21, 1, 0)?,
            PointMap::dense(w, h, p22, 1, 1)?,
            ConfidenceMap::new(w, h, k11)?,
            ConfidenceMap::new(w, h, k21)?,
            ConfidenceMap::new(w, h, k22)?,
        )
    }

    /// Back-propagates from seeds and returns `(param id, gradient)` for
    /// every parameter that took part in the pass.
    pub fn param_grads(&self, seeds: &[(Var, Tensor)]) -> Vec<(usize, Tensor)> {
        let mut grads = self.tape.backward(seeds);
        self.tape
            .param_leaves()
            .map(|(v, id)| {
                let g = grads[v]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).rows, self.tape.value(v).cols));
                (id, g)
            })
            .collect()
    }
}

pub struct Forward<'a> {
    pub graph: Graph<'a>,
    pub head1: Var,
    pub head2: Var,
    pub prediction: PairPrediction,
}

impl Forward<'_> {
    /// Maps output-space gradients onto the raw head outputs, including
    /// the confidence activation.
    pub fn head_seeds(&self, g: &LossGradients) -> [(Var, Tensor); 2] {
        let tape = &self.graph.tape;
        let (o1, o2) = (tape.value(self.head1), tape.value(self.head2));
        let (c1, c2) = (self.graph.channels(self.head1), self.graph.channels(self.head2));
        let mut s1 = Tensor::zeros(o1.rows, o1.cols);
        let mut s2 = Tensor::zeros(o2.rows, o2.cols);
        let dact = |raw: f64| if raw < MAX_CONF_LOGIT { raw.exp() } else { 0.0 };
        for (pix, t, q) in self.graph.pixel_layout() {
            let b1 = t * o1.cols + q * c1;
            let b2 = t * o2.cols + q * c2;
            for c in 0..3 {
                s1.data[b1 + c] = g.x11[pix][c];
                s2.data[b2 + c] = g.x21[pix][c];
                s2.data[b2 + 3 + c] = g.x22[pix][c];
            }
            let k1 = b1 + conf_offset(c1);
            s1.data[k1] = g.c11[pix] * dact(o1.data[k1]);
            s2.data[b2 + 6] = g.c21[pix] * dact(o2.data[b2 + 6]);
            s2.data[b2 + 7] = g.c22[pix] * dact(o2.data[b2 + 7]);
        }
        [(self.head1, s1), (self.head2, s2)]
    }

    pub fn param_grads(&self, g: &LossGradients) -> Vec<(usize, Tensor)> {
        self.graph.param_grads(&self.head_seeds(g))
    }
}
