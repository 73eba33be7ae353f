//! The sequence denoiser: per-frame residual convolutions on the patch grid,
//! then full self-attention over every token of every frame, with per-frame
//! FiLM conditioning on the noise level and the camera pose.

pub mod ops;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EmbedMode, PoseEmbedding};
use ops::{
    add_assign, attention_bwd, attention_fwd, col2im, film_bwd, film_fwd, im2col, layer_norm_bwd, layer_norm_fwd,
    linear_bwd, linear_fwd, silu_bwd, silu_fwd, Scalar,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_frames: usize,
    pub patch: usize,
    /// Token channel count.
    pub dim: usize,
    pub depth_conv: usize,
    pub depth_attn: usize,
    pub heads: usize,
    pub cond_dim: usize,
    /// Set from the run config's top-level `embed_mode`.
    #[serde(skip)]
    pub embed_mode: EmbedMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: 32,
            width: 32,
            channels: 3,
            max_frames: 27,
            patch: 4,
            dim: 128,
            depth_conv: 2,
            depth_attn: 4,
            heads: 4,
            cond_dim: 128,
            embed_mode: EmbedMode::Plucker,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.height", self.height),
            ("model.width", self.width),
            ("model.channels", self.channels),
            ("model.max_frames", self.max_frames),
            ("model.patch", self.patch),
            ("model.dim", self.dim),
            ("model.heads", self.heads),
            ("model.cond_dim", self.cond_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::validation(key, "must be positive"));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::validation(
                "model.patch",
                format!(
                    "{}x{} image is not divisible by patch {}",
                    self.height, self.width, self.patch
                ),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "model.heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if !self.cond_dim.is_multiple_of(2) {
            return Err(Error::validation("model.cond_dim", "must be even"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Pixel channels entering the patch embedding (image plus per-pixel pose channels).
    pub fn input_channels(&self) -> usize {
        self.channels
            + if self.embed_mode.is_per_pixel() {
                self.embed_mode.channels()
            } else {
                0
            }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Normal with std `1 / sqrt(fan_in)`.
    Fan(usize),
    Zero,
    /// Normal with std 0.02.
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    film1: Linear,
    conv1: Linear,
    film2: Linear,
    conv2: Linear,
}

#[derive(Debug, Clone, Copy)]
struct AttnBlock {
    film_attn: Linear,
    qkv: Linear,
    proj: Linear,
    film_mlp: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Architecture {
    patch_embed: Linear,
    noise1: Linear,
    noise2: Linear,
    pose_proj: Linear,
    conv: Vec<ConvBlock>,
    frame_pos: usize,
    spatial_pos: usize,
    attn: Vec<AttnBlock>,
    film_out: Linear,
    head: Linear,
}

struct LayoutBuilder {
    groups: Vec<ParamGroup>,
    next: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        let offset = self.next;
        self.next += shape.iter().product::<usize>();
        self.groups.push(ParamGroup {
            name,
            offset,
            shape,
            init,
        });
        offset
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Linear {
        let init = if zero { InitKind::Zero } else { InitKind::Fan(din) };
        let w = self.tensor(format!("{name}.weight"), vec![din, dout], init);
        let b = self.tensor(format!("{name}.bias"), vec![dout], InitKind::Zero);
        Linear { w, b, din, dout }
    }
}

fn build_layout(cfg: &DenoiserConfig) -> (Architecture, Vec<ParamGroup>, usize) {
    let mut lb = LayoutBuilder {
        groups: Vec::new(),
        next: 0,
    };
    let d = cfg.dim;
    let cd = cfg.cond_dim;
    let p2 = cfg.patch * cfg.patch;
    let patch_embed = lb.linear("patch_embed", cfg.input_channels() * p2, d, false);
    let noise1 = lb.linear("noise_mlp.0", cd, cd, false);
    let noise2 = lb.linear("noise_mlp.1", cd, cd, false);
    let pose_proj = lb.linear("pose_proj", cfg.embed_mode.channels(), cd, false);
    let conv = (0..cfg.depth_conv)
        .map(|i| ConvBlock {
            film1: lb.linear(&format!("conv.{i}.film1"), cd, 2 * d, true),
            conv1: lb.linear(&format!("conv.{i}.conv1"), 9 * d, d, false),
            film2: lb.linear(&format!("conv.{i}.film2"), cd, 2 * d, true),
            conv2: lb.linear(&format!("conv.{i}.conv2"), 9 * d, d, false),
        })
        .collect();
    let frame_pos = lb.tensor("pos.frame".into(), vec![cfg.max_frames, d], InitKind::Embedding);
    let spatial_pos = lb.tensor(
        "pos.spatial".into(),
        vec![cfg.tokens_per_frame(), d],
        InitKind::Embedding,
    );
    let attn = (0..cfg.depth_attn)
        .map(|i| AttnBlock {
            film_attn: lb.linear(&format!("attn.{i}.film_attn"), cd, 2 * d, true),
            qkv: lb.linear(&format!("attn.{i}.qkv"), d, 3 * d, false),
            proj: lb.linear(&format!("attn.{i}.proj"), d, d, false),
            film_mlp: lb.linear(&format!("attn.{i}.film_mlp"), cd, 2 * d, true),
            fc1: lb.linear(&format!("attn.{i}.fc1"), d, 4 * d, false),
            fc2: lb.linear(&format!("attn.{i}.fc2"), 4 * d, d, false),
        })
        .collect();
    let film_out = lb.linear("out.film", cd, 2 * d, true);
    let head = lb.linear("out.head", d, cfg.channels * p2, true);
    let arch = Architecture {
        patch_embed,
        noise1,
        noise2,
        pose_proj,
        conv,
        frame_pos,
        spatial_pos,
        attn,
        film_out,
        head,
    };
    (arch, lb.groups, lb.next)
}

/// Exact learnable scalar count for `cfg`.
pub fn count_parameters(cfg: &DenoiserConfig) -> usize {
    build_layout(cfg).2
}

/// Sinusoidal embedding of an integer noise level.
pub fn noise_level_embedding(level: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (level as f64 * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

/// Per-frame conditioning: noise level, pose embedding and position in the unified stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub levels: Vec<usize>,
    pub poses: Vec<PoseEmbedding>,
    pub positions: Vec<usize>,
}

impl ConditioningBundle {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Anything that predicts the noise in a corrupted frame stack.
pub trait EpsPredictor: Sync {
    /// `frames` is `N x C x H x W` in model space; returns the same shape.
    fn predict(&self, frames: &[f32], cond: &ConditioningBundle) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Zero FiLM heads and output head: the network starts as an unconditioned zero predictor.
    Standard,
    /// Every tensor random, biases included. Used for gradient checks.
    Random,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar> {
    config: DenoiserConfig,
    arch: Architecture,
    groups: Vec<ParamGroup>,
    pub params: Vec<T>,
}

struct CondCache<T> {
    sin: Vec<T>,
    a1: Vec<T>,
    s1: Vec<T>,
    pose_vec: Vec<T>,
    c_pre: Vec<T>,
    c: Vec<T>,
}

struct ConvCache<T> {
    n1: Vec<T>,
    inv1: Vec<T>,
    gb1: Vec<T>,
    m1: Vec<T>,
    col1: Vec<T>,
    n2: Vec<T>,
    inv2: Vec<T>,
    gb2: Vec<T>,
    m2: Vec<T>,
    col2: Vec<T>,
}

struct AttnCache<T> {
    n1: Vec<T>,
    inv1: Vec<T>,
    gb1: Vec<T>,
    m1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    n2: Vec<T>,
    inv2: Vec<T>,
    gb2: Vec<T>,
    m2: Vec<T>,
    f1: Vec<T>,
    a: Vec<T>,
}

struct Tape<T> {
    frames: usize,
    tokens_in: Vec<T>,
    cond: CondCache<T>,
    conv: Vec<ConvCache<T>>,
    attn: Vec<AttnCache<T>>,
    out_n: Vec<T>,
    out_inv: Vec<T>,
    out_gb: Vec<T>,
    out_m: Vec<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let (arch, groups, total) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); total];
        for g in &groups {
            let std = match (g.init, init) {
                (InitKind::Fan(fan), _) => 1.0 / (fan as f64).sqrt(),
                (InitKind::Embedding, _) => 0.02,
                (InitKind::Zero, Init::Standard) => continue,
                (InitKind::Zero, Init::Random) => 0.1,
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[g.range()] {
                *p = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Ok(Denoiser {
            config,
            arch,
            groups,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (arch, groups, total) = build_layout(&config);
        if params.len() != total {
            return Err(Error::Shape(format!(
                "config needs {total} parameters, blob has {}",
                params.len()
            )));
        }
        Ok(Denoiser {
            config,
            arch,
            groups,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Converts the weights to another precision.
    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            arch: self.arch.clone(),
            groups: self.groups.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("finite")))
                .collect(),
        }
    }

    fn p(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    fn lin_fwd(&self, l: Linear, x: &[T], rows: usize) -> Vec<T> {
        linear_fwd(x, rows, l.din, self.p(l.w, l.din * l.dout), self.p(l.b, l.dout), l.dout)
    }

    fn lin_bwd(&self, l: Linear, x: &[T], rows: usize, dy: &[T], grads: &mut [T], want_dx: bool) -> Option<Vec<T>> {
        let (dw, rest) = grads[l.w..].split_at_mut(l.din * l.dout);
        let db_offset = l.b - l.w - l.din * l.dout;
        let db = &mut rest[db_offset..db_offset + l.dout];
        linear_bwd(x, rows, l.din, self.p(l.w, l.din * l.dout), dy, l.dout, dw, db, want_dx)
    }

    fn check_inputs(&self, frames: &[f32], cond: &ConditioningBundle) -> Result<usize> {
        let cfg = &self.config;
        let n = cond.levels.len();
        if n == 0 || n > cfg.max_frames {
            return Err(Error::Shape(format!(
                "{n} frames, model accepts 1..={}",
                cfg.max_frames
            )));
        }
        if frames.len() != n * cfg.frame_len() {
            return Err(Error::Shape(format!(
                "{} values for {n} frames of {}x{}x{}",
                frames.len(),
                cfg.channels,
                cfg.height,
                cfg.width
            )));
        }
        if cond.poses.len() != n || cond.positions.len() != n {
            return Err(Error::Shape(format!(
                "conditioning has {} poses and {} positions for {n} frames",
                cond.poses.len(),
                cond.positions.len()
            )));
        }
        for e in &cond.poses {
            if e.mode != cfg.embed_mode {
                return Err(Error::Shape(format!(
                    "pose embedding mode {:?}, model expects {:?}",
                    e.mode, cfg.embed_mode
                )));
            }
            if e.data.len() != PoseEmbedding::expected_len(e.mode, cfg.height, cfg.width)
                || (e.mode.is_per_pixel() && (e.height, e.width) != (cfg.height, cfg.width))
            {
                return Err(Error::Shape("pose embedding size does not match the image".into()));
            }
        }
        if let Some(p) = cond.positions.iter().find(|p| **p >= cfg.max_frames) {
            return Err(Error::Shape(format!(
                "frame position {p} >= max_frames {}",
                cfg.max_frames
            )));
        }
        Ok(n)
    }

    /// Patchified `[N*P x Cin*p*p]` input with per-pixel pose channels appended.
    fn patchify_input(&self, frames: &[f32], cond: &ConditioningBundle) -> Vec<T> {
        let cfg = &self.config;
        let (gh, gw) = cfg.grid();
        let p = cfg.patch;
        let cin = cfg.input_channels();
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let e = cfg.embed_mode.channels();
        let n = cond.levels.len();
        let din = cin * p * p;
        let mut out = vec![T::zero(); n * gh * gw * din];
        for f in 0..n {
            let frame = &frames[f * c * h * w..(f + 1) * c * h * w];
            let pose = &cond.poses[f];
            for y in 0..h {
                for x in 0..w {
                    let tok = (f * gh + y / p) * gw + x / p;
                    let sub = (y % p) * p + x % p;
                    let base = tok * din;
                    for ch in 0..c {
                        out[base + ch * p * p + sub] = T::from_f32(frame[(ch * h + y) * w + x]).unwrap();
                    }
                    if cfg.embed_mode.is_per_pixel() {
                        let px = &pose.data[(y * w + x) * e..(y * w + x + 1) * e];
                        for (k, v) in px.iter().enumerate() {
                            out[base + (c + k) * p * p + sub] = T::from_f64_lossy(*v);
                        }
                    }
                }
            }
        }
        out
    }

    fn unpatchify_output(&self, tokens: &[T], n: usize) -> Vec<T> {
        let cfg = &self.config;
        let (gh, gw) = cfg.grid();
        let p = cfg.patch;
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let dout = c * p * p;
        let mut out = vec![T::zero(); n * c * h * w];
        for f in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let tok = (f * gh + y / p) * gw + x / p;
                        out[((f * c + ch) * h + y) * w + x] = tokens[tok * dout + ch * p * p + (y % p) * p + x % p];
                    }
                }
            }
        }
        out
    }

    fn patchify_output_grad(&self, grad: &[T], n: usize) -> Vec<T> {
        let cfg = &self.config;
        let (gh, gw) = cfg.grid();
        let p = cfg.patch;
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let dout = c * p * p;
        let mut out = vec![T::zero(); n * gh * gw * dout];
        for f in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let tok = (f * gh + y / p) * gw + x / p;
                        out[tok * dout + ch * p * p + (y % p) * p + x % p] = grad[((f * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        out
    }

    fn conditioning(&self, cond: &ConditioningBundle) -> CondCache<T> {
        let a = &self.arch;
        let n = cond.levels.len();
        let cd = self.config.cond_dim;
        let sin: Vec<T> = cond
            .levels
            .iter()
            .flat_map(|l| noise_level_embedding(*l, cd))
            .map(T::from_f64_lossy)
            .collect();
        let pose_vec: Vec<T> = cond
            .poses
            .iter()
            .flat_map(|e| e.pooled())
            .map(T::from_f64_lossy)
            .collect();
        let a1 = self.lin_fwd(a.noise1, &sin, n);
        let s1 = silu_fwd(&a1);
        let mut c_pre = self.lin_fwd(a.noise2, &s1, n);
        add_assign(&mut c_pre, &self.lin_fwd(a.pose_proj, &pose_vec, n));
        let c = silu_fwd(&c_pre);
        CondCache {
            sin,
            a1,
            s1,
            pose_vec,
            c_pre,
            c,
        }
    }

    fn run(&self, frames: &[f32], cond: &ConditioningBundle, training: bool) -> (Vec<T>, Tape<T>) {
        let cfg = &self.config;
        let a = &self.arch;
        let n = cond.levels.len();
        let pt = cfg.tokens_per_frame();
        let (gh, gw) = cfg.grid();
        let d = cfg.dim;
        let l = n * pt;

        let tokens_in = self.patchify_input(frames, cond);
        let cc = self.conditioning(cond);
        let mut x = self.lin_fwd(a.patch_embed, &tokens_in, l);

        let mut conv_caches = Vec::with_capacity(a.conv.len());
        for blk in &a.conv {
            let (n1, inv1) = layer_norm_fwd(&x, d);
            let gb1 = self.lin_fwd(blk.film1, &cc.c, n);
            let m1 = film_fwd(&n1, pt, d, &gb1);
            let col1 = im2col(&silu_fwd(&m1), n, gh, gw, d);
            let y1 = self.lin_fwd(blk.conv1, &col1, l);
            let (n2, inv2) = layer_norm_fwd(&y1, d);
            let gb2 = self.lin_fwd(blk.film2, &cc.c, n);
            let m2 = film_fwd(&n2, pt, d, &gb2);
            let col2 = im2col(&silu_fwd(&m2), n, gh, gw, d);
            let y2 = self.lin_fwd(blk.conv2, &col2, l);
            add_assign(&mut x, &y2);
            conv_caches.push(ConvCache {
                n1,
                inv1,
                gb1,
                m1,
                col1,
                n2,
                inv2,
                gb2,
                m2,
                col2,
            });
        }

        let frame_pos = self.p(a.frame_pos, cfg.max_frames * d);
        let spatial_pos = self.p(a.spatial_pos, pt * d);
        for f in 0..n {
            let fp = &frame_pos[cond.positions[f] * d..(cond.positions[f] + 1) * d];
            for t in 0..pt {
                let row = &mut x[(f * pt + t) * d..(f * pt + t + 1) * d];
                add_assign(row, fp);
                add_assign(row, &spatial_pos[t * d..(t + 1) * d]);
            }
        }

        let mut attn_caches = Vec::with_capacity(a.attn.len());
        for blk in &a.attn {
            let (n1, inv1) = layer_norm_fwd(&x, d);
            let gb1 = self.lin_fwd(blk.film_attn, &cc.c, n);
            let m1 = film_fwd(&n1, pt, d, &gb1);
            let qkv = self.lin_fwd(blk.qkv, &m1, l);
            let (o, probs) = attention_fwd(&qkv, l, d, cfg.heads, training);
            add_assign(&mut x, &self.lin_fwd(blk.proj, &o, l));
            let (n2, inv2) = layer_norm_fwd(&x, d);
            let gb2 = self.lin_fwd(blk.film_mlp, &cc.c, n);
            let m2 = film_fwd(&n2, pt, d, &gb2);
            let f1 = self.lin_fwd(blk.fc1, &m2, l);
            let act = silu_fwd(&f1);
            add_assign(&mut x, &self.lin_fwd(blk.fc2, &act, l));
            if training {
                attn_caches.push(AttnCache {
                    n1,
                    inv1,
                    gb1,
                    m1,
                    qkv,
                    probs,
                    o,
                    n2,
                    inv2,
                    gb2,
                    m2,
                    f1,
                    a: act,
                });
            }
        }

        let (out_n, out_inv) = layer_norm_fwd(&x, d);
        let out_gb = self.lin_fwd(a.film_out, &cc.c, n);
        let out_m = film_fwd(&out_n, pt, d, &out_gb);
        let out_tokens = self.lin_fwd(a.head, &out_m, l);
        let out = self.unpatchify_output(&out_tokens, n);
        let tape = Tape {
            frames: n,
            tokens_in,
            cond: cc,
            conv: if training { conv_caches } else { Vec::new() },
            attn: attn_caches,
            out_n,
            out_inv,
            out_gb,
            out_m,
        };
        (out, tape)
    }

    fn backward(&self, tape: &Tape<T>, cond: &ConditioningBundle, dout: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let a = &self.arch;
        let n = tape.frames;
        let pt = cfg.tokens_per_frame();
        let (gh, gw) = cfg.grid();
        let d = cfg.dim;
        let l = n * pt;
        let cd = cfg.cond_dim;
        let mut grads = vec![T::zero(); self.params.len()];
        let mut dc = vec![T::zero(); n * cd];

        let dtok = self.patchify_output_grad(dout, n);
        let dm = self.lin_bwd(a.head, &tape.out_m, l, &dtok, &mut grads, true).unwrap();
        let (dn, dgb) = film_bwd(&dm, &tape.out_n, pt, d, &tape.out_gb);
        add_assign(
            &mut dc,
            &self
                .lin_bwd(a.film_out, &tape.cond.c, n, &dgb, &mut grads, true)
                .unwrap(),
        );
        let mut dx = layer_norm_bwd(&dn, &tape.out_n, &tape.out_inv, d);

        for (blk, cache) in a.attn.iter().zip(&tape.attn).rev() {
            // MLP branch.
            let dact = self.lin_bwd(blk.fc2, &cache.a, l, &dx, &mut grads, true).unwrap();
            let df1 = silu_bwd(&cache.f1, &dact);
            let dm2 = self.lin_bwd(blk.fc1, &cache.m2, l, &df1, &mut grads, true).unwrap();
            let (dn2, dgb2) = film_bwd(&dm2, &cache.n2, pt, d, &cache.gb2);
            add_assign(
                &mut dc,
                &self
                    .lin_bwd(blk.film_mlp, &tape.cond.c, n, &dgb2, &mut grads, true)
                    .unwrap(),
            );
            add_assign(&mut dx, &layer_norm_bwd(&dn2, &cache.n2, &cache.inv2, d));
            // Attention branch.
            let do_ = self.lin_bwd(blk.proj, &cache.o, l, &dx, &mut grads, true).unwrap();
            let dqkv = attention_bwd(&cache.qkv, &cache.probs, &do_, l, d, cfg.heads);
            let dm1 = self.lin_bwd(blk.qkv, &cache.m1, l, &dqkv, &mut grads, true).unwrap();
            let (dn1, dgb1) = film_bwd(&dm1, &cache.n1, pt, d, &cache.gb1);
            add_assign(
                &mut dc,
                &self
                    .lin_bwd(blk.film_attn, &tape.cond.c, n, &dgb1, &mut grads, true)
                    .unwrap(),
            );
            add_assign(&mut dx, &layer_norm_bwd(&dn1, &cache.n1, &cache.inv1, d));
        }

        {
            let (frame_pos, spatial_pos) = (a.frame_pos, a.spatial_pos);
            for f in 0..n {
                let fp = frame_pos + cond.positions[f] * d;
                for t in 0..pt {
                    let row = &dx[(f * pt + t) * d..(f * pt + t + 1) * d];
                    add_assign(&mut grads[fp..fp + d], row);
                    add_assign(&mut grads[spatial_pos + t * d..spatial_pos + (t + 1) * d], row);
                }
            }
        }

        for (blk, cache) in a.conv.iter().zip(&tape.conv).rev() {
            let dcol2 = self.lin_bwd(blk.conv2, &cache.col2, l, &dx, &mut grads, true).unwrap();
            let dm2 = silu_bwd(&cache.m2, &col2im(&dcol2, n, gh, gw, d));
            let (dn2, dgb2) = film_bwd(&dm2, &cache.n2, pt, d, &cache.gb2);
            add_assign(
                &mut dc,
                &self
                    .lin_bwd(blk.film2, &tape.cond.c, n, &dgb2, &mut grads, true)
                    .unwrap(),
            );
            let dy1 = layer_norm_bwd(&dn2, &cache.n2, &cache.inv2, d);
            let dcol1 = self.lin_bwd(blk.conv1, &cache.col1, l, &dy1, &mut grads, true).unwrap();
            let dm1 = silu_bwd(&cache.m1, &col2im(&dcol1, n, gh, gw, d));
            let (dn1, dgb1) = film_bwd(&dm1, &cache.n1, pt, d, &cache.gb1);
            add_assign(
                &mut dc,
                &self
                    .lin_bwd(blk.film1, &tape.cond.c, n, &dgb1, &mut grads, true)
                    .unwrap(),
            );
            add_assign(&mut dx, &layer_norm_bwd(&dn1, &cache.n1, &cache.inv1, d));
        }

        self.lin_bwd(a.patch_embed, &tape.tokens_in, l, &dx, &mut grads, false);

        let cc = &tape.cond;
        let dc_pre = silu_bwd(&cc.c_pre, &dc);
        self.lin_bwd(a.pose_proj, &cc.pose_vec, n, &dc_pre, &mut grads, false);
        let ds1 = self.lin_bwd(a.noise2, &cc.s1, n, &dc_pre, &mut grads, true).unwrap();
        let da1 = silu_bwd(&cc.a1, &ds1);
        self.lin_bwd(a.noise1, &cc.sin, n, &da1, &mut grads, false);
        grads
    }

    /// Noise prediction in this model's precision.
    pub fn forward(&self, frames: &[f32], cond: &ConditioningBundle) -> Result<Vec<T>> {
        self.check_inputs(frames, cond)?;
        Ok(self.run(frames, cond, false).0)
    }

    /// Mean squared error against `target` and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, frames: &[f32], cond: &ConditioningBundle, target: &[f32]) -> Result<(f64, Vec<T>)> {
        self.check_inputs(frames, cond)?;
        if target.len() != frames.len() {
            return Err(Error::Shape(format!(
                "target has {} values, frames {}",
                target.len(),
                frames.len()
            )));
        }
        let (pred, tape) = self.run(frames, cond, true);
        let count = T::from_usize(pred.len()).unwrap();
        let two = T::from_f64_lossy(2.0);
        let mut loss = T::zero();
        let mut dout = Vec::with_capacity(pred.len());
        for (p, t) in pred.iter().zip(target) {
            let r = *p - T::from_f32(*t).unwrap();
            loss = loss + r * r;
            dout.push(two * r / count);
        }
        let loss = (loss / count).to_f64().unwrap_or(f64::NAN);
        let grads = self.backward(&tape, cond, &dout);
        Ok((loss, grads))
    }

    /// Same loss as [`Denoiser::loss_and_grad`] without the backward pass.
    pub fn loss(&self, frames: &[f32], cond: &ConditioningBundle, target: &[f32]) -> Result<f64> {
        let pred = self.forward(frames, cond)?;
        if target.len() != pred.len() {
            return Err(Error::Shape("target and prediction lengths differ".into()));
        }
        let count = T::from_usize(pred.len()).unwrap();
        let mut loss = T::zero();
        for (p, t) in pred.iter().zip(target) {
            let r = *p - T::from_f32(*t).unwrap();
            loss = loss + r * r;
        }
        Ok((loss / count).to_f64().unwrap_or(f64::NAN))
    }
}

impl<T: Scalar> EpsPredictor for Denoiser<T> {
    fn predict(&self, frames: &[f32], cond: &ConditioningBundle) -> Result<Vec<f32>> {
        Ok(self
            .forward(frames, cond)?
            .into_iter()
            .map(|v| v.to_f32().unwrap_or(f32::NAN))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_embedding, CameraPose};

    fn micro_config(mode: EmbedMode) -> DenoiserConfig {
        DenoiserConfig {
            height: 8,
            width: 8,
            channels: 3,
            max_frames: 6,
            patch: 4,
            dim: 8,
            depth_conv: 1,
            depth_attn: 1,
            heads: 2,
            cond_dim: 8,
            embed_mode: mode,
        }
    }

    fn inputs(cfg: &DenoiserConfig, n: usize) -> (Vec<f32>, ConditioningBundle) {
        let frames: Vec<f32> = (0..n * cfg.frame_len())
            .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
            .collect();
        let poses = (0..n)
            .map(|f| {
                let pose = CameraPose::look_at(1.0, cfg.width, cfg.height, [4.0, f as f64, 2.0], [0.0; 3]).unwrap();
                pose_embedding(&pose, cfg.embed_mode, cfg.height, cfg.width, 8.0).unwrap()
            })
            .collect();
        let cond = ConditioningBundle {
            levels: (0..n).map(|f| 100 * f + 7).collect(),
            poses,
            positions: (0..n).collect(),
        };
        (frames, cond)
    }

    #[test]
    fn output_shape_matches_input() {
        for mode in [EmbedMode::Global, EmbedMode::Plucker, EmbedMode::Ray] {
            let cfg = micro_config(mode);
            let model = Denoiser::<f32>::new(cfg.clone(), 1, Init::Random).unwrap();
            for n in [1, 3, 6] {
                let (frames, cond) = inputs(&cfg, n);
                assert_eq!(model.forward(&frames, &cond).unwrap().len(), frames.len());
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = micro_config(EmbedMode::Plucker);
        let model = Denoiser::<f32>::new(cfg.clone(), 1, Init::Random).unwrap();
        let (frames, mut cond) = inputs(&cfg, 3);
        assert!(matches!(model.forward(&frames[1..], &cond), Err(Error::Shape(_))));
        cond.positions[0] = 6;
        assert!(matches!(model.forward(&frames, &cond), Err(Error::Shape(_))));
        let (frames, cond) = inputs(&cfg, 7);
        assert!(model.forward(&frames, &cond).is_err());
        let bad = DenoiserConfig {
            patch: 3,
            ..micro_config(EmbedMode::Global)
        };
        assert!(matches!(
            Denoiser::<f32>::new(bad, 0, Init::Standard),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn zero_modulation_ignores_conditioning() {
        // With zero FiLM heads every block runs its unmodulated path, so the
        // noise level and pose vector cannot reach the output.
        let cfg = micro_config(EmbedMode::Global);
        let mut model = Denoiser::<f64>::new(cfg.clone(), 3, Init::Standard).unwrap();
        let head = model
            .param_groups()
            .iter()
            .find(|g| g.name == "out.head.weight")
            .unwrap()
            .range();
        for (i, p) in model.params[head].iter_mut().enumerate() {
            *p = (i as f64 * 0.1).sin();
        }
        let (frames, cond) = inputs(&cfg, 3);
        let mut other = cond.clone();
        other.levels = vec![999, 0, 500];
        assert_eq!(
            model.forward(&frames, &cond).unwrap(),
            model.forward(&frames, &other).unwrap()
        );
    }

    #[test]
    fn level_change_reaches_its_frame() {
        let cfg = micro_config(EmbedMode::Plucker);
        let model = Denoiser::<f64>::new(cfg.clone(), 5, Init::Random).unwrap();
        let (frames, cond) = inputs(&cfg, 3);
        let base = model.forward(&frames, &cond).unwrap();
        let mut other = cond.clone();
        other.levels[1] += 250;
        let changed = model.forward(&frames, &other).unwrap();
        let fl = cfg.frame_len();
        let diff: f64 = base[fl..2 * fl]
            .iter()
            .zip(&changed[fl..2 * fl])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn first_frame_reaches_last_frame() {
        let cfg = micro_config(EmbedMode::Plucker);
        let model = Denoiser::<f64>::new(cfg.clone(), 6, Init::Random).unwrap();
        let (frames, cond) = inputs(&cfg, 4);
        let base = model.forward(&frames, &cond).unwrap();
        let mut other = frames.clone();
        other[0] += 0.5;
        let changed = model.forward(&other, &cond).unwrap();
        let fl = cfg.frame_len();
        assert_ne!(&base[3 * fl..], &changed[3 * fl..]);
    }

    #[test]
    fn deterministic_forward() {
        let cfg = micro_config(EmbedMode::Ray);
        let a = Denoiser::<f32>::new(cfg.clone(), 9, Init::Random).unwrap();
        let b = Denoiser::<f32>::new(cfg.clone(), 9, Init::Random).unwrap();
        let (frames, cond) = inputs(&cfg, 2);
        assert_eq!(a.forward(&frames, &cond).unwrap(), b.forward(&frames, &cond).unwrap());
    }

    #[test]
    fn standard_init_predicts_zero() {
        let cfg = micro_config(EmbedMode::Plucker);
        let model = Denoiser::<f32>::new(cfg.clone(), 2, Init::Standard).unwrap();
        let (frames, cond) = inputs(&cfg, 2);
        assert!(model.forward(&frames, &cond).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parameter_count_scales() {
        let small = DenoiserConfig::default();
        let wide = DenoiserConfig {
            dim: 256,
            ..small.clone()
        };
        assert!(count_parameters(&wide) > 2 * count_parameters(&small));
        assert_eq!(count_parameters(&small), count_parameters(&small.clone()));
        let m = Denoiser::<f32>::new(small.clone(), 0, Init::Standard).unwrap();
        assert_eq!(m.num_params(), count_parameters(&small));
        let covered: usize = m.param_groups().iter().map(|g| g.len()).sum();
        assert_eq!(covered, m.num_params());
    }

    #[test]
    fn frame_permutation_is_equivariant() {
        let cfg = micro_config(EmbedMode::Plucker);
        let model = Denoiser::<f64>::new(cfg.clone(), 8, Init::Random).unwrap();
        let (frames, cond) = inputs(&cfg, 3);
        let fl = cfg.frame_len();
        let order = [2, 0, 1];
        let permuted: Vec<f32> = order
            .iter()
            .flat_map(|&f| frames[f * fl..(f + 1) * fl].to_vec())
            .collect();
        let pcond = ConditioningBundle {
            levels: order.iter().map(|&f| cond.levels[f]).collect(),
            poses: order.iter().map(|&f| cond.poses[f].clone()).collect(),
            positions: order.iter().map(|&f| cond.positions[f]).collect(),
        };
        let base = model.forward(&frames, &cond).unwrap();
        let out = model.forward(&permuted, &pcond).unwrap();
        for (j, &f) in order.iter().enumerate() {
            for (a, b) in out[j * fl..(j + 1) * fl].iter().zip(&base[f * fl..(f + 1) * fl]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_counted_parameters() {
        let cfg = DenoiserConfig {
            height: 16,
            width: 16,
            channels: 3,
            max_frames: 4,
            patch: 8,
            dim: 8,
            depth_conv: 1,
            depth_attn: 1,
            heads: 2,
            cond_dim: 8,
            embed_mode: EmbedMode::Global,
        };
        let lin = |i: usize, o: usize| i * o + o;
        let patch_embed = lin(3 * 64, 8);
        let cond = lin(8, 8) * 2 + lin(16, 8);
        let film = lin(8, 16);
        let conv = 2 * film + 2 * lin(72, 8);
        let positions = 4 * 8 + 4 * 8;
        let attn = 2 * film + lin(8, 24) + lin(8, 8) + lin(8, 32) + lin(32, 8);
        let out = film + lin(8, 3 * 64);
        assert_eq!(
            count_parameters(&cfg),
            patch_embed + cond + conv + positions + attn + out
        );
        assert_eq!(count_parameters(&cfg), 6344);
    }

    #[test]
    fn noise_embedding_level_zero() {
        let e = noise_level_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
