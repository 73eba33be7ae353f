//! Per-frame noise levels, the training objective and the guided DDIM sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::clip::FrameClip;
use crate::error::{Error, Result};
use crate::geometry::{pose_embedding, zero_embedding, CameraPose, EmbedMode, PoseEmbedding, PoseTrack};
use crate::model::{ConditioningBundle, EpsPredictor};
use crate::sequence::{pose_mask, Ablation, InferenceLayout, Segment, SubTaskPair};

pub const DEFAULT_LEVELS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    k: usize,
    alpha_bar: Vec<f64>,
}

/// Cosine schedule `alpha_bar[k] = cos^2((k / K) * pi / 2)` with exact endpoints.
pub fn make_schedule(k: usize) -> Result<NoiseSchedule> {
    if k < 2 {
        return Err(Error::Size(format!("schedule needs at least 2 levels, got {k}")));
    }
    let mut alpha_bar: Vec<f64> = (0..=k)
        .map(|i| (i as f64 / k as f64 * std::f64::consts::FRAC_PI_2).cos().powi(2))
        .collect();
    alpha_bar[0] = 1.0;
    alpha_bar[k] = 0.0;
    Ok(NoiseSchedule { k, alpha_bar })
}

impl NoiseSchedule {
    pub fn levels(&self) -> usize {
        self.k
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bar[level]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level > self.k {
            return Err(Error::Range {
                what: "noise level",
                value: level as f64,
                expected: "0..=K",
            });
        }
        Ok(())
    }

    /// Evenly strided descent `K = l_0 > l_1 > ... > l_steps = 0`.
    pub fn inference_levels(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.k {
            return Err(Error::Range {
                what: "sampling steps",
                value: steps as f64,
                expected: "1..=K",
            });
        }
        Ok((0..=steps)
            .map(|i| ((self.k * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseLevelVector(Vec<usize>);

impl NoiseLevelVector {
    pub fn new(levels: Vec<usize>, schedule: &NoiseSchedule) -> Result<Self> {
        for l in &levels {
            schedule.check_level(*l)?;
        }
        Ok(NoiseLevelVector(levels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    HgV,
    HgF,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "hg_v" => Ok(GuidanceMode::HgV),
            "hg_f" => Ok(GuidanceMode::HgF),
            other => Err(Error::Mode(format!("guidance `{other}` (expected none, hg_v or hg_f)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub weight: f64,
    /// Context corruption level of the hg_f conditional branch; `None` means `K / 2`.
    pub frac_level: Option<usize>,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::HgF,
            weight: 3.0,
            frac_level: None,
            steps: 50,
        }
    }
}

impl GuidanceConfig {
    pub fn frac_level(&self, k: usize) -> usize {
        self.frac_level.unwrap_or(k / 2)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::validation(
                "guidance.weight",
                format!("{} is not a finite value >= 0", self.weight),
            ));
        }
        if self.steps == 0 || self.steps > k {
            return Err(Error::validation(
                "guidance.steps",
                format!("{} outside 1..={k}", self.steps),
            ));
        }
        if self.mode == GuidanceMode::HgF {
            let f = self.frac_level(k);
            if f == 0 || f >= k {
                return Err(Error::validation("guidance.frac_level", format!("{f} outside 1..{k}")));
            }
        }
        Ok(())
    }
}

/// `out_t = sqrt(alpha_bar[k_t]) * frames_t + sqrt(1 - alpha_bar[k_t]) * eps_t`.
pub fn corrupt(frames: &[f32], levels: &[usize], schedule: &NoiseSchedule, eps: &[f32]) -> Result<Vec<f32>> {
    if frames.len() != eps.len() {
        return Err(Error::Shape(format!(
            "{} frame values, {} noise values",
            frames.len(),
            eps.len()
        )));
    }
    if levels.is_empty() || !frames.len().is_multiple_of(levels.len()) {
        return Err(Error::Shape(format!(
            "{} values do not split into {} frames",
            frames.len(),
            levels.len()
        )));
    }
    let n = frames.len() / levels.len();
    let mut out = Vec::with_capacity(frames.len());
    for (t, &k) in levels.iter().enumerate() {
        schedule.check_level(k)?;
        let a = schedule.alpha_bar(k);
        let (s, sigma) = (a.sqrt(), (1.0 - a).sqrt());
        for i in t * n..(t + 1) * n {
            out.push((s * frames[i] as f64 + sigma * eps[i] as f64) as f32);
        }
    }
    Ok(out)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pose embeddings for a list of cameras, zeros where `zeroed` is set.
pub fn embed_poses(
    poses: &[CameraPose],
    zeroed: &[bool],
    mode: EmbedMode,
    height: usize,
    width: usize,
    scene_radius: f64,
) -> Result<Vec<PoseEmbedding>> {
    poses
        .iter()
        .zip(zeroed)
        .map(|(p, z)| {
            if *z {
                zero_embedding(mode, height, width)
            } else {
                pose_embedding(p, mode, height, width, scene_radius)
            }
        })
        .collect()
}

/// A training window converted to model inputs.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// Clean frames in model space.
    pub frames: Vec<f32>,
    pub frame_len: usize,
    pub poses: Vec<PoseEmbedding>,
    pub positions: Vec<usize>,
}

impl TrainingExample {
    pub fn from_pair(pair: &SubTaskPair, mode: EmbedMode, scene_radius: f64) -> Result<Self> {
        Ok(TrainingExample {
            frames: pair.frames.to_model_space(),
            frame_len: pair.frames.frame_len(),
            poses: embed_poses(
                &pair.poses.poses,
                &pair.pose_zeroed,
                mode,
                pair.frames.height,
                pair.frames.width,
                scene_radius,
            )?,
            positions: pair.positions.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// The random part of a training step: per-frame levels and the target noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub levels: Vec<usize>,
    pub eps: Vec<f32>,
}

/// Levels i.i.d. uniform over `1..=K`, then standard-normal noise.
pub fn draw_training<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    frame_len: usize,
    schedule: &NoiseSchedule,
) -> TrainingDraw {
    let dist = Uniform::new_inclusive(1, schedule.levels()).expect("K >= 2");
    let levels = (0..frames).map(|_| dist.sample(rng)).collect();
    TrainingDraw {
        levels,
        eps: standard_normal(rng, frames * frame_len),
    }
}

/// Corrupted frames and the conditioning the model sees for them.
pub fn training_inputs(
    example: &TrainingExample,
    draw: &TrainingDraw,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f32>, ConditioningBundle)> {
    if draw.levels.len() != example.len() {
        return Err(Error::Shape(format!(
            "{} levels for {} frames",
            draw.levels.len(),
            example.len()
        )));
    }
    let noisy = corrupt(&example.frames, &draw.levels, schedule, &draw.eps)?;
    let cond = ConditioningBundle {
        levels: draw.levels.clone(),
        poses: example.poses.clone(),
        positions: example.positions.clone(),
    };
    Ok((noisy, cond))
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

pub fn training_loss<M: EpsPredictor + ?Sized>(
    model: &M,
    example: &TrainingExample,
    draw: &TrainingDraw,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let (noisy, cond) = training_inputs(example, draw, schedule)?;
    let pred = model.predict(&noisy, &cond)?;
    if pred.len() != draw.eps.len() {
        return Err(Error::Shape("prediction and noise lengths differ".into()));
    }
    let loss = mse(&pred, &draw.eps);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("training loss is {loss}")));
    }
    Ok(loss)
}

pub fn training_step<M: EpsPredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    pair: &SubTaskPair,
    rng: &mut R,
    schedule: &NoiseSchedule,
    mode: EmbedMode,
    scene_radius: f64,
) -> Result<f64> {
    let example = TrainingExample::from_pair(pair, mode, scene_radius)?;
    let draw = draw_training(rng, example.len(), example.frame_len, schedule);
    training_loss(model, &example, &draw, schedule)
}

/// `eps_uncond + w * (eps_cond - eps_uncond)`.
pub fn combine_guidance(eps_cond: &[f32], eps_uncond: &[f32], w: f64) -> Result<Vec<f32>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::Shape(format!(
            "guidance branches have {} and {} values",
            eps_cond.len(),
            eps_uncond.len()
        )));
    }
    if w == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    if w == 0.0 {
        return Ok(eps_uncond.to_vec());
    }
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (*u as f64 + w * (*c as f64 - *u as f64)) as f32)
        .collect())
}

/// Generic guided descent over an arbitrary frame layout.
#[derive(Debug, Clone)]
pub struct SamplerInput {
    /// Model-space frames; only the `clean` ones are read.
    pub frames: Vec<f32>,
    pub frame_len: usize,
    pub clean: Vec<bool>,
    pub poses: Vec<PoseEmbedding>,
    pub positions: Vec<usize>,
}

/// Runs `steps` synchronized DDIM updates on every non-clean frame.
///
/// Clean frames are returned unchanged, bit for bit.
pub fn sample_frames<M: EpsPredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    input: &SamplerInput,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let n = input.clean.len();
    let fl = input.frame_len;
    if input.frames.len() != n * fl || input.poses.len() != n || input.positions.len() != n {
        return Err(Error::Shape("sampler input lengths disagree".into()));
    }
    if input.clean.iter().all(|c| *c) {
        return Err(Error::NothingToGenerate);
    }
    let k = schedule.levels();
    let levels_seq = schedule.inference_levels(guidance.steps)?;
    guidance.validate(k)?;

    let gen: Vec<usize> = (0..n).filter(|i| !input.clean[*i]).collect();
    let ctx: Vec<usize> = (0..n).filter(|i| input.clean[*i]).collect();
    let mut x: Vec<f32> = standard_normal(rng, gen.len() * fl);
    let ctx_noise: Vec<f32> = standard_normal(rng, ctx.len() * fl);
    let ctx_clean: Vec<f32> = ctx
        .iter()
        .flat_map(|&i| input.frames[i * fl..(i + 1) * fl].iter().copied())
        .collect();

    // Context values and levels for each branch are fixed across steps.
    let frac = guidance.frac_level(k);
    let cond_ctx = match guidance.mode {
        GuidanceMode::HgF => (corrupt(&ctx_clean, &vec![frac; ctx.len()], schedule, &ctx_noise)?, frac),
        GuidanceMode::None | GuidanceMode::HgV => (ctx_clean.clone(), 0),
    };
    let uncond_ctx = (ctx_noise.clone(), k);
    let w = if guidance.mode == GuidanceMode::None {
        1.0
    } else {
        guidance.weight
    };

    let branch = |ctx_vals: &[f32], ctx_level: usize, gen_vals: &[f32], gen_level: usize| -> Result<Vec<f32>> {
        let mut frames = vec![0.0f32; n * fl];
        let mut levels = vec![0usize; n];
        for (j, &i) in ctx.iter().enumerate() {
            frames[i * fl..(i + 1) * fl].copy_from_slice(&ctx_vals[j * fl..(j + 1) * fl]);
            levels[i] = ctx_level;
        }
        for (j, &i) in gen.iter().enumerate() {
            frames[i * fl..(i + 1) * fl].copy_from_slice(&gen_vals[j * fl..(j + 1) * fl]);
            levels[i] = gen_level;
        }
        let cond = ConditioningBundle {
            levels,
            poses: input.poses.clone(),
            positions: input.positions.clone(),
        };
        let eps = model.predict(&frames, &cond)?;
        if eps.len() != n * fl {
            return Err(Error::Shape("model output length differs from input".into()));
        }
        Ok(gen
            .iter()
            .flat_map(|&i| eps[i * fl..(i + 1) * fl].iter().copied())
            .collect())
    };

    let floor = schedule.alpha_bar(k - 1);
    for pair in levels_seq.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let eps = if ctx.is_empty() {
            branch(&[], 0, &x, a)?
        } else {
            let c = if w != 0.0 {
                Some(branch(&cond_ctx.0, cond_ctx.1, &x, a)?)
            } else {
                None
            };
            let u = if w != 1.0 {
                Some(branch(&uncond_ctx.0, uncond_ctx.1, &x, a)?)
            } else {
                None
            };
            match (c, u) {
                (Some(c), Some(u)) => combine_guidance(&c, &u, w)?,
                (Some(c), None) => c,
                (None, Some(u)) => u,
                (None, None) => unreachable!(),
            }
        };
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite noise prediction at level {a}")));
        }
        let aa = schedule.alpha_bar(a);
        let ab = schedule.alpha_bar(b);
        let (sa, na) = (aa.sqrt(), (1.0 - aa).sqrt());
        let inv_s = 1.0 / aa.max(floor).sqrt();
        let (sb, nb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let xv = *xi as f64;
            let x0 = ((xv - na * *ei as f64) * inv_s).clamp(-1.0, 1.0);
            let e = if na > 0.0 { (xv - sa * x0) / na } else { *ei as f64 };
            *xi = (sb * x0 + nb * e) as f32;
        }
    }

    let mut out = input.frames.clone();
    for (j, &i) in gen.iter().enumerate() {
        out[i * fl..(i + 1) * fl].copy_from_slice(&x[j * fl..(j + 1) * fl]);
    }
    Ok(out)
}

/// Frames known ahead of sampling beyond the exo context.
#[derive(Debug, Clone)]
pub struct CondMask {
    /// Over the full `3T` stream.
    pub clean: Vec<bool>,
    /// `3T` frames; only entries marked clean are read.
    pub frames: FrameClip,
}

impl CondMask {
    /// Exo clip plus the transition endpoints `x_T` and `g_1`; the interior is generated.
    pub fn native_interp(known: &FrameClip) -> Result<Self> {
        if !known.frames.is_multiple_of(3) || known.frames < 6 {
            return Err(Error::Size(format!(
                "expected a 3T stream, got {} frames",
                known.frames
            )));
        }
        let t = known.frames / 3;
        let mut clean = vec![false; 3 * t];
        clean[..t].iter_mut().for_each(|c| *c = true);
        clean[t] = true;
        clean[2 * t - 1] = true;
        Ok(CondMask {
            clean,
            frames: known.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub ablation: Ablation,
    pub embed_mode: EmbedMode,
    pub scene_radius: f64,
    pub guidance: GuidanceConfig,
}

/// `S_hat = [X, I_hat, G_hat]`. Direct layouts produce no transition.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub exo: FrameClip,
    pub interp: Option<FrameClip>,
    pub ego: FrameClip,
}

/// Generates the transition and ego segments after a `T`-frame exo context.
pub fn sample<M: EpsPredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &FrameClip,
    poses: &PoseTrack,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
    cond_mask: Option<&CondMask>,
    rng: &mut R,
) -> Result<SampleOutput> {
    let t = context.frames;
    if poses.len() != 3 * t {
        return Err(Error::Size(format!(
            "need {} poses for a {t}-frame context, got {}",
            3 * t,
            poses.len()
        )));
    }
    let fl = context.frame_len();
    let (c, h, w) = (context.channels, context.height, context.width);

    let (mut layout, mut clean_stream, known) = match cond_mask {
        None => {
            let mut clean = vec![false; 3 * t];
            clean[..t].iter_mut().for_each(|c| *c = true);
            (InferenceLayout::for_ablation(t, opts.ablation), clean, None)
        }
        Some(mask) => {
            if mask.clean.len() != 3 * t || mask.frames.frames != 3 * t || !mask.frames.same_frame_shape(context) {
                return Err(Error::Size("condition mask must cover the 3T stream".into()));
            }
            let mut layout = InferenceLayout::for_ablation(t, Ablation::Fpi);
            layout.pose_zeroed = pose_mask(&layout.labels, opts.ablation);
            (layout, mask.clean.clone(), Some(&mask.frames))
        }
    };
    // The supplied context always wins over the mask's copy of X.
    clean_stream[..t].iter_mut().for_each(|c| *c = true);
    if layout.positions.len() > 3 * t {
        layout.positions.truncate(3 * t);
    }

    let n = layout.len();
    let mut frames = vec![0.0f32; n * fl];
    let mut clean = vec![false; n];
    let mut storage: Vec<Option<&[f32]>> = vec![None; n];
    for (j, &p) in layout.positions.iter().enumerate() {
        if !clean_stream[p] {
            continue;
        }
        let src = if p < t {
            context.frame(p)
        } else {
            known.expect("mask present").frame(p)
        };
        for (dst, v) in frames[j * fl..(j + 1) * fl].iter_mut().zip(src) {
            *dst = v * 2.0 - 1.0;
        }
        clean[j] = true;
        storage[j] = Some(src);
    }
    let selected: Vec<CameraPose> = layout.positions.iter().map(|&p| poses.poses[p]).collect();
    let input = SamplerInput {
        frames,
        frame_len: fl,
        clean,
        poses: embed_poses(&selected, &layout.pose_zeroed, opts.embed_mode, h, w, opts.scene_radius)?,
        positions: layout.positions.clone(),
    };
    let out = sample_frames(model, &input, schedule, &opts.guidance, rng)?;

    // Storage-range frames: clean ones copied verbatim, generated ones mapped back.
    let mut segments: [Vec<f32>; 3] = Default::default();
    for (j, label) in layout.labels.iter().enumerate() {
        let seg = match label {
            Segment::Exo => 0,
            Segment::Interp => 1,
            Segment::Ego => 2,
        };
        match storage[j] {
            Some(src) => segments[seg].extend_from_slice(src),
            None => segments[seg].extend(
                out[j * fl..(j + 1) * fl]
                    .iter()
                    .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
            ),
        }
    }
    let [exo, interp, ego] = segments;
    let clip = |data: Vec<f32>| FrameClip::new(data.len() / fl, c, h, w, data);
    Ok(SampleOutput {
        exo: clip(exo)?,
        interp: if interp.is_empty() { None } else { Some(clip(interp)?) },
        ego: clip(ego)?,
    })
}
