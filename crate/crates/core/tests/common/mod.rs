//! Finite-difference oracle shared by the gradient tests.
#![allow(dead_code)]

use s2sf::geometry::{pose_embedding, CameraPose, EmbedMode};
use s2sf::model::{ConditioningBundle, Denoiser, DenoiserConfig, Init};

pub fn config(mode: EmbedMode) -> DenoiserConfig {
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

pub fn batch(cfg: &DenoiserConfig, n: usize) -> (Vec<f32>, ConditioningBundle, Vec<f32>) {
    let len = n * cfg.frame_len();
    let frames: Vec<f32> = (0..len).map(|i| ((i as f32) * 0.731).sin() * 0.9).collect();
    let target: Vec<f32> = (0..len).map(|i| ((i as f32) * 1.37 + 0.2).cos()).collect();
    let poses = (0..n)
        .map(|f| {
            let pose = CameraPose::look_at(1.0, cfg.width, cfg.height, [4.0, f as f64 - 1.0, 2.0], [0.0; 3]).unwrap();
            pose_embedding(&pose, cfg.embed_mode, cfg.height, cfg.width, 8.0).unwrap()
        })
        .collect();
    let cond = ConditioningBundle {
        levels: (0..n).map(|f| 150 * f + 40).collect(),
        poses,
        positions: (0..n).map(|f| f + 1).collect(),
    };
    (frames, cond, target)
}

/// A spread of indices covering every parameter tensor, at least `total` of them.
pub fn sample_indices(model: &Denoiser<f64>, total: usize) -> Vec<usize> {
    let groups = model.param_groups();
    let per = total.div_ceil(groups.len()).max(1);
    let mut out = Vec::new();
    for g in groups {
        let len = g.len();
        let take = per.min(len);
        for k in 0..take {
            out.push(g.offset + (k * len) / take + (k * 7919) % (len / take).max(1));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const STEP: f64 = 1e-3;

/// Five-point central difference at `STEP`.
pub fn numeric(model: &mut Denoiser<f64>, i: usize, frames: &[f32], cond: &ConditioningBundle, target: &[f32]) -> f64 {
    let orig = model.params[i];
    let mut at = |k: f64| {
        model.params[i] = orig + k * STEP;
        model.loss(frames, cond, target).unwrap()
    };
    let d = 8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0));
    model.params[i] = orig;
    d / (12.0 * STEP)
}

/// Worst relative error of 64-bit analytic gradients over the sampled parameters,
/// with the parameter index and the number of parameters checked.
pub fn worst_f64(mode: EmbedMode, seed: u64) -> (f64, usize, usize) {
    let cfg = config(mode);
    let mut model = Denoiser::<f64>::new(cfg.clone(), seed, Init::Random).unwrap();
    let (frames, cond, target) = batch(&cfg, 3);
    let (_, grads) = model.loss_and_grad(&frames, &cond, &target).unwrap();
    let idx = sample_indices(&model, 240);
    let mut worst = (0.0, 0);
    for &i in &idx {
        let n = numeric(&mut model, i, &frames, &cond, &target);
        let e = rel_err(grads[i], n, 1e-6);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    (worst.0, worst.1, idx.len())
}

/// 32-bit analytic gradients against 64-bit finite differences of the same weights.
pub fn worst_f32(mode: EmbedMode, seed: u64) -> (f64, usize) {
    let cfg = config(mode);
    let model32 = Denoiser::<f32>::new(cfg.clone(), seed, Init::Random).unwrap();
    let mut oracle: Denoiser<f64> = model32.cast();
    let (frames, cond, target) = batch(&cfg, 2);
    let (_, grads) = model32.loss_and_grad(&frames, &cond, &target).unwrap();
    let idx = sample_indices(&oracle, 220);
    let mut worst = 0.0f64;
    for &i in &idx {
        let n = numeric(&mut oracle, i, &frames, &cond, &target);
        worst = worst.max(rel_err(grads[i] as f64, n, 1e-4));
    }
    (worst, idx.len())
}
