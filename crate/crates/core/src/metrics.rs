//! Frame-level PSNR / SSIM and per-segment aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clip::FrameClip;
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("psnr of {} and {} values", a.len(), b.len())));
    }
    if peak <= 0.0 || !peak.is_finite() {
        return Err(Error::Range {
            what: "peak",
            value: peak,
            expected: "> 0",
        });
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two `C x H x W` frames, averaged over valid pixels and channels.
pub fn ssim(a: &[f32], b: &[f32], dims: [usize; 3], peak: f64) -> Result<f64> {
    let [c, h, w] = dims;
    if a.len() != c * h * w || b.len() != a.len() {
        return Err(Error::Shape(format!(
            "ssim of {} and {} values for {c}x{h}x{w}",
            a.len(),
            b.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let k = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let plane = |v: &[f32]| -> Vec<f64> { v[ch * h * w..(ch + 1) * h * w].iter().map(|x| *x as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Keyed by `interp`, `ego` and `both`.
    pub per_segment: BTreeMap<String, SegmentScore>,
    pub episodes: usize,
}

/// Running per-frame sums for the `interp` and `ego` segments.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sums: BTreeMap<&'static str, (f64, f64, usize)>,
    episodes: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores every frame of `pred` against `truth` under segment `name`.
    pub fn add_clip(&mut self, name: &'static str, pred: &FrameClip, truth: &FrameClip, peak: f64) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "{name}: prediction {:?} vs truth {:?}",
                pred.dims(),
                truth.dims()
            )));
        }
        let dims = [pred.channels, pred.height, pred.width];
        let e = self.sums.entry(name).or_insert((0.0, 0.0, 0));
        for f in 0..pred.frames {
            e.0 += psnr(pred.frame(f), truth.frame(f), peak)?;
            e.1 += ssim(pred.frame(f), truth.frame(f), dims, peak)?;
            e.2 += 1;
        }
        Ok(())
    }

    pub fn finish_episode(&mut self) {
        self.episodes += 1;
    }

    pub fn report(&self) -> MetricReport {
        let mut per_segment = BTreeMap::new();
        let (mut tp, mut ts, mut tn) = (0.0, 0.0, 0);
        for (name, (p, s, n)) in &self.sums {
            if *n == 0 {
                continue;
            }
            per_segment.insert(
                name.to_string(),
                SegmentScore {
                    psnr: p / *n as f64,
                    ssim: s / *n as f64,
                    frames: *n,
                },
            );
            tp += p;
            ts += s;
            tn += n;
        }
        let both = if tn > 0 {
            SegmentScore {
                psnr: tp / tn as f64,
                ssim: ts / tn as f64,
                frames: tn,
            }
        } else {
            SegmentScore {
                psnr: 0.0,
                ssim: 0.0,
                frames: 0,
            }
        };
        per_segment.insert("both".into(), both);
        MetricReport {
            psnr_mean: both.psnr,
            ssim_mean: both.ssim,
            per_segment,
            episodes: self.episodes,
        }
    }
}
