//! `s2sf` command line: gen-data, train, sample, eval.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clip::FrameClip;
use crate::diffusion::{make_schedule, sample, CondMask, GuidanceMode, SampleOptions, SampleOutput};
use crate::error::{Error, Result};
use crate::io::{
    load_checkpoint, load_run_config, read_clip, save_checkpoint, write_atomic, write_clip, write_episode, write_json,
    CheckpointMeta, Dataset, DatasetManifest, ManifestEntry, Split, MANIFEST_VERSION,
};
use crate::media::{contact_sheet, write_gif, write_png};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::sequence::build_unified;
use crate::train::{element_rng, TrainItem, Trainer};
use crate::world::{generate_episode, CHANNELS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const THREADS_ENV: &str = "S2SF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "s2sf", version, about = "Exo-to-ego generation as sequence denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Generate transition and ego clips for test episodes.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long = "T", default_value_t = 9)]
    pub t: usize,
    #[arg(long = "H", default_value_t = 32)]
    pub h: usize,
    #[arg(long = "W", default_value_t = 32)]
    pub w: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub split_frac: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `training.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from these weights (fine-tune stage).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Episode id; every test episode when omitted.
    #[arg(long)]
    pub episode: Option<String>,
    #[arg(long, value_parser = parse_guidance)]
    pub guidance: Option<GuidanceMode>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Condition on the exo clip and both transition endpoints; generate the interior.
    #[arg(long)]
    pub native_interp: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_guidance(s: &str) -> std::result::Result<GuidanceMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Caps rayon's global pool at `S2SF_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::validation(THREADS_ENV, format!("`{v}` is not a positive integer")))?;
        // A pool may already exist when called twice in one process (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match init_threads().and_then(|_| run(&cli.command)) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: &Command) -> Result<String> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<String> {
    if a.t < 2 {
        return Err(Error::validation("--T", format!("T must be at least 2, got {}", a.t)));
    }
    if a.h == 0 || a.w == 0 {
        return Err(Error::validation("--H", "image size must be positive"));
    }
    if a.episodes == 0 {
        return Err(Error::validation("--episodes", "must be positive"));
    }
    if !(0.0..=1.0).contains(&a.split_frac) {
        return Err(Error::validation(
            "--split-frac",
            format!("{} outside [0, 1]", a.split_frac),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let seeds: Vec<u64> = (0..a.episodes).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..a.episodes).collect();
    order.shuffle(&mut rng);
    let n_train = (a.episodes as f64 * a.split_frac).round() as usize;
    let mut split = vec![Split::Test; a.episodes];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let width = a.episodes.to_string().len().max(4);
    let entries: Vec<Result<ManifestEntry>> = (0..a.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = generate_episode(seeds[i], a.t, a.h, a.w)?;
            write_episode(&a.out, &format!("ep{i:0width$}"), seeds[i], split[i], &ep)
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        t: a.t,
        h: a.h,
        w: a.w,
        c: CHANNELS,
        episodes: entries.into_iter().collect::<Result<_>>()?,
    };
    let path = a.out.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(format!(
        "wrote {} episodes ({n_train} train) to {}",
        a.episodes,
        path.display()
    ))
}

fn check_compat(data: &Dataset, cfg: &crate::config::RunConfig) -> Result<()> {
    let m = &data.manifest;
    let model = &cfg.model;
    if (m.h, m.w, m.c) != (model.height, model.width, model.channels) {
        return Err(Error::validation(
            "model",
            format!(
                "config expects {}x{}x{} frames, dataset has {}x{}x{}",
                model.channels, model.height, model.width, m.c, m.h, m.w
            ),
        ));
    }
    if 3 * m.t > model.max_frames {
        return Err(Error::validation(
            "model.max_frames",
            format!("{} is below 3T = {}", model.max_frames, 3 * m.t),
        ));
    }
    Ok(())
}

fn fmt_float(v: f64) -> String {
    format!("{v:.9e}")
}

pub fn train(a: &TrainArgs) -> Result<String> {
    let mut cfg = load_run_config(&a.config)?;
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    let data = Dataset::load(&a.data)?;
    check_compat(&data, &cfg)?;
    let items: Vec<TrainItem> = data
        .manifest
        .split(Split::Train)
        .map(|e| TrainItem::from_episode(&data.read_episode(e)?))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::validation("--data", "dataset has no training episodes"));
    }
    let init = match &a.init_from {
        Some(dir) => Some(load_checkpoint(dir)?.0),
        None => None,
    };
    let mut trainer = Trainer::new(cfg.clone(), a.seed, init)?;
    let steps = cfg.training.steps;
    let mut log = String::from("step\tloss\tgrad_norm\n");
    let log_path = a.out.join("loss.tsv");
    let started = Instant::now();
    let mut last = f64::NAN;
    while trainer.steps_done() < steps {
        let s = trainer.train_step(&items).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {}: {m}", trainer.steps_done() + 1)),
            other => other,
        })?;
        last = s.loss;
        if s.step % cfg.training.log_every == 0 || s.step == steps {
            writeln!(log, "{}\t{}\t{}", s.step, fmt_float(s.loss), fmt_float(s.grad_norm)).expect("string write");
            write_atomic(&log_path, log.as_bytes())?;
            eprintln!(
                "step {}/{steps} loss {:.5} |g| {:.4} ({:.1}s)",
                s.step,
                s.loss,
                s.grad_norm,
                started.elapsed().as_secs_f64()
            );
        }
        let meta = CheckpointMeta {
            config: cfg.clone(),
            step: s.step,
            seed: a.seed,
            schedule_k: cfg.schedule.levels,
            loss: s.loss,
        };
        if s.step % cfg.training.checkpoint_every == 0 && s.step != steps {
            save_checkpoint(
                &a.out.join("checkpoints").join(format!("step-{:07}", s.step)),
                &trainer.model,
                &meta,
            )?;
        }
    }
    write_atomic(&log_path, log.as_bytes())?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        step: trainer.steps_done(),
        seed: a.seed,
        schedule_k: cfg.schedule.levels,
        loss: last,
    };
    save_checkpoint(&a.out, &trainer.model, &meta)?;
    Ok(format!(
        "trained {} steps ({}), final loss {last:.6}, checkpoint in {}",
        trainer.steps_done(),
        cfg.ablation.as_str(),
        a.out.display()
    ))
}

fn write_visuals(dir: &Path, truth: &FrameClip, out: &SampleOutput) -> Result<()> {
    let t = out.exo.frames;
    let (h, w) = (truth.height, truth.width);
    let truth_row: Vec<Option<(&FrameClip, usize)>> = (0..3 * t).map(|f| Some((truth, f))).collect();
    let mut pred_row: Vec<Option<(&FrameClip, usize)>> = (0..t).map(|f| Some((&out.exo, f))).collect();
    match &out.interp {
        Some(i) => pred_row.extend((0..t).map(|f| Some((i, f)))),
        None => pred_row.extend((0..t).map(|_| None)),
    }
    pred_row.extend((0..t).map(|f| Some((&out.ego, f))));
    write_png(
        &dir.join("sheet.png"),
        &contact_sheet(&[truth_row.clone(), pred_row.clone()], h, w, 2),
    )?;
    let frames: Vec<_> = (0..3 * t)
        .map(|f| contact_sheet(&[vec![truth_row[f], pred_row[f]]], h, w, 4))
        .collect();
    write_gif(&dir.join("anim.gif"), &frames, 200)
}

pub fn sample_cmd(a: &SampleArgs) -> Result<String> {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let data = Dataset::load(&a.data)?;
    check_compat(&data, &meta.config)?;
    let mut guidance = meta.config.guidance.clone();
    if let Some(g) = a.guidance {
        guidance.mode = g;
    }
    if let Some(w) = a.w {
        guidance.weight = w;
    }
    if let Some(s) = a.steps {
        guidance.steps = s;
    }
    guidance.validate(meta.schedule_k)?;
    let schedule = make_schedule(meta.schedule_k)?;
    let entries: Vec<&ManifestEntry> = match &a.episode {
        Some(id) => vec![data
            .manifest
            .entry(id)
            .ok_or_else(|| Error::validation("--episode", format!("unknown episode id `{id}`")))?],
        None => data.manifest.split(Split::Test).collect(),
    };
    let results: Vec<Result<()>> = entries
        .par_iter()
        .map(|entry| {
            let ep = data.read_episode(entry)?;
            let seq = build_unified(&ep)?;
            let opts = SampleOptions {
                ablation: meta.config.ablation,
                embed_mode: meta.config.embed_mode,
                scene_radius: ep.scene.radius,
                guidance: guidance.clone(),
            };
            let mask = if a.native_interp {
                Some(CondMask::native_interp(&seq.frames)?)
            } else {
                None
            };
            let mut rng = element_rng(a.seed, entry.seed, 0);
            let out = sample(&model, &ep.exo, &seq.poses, &schedule, &opts, mask.as_ref(), &mut rng)?;
            let dir = a.out.join(&entry.id);
            if let Some(i) = &out.interp {
                write_clip(&dir.join("interp.s2sf"), i)?;
            }
            write_clip(&dir.join("ego.s2sf"), &out.ego)?;
            write_visuals(&dir, &seq.frames, &out)
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(format!("sampled {} episode(s) into {}", entries.len(), a.out.display()))
}

/// Interior transition frames and all ego frames of every test episode.
pub fn evaluate(pred: &Path, data: &Dataset) -> Result<MetricReport> {
    let test: Vec<&ManifestEntry> = data.manifest.split(Split::Test).collect();
    let missing: Vec<&str> = test
        .iter()
        .filter(|e| !pred.join(&e.id).join("ego.s2sf").is_file())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(
            "--pred",
            format!("missing predictions for: {}", missing.join(", ")),
        ));
    }
    let mut acc = MetricAccumulator::new();
    for entry in test {
        let ep = data.read_episode(entry)?;
        let dir = pred.join(&entry.id);
        let t = ep.len();
        let interp_path = dir.join("interp.s2sf");
        if interp_path.is_file() && t > 2 {
            let p = read_clip(&interp_path)?;
            acc.add_clip("interp", &p.slice(1..t - 1)?, &ep.interp.slice(1..t - 1)?, 1.0)?;
        }
        acc.add_clip("ego", &read_clip(&dir.join("ego.s2sf"))?, &ep.ego, 1.0)?;
        acc.finish_episode();
    }
    Ok(acc.report())
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    let data = Dataset::load(&a.data)?;
    let report = evaluate(&a.pred, &data)?;
    write_json(&a.out, &report)?;
    let mut line = format!("{} episodes:", report.episodes);
    for (name, s) in &report.per_segment {
        write!(line, " {name} {:.3} dB / {:.4}", s.psnr, s.ssim).expect("string write");
    }
    Ok(line)
}
