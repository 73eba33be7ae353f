//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 5-8 train full-size models for hours and only run with
//! `--ignored` or `--include-ignored`; positional numbers select criteria.
//! Set `S2SF_ACCEPTANCE_DIR` to keep (and reuse) the trained runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2sf::cli::{evaluate, gen_data, sample_cmd, train, EvalArgs, GenDataArgs, SampleArgs, TrainArgs};
use s2sf::config::RunConfig;
use s2sf::diffusion::{
    combine_guidance, corrupt, draw_training, make_schedule, standard_normal, training_loss, TrainingExample,
};
use s2sf::error::{Error, FormatErrorKind};
use s2sf::geometry::{
    cross3, dot3, interpolate_pose_track, norm3, pose_embedding, slerp, CameraPose, EmbedMode, Mat3, Quaternion,
};
use s2sf::io::{
    decode_blob, encode_blob, load_checkpoint, parse_json, parse_run_config, read_bytes, save_run_config,
    to_json_bytes, write_episode, DatasetManifest, Split, MANIFEST_VERSION,
};
use s2sf::metrics::MetricReport;
use s2sf::model::{ConditioningBundle, EpsPredictor};
use s2sf::sequence::{build_unified, subtask_window, Ablation, SubTaskKind};
use s2sf::train::{TrainItem, Trainer};
use s2sf::world::generate_episode;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    heavy: bool,
    run: fn() -> Outcome,
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- geometry

fn random_quat(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n < 1.0 {
            return Quaternion::new(v[0], v[1], v[2], v[3]).unwrap();
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CameraPose {
    let t = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
    CameraPose::with_fov(rng.random_range(0.5..1.5), w, h, random_quat(rng), t).unwrap()
}

/// Geodesic angle between the rotations of two unit quaternions.
fn oracle_angle(a: &Quaternion, b: &Quaternion) -> f64 {
    let d = (a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z).abs().min(1.0);
    2.0 * d.acos()
}

fn mat_diff(a: &Mat3, b: &Mat3) -> f64 {
    (0..9)
        .map(|i| (a[i / 3][i % 3] - b[i / 3][i % 3]).abs())
        .fold(0.0, f64::max)
}

fn geometry_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_velocity = 0.0f64;
    let mut worst_sign = 0.0f64;
    for _ in 0..500 {
        let (q0, q1) = (random_quat(&mut rng), random_quat(&mut rng));
        ensure!(ok(slerp(&q0, &q1, 0.0))? == q0, "slerp(q0, q1, 0) != q0");
        ensure!(ok(slerp(&q0, &q1, 1.0))? == q1, "slerp(q0, q1, 1) != q1");
        ensure!(ok(slerp(&q0, &q0, 0.37))? == q0, "slerp(q, q, t) != q");
        let theta = oracle_angle(&q0, &q1);
        for k in 0..=20 {
            let tau = k as f64 / 20.0;
            let q = ok(slerp(&q0, &q1, tau))?;
            worst_velocity = worst_velocity.max((oracle_angle(&q0, &q) - tau * theta).abs());
            let flipped = ok(slerp(&q0, &q1.negate(), tau))?;
            worst_sign = worst_sign.max(mat_diff(&q.to_rotation_matrix(), &flipped.to_rotation_matrix()));
        }
    }
    ensure!(
        worst_velocity <= 1e-5,
        "angular velocity deviates by {worst_velocity:.3e} rad"
    );
    ensure!(
        worst_sign <= 1e-12,
        "sign flip changes the rotation by {worst_sign:.3e}"
    );

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mid = ok(slerp(
        &Quaternion::IDENTITY,
        &ok(Quaternion::from_unit(h, 0.0, 0.0, h))?,
        0.5,
    ))?;
    let half = std::f64::consts::PI / 8.0;
    let oracle = [half.cos(), 0.0, 0.0, half.sin()];
    let err = mid
        .to_array()
        .iter()
        .zip(oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(
        err <= 1e-9,
        "90 deg midpoint off the 45 deg axis-angle oracle by {err:.3e}"
    );

    for len in 2..=12 {
        for _ in 0..40 {
            let (a, b) = (random_pose(&mut rng, 8, 8), random_pose(&mut rng, 8, 8));
            let track = ok(interpolate_pose_track(&a, &b, len))?;
            let (first, last) = (track.first(), track.last());
            ensure!(
                first.rotation == a.rotation && first.translation == a.translation,
                "track start differs from the exo pose (len {len})"
            );
            ensure!(
                last.rotation == b.rotation && last.translation == b.translation,
                "track end differs from the ego pose (len {len})"
            );
        }
    }
    Ok(format!(
        "angular velocity err {worst_velocity:.1e}, midpoint err {err:.1e}"
    ))
}

fn plucker_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_dm, mut worst_norm) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 32, 32);
        let emb = ok(pose_embedding(&pose, EmbedMode::Plucker, 32, 32, 1.0))?;
        for px in emb.data.chunks_exact(6) {
            let d = [px[0], px[1], px[2]];
            let m = [px[3], px[4], px[5]];
            worst_dm = worst_dm.max(dot3(d, m).abs());
            worst_norm = worst_norm.max((norm3(d) - 1.0).abs());
        }
    }
    ensure!(worst_dm <= 1e-6, "|d.m| reaches {worst_dm:.3e}");
    ensure!(worst_norm <= 1e-6, "||d| - 1| reaches {worst_norm:.3e}");

    let t = [0.3, -0.2, 1.5];
    let pose = ok(CameraPose::with_fov(1.0, 33, 33, Quaternion::IDENTITY, t))?;
    let (o, d) = pose.ray(pose.cx, pose.cy);
    ensure!(d == [0.0, 0.0, 1.0], "principal ray {d:?} is not the optical axis");
    ensure!(o == [-t[0], -t[1], -t[2]], "ray origin {o:?} is not the camera center");
    let emb = ok(pose_embedding(&pose, EmbedMode::Plucker, 33, 33, 1.0))?;
    let centre = emb.pixel(16, 16);
    let m = cross3(o, d);
    ensure!(
        centre == [d[0], d[1], d[2], m[0], m[1], m[2]],
        "center pixel embedding {centre:?} is not (axis, o x axis)"
    );
    Ok(format!("max |d.m| {worst_dm:.1e}, max ||d|-1| {worst_norm:.1e}"))
}

// ---------------------------------------------------------------- diffusion

struct ZeroModel;

impl EpsPredictor for ZeroModel {
    fn predict(&self, frames: &[f32], _cond: &ConditioningBundle) -> s2sf::Result<Vec<f32>> {
        Ok(vec![0.0; frames.len()])
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn diffusion_endpoints() -> Outcome {
    let schedule = ok(make_schedule(1000))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<f32> = (0..4 * 768).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps = standard_normal(&mut rng, frames.len());
    let clean = ok(corrupt(&frames, &[0; 4], &schedule, &eps))?;
    ensure!(bits(&clean) == bits(&frames), "level 0 does not reproduce the input");
    let noise = ok(corrupt(&frames, &[1000; 4], &schedule, &eps))?;
    ensure!(bits(&noise) == bits(&eps), "level K does not reproduce the noise");

    let ep = ok(generate_episode(5, 9, 48, 48))?;
    let pair = ok(subtask_window(&ok(build_unified(&ep))?, SubTaskKind::ExoToEgoDirect))?;
    let example = ok(TrainingExample::from_pair(&pair, EmbedMode::Plucker, ep.scene.radius))?;
    let n = example.frames.len();
    ensure!(n >= 100_000, "only {n} elements");
    let draw = draw_training(&mut rng, example.len(), example.frame_len, &schedule);
    let loss = ok(training_loss(&ZeroModel, &example, &draw, &schedule))?;
    ensure!(
        (loss - 1.0).abs() <= 0.02,
        "zero-model loss {loss:.4} over {n} elements"
    );

    let c: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin()).collect();
    let u: Vec<f32> = (0..1000).map(|i| (i as f32 * 1.91).cos()).collect();
    ensure!(
        bits(&ok(combine_guidance(&c, &u, 1.0))?) == bits(&c),
        "w = 1 is not the conditional branch"
    );
    ensure!(
        bits(&ok(combine_guidance(&c, &u, 0.0))?) == bits(&u),
        "w = 0 is not the unconditional branch"
    );
    Ok(format!("zero-model loss {loss:.4} over {n} elements"))
}

fn gradient_check() -> Outcome {
    let mut lines = Vec::new();
    for mode in [EmbedMode::Plucker, EmbedMode::Global] {
        let (worst, at, n) = common::worst_f64(mode, 11);
        ensure!(n >= 200, "{mode:?}: only {n} parameters sampled");
        ensure!(
            worst <= 1e-4,
            "{mode:?} f64: relative error {worst:.3e} at parameter {at}"
        );
        lines.push(format!("f64 {} {worst:.1e} ({n})", mode.as_str()));
    }
    let (worst, n) = common::worst_f32(EmbedMode::Ray, 12);
    ensure!(n >= 200, "f32: only {n} parameters sampled");
    ensure!(worst <= 1e-3, "f32: relative error {worst:.3e}");
    lines.push(format!("f32 ray {worst:.1e} ({n})"));
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- training trends

const OVERFIT_STEPS: u64 = 5000;
const OVERFIT_LOSS: f64 = 0.01;
const OVERFIT_WINDOW: usize = 50;

const TREND_EPISODES: usize = 500;
const TREND_T: usize = 9;
const TREND_SIZE: usize = 32;
const TREND_STEPS: u64 = 30_000;
const TREND_SEEDS: [u64; 3] = [0, 1, 2];

fn overfit() -> Outcome {
    let item = ok(TrainItem::from_episode(&ok(generate_episode(
        0, TREND_T, TREND_SIZE, TREND_SIZE,
    ))?))?;
    let mut trainer = ok(Trainer::new(RunConfig::default(), 0, None))?;
    let mut recent = std::collections::VecDeque::new();
    let mut best = f64::INFINITY;
    while trainer.steps_done() < OVERFIT_STEPS {
        let s = ok(trainer.train_step(std::slice::from_ref(&item)))?;
        recent.push_back(s.loss);
        if recent.len() > OVERFIT_WINDOW {
            recent.pop_front();
        }
        if recent.len() == OVERFIT_WINDOW {
            let mean = recent.iter().sum::<f64>() / OVERFIT_WINDOW as f64;
            best = best.min(mean);
            if s.step % 250 == 0 {
                eprintln!("overfit step {} mean loss {mean:.5}", s.step);
            }
            if mean < OVERFIT_LOSS {
                return Ok(format!("{OVERFIT_WINDOW}-step mean loss {mean:.5} at step {}", s.step));
            }
        }
    }
    Err(format!(
        "best {OVERFIT_WINDOW}-step mean loss {best:.5} after {OVERFIT_STEPS} steps"
    ))
}

struct Lab {
    root: PathBuf,
    manifest: PathBuf,
    reports: Mutex<HashMap<String, MetricReport>>,
}

fn lab() -> Result<&'static Lab, String> {
    static LAB: OnceLock<Result<Lab, String>> = OnceLock::new();
    LAB.get_or_init(|| {
        let root = match std::env::var_os("S2SF_ACCEPTANCE_DIR") {
            Some(d) => PathBuf::from(d),
            None => tempfile::tempdir().map_err(|e| e.to_string())?.keep(),
        };
        let data = root.join("data");
        let manifest = data.join("manifest.json");
        if !manifest.is_file() {
            ok(gen_data(&GenDataArgs {
                out: data,
                episodes: TREND_EPISODES,
                t: TREND_T,
                h: TREND_SIZE,
                w: TREND_SIZE,
                seed: 0,
                split_frac: 0.9,
            }))?;
        }
        Ok(Lab {
            root,
            manifest,
            reports: Mutex::new(HashMap::new()),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Trains (or reuses) one run and scores it on the test split.
fn experiment(ablation: Ablation, embed: EmbedMode, seed: u64, native_interp: bool) -> Result<MetricReport, String> {
    let lab = lab()?;
    let name = format!("{}-{}-s{seed}", ablation.as_str(), embed.as_str());
    let key = format!("{name}{}", if native_interp { "-native" } else { "" });
    if let Some(r) = lab.reports.lock().unwrap().get(&key) {
        return Ok(r.clone());
    }
    let ckpt = lab.root.join("runs").join(&name);
    let done = load_checkpoint(&ckpt)
        .map(|(_, m)| m.step == TREND_STEPS)
        .unwrap_or(false);
    if !done {
        let mut cfg = RunConfig {
            ablation,
            embed_mode: embed,
            ..RunConfig::default()
        };
        cfg.training.steps = TREND_STEPS;
        cfg.resolve();
        let config = lab.root.join("configs").join(format!("{name}.json"));
        ok(save_run_config(&cfg, &config))?;
        ok(train(&TrainArgs {
            data: lab.manifest.clone(),
            config,
            out: ckpt.clone(),
            steps: None,
            seed,
            init_from: None,
        }))?;
    }
    let pred = lab.root.join("pred").join(&key);
    ok(sample_cmd(&SampleArgs {
        ckpt,
        data: lab.manifest.clone(),
        episode: None,
        guidance: None,
        w: None,
        steps: None,
        seed,
        out: pred.clone(),
        native_interp,
    }))?;
    let report = ok(evaluate(&pred, &ok(s2sf::io::Dataset::load(&lab.manifest))?))?;
    lab.reports.lock().unwrap().insert(key, report.clone());
    Ok(report)
}

fn mean_psnr(ablation: Ablation, embed: EmbedMode, native: bool, segment: &str) -> Result<f64, String> {
    let mut total = 0.0;
    for seed in TREND_SEEDS {
        let r = experiment(ablation, embed, seed, native)?;
        total += r
            .per_segment
            .get(segment)
            .ok_or_else(|| format!("report has no `{segment}` segment"))?
            .psnr;
    }
    Ok(total / TREND_SEEDS.len() as f64)
}

fn ablation_trend() -> Outcome {
    let fpi = mean_psnr(Ablation::Fpi, EmbedMode::Plucker, false, "ego")?;
    let fi = mean_psnr(Ablation::Fi, EmbedMode::Plucker, false, "ego")?;
    let direct = mean_psnr(Ablation::Direct, EmbedMode::Plucker, false, "ego")?;
    let line = format!("ego PSNR FPI {fpi:.3} / FI {fi:.3} / Direct {direct:.3} dB");
    if fpi > fi && fi > direct {
        Ok(line)
    } else {
        Err(line)
    }
}

fn embedding_trend() -> Outcome {
    let plucker = mean_psnr(Ablation::Fpi, EmbedMode::Plucker, false, "ego")?;
    let global = mean_psnr(Ablation::Fpi, EmbedMode::Global, false, "ego")?;
    let line = format!("ego PSNR Plucker {plucker:.3} / Global {global:.3} dB");
    if plucker >= global {
        Ok(line)
    } else {
        Err(line)
    }
}

fn transition_trend() -> Outcome {
    let report = experiment(Ablation::Fpi, EmbedMode::Plucker, TREND_SEEDS[0], false)?;
    let segments: Vec<&str> = report.per_segment.keys().map(String::as_str).collect();
    ensure!(segments == ["both", "ego", "interp"], "report segments {segments:?}");
    let oracle = mean_psnr(Ablation::Fpi, EmbedMode::Plucker, false, "interp")?;
    let native = mean_psnr(Ablation::Direct, EmbedMode::Plucker, true, "interp")?;
    let line = format!("INT PSNR oracle-transition {oracle:.3} / native interpolation {native:.3} dB");
    if oracle > native {
        Ok(line)
    } else {
        Err(line)
    }
}

// ---------------------------------------------------------------- artifacts

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// gen-data, train, sample and eval in a fresh directory, on a fixed two-thread pool.
fn pipeline(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(2)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let data = root.join("data");
        let manifest = data.join("manifest.json");
        ok(gen_data(&GenDataArgs {
            out: data,
            episodes: 4,
            t: 5,
            h: 16,
            w: 16,
            seed: 21,
            split_frac: 0.5,
        }))?;
        let mut cfg = RunConfig::default();
        cfg.model.height = 16;
        cfg.model.width = 16;
        cfg.model.max_frames = 15;
        cfg.model.dim = 16;
        cfg.model.depth_conv = 1;
        cfg.model.depth_attn = 1;
        cfg.model.heads = 2;
        cfg.model.cond_dim = 16;
        cfg.training.batch_size = 2;
        cfg.training.steps = 4;
        cfg.training.checkpoint_every = 2;
        cfg.training.log_every = 1;
        cfg.guidance.steps = 3;
        cfg.resolve();
        let config = root.join("config.json");
        ok(save_run_config(&cfg, &config))?;
        let ckpt = root.join("ckpt");
        ok(train(&TrainArgs {
            data: manifest.clone(),
            config,
            out: ckpt.clone(),
            steps: None,
            seed: 5,
            init_from: None,
        }))?;
        let pred = root.join("pred");
        ok(sample_cmd(&SampleArgs {
            ckpt,
            data: manifest.clone(),
            episode: None,
            guidance: None,
            w: None,
            steps: None,
            seed: 6,
            out: pred.clone(),
            native_interp: false,
        }))?;
        ok(s2sf::cli::eval(&EvalArgs {
            pred,
            data: manifest,
            out: root.join("report.json"),
        }))?;
        Ok(tree(root))
    })
}

fn determinism() -> Outcome {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let (ta, tb) = (pipeline(a.path())?, pipeline(b.path())?);
    ensure!(ta.keys().eq(tb.keys()), "runs wrote different file sets");
    for (path, bytes) in &ta {
        ensure!(&tb[path] == bytes, "{path} differs between runs");
    }
    for stage in [
        "data/manifest.json",
        "ckpt/loss.tsv",
        "ckpt/weights.s2sf",
        "report.json",
    ] {
        ensure!(ta.contains_key(stage), "{stage} was not written");
    }
    ensure!(
        ta.keys().any(|k| k.starts_with("pred/") && k.ends_with("ego.s2sf")),
        "no sampled ego blobs"
    );
    Ok(format!("{} files byte-identical across two runs", ta.len()))
}

fn format_offset(err: Error) -> Option<(u64, FormatErrorKind)> {
    match err {
        Error::Format { offset, kind } => Some((offset, kind)),
        _ => None,
    }
}

fn format_suite() -> Outcome {
    let data = vec![
        0.0,
        -0.0,
        1.5,
        f32::MIN_POSITIVE / 4.0,
        f32::INFINITY,
        f32::NAN,
        -7.25e-30,
        3.0,
    ];
    let blob = ok(encode_blob(&[2, 2, 2], &data))?;
    let (dims, back) = ok(decode_blob(&blob))?;
    ensure!(
        dims == [2, 2, 2] && bits(&back) == bits(&data),
        "blob round trip is not bitwise"
    );

    let header = 12 + 3 * 4;
    let cases: [(usize, Vec<u8>, u64); 5] = [
        (0, b"S2SG".to_vec(), 0),
        (4, 2u32.to_le_bytes().to_vec(), 4),
        (8, 9u32.to_le_bytes().to_vec(), 8),
        (blob.len(), vec![0], (header + 32) as u64),
        (usize::MAX, Vec::new(), header as u64),
    ];
    for (at, patch, expected) in cases {
        let mut bad = blob.clone();
        match at {
            usize::MAX => bad.truncate(bad.len() - 1),
            n if n == blob.len() => bad.extend_from_slice(&patch),
            n => bad[n..n + patch.len()].copy_from_slice(&patch),
        }
        let err = decode_blob(&bad).err().ok_or("corrupted blob was accepted")?;
        let (offset, kind) = format_offset(err).ok_or("corruption reported as a non-format error")?;
        ensure!(
            offset == expected,
            "{kind:?} reported at byte {offset}, expected {expected}"
        );
    }

    let dir = ok(tempfile::tempdir())?;
    let ep = ok(generate_episode(4, 5, 8, 8))?;
    let entry = ok(write_episode(dir.path(), "ep0000", 4, Split::Test, &ep))?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        t: 5,
        h: 8,
        w: 8,
        c: 3,
        episodes: vec![entry],
    };
    let bytes = ok(to_json_bytes(&manifest))?;
    let parsed: DatasetManifest = ok(parse_json(&bytes))?;
    ensure!(
        parsed == manifest && ok(to_json_bytes(&parsed))? == bytes,
        "manifest round trip differs"
    );

    let path = dir.path().join("config.json");
    ok(save_run_config(&RunConfig::default(), &path))?;
    let bytes = ok(read_bytes(&path))?;
    let cfg = ok(parse_run_config(&bytes))?;
    ensure!(cfg == RunConfig::default(), "config round trip changed values");
    ok(save_run_config(&cfg, &path))?;
    ensure!(ok(read_bytes(&path))? == bytes, "config round trip changed bytes");
    Ok("blob, manifest and config round trips bitwise; 5 corruptions located".into())
}

// ---------------------------------------------------------------- runner

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        name: "geometry suite",
        budget: Some(Duration::from_secs(1)),
        heavy: false,
        run: geometry_suite,
    },
    Criterion {
        id: 2,
        name: "plucker suite",
        budget: Some(Duration::from_secs(5)),
        heavy: false,
        run: plucker_suite,
    },
    Criterion {
        id: 3,
        name: "diffusion endpoints",
        budget: Some(Duration::from_secs(10)),
        heavy: false,
        run: diffusion_endpoints,
    },
    Criterion {
        id: 4,
        name: "gradient check",
        budget: Some(Duration::from_secs(120)),
        heavy: false,
        run: gradient_check,
    },
    Criterion {
        id: 5,
        name: "single-episode overfit",
        budget: Some(Duration::from_secs(20 * 60)),
        heavy: true,
        run: overfit,
    },
    Criterion {
        id: 6,
        name: "ablation trend FPI > FI > Direct",
        budget: None,
        heavy: true,
        run: ablation_trend,
    },
    Criterion {
        id: 7,
        name: "embedding trend Plucker >= Global",
        budget: None,
        heavy: true,
        run: embedding_trend,
    },
    Criterion {
        id: 8,
        name: "transition trend oracle > native interpolation",
        budget: None,
        heavy: true,
        run: transition_trend,
    },
    Criterion {
        id: 9,
        name: "determinism",
        budget: None,
        heavy: false,
        run: determinism,
    },
    Criterion {
        id: 10,
        name: "format suite",
        budget: Some(Duration::from_secs(1)),
        heavy: false,
        run: format_suite,
    },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ignored_only = args.iter().any(|a| a == "--ignored");
    let include_ignored = args.iter().any(|a| a == "--include-ignored");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in &CRITERIA {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let runs = if c.heavy {
            ignored_only || include_ignored
        } else {
            !ignored_only
        };
        if !runs {
            println!("SKIP {:>2} {} (hours-scale; run with --ignored)", c.id, c.name);
            continue;
        }
        let started = Instant::now();
        let outcome = (c.run)();
        let elapsed = started.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(msg), Some(b)) if elapsed > b => Err(format!(
                "{msg}; took {:.1}s, budget {:.0}s",
                elapsed.as_secs_f64(),
                b.as_secs_f64()
            )),
            (o, _) => o,
        };
        match outcome {
            Ok(msg) => println!("PASS {:>2} {} ({:.2}s): {msg}", c.id, c.name, elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {} ({:.2}s): {msg}", c.id, c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
