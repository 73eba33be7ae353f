//! C ABI over the s2sf core.
//!
//! Every fallible function returns an [`S2sfStatus`]. On failure the message
//! is available from [`s2sf_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use s2sf::diffusion::{make_schedule, sample, CondMask, GuidanceMode, SampleOptions};
use s2sf::geometry::{slerp, Quaternion};
use s2sf::io::{load_checkpoint, write_episode, CheckpointMeta, Split};
use s2sf::model::Denoiser;
use s2sf::sequence::build_unified;
use s2sf::train::element_rng;
use s2sf::world::{generate_episode, EpisodeRecord};
use s2sf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2sfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    Numerical = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2sfSegment {
    Exo = 0,
    Interp = 1,
    Ego = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2sfGuidance {
    None = 0,
    HgV = 1,
    HgF = 2,
}

/// Sampling knobs; a zero `steps` keeps the checkpoint's value.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct S2sfSampleParams {
    pub guidance: S2sfGuidance,
    pub weight: f64,
    pub steps: u32,
    pub seed: u64,
    pub native_interp: bool,
}

/// Opaque synthetic episode.
pub struct S2sfEpisode {
    inner: EpisodeRecord,
}

/// Opaque trained denoiser.
pub struct S2sfModel {
    model: Denoiser<f32>,
    meta: CheckpointMeta,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> S2sfStatus {
    match err {
        Error::Format { .. } => S2sfStatus::Format,
        Error::Io { .. } => S2sfStatus::Io,
        Error::Numerical(_) => S2sfStatus::Numerical,
        e if e.is_validation() => S2sfStatus::InvalidArgument,
        Error::NothingToGenerate => S2sfStatus::InvalidArgument,
        _ => S2sfStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> S2sfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => S2sfStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            S2sfStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            S2sfStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            S2sfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Message of the last failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn s2sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Spherical interpolation of unit quaternions `[w, x, y, z]`.
///
/// # Safety
/// `q0`, `q1` and `out` must each point to 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn s2sf_slerp(q0: *const f64, q1: *const f64, tau: f64, out: *mut f64) -> S2sfStatus {
    guard(|| {
        if q0.is_null() || q1.is_null() {
            return Err(Failure::Null("quaternion"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let a = std::slice::from_raw_parts(q0, 4);
        let b = std::slice::from_raw_parts(q1, 4);
        let q = slerp(
            &Quaternion::from_unit(a[0], a[1], a[2], a[3])?,
            &Quaternion::from_unit(b[0], b[1], b[2], b[3])?,
            tau,
        )?;
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&q.to_array());
        Ok(())
    })
}

/// Renders a deterministic episode of `t` frames per segment.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn s2sf_episode_generate(
    seed: u64,
    t: u32,
    height: u32,
    width: u32,
    out: *mut *mut S2sfEpisode,
) -> S2sfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = generate_episode(seed, t as usize, height as usize, width as usize)?;
        *out = Box::into_raw(Box::new(S2sfEpisode { inner }));
        Ok(())
    })
}

/// Frames per segment, channels, height, width.
///
/// # Safety
/// `ep` must come from `s2sf_episode_generate`; `dims` must point to 4 u32.
#[no_mangle]
pub unsafe extern "C" fn s2sf_episode_dims(ep: *const S2sfEpisode, dims: *mut u32) -> S2sfStatus {
    guard(|| {
        let ep = ep.as_ref().ok_or(Failure::Null("episode"))?;
        if dims.is_null() {
            return Err(Failure::Null("dims"));
        }
        let d = ep.inner.exo.dims();
        let out = std::slice::from_raw_parts_mut(dims, 4);
        for (o, v) in out.iter_mut().zip(d) {
            *o = v as u32;
        }
        Ok(())
    })
}

/// Borrowed view of one segment's `T x C x H x W` floats in `[0, 1]`.
/// Valid until the episode is freed.
///
/// # Safety
/// `ep` must be a live handle; `data` and `len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn s2sf_episode_frames(
    ep: *const S2sfEpisode,
    segment: S2sfSegment,
    data: *mut *const f32,
    len: *mut usize,
) -> S2sfStatus {
    guard(|| {
        let ep = ep.as_ref().ok_or(Failure::Null("episode"))?;
        let data = out_ptr(data, "data")?;
        let len = out_ptr(len, "len")?;
        let clip = match segment {
            S2sfSegment::Exo => &ep.inner.exo,
            S2sfSegment::Interp => &ep.inner.interp,
            S2sfSegment::Ego => &ep.inner.ego,
        };
        *data = clip.data.as_ptr();
        *len = clip.data.len();
        Ok(())
    })
}

/// Writes the episode under `root/episodes/<id>/`.
///
/// # Safety
/// `ep` must be a live handle; `root` and `id` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn s2sf_episode_save(
    ep: *const S2sfEpisode,
    root: *const c_char,
    id: *const c_char,
) -> S2sfStatus {
    guard(|| {
        let ep = ep.as_ref().ok_or(Failure::Null("episode"))?;
        let root = path_arg(root, "root")?;
        let id = path_arg(id, "id")?;
        let id = id.to_str().expect("checked UTF-8");
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(Failure::Invalid(format!("`{id}` is not a valid episode id")));
        }
        write_episode(&root, id, ep.inner.scene.seed, Split::Train, &ep.inner)?;
        Ok(())
    })
}

/// # Safety
/// `ep` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2sf_episode_free(ep: *mut S2sfEpisode) {
    if !ep.is_null() {
        drop(Box::from_raw(ep));
    }
}

/// Loads a checkpoint directory (`weights.s2sf` + `meta.json`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn s2sf_model_load(dir: *const c_char, out: *mut *mut S2sfModel) -> S2sfStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let out = out_ptr(out, "out")?;
        let (model, meta) = load_checkpoint(&dir)?;
        *out = Box::into_raw(Box::new(S2sfModel { model, meta }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn s2sf_model_num_params(model: *const S2sfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_params())
}

/// Generates transition and ego clips for `ep`.
///
/// `interp` may be null; otherwise it receives `T*C*H*W` floats, or is left
/// untouched with `*interp_written = false` when the model's recipe has no
/// transition segment. `ego` must hold `T*C*H*W` floats.
///
/// # Safety
/// All pointers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn s2sf_model_sample(
    model: *const S2sfModel,
    ep: *const S2sfEpisode,
    params: *const S2sfSampleParams,
    interp: *mut f32,
    interp_written: *mut bool,
    ego: *mut f32,
    capacity: usize,
) -> S2sfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let ep = ep.as_ref().ok_or(Failure::Null("episode"))?;
        let p = params.as_ref().ok_or(Failure::Null("params"))?;
        if ego.is_null() {
            return Err(Failure::Null("ego"));
        }
        let need = ep.inner.ego.data.len();
        if capacity < need {
            return Err(Failure::Invalid(format!("buffers hold {capacity} floats, need {need}")));
        }
        let mut guidance = m.meta.config.guidance.clone();
        guidance.mode = match p.guidance {
            S2sfGuidance::None => GuidanceMode::None,
            S2sfGuidance::HgV => GuidanceMode::HgV,
            S2sfGuidance::HgF => GuidanceMode::HgF,
        };
        guidance.weight = p.weight;
        if p.steps > 0 {
            guidance.steps = p.steps as usize;
        }
        let seq = build_unified(&ep.inner)?;
        let opts = SampleOptions {
            ablation: m.meta.config.ablation,
            embed_mode: m.meta.config.embed_mode,
            scene_radius: ep.inner.scene.radius,
            guidance,
        };
        let mask = if p.native_interp {
            Some(CondMask::native_interp(&seq.frames)?)
        } else {
            None
        };
        let schedule = make_schedule(m.meta.schedule_k)?;
        let mut rng = element_rng(p.seed, ep.inner.scene.seed, 0);
        let out = sample(
            &m.model,
            &ep.inner.exo,
            &seq.poses,
            &schedule,
            &opts,
            mask.as_ref(),
            &mut rng,
        )?;
        std::slice::from_raw_parts_mut(ego, need).copy_from_slice(&out.ego.data);
        let wrote = match (&out.interp, interp.is_null()) {
            (Some(i), false) => {
                std::slice::from_raw_parts_mut(interp, need).copy_from_slice(&i.data);
                true
            }
            _ => false,
        };
        if let Some(flag) = interp_written.as_mut() {
            *flag = wrote;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn s2sf_model_free(model: *mut S2sfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// PSNR in dB of two equally long float arrays, capped at 100.
///
/// # Safety
/// `a` and `b` must point to `len` floats; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn s2sf_psnr(a: *const f32, b: *const f32, len: usize, peak: f64, out: *mut f64) -> S2sfStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(Failure::Null("input"));
        }
        let out = out_ptr(out, "out")?;
        *out = s2sf::metrics::psnr(
            std::slice::from_raw_parts(a, len),
            std::slice::from_raw_parts(b, len),
            peak,
        )?;
        Ok(())
    })
}
