//! C ABI over the stall-sentinel library.
//!
//! Every entry point returns an [`SsStatus`]; results come back through out
//! pointers. On failure the calling thread's last error message is set and
//! can be read with [`ss_last_error_message`]. Panics never cross the
//! boundary: they surface as `SS_STATUS_PANIC`.
//!
//! Handles (`SsCusum`, `SsMixtureModel`) are opaque. Each `*_new` has a
//! matching `*_free`; freeing NULL is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use stall_sentinel::background::{MixtureModel, MixtureParams};
use stall_sentinel::config::PipelineConfig;
use stall_sentinel::frame_store::Frame;
use stall_sentinel::metrics;
use stall_sentinel::pipeline::{run_video, with_workers, Mode, VideoInputs};
use stall_sentinel::sequential::Cusum;
use stall_sentinel::similarity::{self, EdgeMode, Patch, SsimConstants};
use stall_sentinel::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Decode = 5,
    DimensionMismatch = 6,
    InsufficientPoints = 7,
    Config = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsEdgeMode {
    Interp = 0,
    Mirror = 1,
}

/// Mixture parameters; fill with `ss_mixture_default_params` first.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsMixtureParams {
    pub max_components: usize,
    pub learning_rate: f64,
    pub var_init: f64,
    pub var_floor: f64,
    pub match_threshold_sq: f64,
    pub background_ratio: f64,
    pub prune_weight: f64,
}

impl From<MixtureParams> for SsMixtureParams {
    fn from(p: MixtureParams) -> Self {
        SsMixtureParams {
            max_components: p.max_components,
            learning_rate: p.learning_rate,
            var_init: p.var_init,
            var_floor: p.var_floor,
            match_threshold_sq: p.match_threshold_sq,
            background_ratio: p.background_ratio,
            prune_weight: p.prune_weight,
        }
    }
}

impl From<SsMixtureParams> for MixtureParams {
    fn from(p: SsMixtureParams) -> Self {
        MixtureParams {
            max_components: p.max_components,
            learning_rate: p.learning_rate,
            var_init: p.var_init,
            var_floor: p.var_floor,
            match_threshold_sq: p.match_threshold_sq,
            background_ratio: p.background_ratio,
            prune_weight: p.prune_weight,
        }
    }
}

/// Streaming CUSUM detector.
pub struct SsCusum(Cusum);

/// Per-pixel background mixture over 8-bit luminance frames.
pub struct SsMixtureModel(MixtureModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SsStatus {
    match e {
        Error::Io { .. } => SsStatus::Io,
        Error::Parse { .. } => SsStatus::Parse,
        Error::Decode { .. } => SsStatus::Decode,
        Error::DimensionMismatch { .. } => SsStatus::DimensionMismatch,
        Error::InsufficientPoints { .. } => SsStatus::InsufficientPoints,
        Error::Config { .. } => SsStatus::Config,
        Error::Stage { source, .. } => status_of(source),
        _ => SsStatus::InvalidArgument,
    }
}

/// Failure inside the FFI layer itself, before reaching the library.
enum Fail {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type FfiResult = Result<(), Fail>;

/// Runs `f`, records any failure as the thread's last error, and maps it
/// to a status code.
fn guard(f: impl FnOnce() -> FfiResult) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is NULL"));
            SsStatus::NullPointer
        }
        Ok(Err(Fail::Invalid(m))) => {
            set_error(m);
            SsStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            let status = status_of(&e);
            set_error(e.to_string());
            status
        }
        Err(payload) => {
            let m = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {m}"));
            SsStatus::Panic
        }
    }
}

/// Borrows `len` elements at `p`. A zero length accepts NULL.
///
/// # Safety
/// A non-null `p` must point at `len` readable, initialised elements that
/// outlive the returned slice.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// A non-null `p` must point at `len` writable elements.
unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// A non-null `p` must be valid for a write of `T`.
unsafe fn put<T>(p: *mut T, v: T, what: &'static str) -> FfiResult {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

/// # Safety
/// A non-null `p` must be a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ss_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Mean windowed SSIM of two `width x height` 8-bit images with a square
/// `window` (8 is the usual choice).
///
/// # Safety
/// `a` and `b` must each point at `width * height` bytes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ss_ssim(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
    window: u32,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let n = width as usize * height as usize;
        let pa = Patch::new(width, height, input(a, n, "a")?.to_vec())?;
        let pb = Patch::new(width, height, input(b, n, "b")?.to_vec())?;
        let consts = SsimConstants {
            window,
            ..SsimConstants::default()
        };
        consts.validate()?;
        put(out, similarity::ssim(&pa, &pb, &consts)?, "out")
    })
}

/// Savitzky-Golay smoothing of `n` values into `out` (also `n` long).
///
/// # Safety
/// `values` and `out` must each point at `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ss_savgol(
    values: *const f64,
    n: usize,
    window: usize,
    order: usize,
    edge: SsEdgeMode,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let edge = match edge {
            SsEdgeMode::Interp => EdgeMode::Interp,
            SsEdgeMode::Mirror => EdgeMode::Mirror,
        };
        let smoothed = similarity::savgol_filter(input(values, n, "values")?, window, order, edge)?;
        output(out, n, "out")?.copy_from_slice(&smoothed);
        Ok(())
    })
}

/// Normalised RMSE of onset delays: `min(rmse, 300) / 300`, 1 when `n` is 0.
///
/// # Safety
/// `delays_s` must point at `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_nrmse(delays_s: *const f64, n: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        let d = input(delays_s, n, "delays_s")?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Fail::Invalid("delays must be finite".into()));
        }
        put(out, metrics::nrmse(d), "out")
    })
}

/// `f1 * (1 - nrmse)`; both inputs must lie in [0, 1].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_s4(f1: f64, nrmse: f64, out: *mut f64) -> SsStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&f1) || !(0.0..=1.0).contains(&nrmse) {
            return Err(Fail::Invalid(format!("F1 {f1} and NRMSE {nrmse} must lie in [0, 1]")));
        }
        put(out, metrics::s4(f1, nrmse), "out")
    })
}

/// Area under a precision-delay curve of `n` points with strictly
/// increasing `alphas`.
///
/// # Safety
/// `alphas` and `precisions` must each point at `n` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ss_apd(alphas: *const f64, precisions: *const f64, n: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        let a = input(alphas, n, "alphas")?;
        let p = input(precisions, n, "precisions")?;
        let points: Vec<(f64, f64)> = a.iter().copied().zip(p.iter().copied()).collect();
        put(out, metrics::apd(&points)?, "out")
    })
}

/// # Safety
/// `out` must be writable. The handle written there must be released with
/// `ss_cusum_free`.
#[no_mangle]
pub unsafe extern "C" fn ss_cusum_new(gamma: f64, h: f64, out: *mut *mut SsCusum) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let c = Cusum::new(gamma, h)?;
        out.write(Box::into_raw(Box::new(SsCusum(c))));
        Ok(())
    })
}

/// Feeds one evidence sample. `alarm` is set when the statistic reaches `h`.
///
/// # Safety
/// `cusum` must come from `ss_cusum_new`; `alarm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_cusum_push(cusum: *mut SsCusum, e_t: f64, alarm: *mut bool) -> SsStatus {
    guard(|| {
        let c = cusum.as_mut().ok_or(Fail::Null("cusum"))?;
        if !e_t.is_finite() {
            return Err(Fail::Invalid(format!("evidence {e_t} is not finite")));
        }
        let hit = c.0.push(e_t);
        put(alarm, hit, "alarm")
    })
}

/// Current statistic and the number of samples fed so far.
///
/// # Safety
/// `cusum` must come from `ss_cusum_new`; `statistic` and `samples` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ss_cusum_state(cusum: *const SsCusum, statistic: *mut f64, samples: *mut u64) -> SsStatus {
    guard(|| {
        let c = cusum.as_ref().ok_or(Fail::Null("cusum"))?;
        let st = c.0.state();
        put(statistic, st.s, "statistic")?;
        put(samples, st.t, "samples")
    })
}

/// # Safety
/// `cusum` must be NULL or come from `ss_cusum_new`, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ss_cusum_free(cusum: *mut SsCusum) {
    if !cusum.is_null() {
        drop(Box::from_raw(cusum));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_mixture_default_params(out: *mut SsMixtureParams) -> SsStatus {
    guard(|| put(out, MixtureParams::default().into(), "out"))
}

/// `params` may be NULL for the defaults.
///
/// # Safety
/// A non-null `params` must be readable; `out` must be writable. The handle
/// written there must be released with `ss_mixture_free`.
#[no_mangle]
pub unsafe extern "C" fn ss_mixture_new(
    width: u32,
    height: u32,
    params: *const SsMixtureParams,
    out: *mut *mut SsMixtureModel,
) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let p = params.as_ref().map_or_else(MixtureParams::default, |p| (*p).into());
        let m = MixtureModel::new(width, height, p)?;
        out.write(Box::into_raw(Box::new(SsMixtureModel(m))));
        Ok(())
    })
}

/// Updates the model with one row-major frame of `len` bytes.
///
/// # Safety
/// `model` must come from `ss_mixture_new`; `luma` must point at `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_mixture_update(model: *mut SsMixtureModel, luma: *const u8, len: usize) -> SsStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        let (w, h) = (m.0.width(), m.0.height());
        if len != w as usize * h as usize {
            return Err(Fail::Invalid(format!("frame of {len} bytes does not fit {w}x{h}")));
        }
        let frame = Frame::new(w, h, input(luma, len, "luma")?.to_vec(), 0, 0.0)?;
        m.0.update(&frame)?;
        Ok(())
    })
}

/// Writes the current background estimate (`len` = width * height bytes).
///
/// # Safety
/// `model` must come from `ss_mixture_new`; `out` must point at `len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_mixture_render(model: *const SsMixtureModel, out: *mut u8, len: usize) -> SsStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let bg = m.0.render();
        if len != bg.luminance().len() {
            return Err(Fail::Invalid(format!(
                "output of {len} bytes does not fit {}x{}",
                bg.width(),
                bg.height()
            )));
        }
        output(out, len, "out")?.copy_from_slice(bg.luminance());
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or come from `ss_mixture_new`, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ss_mixture_free(model: *mut SsMixtureModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the backtracking pipeline on one video directory (manifest.txt,
/// detections.csv, mask.pgm). `config_path` may be NULL for the defaults.
///
/// Predicted onsets are written to `onsets_s` up to `capacity`;
/// `count` receives the total, which may exceed `capacity`.
///
/// # Safety
/// `video_dir` and a non-null `config_path` must be NUL-terminated strings;
/// `onsets_s` must point at `capacity` doubles; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_run_video(
    video_dir: *const c_char,
    config_path: *const c_char,
    onsets_s: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> SsStatus {
    guard(|| {
        let dir = path_arg(video_dir, "video_dir")?;
        let cfg = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(path_arg(config_path, "config_path")?)?
        };
        let out = output(onsets_s, capacity, "onsets_s")?;
        if count.is_null() {
            return Err(Fail::Null("count"));
        }
        let inputs = VideoInputs::from_dir(&dir)?;
        let run = with_workers(&cfg, || run_video(&inputs, &cfg, &Mode::Backtrack))??;
        let preds = run.result.predictions();
        for (slot, p) in out.iter_mut().zip(&preds) {
            *slot = p.predicted_start_s;
        }
        put(count, preds.len(), "count")
    })
}
