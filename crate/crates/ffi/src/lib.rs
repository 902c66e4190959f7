//! C ABI over the svfm library: load a checkpoint and sample it, evaluate
//! the closed-form mixture velocity, and compute the energy distance and the
//! non-intersection estimate on caller-owned buffers.
//!
//! Every function returns an `SvfmStatus`. On failure the message is kept
//! per thread and can be read with `svfm_last_error`. Matrices are
//! row-major `f64` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use svfm::cli::Checkpoint;
use svfm::data::Rng;
use svfm::dynamics::VelocitySource;
use svfm::metrics::energy_distance_points;
use svfm::oracle::{v_functional, GmmSpec};
use svfm::tensor::Tensor;
use svfm::trainer::sample_model;
use svfm::Error;

/// Status codes. The nonzero values below 6 match the command-line exit
/// codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvfmStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Divergence = 3,
    CorruptCheckpoint = 4,
    CheckFailed = 5,
    InvalidArgument = 6,
    NullPointer = 7,
    Io = 8,
    Numeric = 9,
}

/// A model restored from a checkpoint.
pub struct SvfmModel {
    ck: Checkpoint,
}

/// A Gaussian mixture target with standard normal source.
pub struct SvfmGmm {
    spec: GmmSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SvfmStatus {
    match e {
        Error::Config(_) => SvfmStatus::Config,
        Error::Divergence { .. } => SvfmStatus::Divergence,
        Error::CorruptCheckpoint(_) => SvfmStatus::CorruptCheckpoint,
        Error::CheckFailed(_) => SvfmStatus::CheckFailed,
        Error::InvalidArgument(_) | Error::Shape { .. } => SvfmStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::NonFiniteState { .. } => SvfmStatus::Numeric,
        Error::Io(_) => SvfmStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SvfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SvfmStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            SvfmStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SvfmStatus::Internal
        }
    }
}

fn invalid(msg: &str) -> Fail {
    Fail::Lib(Error::InvalidArgument(msg.into()))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<Tensor, Fail> {
    let data = slice(p, rows * cols, what)?;
    Ok(Tensor::matrix(rows, cols, data.to_vec())?)
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes) and returns the full message
/// length in bytes. Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn svfm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file. On success `*out` owns a model that must be
/// released with `svfm_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svfm_model_load(path: *const c_char, out: *mut *mut SvfmModel) -> SvfmStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SvfmModel { ck }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from `svfm_model_load`, and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn svfm_model_free(model: *mut SvfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Data dimension of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svfm_model_dim(model: *const SvfmModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.model().dim())
}

/// Latent dimension, 0 for plain flow matching models.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svfm_model_latent_dim(model: *const SvfmModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.ck.model().latent())
        .map_or(0, |l| l.latent_dim())
}

/// Draws `n` samples with `nfe` Euler steps into `out` (`n × dim`). The
/// same seed gives the same samples as `svfm sample --seed`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `n * dim` values.
#[no_mangle]
pub unsafe extern "C" fn svfm_model_sample(
    model: *const SvfmModel,
    n: usize,
    nfe: usize,
    seed: u64,
    out: *mut f64,
) -> SvfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if n == 0 || nfe == 0 {
            return Err(invalid("n and nfe must be positive"));
        }
        let dst = slice_mut(out, n * m.ck.model().dim(), "out")?;
        let mut rng = Rng::new(seed, svfm::cli::STREAM_SAMPLE);
        let traj = sample_model(m.ck.model(), &m.ck.config.dataset, n, nfe, &mut rng)?;
        dst.copy_from_slice(traj.endpoint().data());
        Ok(())
    })
}

/// Learned velocity at `n` points `x` (`n × dim`) and time `t`. `z` is
/// `n × latent_dim`, and must be null exactly when the latent dimension is 0.
///
/// # Safety
/// Buffers must match the stated sizes; `out` holds `n * dim` values.
#[no_mangle]
pub unsafe extern "C" fn svfm_model_velocity(
    model: *const SvfmModel,
    x: *const f64,
    n: usize,
    t: f64,
    z: *const f64,
    out: *mut f64,
) -> SvfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let field = &m.ck.model().field;
        let d = field.dim();
        let x = matrix(x, n, d, "x")?;
        let z = match (field.latent_dim(), z.is_null()) {
            (0, true) => None,
            (k, false) if k > 0 => Some(matrix(z, n, k, "z")?),
            (0, false) => return Err(invalid("model has no latent; pass a null z")),
            _ => return Err(Fail::Null("z")),
        };
        let v = field.velocity(&x, t, z.as_ref())?;
        slice_mut(out, n * d, "out")?.copy_from_slice(v.data());
        Ok(())
    })
}

/// Builds a `k`-component mixture in `dim` dimensions: `weights` (k),
/// `means` (k × dim), `stds` (k, isotropic).
///
/// # Safety
/// Buffers must match the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svfm_gmm_new(
    k: usize,
    dim: usize,
    weights: *const f64,
    means: *const f64,
    stds: *const f64,
    out: *mut *mut SvfmGmm,
) -> SvfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if k == 0 || dim == 0 {
            return Err(invalid("k and dim must be positive"));
        }
        let w = slice(weights, k, "weights")?.to_vec();
        let m = slice(means, k * dim, "means")?.chunks(dim).map(<[f64]>::to_vec).collect();
        let s = slice(stds, k, "stds")?.to_vec();
        let spec = GmmSpec::new(w, m, s)?;
        *out = Box::into_raw(Box::new(SvfmGmm { spec }));
        Ok(())
    })
}

/// # Safety
/// `gmm` must be null or come from `svfm_gmm_new`, and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn svfm_gmm_free(gmm: *mut SvfmGmm) {
    if !gmm.is_null() {
        drop(Box::from_raw(gmm));
    }
}

/// Closed-form marginal velocity of the independent coupling at `n` points
/// (`n × dim`) and `0 ≤ t < 1`.
///
/// # Safety
/// Buffers must match the stated sizes; `out` holds `n * dim` values.
#[no_mangle]
pub unsafe extern "C" fn svfm_gmm_velocity(
    gmm: *const SvfmGmm,
    x: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> SvfmStatus {
    guard(|| {
        let g = gmm.as_ref().ok_or(Fail::Null("gmm"))?;
        let d = g.spec.dim();
        let x = matrix(x, n, d, "x")?;
        let v = g.spec.velocity(&x, t, None)?;
        slice_mut(out, n * d, "out")?.copy_from_slice(v.data());
        Ok(())
    })
}

/// Energy distance between point sets `a` (`na × dim`) and `b` (`nb × dim`).
///
/// # Safety
/// Buffers must match the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svfm_energy_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> SvfmStatus {
    guard(|| {
        let dst = out.as_mut().ok_or(Fail::Null("out"))?;
        *dst = energy_distance_points(&matrix(a, na, dim, "a")?, &matrix(b, nb, dim, "b")?)?;
        Ok(())
    })
}

/// Binned non-intersection estimate for `n` pairs (`x0`, `x1`, each
/// `n × dim`) over the `k` times in `t_grid` with bin width `h`.
///
/// # Safety
/// Buffers must match the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn svfm_v_functional(
    x0: *const f64,
    x1: *const f64,
    n: usize,
    dim: usize,
    t_grid: *const f64,
    k: usize,
    h: f64,
    out: *mut f64,
) -> SvfmStatus {
    guard(|| {
        let dst = out.as_mut().ok_or(Fail::Null("out"))?;
        let grid = slice(t_grid, k, "t_grid")?;
        *dst = v_functional(&matrix(x0, n, dim, "x0")?, &matrix(x1, n, dim, "x1")?, grid, h)?;
        Ok(())
    })
}
