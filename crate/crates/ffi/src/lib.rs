//! C ABI over the amgan library.
//!
//! Every function returns an [`AmganStatus`]; on failure a message is kept
//! per thread and can be read with [`amgan_last_error`]. Objects are opaque
//! handles released with their matching `*_free` function. Matrices are
//! row-major `double` buffers.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use amgan::autodiff::Mat;
use amgan::checkpoint::ModelBundle;
use amgan::control::{
    action_transfer, fine_grained_control, interpolate_latents, ActionModelRegistry, NextPoseVae, Schedule,
    TransferConfig,
};
use amgan::kinematics::{ChainId, NUM_CHAINS};
use amgan::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    TopologyMismatch = 6,
    UnknownAction = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// A trained sequence model.
pub struct AmganModel(ModelBundle);

/// A trained next-pose model for action transfer.
pub struct AmganNextPose(NextPoseVae);

/// Per-action models loaded from a registry manifest.
pub struct AmganRegistry(ActionModelRegistry);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AmganStatus {
    match e {
        Error::Dimension { .. } => AmganStatus::Dimension,
        Error::Io { .. } | Error::Empty(_) | Error::Parse { .. } => AmganStatus::Io,
        Error::Checkpoint { .. } => AmganStatus::Checkpoint,
        Error::TopologyMismatch { .. } => AmganStatus::TopologyMismatch,
        Error::UnknownAction(_) => AmganStatus::UnknownAction,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Chains(_) | Error::Representation(_) => {
            AmganStatus::InvalidArgument
        }
        _ => AmganStatus::Other,
    }
}

struct Fail(AmganStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AmganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AmganStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AmganStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AmganStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AmganStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if rows == 0 {
        return Err(Fail(AmganStatus::InvalidArgument, format!("{what} has no rows")));
    }
    let data = std::slice::from_raw_parts(p, rows * cols).to_vec();
    Ok(Mat::from_shape_vec((rows, cols), data).expect("length matches shape"))
}

unsafe fn write_out(m: &Mat, out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < m.len() {
        return Err(Fail(
            AmganStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {out_len}", m.len()),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(out, m.len());
    for (d, v) in dst.iter_mut().zip(m.iter()) {
        *d = *v;
    }
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on this thread.
#[no_mangle]
pub extern "C" fn amgan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn amgan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model checkpoint into `*out`.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amgan_model_load(path: *const c_char, out: *mut *mut AmganModel) -> AmganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bundle = ModelBundle::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AmganModel(bundle)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`amgan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amgan_model_free(model: *mut AmganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes pose width, observed length and predicted length.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn amgan_model_dims(
    model: *const AmganModel,
    pose_dim: *mut usize,
    observed_len: *mut usize,
    predict_len: *mut usize,
) -> AmganStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        for (p, v) in [
            (pose_dim, m.model.topology().pose_dim()),
            (observed_len, m.window.observed_len),
            (predict_len, m.model.predict_len()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Predicts `predict_len x pose_dim` frames from `rows x pose_dim` observed
/// frames (at least `observed_len`; the last ones are used).
///
/// # Safety
/// `observed` must hold `rows * pose_dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn amgan_model_predict(
    model: *const AmganModel,
    observed: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> AmganStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let d = m.model.topology().pose_dim();
        let t = m.window.observed_len;
        let obs = matrix_arg(observed, rows, d, "observed")?;
        if rows < t {
            return Err(Fail(AmganStatus::InvalidArgument, format!("need {t} observed frames, got {rows}")));
        }
        let obs = Mat::from_shape_fn((t, d), |(i, j)| obs[[rows - t + i, j]]);
        write_out(&m.predict(&obs)?, out, out_len)
    })
}

/// Loads a next-pose checkpoint.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amgan_next_pose_load(path: *const c_char, out: *mut *mut AmganNextPose) -> AmganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let vae = NextPoseVae::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AmganNextPose(vae)));
        Ok(())
    })
}

/// # Safety
/// `vae` must come from [`amgan_next_pose_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amgan_next_pose_free(vae: *mut AmganNextPose) {
    if !vae.is_null() {
        drop(Box::from_raw(vae));
    }
}

/// Generates `n_frames` linear-schedule transition poses from the end of
/// `source` into the window ending `target`, written as `n_frames x pose_dim`.
///
/// # Safety
/// Buffers must hold the stated number of `pose_dim`-wide rows.
#[no_mangle]
pub unsafe extern "C" fn amgan_transfer(
    vae: *const AmganNextPose,
    source: *const f64,
    source_rows: usize,
    target: *const f64,
    target_rows: usize,
    n_frames: usize,
    out: *mut f64,
    out_len: usize,
) -> AmganStatus {
    guard(|| {
        let v = &handle(vae, "vae")?.0;
        let d = v.bundle.model.topology().pose_dim();
        let src = matrix_arg(source, source_rows, d, "source")?;
        let tgt = matrix_arg(target, target_rows, d, "target")?;
        let cfg = TransferConfig {
            n_transition_frames: n_frames,
            schedule: Schedule::Linear,
        };
        write_out(&action_transfer(v, &src, &tgt, &cfg)?, out, out_len)
    })
}

/// Writes the `n_frames` latents strictly between `z1` and `z2`
/// (`n_frames x len`, linear schedule).
///
/// # Safety
/// `z1` and `z2` must hold `len` values, `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn amgan_interpolate_latents(
    z1: *const f64,
    z2: *const f64,
    len: usize,
    n_frames: usize,
    out: *mut f64,
    out_len: usize,
) -> AmganStatus {
    guard(|| {
        if z1.is_null() || z2.is_null() {
            return Err(null("latent"));
        }
        let a = std::slice::from_raw_parts(z1, len);
        let b = std::slice::from_raw_parts(z2, len);
        let cfg = TransferConfig {
            n_transition_frames: n_frames,
            schedule: Schedule::Linear,
        };
        let zs = interpolate_latents(a, b, &cfg)?;
        let m = Mat::from_shape_vec((zs.len(), len), zs.concat()).expect("rows of len");
        write_out(&m, out, out_len)
    })
}

/// Loads every model listed in a registry manifest.
///
/// # Safety
/// `manifest` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amgan_registry_load(manifest: *const c_char, out: *mut *mut AmganRegistry) -> AmganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let reg = ActionModelRegistry::load(&path_arg(manifest, "manifest")?)?;
        *out = Box::into_raw(Box::new(AmganRegistry(reg)));
        Ok(())
    })
}

/// # Safety
/// `registry` must come from [`amgan_registry_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amgan_registry_free(registry: *mut AmganRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Mean-latent prediction with the base action's model in which chain
/// `chains[i]` (1-5) is taken from action `actions[i]`'s model.
///
/// # Safety
/// `chains` and `actions` must hold `n_overrides` entries; `observed` must
/// hold `rows * pose_dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn amgan_control(
    registry: *const AmganRegistry,
    base_action: *const c_char,
    chains: *const u8,
    actions: *const *const c_char,
    n_overrides: usize,
    observed: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> AmganStatus {
    guard(|| {
        let reg = &handle(registry, "registry")?.0;
        let base = str_arg(base_action, "base_action")?;
        let model = reg.get(base)?;
        let mut overrides = BTreeMap::new();
        if n_overrides > 0 {
            if chains.is_null() || actions.is_null() {
                return Err(null("overrides"));
            }
            let ids = std::slice::from_raw_parts(chains, n_overrides);
            let names = std::slice::from_raw_parts(actions, n_overrides);
            for (&id, &name) in ids.iter().zip(names) {
                overrides.insert(ChainId::new(id)?, str_arg(name, "action")?.to_string());
            }
        }
        let obs = matrix_arg(observed, rows, model.model.topology().pose_dim(), "observed")?;
        let noise = vec![vec![0.0; model.model.latent_dim()]; NUM_CHAINS];
        write_out(&fine_grained_control(reg, &obs, base, &overrides, &noise)?.pose, out, out_len)
    })
}
