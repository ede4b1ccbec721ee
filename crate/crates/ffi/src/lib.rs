//! C ABI over the `splitmixer` crate.
//!
//! Every fallible call returns an [`SpmxStatus`]; on failure the message is kept per thread
//! and read back with [`spmx_last_error`]. Models live behind the opaque [`SpmxModel`] handle,
//! created by `spmx_model_*` constructors and released with [`spmx_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use splitmixer::checkpoint::{Checkpoint, TrainState};
use splitmixer::config::RunConfig;
use splitmixer::cost::{analytic_saving, Comparison, Knob};
use splitmixer::mixing::MixVariant;
use splitmixer::model::{Model, ModelConfig, Variant};
use splitmixer::nn::Mode;
use splitmixer::tensor::{Shape4, Tensor4};
use splitmixer::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmxStatus {
    Ok = 0,
    VerificationFailed = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Format = 5,
    NullPointer = 6,
    Panic = 7,
}

/// Opaque network handle.
pub struct SpmxModel {
    inner: Model<f32>,
}

/// Costs of a model and of its ConvMixer baseline at one input size.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpmxCost {
    pub params: u64,
    pub macs: u64,
    pub baseline_params: u64,
    pub baseline_macs: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SpmxStatus {
    match err {
        Error::Verification(_) => SpmxStatus::VerificationFailed,
        Error::Numerical(_) => SpmxStatus::Numerical,
        Error::Io { .. } => SpmxStatus::Io,
        Error::Format(_) => SpmxStatus::Format,
        _ => SpmxStatus::InvalidArgument,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpmxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpmxStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer passed for {what}"));
            SpmxStatus::NullPointer
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SpmxStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Parse(format!("{what} is not valid UTF-8")).into())
}

unsafe fn model_ref<'a>(m: *const SpmxModel) -> Result<&'a Model<f32>, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn publish(model: Model<f32>, out: &mut *mut SpmxModel) {
    *out = Box::into_raw(Box::new(SpmxModel { inner: model }));
}

/// Message of the last failed call on this thread, or NULL if none failed yet.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spmx_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spmx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a name such as `SplitMixer-I-256/8` with default knobs.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_new(name: *const c_char, seed: u64, out: *mut *mut SpmxModel) -> SpmxStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let config = ModelConfig::parse_name(text(name, "name")?)?;
        publish(Model::build(config, seed)?, out);
        Ok(())
    })
}

/// Builds a model from configuration text (`[model]` section, `key = value` lines).
///
/// `model.seed` in the text sets the initialization seed.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_from_config(config: *const c_char, out: *mut *mut SpmxModel) -> SpmxStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let mut run = RunConfig::default();
        run.apply_text(text(config, "config")?)?;
        publish(Model::build(run.model, run.model_seed)?, out);
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_load(path: *const c_char, out: *mut *mut SpmxModel) -> SpmxStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        publish(ck.to_model()?, out);
        Ok(())
    })
}

/// Writes the model's weights and normalization state to a checkpoint file.
///
/// # Safety
/// `model` must come from a constructor here; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_save(model: *const SpmxModel, path: *const c_char) -> SpmxStatus {
    guard(|| {
        let m = model_ref(model)?;
        Checkpoint::capture(m, None, &TrainState::default()).save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model. NULL is accepted and ignored.
///
/// # Safety
/// `model` must come from a constructor here and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_free(model: *mut SpmxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must come from a constructor here and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_param_count(model: *const SpmxModel, out: *mut u64) -> SpmxStatus {
    guard(|| {
        *out_ref(out, "out")? = model_ref(model)?.trainable_params() as u64;
        Ok(())
    })
}

/// Input channels and output classes the model expects.
///
/// # Safety
/// `model` must come from a constructor here; both out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_io(model: *const SpmxModel, in_channels: *mut usize, classes: *mut usize) -> SpmxStatus {
    guard(|| {
        let c = model_ref(model)?.config;
        *out_ref(in_channels, "in_channels")? = c.in_channels;
        *out_ref(classes, "classes")? = c.classes;
        Ok(())
    })
}

/// Copies the canonical model name into `buf` (NUL-terminated, truncated to `cap`).
///
/// `needed` receives the full length without the NUL; pass `cap = 0` to query it.
///
/// # Safety
/// `buf` must hold `cap` bytes (may be NULL when `cap` is 0); `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_name(model: *const SpmxModel, buf: *mut c_char, cap: usize, needed: *mut usize) -> SpmxStatus {
    guard(|| {
        let name = model_ref(model)?.config.name();
        *out_ref(needed, "needed")? = name.len();
        if cap > 0 {
            if buf.is_null() {
                return Err(Failure::Null("buf"));
            }
            let n = name.len().min(cap - 1);
            ptr::copy_nonoverlapping(name.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        Ok(())
    })
}

/// Inference-mode logits for an NCHW `float` batch.
///
/// `logits` must hold `n * classes` floats, written row-major by image.
///
/// # Safety
/// `input` must hold `n * c * h * w` floats and `logits` `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_forward(
    model: *mut SpmxModel,
    input: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    logits: *mut f32,
    logits_len: usize,
) -> SpmxStatus {
    guard(|| {
        let m = &mut model.as_mut().ok_or(Failure::Null("model"))?.inner;
        if input.is_null() {
            return Err(Failure::Null("input"));
        }
        if logits.is_null() {
            return Err(Failure::Null("logits"));
        }
        let shape = Shape4::new(n, c, h, w)?;
        let want = n * m.config.classes;
        if logits_len != want {
            return Err(Error::Shape(format!("logits buffer holds {logits_len} floats, need {want}")).into());
        }
        let data = std::slice::from_raw_parts(input, n * c * h * w).to_vec();
        let y = m.predict(&Tensor4::from_vec(shape, data)?, Mode::Eval)?;
        std::slice::from_raw_parts_mut(logits, want).copy_from_slice(y.data());
        Ok(())
    })
}

/// Parameter and MAC counts for one image of `height x width`, with the ConvMixer baseline.
///
/// # Safety
/// `model` must come from a constructor here and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_cost(model: *const SpmxModel, height: usize, width: usize, out: *mut SpmxCost) -> SpmxStatus {
    guard(|| {
        let cmp = Comparison::new(&model_ref(model)?.config, (height, width))?;
        *out_ref(out, "out")? = SpmxCost {
            params: cmp.model.trainable_params(),
            macs: cmp.model.macs(),
            baseline_params: cmp.baseline.trainable_params(),
            baseline_macs: cmp.baseline.macs(),
        };
        Ok(())
    })
}

/// Exact per-block channel-mix saving versus a full mix, as `numer / denom`.
///
/// # Safety
/// `model` must come from a constructor here; both out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn spmx_model_saving(model: *const SpmxModel, numer: *mut i64, denom: *mut i64) -> SpmxStatus {
    guard(|| {
        let config = model_ref(model)?.config;
        let variant = match config.variant {
            Variant::Split(v) => v,
            Variant::ConvMixer => MixVariant::Full,
        };
        let s = analytic_saving(variant, Knob::of(&config))?;
        *out_ref(numer, "numer")? = *s.numer();
        *out_ref(denom, "denom")? = *s.denom();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status_codes() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, SpmxStatus::Panic);
        let msg = unsafe { CStr::from_ptr(spmx_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(status_of(&Error::Numerical("x".into())), SpmxStatus::Numerical);
        assert_eq!(status_of(&Error::Config("x".into())), SpmxStatus::InvalidArgument);
        assert_eq!(SpmxStatus::Numerical as i32, Error::Numerical(String::new()).exit_code());
        assert_eq!(SpmxStatus::VerificationFailed as i32, Error::Verification(String::new()).exit_code());
    }
}
