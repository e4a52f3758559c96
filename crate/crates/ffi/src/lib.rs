//! C ABI over `grcsam`: opaque tensor and pipeline handles, status codes and
//! a per-thread last-error message.
//!
//! Every function returns a [`GrcStatus`]; on failure the message is
//! available from [`grc_last_error`] until the next failing call on the
//! same thread. Handles returned through out-pointers are owned by the
//! caller and released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use grcsam::complexity::{analytic_cost, Convention, CostArgs, Mechanism};
use grcsam::losses::{self, FocalParams, LossWeights};
use grcsam::numerics::{DType, Tensor};
use grcsam::pipeline::{grct, run_pipeline, synth_inputs, write_outputs, PipelineConfig, PipelineOutput};
use grcsam::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Overflow = 5,
    Format = 6,
    Config = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrcDtype {
    F32 = 0,
    F64 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrcMechanism {
    Msa = 0,
    Wmsa = 1,
    Wssa = 2,
}

/// Opaque tensor handle.
pub struct GrcTensor {
    inner: Tensor,
}

/// Opaque pipeline handle: a configuration plus the outputs of the last run.
pub struct GrcPipeline {
    config: PipelineConfig,
    last: Option<PipelineOutput>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GrcStatus {
    match e {
        Error::Shape(_) => GrcStatus::Shape,
        Error::InvalidArgument(_) => GrcStatus::InvalidArgument,
        Error::NonFinite { .. } => GrcStatus::NonFinite,
        Error::Overflow(_) => GrcStatus::Overflow,
        Error::Format(_) => GrcStatus::Format,
        Error::Config(_) => GrcStatus::Config,
        Error::Io(_) => GrcStatus::Io,
    }
}

/// Failure raised inside a wrapped call.
struct Fail(GrcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GrcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GrcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            GrcStatus::Panic
        }
    }
}

unsafe fn tensor_ref<'a>(t: *const GrcTensor, what: &str) -> Result<&'a Tensor, Fail> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(GrcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed(t: Tensor) -> *mut GrcTensor {
    Box::into_raw(Box::new(GrcTensor { inner: t }))
}

/// Message of the last failing call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn grc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a tensor from `rank` extents and `product(shape)` row-major
/// values. Values are rounded to `dtype`.
///
/// # Safety
/// `shape` must point to `rank` readable extents and `data` to
/// `product(shape)` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_new(
    dtype: GrcDtype,
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut GrcTensor,
) -> GrcStatus {
    guard(|| {
        if shape.is_null() {
            return Err(null("shape"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let shape = std::slice::from_raw_parts(shape, rank);
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Fail(GrcStatus::Overflow, "extent product overflows".into()))?;
        let values = std::slice::from_raw_parts(data, numel).to_vec();
        let dtype = match dtype {
            GrcDtype::F32 => DType::F32,
            GrcDtype::F64 => DType::F64,
        };
        let t = Tensor::new(shape, values)?.with_dtype(dtype);
        write_out(out, boxed(t), "out")
    })
}

/// Releases a tensor handle; null is ignored.
///
/// # Safety
/// `t` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_free(t: *mut GrcTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Writes the rank to `out_rank`.
///
/// # Safety
/// `t` must be a live handle and `out_rank` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_rank(t: *const GrcTensor, out_rank: *mut usize) -> GrcStatus {
    guard(|| write_out(out_rank, tensor_ref(t, "tensor")?.rank(), "out_rank"))
}

/// Writes the element count to `out_numel`.
///
/// # Safety
/// `t` must be a live handle and `out_numel` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_numel(t: *const GrcTensor, out_numel: *mut usize) -> GrcStatus {
    guard(|| write_out(out_numel, tensor_ref(t, "tensor")?.numel(), "out_numel"))
}

/// Writes the element type to `out_dtype`.
///
/// # Safety
/// `t` must be a live handle and `out_dtype` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_dtype(t: *const GrcTensor, out_dtype: *mut GrcDtype) -> GrcStatus {
    guard(|| {
        let d = match tensor_ref(t, "tensor")?.dtype() {
            DType::F32 => GrcDtype::F32,
            DType::F64 => GrcDtype::F64,
        };
        write_out(out_dtype, d, "out_dtype")
    })
}

/// Copies the extents into `out_shape`, which holds `capacity` entries.
///
/// # Safety
/// `t` must be a live handle and `out_shape` writable for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_shape(t: *const GrcTensor, out_shape: *mut usize, capacity: usize) -> GrcStatus {
    guard(|| {
        let s = tensor_ref(t, "tensor")?.shape();
        if out_shape.is_null() {
            return Err(null("out_shape"));
        }
        if capacity < s.len() {
            return Err(Fail(GrcStatus::BufferTooSmall, format!("rank {} exceeds capacity {capacity}", s.len())));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), out_shape, s.len());
        Ok(())
    })
}

/// Copies the row-major values into `out_data`, which holds `capacity` entries.
///
/// # Safety
/// `t` must be a live handle and `out_data` writable for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_copy_data(t: *const GrcTensor, out_data: *mut f64, capacity: usize) -> GrcStatus {
    guard(|| {
        let d = tensor_ref(t, "tensor")?.data();
        if out_data.is_null() {
            return Err(null("out_data"));
        }
        if capacity < d.len() {
            return Err(Fail(GrcStatus::BufferTooSmall, format!("{} values exceed capacity {capacity}", d.len())));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), out_data, d.len());
        Ok(())
    })
}

/// Reads a GRCT tensor file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_read(path: *const c_char, out: *mut *mut GrcTensor) -> GrcStatus {
    guard(|| {
        let t = grct::read(Path::new(str_arg(path, "path")?))?;
        write_out(out, boxed(t), "out")
    })
}

/// Writes a GRCT tensor file.
///
/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn grc_tensor_write(t: *const GrcTensor, path: *const c_char) -> GrcStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        grct::write(Path::new(str_arg(path, "path")?), t)?;
        Ok(())
    })
}

/// Attention multiply count as an exact integer. `swin_convention` adds
/// the channel factor to the windowed terms; `rho` is used by W-SSA only.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grc_flops(
    mechanism: GrcMechanism,
    h: usize,
    w: usize,
    channels: usize,
    window: usize,
    rho: f64,
    swin_convention: bool,
    out: *mut u64,
) -> GrcStatus {
    guard(|| {
        let m = match mechanism {
            GrcMechanism::Msa => Mechanism::Msa,
            GrcMechanism::Wmsa => Mechanism::Wmsa,
            GrcMechanism::Wssa => Mechanism::Wssa,
        };
        let conv = if swin_convention { Convention::Swin } else { Convention::Literal };
        let args = CostArgs { h, w, channels, window, rho };
        let v = analytic_cost(m, &args, conv)?;
        let v = u64::try_from(v).map_err(|_| Fail(GrcStatus::Overflow, format!("{v} does not fit in 64 bits")))?;
        write_out(out, v, "out")
    })
}

/// Focal loss of probabilities `pred` against binary `target`.
///
/// # Safety
/// `pred` and `target` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_focal_loss(
    pred: *const GrcTensor,
    target: *const GrcTensor,
    gamma: f64,
    alpha: f64,
    out: *mut f64,
) -> GrcStatus {
    guard(|| {
        let v = losses::focal_loss(tensor_ref(pred, "pred")?, tensor_ref(target, "target")?, FocalParams { gamma, alpha })?;
        write_out(out, v, "out")
    })
}

/// Mean binary cross-entropy plus smoothed Dice loss.
///
/// # Safety
/// `pred` and `target` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_bce_dice_loss(pred: *const GrcTensor, target: *const GrcTensor, out: *mut f64) -> GrcStatus {
    guard(|| {
        let v = losses::bce_dice_loss(tensor_ref(pred, "pred")?, tensor_ref(target, "target")?)?;
        write_out(out, v, "out")
    })
}

/// Label-smoothed cross-entropy of `B×K×H×W` logits against `B·H·W`
/// labels; label 255 is ignored.
///
/// # Safety
/// `logits` must be a live handle, `labels` readable for `count` entries
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grc_ce_label_smoothing(
    logits: *const GrcTensor,
    labels: *const u32,
    count: usize,
    smoothing: f64,
    out: *mut f64,
) -> GrcStatus {
    guard(|| {
        if labels.is_null() {
            return Err(null("labels"));
        }
        let labels = std::slice::from_raw_parts(labels, count);
        let v = losses::ce_label_smoothing(tensor_ref(logits, "logits")?, labels, smoothing)?;
        write_out(out, v, "out")
    })
}

/// Weighted sum of the three stage losses.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grc_total_loss(
    coarse: f64,
    fine: f64,
    final_: f64,
    weight_coarse: f64,
    weight_fine: f64,
    weight_final: f64,
    out: *mut f64,
) -> GrcStatus {
    guard(|| {
        let w = LossWeights::new(weight_coarse, weight_fine, weight_final)?;
        write_out(out, losses::total_loss(coarse, fine, final_, &w), "out")
    })
}

/// Creates a pipeline with the default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grc_pipeline_new(out: *mut *mut GrcPipeline) -> GrcStatus {
    guard(|| {
        let p = Box::new(GrcPipeline {
            config: PipelineConfig::default(),
            last: None,
        });
        write_out(out, Box::into_raw(p), "out")
    })
}

/// Releases a pipeline handle; null is ignored.
///
/// # Safety
/// `p` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn grc_pipeline_free(p: *mut GrcPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Sets one configuration key, as in `key = value` config files.
///
/// # Safety
/// `p` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn grc_pipeline_set(p: *mut GrcPipeline, key: *const c_char, value: *const c_char) -> GrcStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = p.config.clone();
        next.set(key, value)?;
        p.config = next;
        Ok(())
    })
}

/// Replaces the configuration with the contents of a config file.
///
/// # Safety
/// `p` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn grc_pipeline_load_config(p: *mut GrcPipeline, path: *const c_char) -> GrcStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        p.config = PipelineConfig::load(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Runs both stages on synthetic inputs. On success the coarse and fine
/// masks are returned as new handles (either out-pointer may be null to
/// skip it) and the run is kept for [`grc_pipeline_write_outputs`].
///
/// # Safety
/// `p` must be a live handle; non-null out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn grc_pipeline_run(
    p: *mut GrcPipeline,
    out_coarse_mask: *mut *mut GrcTensor,
    out_fine_mask: *mut *mut GrcTensor,
) -> GrcStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        let inputs = synth_inputs(&p.config)?;
        let out = run_pipeline(&p.config, &inputs)?;
        if !out_coarse_mask.is_null() {
            out_coarse_mask.write(boxed(out.coarse_mask.clone()));
        }
        if !out_fine_mask.is_null() {
            out_fine_mask.write(boxed(out.fine_mask.clone()));
        }
        p.last = Some(out);
        Ok(())
    })
}

/// Writes the GRCT, PGM, config and report files of the last run into `dir`.
///
/// # Safety
/// `p` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn grc_pipeline_write_outputs(p: *const GrcPipeline, dir: *const c_char) -> GrcStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        let last = p
            .last
            .as_ref()
            .ok_or_else(|| Fail(GrcStatus::InvalidArgument, "the pipeline has not been run".into()))?;
        write_outputs(Path::new(str_arg(dir, "dir")?), last)?;
        Ok(())
    })
}
