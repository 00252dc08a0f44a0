//! C ABI over the core library: opaque handles, integer status codes, and a
//! thread-local last-error message. The generated header lands in
//! include/mgruip.h.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::sync::Arc;

use mgruip_core::error::Error;
use mgruip_core::model_io::load_model;
use mgruip_core::network::{compute_latency, count_parameters, NetworkParams, NetworkTopology};
use mgruip_core::streaming::{stream_open, StreamState};

/// Status codes returned by every fallible function.
#[repr(i32)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MgruipStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    ValidationError = 4,
    NumericError = 5,
    ContractError = 6,
    BufferTooSmall = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> MgruipStatus {
    match err {
        Error::Dimension { .. } | Error::DegenerateBatch { .. } => MgruipStatus::InvalidArgument,
        Error::Contract(_) => MgruipStatus::ContractError,
        Error::Validation(_) => MgruipStatus::ValidationError,
        Error::Numeric(_) => MgruipStatus::NumericError,
        Error::Io(_) => MgruipStatus::IoError,
    }
}

fn fail(err: Error) -> MgruipStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Loaded model: topology plus parameters, shareable across streams.
pub struct MgruipModel {
    topology: Arc<NetworkTopology>,
    params: Arc<NetworkParams<f32>>,
}

/// One open stream; single-threaded, independent of other streams.
pub struct MgruipStream {
    inner: StreamState<f32>,
    pending: std::collections::VecDeque<Vec<f32>>,
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mgruip_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// ABI version of this header/library pair.
#[no_mangle]
pub extern "C" fn mgruip_abi_version() -> u32 {
    1
}

/// Loads a model file written by the `mgruip train` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_load(
    path: *const c_char,
    out: *mut *mut MgruipModel,
) -> MgruipStatus {
    if path.is_null() || out.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid utf-8");
            return MgruipStatus::InvalidArgument;
        }
    };
    match load_model(Path::new(path)) {
        Ok((topology, params, _meta)) => {
            let model = Box::new(MgruipModel {
                topology: Arc::new(topology),
                params: Arc::new(params),
            });
            *out = Box::into_raw(model);
            MgruipStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Frees a model. Streams opened from it keep their own reference and stay
/// valid.
///
/// # Safety
/// `model` must be null or a pointer from `mgruip_model_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_free(model: *mut MgruipModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_usize_getter(
    model: *const MgruipModel,
    out: *mut usize,
    f: impl Fn(&MgruipModel) -> usize,
) -> MgruipStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    *out = f(&*model);
    MgruipStatus::Ok
}

/// # Safety
/// `model` must come from `mgruip_model_load`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_input_dim(
    model: *const MgruipModel,
    out: *mut usize,
) -> MgruipStatus {
    model_usize_getter(model, out, |m| m.topology.input_dim)
}

/// # Safety
/// `model` must come from `mgruip_model_load`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_output_dim(
    model: *const MgruipModel,
    out: *mut usize,
) -> MgruipStatus {
    model_usize_getter(model, out, |m| m.topology.output_dim)
}

/// Total future reach per output in base frames.
///
/// # Safety
/// `model` must come from `mgruip_model_load`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_lookahead_frames(
    model: *const MgruipModel,
    out: *mut usize,
) -> MgruipStatus {
    model_usize_getter(model, out, |m| m.topology.lookahead_frames())
}

/// Model latency in milliseconds: lookahead plus output delay.
///
/// # Safety
/// `model` must come from `mgruip_model_load`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_latency_ms(
    model: *const MgruipModel,
    out: *mut f64,
) -> MgruipStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    match compute_latency(&(*model).topology) {
        Ok(report) => {
            *out = report.total_ms;
            MgruipStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Trainable parameter count; `bias_free` != 0 selects the recurrent+context
/// weight-only total.
///
/// # Safety
/// `model` must come from `mgruip_model_load`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgruip_model_param_count(
    model: *const MgruipModel,
    bias_free: i32,
    out: *mut u64,
) -> MgruipStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    match count_parameters(&(*model).topology) {
        Ok(report) => {
            *out = if bias_free != 0 {
                report.bias_free_total
            } else {
                report.with_bias_total
            };
            MgruipStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Opens an independent stream over the model's parameters.
///
/// # Safety
/// `model` must come from `mgruip_model_load`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mgruip_stream_open(
    model: *const MgruipModel,
    out: *mut *mut MgruipStream,
) -> MgruipStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    let m = &*model;
    match stream_open(m.topology.clone(), m.params.clone()) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(MgruipStream {
                inner,
                pending: std::collections::VecDeque::new(),
            }));
            MgruipStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `stream` must be null or a pointer from `mgruip_stream_open`, freed once.
#[no_mangle]
pub unsafe extern "C" fn mgruip_stream_free(stream: *mut MgruipStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Pushes one frame of `len` == input_dim values. Completed outputs queue up
/// internally; drain them with `mgruip_stream_pop_output`.
///
/// # Safety
/// `stream` must come from `mgruip_stream_open`; `frame` must point to `len`
/// readable floats.
#[no_mangle]
pub unsafe extern "C" fn mgruip_stream_push(
    stream: *mut MgruipStream,
    frame: *const f32,
    len: usize,
) -> MgruipStatus {
    if stream.is_null() || frame.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    let s = &mut *stream;
    let slice = std::slice::from_raw_parts(frame, len);
    match s.inner.push(slice) {
        Ok(outputs) => {
            s.pending.extend(outputs);
            MgruipStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Ends the stream, zero-padding the missing future; remaining outputs queue
/// up for `mgruip_stream_pop_output`.
///
/// # Safety
/// `stream` must come from `mgruip_stream_open`.
#[no_mangle]
pub unsafe extern "C" fn mgruip_stream_flush(stream: *mut MgruipStream) -> MgruipStatus {
    if stream.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    let s = &mut *stream;
    match s.inner.flush() {
        Ok(outputs) => {
            s.pending.extend(outputs);
            MgruipStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Number of completed outputs waiting to be popped.
///
/// # Safety
/// `stream` must come from `mgruip_stream_open`.
#[no_mangle]
pub unsafe extern "C" fn mgruip_stream_pending_outputs(stream: *const MgruipStream) -> usize {
    if stream.is_null() {
        return 0;
    }
    (*stream).pending.len()
}

/// Pops the oldest completed output into `out` (capacity >= output_dim).
/// Returns BufferTooSmall without consuming when the capacity is short, and
/// ContractError when nothing is pending.
///
/// # Safety
/// `stream` must come from `mgruip_stream_open`; `out` must point to
/// `capacity` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mgruip_stream_pop_output(
    stream: *mut MgruipStream,
    out: *mut f32,
    capacity: usize,
) -> MgruipStatus {
    if stream.is_null() || out.is_null() {
        set_error("null argument");
        return MgruipStatus::NullArgument;
    }
    let s = &mut *stream;
    let Some(front) = s.pending.front() else {
        set_error("no pending outputs");
        return MgruipStatus::ContractError;
    };
    if capacity < front.len() {
        set_error("output buffer too small");
        return MgruipStatus::BufferTooSmall;
    }
    let v = s.pending.pop_front().unwrap();
    std::ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    MgruipStatus::Ok
}
