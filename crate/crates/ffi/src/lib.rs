//! C ABI over the adapter layer and the spectral diagnostics.
//!
//! Handles are opaque and single-threaded: use an `OplabAdapter` only
//! on the thread that created it (independent handles on different
//! threads are fine). Matrices cross the boundary as dense row-major
//! f64 buffers with explicit dimensions. Every function returns an
//! [`OplabStatus`]; on any non-`Ok` status a human-readable detail is
//! available from `oplab_last_error_message` until the next call on
//! the same thread.
//!
//! The C header is generated by cbindgen into `include/oplab.h` at
//! build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use oplab::autodiff::{zero_grads, Graph};
use oplab::linalg;
use oplab::matrix::Matrix;
use oplab::models::{read_adapter_export, write_adapter_export, AdapterLayer, AdapterVariant};
use oplab::optim::{Optimizer, OptimizerKind, Schedule};
use oplab::rng;

pub const OPLAB_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OplabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NumericError = 4,
    IoError = 5,
    Panicked = 6,
}

/// Opaque adapter handle: a frozen base weight plus the trainable
/// low-rank adapter state (generator included for the op variants).
pub struct OplabAdapter {
    graph: Graph,
    layer: AdapterLayer,
    d_out: usize,
    d_in: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("ok").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: OplabStatus, msg: &str) -> OplabStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> OplabStatus + std::panic::UnwindSafe) -> OplabStatus {
    match catch_unwind(f) {
        Ok(status) => status,
        Err(_) => fail(OplabStatus::Panicked, "internal panic"),
    }
}

/// Message for the most recent failure on this thread. The pointer is
/// valid until the next oplab call on the same thread.
#[no_mangle]
pub extern "C" fn oplab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn oplab_abi_version() -> u32 {
    OPLAB_ABI_VERSION
}

fn variant_from_code(code: u32) -> Option<AdapterVariant> {
    match code {
        0 => Some(AdapterVariant::PlainLora),
        1 => Some(AdapterVariant::OpLora),
        2 => Some(AdapterVariant::PlainDora),
        3 => Some(AdapterVariant::OpDora),
        _ => None,
    }
}

unsafe fn matrix_from_raw(ptr: *const f64, rows: usize, cols: usize) -> Option<Matrix> {
    if ptr.is_null() || rows == 0 || cols == 0 {
        return None;
    }
    let data = std::slice::from_raw_parts(ptr, rows * cols).to_vec();
    Some(Matrix::from_vec(rows, cols, data))
}

/// Creates an adapter over a frozen `d_out x d_in` base weight given
/// in row-major order. Variant codes: 0 plain LoRA, 1 op LoRA,
/// 2 plain DoRA, 3 op DoRA. `hidden`/`latent` size the generator MLP
/// for the op variants (ignored otherwise; pass e.g. 32 and 64).
///
/// # Safety
/// `base_weights` must point to `d_out * d_in` readable f64 values and
/// `out` must be a valid destination pointer. The returned handle must
/// be released with `oplab_adapter_free`.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_new(
    variant: u32,
    d_out: usize,
    d_in: usize,
    rank: usize,
    alpha: f64,
    hidden: usize,
    latent: usize,
    seed: u64,
    base_weights: *const f64,
    out: *mut *mut OplabAdapter,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "out handle pointer is null");
        }
        let Some(variant) = variant_from_code(variant) else {
            return fail(OplabStatus::InvalidArgument, "unknown variant code");
        };
        let Some(w0) = matrix_from_raw(base_weights, d_out, d_in) else {
            return fail(OplabStatus::NullPointer, "base weight pointer is null or empty");
        };
        if hidden == 0 || latent == 0 {
            return fail(OplabStatus::InvalidArgument, "hidden and latent must be positive");
        }
        let graph = Graph::new();
        let mut stream = rng::stream(&["ffi-adapter", &seed.to_string()]);
        match AdapterLayer::new(&graph, w0, rank, alpha, variant, hidden, latent, &mut stream) {
            Ok(layer) => {
                let handle = Box::new(OplabAdapter {
                    graph,
                    layer,
                    d_out,
                    d_in,
                });
                *out = Box::into_raw(handle);
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::InvalidArgument, &e.to_string()),
        }
    }))
}

/// # Safety
/// `handle` must come from `oplab_adapter_new` / `oplab_adapter_import`
/// and not have been freed already. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_free(handle: *mut OplabAdapter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Applies the adapted layer to `cols` input columns: `x` is
/// `d_in x cols` row-major, `out` receives `d_out x cols`.
///
/// # Safety
/// Pointers must cover the stated extents; `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_forward(
    handle: *const OplabAdapter,
    x: *const f64,
    cols: usize,
    out: *mut f64,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        let Some(adapter) = handle.as_ref() else {
            return fail(OplabStatus::NullPointer, "adapter handle is null");
        };
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "output pointer is null");
        }
        let Some(xm) = matrix_from_raw(x, adapter.d_in, cols) else {
            return fail(OplabStatus::NullPointer, "input pointer is null or empty");
        };
        adapter.graph.clear_tape();
        let xt = adapter.graph.constant("ffi.x", xm);
        match adapter.layer.forward(&xt) {
            Ok(y) => {
                let values = y.values();
                std::ptr::copy_nonoverlapping(values.data().as_ptr(), out, adapter.d_out * cols);
                adapter.graph.clear_tape();
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::ShapeMismatch, &e.to_string()),
        }
    }))
}

/// Writes the merged dense weight (`d_out x d_in`, row-major) into
/// `out`: base plus scaled update, through the DoRA normalization for
/// those variants. The adapter itself is unchanged.
///
/// # Safety
/// `out` must cover `d_out * d_in` f64 values; `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_merge(
    handle: *const OplabAdapter,
    out: *mut f64,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        let Some(adapter) = handle.as_ref() else {
            return fail(OplabStatus::NullPointer, "adapter handle is null");
        };
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "output pointer is null");
        }
        adapter.graph.clear_tape();
        match adapter.layer.merge() {
            Ok(m) => {
                std::ptr::copy_nonoverlapping(m.data().as_ptr(), out, m.len());
                adapter.graph.clear_tape();
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::NumericError, &e.to_string()),
        }
    }))
}

/// Fits the adapter to targets under the squared loss
/// `0.5/n * ||forward(x) - y||_F^2` with warmup + linear-decay
/// scheduling. Optimizer codes: 0 SGD, 1 momentum, 2 Adam. On success
/// `final_loss` (optional) receives the post-training loss.
///
/// # Safety
/// `x` must cover `d_in * n` values, `y` `d_out * n`; `handle` must be
/// live and not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_train(
    handle: *mut OplabAdapter,
    x: *const f64,
    y: *const f64,
    n: usize,
    steps: u64,
    warmup: u64,
    lr: f64,
    optimizer: u32,
    final_loss: *mut f64,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        let Some(adapter) = handle.as_mut() else {
            return fail(OplabStatus::NullPointer, "adapter handle is null");
        };
        let Some(xm) = matrix_from_raw(x, adapter.d_in, n) else {
            return fail(OplabStatus::NullPointer, "x pointer is null or empty");
        };
        let Some(ym) = matrix_from_raw(y, adapter.d_out, n) else {
            return fail(OplabStatus::NullPointer, "y pointer is null or empty");
        };
        let kind = match optimizer {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Momentum,
            2 => OptimizerKind::Adam,
            _ => return fail(OplabStatus::InvalidArgument, "unknown optimizer code"),
        };
        if !(lr > 0.0) || warmup > steps {
            return fail(OplabStatus::InvalidArgument, "bad lr or warmup/steps");
        }
        let g = adapter.graph.clone();
        let xt = g.constant("ffi.train.x", xm);
        let yt = g.constant("ffi.train.y", ym);
        let params = adapter.layer.trainable();
        let sched = Schedule::warmup_linear_decay(warmup, steps);
        let mut opt = Optimizer::new(kind, lr);
        let mut last = f64::NAN;
        for t in 0..=steps {
            g.clear_tape();
            zero_grads(&params);
            let loss = (|| -> oplab::Result<oplab::Tensor> {
                let pred = adapter.layer.forward(&xt)?;
                let diff = g.sub(&pred, &yt)?;
                let sq = g.frobenius_sq(&diff);
                Ok(g.scalar_mul(&sq, 0.5 / n as f64))
            })();
            let loss = match loss {
                Ok(l) => l,
                Err(e) => return fail(OplabStatus::ShapeMismatch, &e.to_string()),
            };
            last = loss.scalar();
            if !last.is_finite() {
                return fail(OplabStatus::NumericError, "loss diverged to non-finite");
            }
            if t == steps {
                break;
            }
            if let Err(e) = g.backward(&loss) {
                return fail(OplabStatus::NumericError, &e.to_string());
            }
            if let Err(e) = opt.step(&sched, &params) {
                return fail(OplabStatus::NumericError, &e.to_string());
            }
        }
        g.clear_tape();
        if !final_loss.is_null() {
            *final_loss = last;
        }
        OplabStatus::Ok
    }))
}

unsafe fn path_from_c(path: *const c_char) -> Option<std::path::PathBuf> {
    if path.is_null() {
        return None;
    }
    CStr::from_ptr(path)
        .to_str()
        .ok()
        .map(|s| Path::new(s).to_path_buf())
}

/// Writes the plain `(A, B[, m])` record (binary, little-endian) for
/// the adapter's current state; the generator is discarded.
///
/// # Safety
/// `path` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_export(
    handle: *const OplabAdapter,
    path: *const c_char,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        let Some(adapter) = handle.as_ref() else {
            return fail(OplabStatus::NullPointer, "adapter handle is null");
        };
        let Some(path) = path_from_c(path) else {
            return fail(OplabStatus::NullPointer, "path is null or not utf-8");
        };
        adapter.graph.clear_tape();
        let export = match adapter.layer.export() {
            Ok(e) => e,
            Err(e) => return fail(OplabStatus::NumericError, &e.to_string()),
        };
        adapter.graph.clear_tape();
        match write_adapter_export(&path, &export) {
            Ok(()) => OplabStatus::Ok,
            Err(e) => fail(OplabStatus::IoError, &e.to_string()),
        }
    }))
}

/// Rebuilds a plain adapter from an exported record over the given
/// base weight.
///
/// # Safety
/// As for `oplab_adapter_new`; `path` must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn oplab_adapter_import(
    base_weights: *const f64,
    d_out: usize,
    d_in: usize,
    path: *const c_char,
    out: *mut *mut OplabAdapter,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "out handle pointer is null");
        }
        let Some(w0) = matrix_from_raw(base_weights, d_out, d_in) else {
            return fail(OplabStatus::NullPointer, "base weight pointer is null or empty");
        };
        let Some(path) = path_from_c(path) else {
            return fail(OplabStatus::NullPointer, "path is null or not utf-8");
        };
        let export = match read_adapter_export(&path) {
            Ok(e) => e,
            Err(e) => return fail(OplabStatus::IoError, &e.to_string()),
        };
        let graph = Graph::new();
        match AdapterLayer::from_export(&graph, w0, &export) {
            Ok(layer) => {
                *out = Box::into_raw(Box::new(OplabAdapter {
                    graph,
                    layer,
                    d_out,
                    d_in,
                }));
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::InvalidArgument, &e.to_string()),
        }
    }))
}

/// Effective rank (spectral entropy, sum normalization) of a dense
/// row-major matrix. For the all-zero matrix the value is 1 and
/// `degenerate` (optional) is set.
///
/// # Safety
/// `m` must cover `rows * cols` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn oplab_effective_rank(
    m: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    degenerate: *mut bool,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "output pointer is null");
        }
        let Some(mat) = matrix_from_raw(m, rows, cols) else {
            return fail(OplabStatus::NullPointer, "matrix pointer is null or empty");
        };
        match linalg::effective_rank(&mat) {
            Ok(er) => {
                *out = er.value;
                if !degenerate.is_null() {
                    *degenerate = er.degenerate;
                }
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::NumericError, &e.to_string()),
        }
    }))
}

/// Squared Frobenius error of the best rank-`rank` approximation
/// (the Eckart-Young optimum).
///
/// # Safety
/// `m` must cover `rows * cols` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn oplab_best_rank_error(
    m: *const f64,
    rows: usize,
    cols: usize,
    rank: usize,
    out: *mut f64,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "output pointer is null");
        }
        let Some(mat) = matrix_from_raw(m, rows, cols) else {
            return fail(OplabStatus::NullPointer, "matrix pointer is null or empty");
        };
        match linalg::best_rank_r(&mat, rank) {
            Ok((_, err)) => {
                *out = err;
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::InvalidArgument, &e.to_string()),
        }
    }))
}

/// Ratio of the largest to smallest significant singular value;
/// +infinity when only one survives the cutoff.
///
/// # Safety
/// `m` must cover `rows * cols` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn oplab_condition_number(
    m: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> OplabStatus {
    guard(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(OplabStatus::NullPointer, "output pointer is null");
        }
        let Some(mat) = matrix_from_raw(m, rows, cols) else {
            return fail(OplabStatus::NullPointer, "matrix pointer is null or empty");
        };
        match linalg::condition_number(&mat) {
            Ok(c) => {
                *out = c;
                OplabStatus::Ok
            }
            Err(e) => fail(OplabStatus::NumericError, &e.to_string()),
        }
    }))
}
