//! C interface to `usnprune`: load and save checkpoints, run predictions,
//! query Lipschitz constants and certify keypoints under brightness or
//! contrast perturbations.
//!
//! Every function returns a [`UsnStatus`]. On failure a message is kept per
//! thread and can be fetched with [`usn_last_error`]. Panics never cross the
//! boundary; they are reported as [`UsnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use usnprune::certify::{Certifier, KeypointCriterion, Verdict};
use usnprune::network::{LipschitzOptions, LipschitzProfile, Network};
use usnprune::perturbation::PerturbationSpec;
use usnprune::Error;

/// Opaque network handle.
pub struct UsnNetwork {
    net: Network,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UsnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Contract = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UsnVerdict {
    Holds = 0,
    Violated = 1,
    Unknown = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UsnPerturbation {
    Brightness = 0,
    Contrast = 1,
}

/// Outcome of a grid certificate.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UsnCertificate {
    pub verdict: UsnVerdict,
    /// `δ` minus the largest certified keypoint deviation bound.
    pub margin: f64,
    pub max_deviation: f64,
    /// Seconds.
    pub wall_time: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(UsnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::Json(_) | Error::Toml(_) | Error::Csv(_) => UsnStatus::Config,
            Error::Contract(_) => UsnStatus::Contract,
            Error::Numeric(_) | Error::NoConvergence { .. } => UsnStatus::Numeric,
            Error::Io(_) => UsnStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UsnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(UsnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UsnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            UsnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            UsnStatus::Panic
        }
    }
}

unsafe fn network<'a>(handle: *const UsnNetwork) -> Result<&'a Network, Failure> {
    handle.as_ref().map(|h| &h.net).ok_or_else(|| null("network"))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Loads a JSON checkpoint. On success `*out` owns a handle to be released
/// with [`usn_network_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn usn_network_load(path_utf8: *const c_char, out: *mut *mut UsnNetwork) -> UsnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let net = Network::load(path(path_utf8)?)?;
        *out = Box::into_raw(Box::new(UsnNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`usn_network_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn usn_network_save(handle: *const UsnNetwork, path_utf8: *const c_char) -> UsnStatus {
    guard(|| Ok(network(handle)?.save(path(path_utf8)?)?))
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`usn_network_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn usn_network_free(handle: *mut UsnNetwork) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn usn_network_input_len(handle: *const UsnNetwork, out: *mut usize) -> UsnStatus {
    guard(|| {
        let n = network(handle)?.input_len();
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// Number of outputs: `2K` keypoint coordinates for a soft-argmax head.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn usn_network_output_len(handle: *const UsnNetwork, out: *mut usize) -> UsnStatus {
    guard(|| {
        let n = network(handle)?.output_len();
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// Forward pass. `input_len` and `output_len` must match the network exactly.
///
/// # Safety
/// `input` must hold `input_len` doubles and `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn usn_network_predict(
    handle: *const UsnNetwork,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> UsnStatus {
    guard(|| {
        let net = network(handle)?;
        let x = slice(input, input_len, "input")?;
        if input_len != net.input_len() {
            return Err(invalid(format!("input has {input_len} values, network expects {}", net.input_len())));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        if output_len != net.output_len() {
            return Err(invalid(format!("output has room for {output_len} values, network produces {}", net.output_len())));
        }
        let y = net.predict(x)?;
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(&y);
        Ok(())
    })
}

/// Lipschitz bound from the pre-activations of linear layer `layer`
/// (1-based) to the output; `layer = 0` gives the bound from the input.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn usn_network_lipschitz(handle: *const UsnNetwork, layer: usize, out: *mut f64) -> UsnStatus {
    guard(|| {
        let c = LipschitzProfile::compute(network(handle)?, &LipschitzOptions::default())?.to_output(layer)?;
        *out.as_mut().ok_or_else(|| null("out"))? = c;
        Ok(())
    })
}

/// Certifies that every keypoint stays within `delta` pixels (ℓ∞) for all
/// perturbation parameters within `epsilon`, refining `initial_cells`
/// uniform cells down to a resolution of `max_cells`.
///
/// # Safety
/// `image` must hold `image_len` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn usn_certify(
    handle: *const UsnNetwork,
    image: *const f64,
    image_len: usize,
    kind: UsnPerturbation,
    epsilon: f64,
    delta: f64,
    initial_cells: usize,
    max_cells: usize,
    out: *mut UsnCertificate,
) -> UsnStatus {
    guard(|| {
        let net = network(handle)?;
        let x = slice(image, image_len, "image")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if image_len != net.input_len() {
            return Err(invalid(format!("image has {image_len} values, network expects {}", net.input_len())));
        }
        let spec = match kind {
            UsnPerturbation::Brightness => PerturbationSpec::brightness(epsilon),
            UsnPerturbation::Contrast => PerturbationSpec::contrast(epsilon),
        };
        let criterion = KeypointCriterion::new(delta)?;
        let r = Certifier::new(net)?.adaptive_grid(x, &spec, &criterion, initial_cells, max_cells)?;
        *out = UsnCertificate {
            verdict: match r.verdict {
                Verdict::Holds => UsnVerdict::Holds,
                Verdict::Violated => UsnVerdict::Violated,
                Verdict::Unknown => UsnVerdict::Unknown,
            },
            margin: r.margin,
            max_deviation: r.max_deviation,
            wall_time: r.wall_time,
        };
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, so a caller can size the buffer; 0 means no error.
///
/// # Safety
/// `buf` must have room for `len` bytes, or be null with `len = 0`.
#[no_mangle]
pub unsafe extern "C" fn usn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if msg.is_empty() {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        }
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}
