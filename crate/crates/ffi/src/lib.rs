//! C ABI for `ergokit`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_parse`
//! or `ergokit_transfer_*` functions and released with the matching `*_free`. Every
//! fallible call returns an [`ErgokitStatus`]; on failure a description is
//! available from [`ergokit_last_error`] on the same thread. Output pointers
//! are written only on success.
//!
//! Handles are not synchronized: a handle may be moved between threads but
//! must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ergokit::invariant::{doeblin_lower_bound, spectral_gap_detailed, stationary};
use ergokit::matpow::{apply_power_polynomial, build_power_polynomial, parse_power, polynomial_degree};
use ergokit::memory::{capacity, memory_of_system, ChannelMatrix};
use ergokit::linalg::Matrix;
use ergokit::transfer::{build_piecewise, build_ulam, PiecewiseOptions, DEFAULT_QUAD_ORDER};
use ergokit::{Boundary, Error, KernelFamily, MapSpec, NoiseKernel, Representation, TransferMatrix};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgokitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    DomainError = 4,
    NotConverged = 5,
    PowerTooSmall = 6,
    NotImplemented = 7,
    BufferTooSmall = 8,
    NotMixing = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgokitKernelFamily {
    UniformBall = 0,
    Gaussian = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgokitBoundary {
    Wrap = 0,
    Reflect = 1,
    Renormalize = 2,
}

/// A map `T: [0,1] -> [0,1]` with its parameters.
pub struct ErgokitMap {
    inner: MapSpec,
}

/// A noise kernel.
pub struct ErgokitKernel {
    inner: NoiseKernel,
}

/// A discretized transfer operator (Ulam or piecewise Legendre).
pub struct ErgokitTransfer {
    inner: TransferMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("NUL bytes removed"));
}

fn status_of(e: &Error) -> ErgokitStatus {
    match e {
        Error::Syntax { .. } | Error::UnknownIdentifier { .. } => ErgokitStatus::ParseError,
        Error::Domain { .. } | Error::SingularIntegrand { .. } => ErgokitStatus::DomainError,
        Error::NotConverged { .. } | Error::CertificateFailed(_) => ErgokitStatus::NotConverged,
        Error::PowerTooSmall { .. } => ErgokitStatus::PowerTooSmall,
        Error::NotImplemented(_) => ErgokitStatus::NotImplemented,
        Error::NotMixing(_) => ErgokitStatus::NotMixing,
        _ => ErgokitStatus::InvalidArgument,
    }
}

struct Fail(ErgokitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ErgokitStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure, and turns panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ErgokitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ErgokitStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ErgokitStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(ErgokitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ergokit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ergokit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a built-in map name or an expression in `x`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ergokit_map_parse(text: *const c_char, out: *mut *mut ErgokitMap) -> ErgokitStatus {
    guard(|| {
        let t = unsafe { self::text(text, "text") }?;
        let map = MapSpec::parse(t)?;
        unsafe { put(out, Box::into_raw(Box::new(ErgokitMap { inner: map })), "out") }
    })
}

/// Binds a named map parameter.
///
/// # Safety
/// `map` must come from [`ergokit_map_parse`]; `name` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ergokit_map_set_param(map: *mut ErgokitMap, name: *const c_char, value: f64) -> ErgokitStatus {
    guard(|| {
        let n = unsafe { text(name, "name") }?;
        let m = unsafe { map.as_mut() }.ok_or_else(|| null("map"))?;
        m.inner.params.insert(n.to_string(), value);
        Ok(())
    })
}

/// Clip out-of-range values to [0,1] instead of failing.
///
/// # Safety
/// `map` must come from [`ergokit_map_parse`].
#[no_mangle]
pub unsafe extern "C" fn ergokit_map_set_clamp(map: *mut ErgokitMap, clamp: bool) -> ErgokitStatus {
    guard(|| {
        let m = unsafe { map.as_mut() }.ok_or_else(|| null("map"))?;
        m.inner.clamp = clamp;
        Ok(())
    })
}

/// # Safety
/// `map` must come from [`ergokit_map_parse`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_map_eval(map: *const ErgokitMap, x: f64, out: *mut f64) -> ErgokitStatus {
    guard(|| {
        let m = unsafe { borrow(map, "map") }?;
        let y = m.inner.eval(x)?;
        unsafe { put(out, y, "out") }
    })
}

/// # Safety
/// `map` must come from [`ergokit_map_parse`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ergokit_map_free(map: *mut ErgokitMap) {
    if !map.is_null() {
        drop(unsafe { Box::from_raw(map) });
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ergokit_kernel_new(
    family: ErgokitKernelFamily,
    epsilon: f64,
    boundary: ErgokitBoundary,
    out: *mut *mut ErgokitKernel,
) -> ErgokitStatus {
    guard(|| {
        let family = match family {
            ErgokitKernelFamily::UniformBall => KernelFamily::UniformBall,
            ErgokitKernelFamily::Gaussian => KernelFamily::Gaussian,
        };
        let boundary = match boundary {
            ErgokitBoundary::Wrap => Boundary::Wrap,
            ErgokitBoundary::Reflect => Boundary::Reflect,
            ErgokitBoundary::Renormalize => Boundary::Renormalize,
        };
        let k = NoiseKernel::new(family, epsilon, boundary)?;
        unsafe { put(out, Box::into_raw(Box::new(ErgokitKernel { inner: k })), "out") }
    })
}

/// Parses `family:epsilon[:boundary]`, e.g. `gaussian:0.05:wrap`.
///
/// # Safety
/// `text` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_kernel_parse(text: *const c_char, out: *mut *mut ErgokitKernel) -> ErgokitStatus {
    guard(|| {
        let t = unsafe { self::text(text, "text") }?;
        let k: NoiseKernel = t.parse()?;
        unsafe { put(out, Box::into_raw(Box::new(ErgokitKernel { inner: k })), "out") }
    })
}

/// Density of the next state at `x` given the noiseless image `center`.
///
/// # Safety
/// `kernel` must come from a kernel constructor; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_kernel_density(
    kernel: *const ErgokitKernel,
    center: f64,
    x: f64,
    out: *mut f64,
) -> ErgokitStatus {
    guard(|| {
        let k = unsafe { borrow(kernel, "kernel") }?;
        unsafe { put(out, k.inner.density(center, x), "out") }
    })
}

/// # Safety
/// `kernel` must come from a kernel constructor and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ergokit_kernel_free(kernel: *mut ErgokitKernel) {
    if !kernel.is_null() {
        drop(unsafe { Box::from_raw(kernel) });
    }
}

/// Column-stochastic Ulam matrix on `n_bins` equal bins.
///
/// # Safety
/// `map` and `kernel` must be live handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_transfer_ulam(
    map: *const ErgokitMap,
    kernel: *const ErgokitKernel,
    n_bins: usize,
    out: *mut *mut ErgokitTransfer,
) -> ErgokitStatus {
    guard(|| {
        let (m, k) = unsafe { (borrow(map, "map")?, borrow(kernel, "kernel")?) };
        let p = build_ulam(&m.inner, &k.inner, n_bins, DEFAULT_QUAD_ORDER)?;
        unsafe { put(out, Box::into_raw(Box::new(ErgokitTransfer { inner: p })), "out") }
    })
}

/// Galerkin matrix on piecewise Legendre polynomials of degree `degree`
/// (Gaussian kernels only).
///
/// # Safety
/// `map` and `kernel` must be live handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_transfer_piecewise(
    map: *const ErgokitMap,
    kernel: *const ErgokitKernel,
    piece_width: f64,
    degree: usize,
    out: *mut *mut ErgokitTransfer,
) -> ErgokitStatus {
    guard(|| {
        let (m, k) = unsafe { (borrow(map, "map")?, borrow(kernel, "kernel")?) };
        let p = build_piecewise(&m.inner, &k.inner, piece_width, degree, PiecewiseOptions::default())?;
        unsafe { put(out, Box::into_raw(Box::new(ErgokitTransfer { inner: p })), "out") }
    })
}

/// Dimension of the operator (0 for a null handle).
///
/// # Safety
/// `transfer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ergokit_transfer_dim(transfer: *const ErgokitTransfer) -> usize {
    unsafe { transfer.as_ref() }.map_or(0, |t| t.inner.dim())
}

/// Copies the matrix, row-major, into `out` (`len` must be at least dim^2).
///
/// # Safety
/// `transfer` must be live; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ergokit_transfer_matrix(
    transfer: *const ErgokitTransfer,
    out: *mut f64,
    len: usize,
) -> ErgokitStatus {
    guard(|| {
        let t = unsafe { borrow(transfer, "transfer") }?;
        let data = t.inner.matrix.as_slice();
        if len < data.len() {
            return Err(Fail(ErgokitStatus::BufferTooSmall, format!("need {} doubles, got {len}", data.len())));
        }
        unsafe { slice_mut(out, len, "out") }?[..data.len()].copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `transfer` must be live and not used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ergokit_transfer_free(transfer: *mut ErgokitTransfer) {
    if !transfer.is_null() {
        drop(unsafe { Box::from_raw(transfer) });
    }
}

/// Stationary density by power iteration. Writes `dim` values to `out`: bin
/// masses for Ulam operators, Legendre coefficients for piecewise ones.
/// `residual` (nullable) receives `||P rho - rho||_1`.
///
/// # Safety
/// `transfer` must be live; `out` must point to `len` writable doubles;
/// `residual` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ergokit_stationary(
    transfer: *const ErgokitTransfer,
    tol: f64,
    max_iter: usize,
    out: *mut f64,
    len: usize,
    residual: *mut f64,
) -> ErgokitStatus {
    guard(|| {
        let t = unsafe { borrow(transfer, "transfer") }?;
        let dim = t.inner.dim();
        if len < dim {
            return Err(Fail(ErgokitStatus::BufferTooSmall, format!("need {dim} doubles, got {len}")));
        }
        let dst = unsafe { slice_mut(out, len, "out") }?;
        let r = stationary(&t.inner, tol, max_iter)?;
        dst[..dim].copy_from_slice(r.density.as_slice());
        if !residual.is_null() {
            unsafe { residual.write(r.residual) };
        }
        Ok(())
    })
}

/// `1 - |lambda_2|`.
///
/// # Safety
/// `transfer` must be live; `gap` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_spectral_gap(transfer: *const ErgokitTransfer, tol: f64, gap: *mut f64) -> ErgokitStatus {
    guard(|| {
        let t = unsafe { borrow(transfer, "transfer") }?;
        let g = spectral_gap_detailed(&t.inner, tol, 20_000)?;
        unsafe { put(gap, g.gap, "gap") }
    })
}

/// Doeblin overlap lower bound over `grid` starting points.
///
/// # Safety
/// `map` and `kernel` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ergokit_doeblin_bound(
    map: *const ErgokitMap,
    kernel: *const ErgokitKernel,
    grid: usize,
    out: *mut f64,
) -> ErgokitStatus {
    guard(|| {
        let (m, k) = unsafe { (borrow(map, "map")?, borrow(kernel, "kernel")?) };
        let d = doeblin_lower_bound(&m.inner, &k.inner, grid)?;
        unsafe { put(out, d, "out") }
    })
}

/// Memory (one-step channel capacity, bits) of the system on `n_states` bins.
/// `slack` (nullable) receives the certified optimality gap.
///
/// # Safety
/// `map` and `kernel` must be live; `bits` must be valid; `slack` valid or null.
#[no_mangle]
pub unsafe extern "C" fn ergokit_memory(
    map: *const ErgokitMap,
    kernel: *const ErgokitKernel,
    n_states: usize,
    tol: f64,
    bits: *mut f64,
    slack: *mut f64,
) -> ErgokitStatus {
    guard(|| {
        let (m, k) = unsafe { (borrow(map, "map")?, borrow(kernel, "kernel")?) };
        let r = memory_of_system(&m.inner, &k.inner, n_states, tol)?;
        if !slack.is_null() {
            unsafe { slack.write(r.certified_slack) };
        }
        unsafe { put(bits, r.capacity_bits, "bits") }
    })
}

/// Capacity in bits of the channel whose `n x n` row-stochastic matrix is
/// given row-major in `rows`. `input` (nullable, `n` doubles) receives the
/// optimal input law.
///
/// # Safety
/// `rows` must point to `n * n` doubles; `bits` must be valid; `input`
/// must point to `n` writable doubles or be null.
#[no_mangle]
pub unsafe extern "C" fn ergokit_channel_capacity(
    rows: *const f64,
    n: usize,
    tol: f64,
    bits: *mut f64,
    input: *mut f64,
) -> ErgokitStatus {
    guard(|| {
        let len = n.checked_mul(n).ok_or_else(|| Fail(ErgokitStatus::InvalidArgument, "n too large".into()))?;
        let data = unsafe { slice(rows, len, "rows") }?.to_vec();
        let w = ChannelMatrix::new(Matrix::from_row_major(n, n, data)?)?;
        let r = capacity(&w, tol, ergokit::memory::DEFAULT_MAX_ITER)?;
        if !input.is_null() {
            unsafe { std::slice::from_raw_parts_mut(input, n) }.copy_from_slice(&r.input_distribution);
        }
        unsafe { put(bits, r.capacity_bits, "bits") }
    })
}

/// Degree `ceil((n+2) ln 2 / sqrt(2 gamma))` of the power polynomial.
#[no_mangle]
pub extern "C" fn ergokit_power_degree(gamma: f64, bits: u32) -> usize {
    polynomial_degree(gamma, bits)
}

/// `out = p(P) v`, the certified approximation of `P^T v` for `T` given as
/// text (`"2^40"`, `"1000000"`), assuming spectral gap `gamma`.
///
/// # Safety
/// `transfer` must be live; `power` NUL-terminated; `v` and `out` must each
/// point to `len` doubles with `len` equal to the operator dimension.
#[no_mangle]
pub unsafe extern "C" fn ergokit_power_apply(
    transfer: *const ErgokitTransfer,
    gamma: f64,
    power: *const c_char,
    bits: u32,
    v: *const f64,
    out: *mut f64,
    len: usize,
) -> ErgokitStatus {
    guard(|| {
        let t = unsafe { borrow(transfer, "transfer") }?;
        if !matches!(t.inner.representation, Representation::Ulam { .. }) {
            return Err(Fail(ErgokitStatus::InvalidArgument, "power needs an Ulam operator".into()));
        }
        let dim = t.inner.dim();
        if len != dim {
            return Err(Fail(ErgokitStatus::BufferTooSmall, format!("vectors must hold {dim} doubles, got {len}")));
        }
        let exponent = parse_power(unsafe { text(power, "power") }?)?;
        let x = unsafe { slice(v, len, "v") }?;
        let dst = unsafe { slice_mut(out, len, "out") }?;
        let p = build_power_polynomial(gamma, &exponent, bits)?;
        dst.copy_from_slice(&apply_power_polynomial(&p, &t.inner, x)?);
        Ok(())
    })
}
