//! Analysis of randomly perturbed interval maps.
//!
//! A deterministic map `T: [0,1] -> [0,1]` is followed, at every step, by a
//! random displacement drawn from a noise kernel of width `eps`. This crate
//! discretizes the resulting transfer operator and answers questions about
//! its long-run behaviour:
//!
//! * [`maps`]: built-in maps and a small expression language for new ones.
//! * [`noise`]: uniform-ball and Gaussian kernels with wrap, reflect or
//!   renormalize boundary handling.
//! * [`transfer`]: Ulam (bin) and piecewise-Legendre discretizations of the
//!   noisy transfer operator.
//! * [`invariant`]: stationary densities, spectral gaps, Doeblin bounds,
//!   ergodic decompositions, mixing times, measure queries and Lyapunov
//!   exponents.
//! * [`memory`]: the memory of the system, i.e. the Shannon capacity of the
//!   one-step (or k-step) transition channel.
//! * [`matpow`]: huge matrix powers `M^T` approximated by a Chebyshev
//!   amplifier evaluated with a three-vector Clenshaw recurrence.
//! * [`cli`]: the `ergokit` command-line front end.
//!
//! Densities are column vectors and evolve as `rho -> P rho`; Ulam matrices
//! are column-stochastic throughout.

pub mod cli;
pub mod error;
pub mod invariant;
pub mod linalg;
pub mod maps;
pub mod matpow;
pub mod memory;
pub mod noise;
pub mod quad;
pub mod transfer;
pub use transfer::{Density, GridDensity, PiecewisePolyDensity, Representation, TransferMatrix};

pub use error::{Error, Result};
pub use maps::{Builtin, MapSpec};
pub use noise::{Boundary, KernelFamily, NoiseKernel};


/// Caps the global rayon pool according to `ERGOKIT_THREADS` (0 or unset
/// means automatic). Later calls are no-ops once the pool exists.
pub fn init_thread_pool() {
    let threads = std::env::var("ERGOKIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}
