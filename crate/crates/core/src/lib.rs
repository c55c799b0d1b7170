//! Tracking-free estimation of mean squared displacement (MSD) from
//! microscopy image stacks.
//!
//! Frames are moved to reciprocal space, Fourier pixels are grouped into
//! wave-vector rings, and each pixel's real and imaginary time series is
//! modelled as a zero-mean Gaussian vector with a Toeplitz covariance
//! built from the intermediate scattering function
//! `f(q, Δt) ≈ exp(-q² θ(Δt) / 4)`. The MSD `θ` is never given a
//! parametric form: it is represented by its logarithm at a handful of
//! log-spaced lags, interpolated with a Gaussian process, and fitted by
//! maximizing the exact marginal likelihood.
//!
//! Modules:
//!
//! * [`stackio`]: the RAWSTACK binary format, normalization and CSV export.
//! * [`simkit`]: Brownian, Ornstein–Uhlenbeck, fractional Brownian and
//!   mixed trajectories, Gaussian-blob rendering and closed-form MSDs.
//! * [`spectral`]: FFT, ring binning, image structure functions and the
//!   direct-inversion baseline.
//! * [`toeplitz`]: Levinson–Durbin log-density, solves, inverses and trace
//!   operators for symmetric positive-definite Toeplitz matrices.
//! * [`gpr`]: Matérn-5/2 Gaussian process interpolation.
//! * [`estimator`]: subsampling, initialization, two-stage optimization and
//!   uncertainty quantification.
//! * [`rheology`]: generalized Stokes–Einstein moduli, Monte Carlo
//!   propagation and smoothing of external MSD curves.

pub mod curve;
pub mod error;
pub mod estimator;
pub mod gpr;
pub mod optim;
pub mod rheology;
pub mod simkit;
pub mod spectral;
pub mod stackio;
pub mod toeplitz;

pub use curve::MsdCurve;
pub use error::{Error, Result};
pub use stackio::ImageStack;
