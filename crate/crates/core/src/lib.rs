//! Spectral toolkit for 2D periodic dielectric media with a line defect.
//!
//! The library computes, for a fixed axial quasimomentum `kx`:
//!
//! * Floquet-Bloch band structures of the unit-cell operator −(1/ε₀)Δ_k
//!   discretized by plane-wave expansion ([`unitcell`], [`bands`]);
//! * spectral gaps and band-edge touch points ([`bands`]);
//! * the Bloch-expansion resolvent of the strip operator and its
//!   contour-deformed analytic continuation across a band edge
//!   ([`resolvent`]);
//! * guided modes created in a gap by a sign-definite defect, via the
//!   Birman–Schwinger operator A_λ ([`gapmodes`]);
//! * an independent finite-difference supercell oracle for cross-validation
//!   ([`supercell`]).
//!
//! All numerics are generic over the real scalar type through [`Real`];
//! concrete `f64` aliases are exported at the crate root.

pub mod bands;
pub mod error;
pub mod gapmodes;
pub mod linalg;
pub mod medium;
pub mod quad;
pub mod resolvent;
pub mod supercell;
pub mod unitcell;

pub use error::Error;

/// Scalar trait for all field computations: `f32` and `f64` qualify.
///
/// `nalgebra::RealField` supplies the transcendental functions and constants,
/// `num_traits::FromPrimitive` the integer conversions used by quadrature and
/// index arithmetic.
pub trait Real:
    nalgebra::RealField
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Copy
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: nalgebra::RealField
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + Copy
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Complex number over the generic scalar.
pub type Cplx<T> = num_complex::Complex<T>;

/// Shorthand used throughout the crate to lift an `f64` literal into `T`.
#[inline]
pub(crate) fn rf<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lower an exact scalar back to `f64` (used for cache keys and reports).
#[inline]
pub(crate) fn to_f64<T: Real>(x: T) -> f64 {
    num_traits::ToPrimitive::to_f64(&x).expect("scalar representable as f64")
}

pub type Result<V> = std::result::Result<V, Error>;

// Concrete type aliases for the common double-precision instantiation.
pub type Profile64 = medium::DielectricProfile<f64>;
pub type Rect64 = medium::Rect<f64>;
pub type CoefficientTable64 = medium::CoefficientTable<f64>;
pub type QuasiMomentum64 = unitcell::QuasiMomentum<f64>;
pub type SpectralPencil64 = unitcell::SpectralPencil<f64>;
pub type BandSample64 = unitcell::BandSample<f64>;
pub type BlochFunction64 = unitcell::BlochFunction<f64>;
pub type CellSolver64 = unitcell::CellSolver<f64>;
// remaining aliases are appended as their modules land

