//! Reconstruction toolkit for propagation-based X-ray phase contrast tomography.
//!
//! Tomographic inversion and phase retrieval are solved in one step by an
//! iteratively regularized Gauss-Newton method whose inner linear systems are
//! handled by conjugate gradients. The crate also contains the forward
//! simulation pipeline (phantoms, noise, masks) and a CTF + filtered
//! backprojection baseline.
//!
//! All numerical code is generic over the scalar type [`Real`] (`f32` or
//! `f64`); the `*64` aliases below are what the CLI and the tests use.

pub mod baseline;
pub mod forward;
pub mod grids;
pub mod radon;
pub mod regularization;
pub mod simulate;
pub mod solver;
pub mod transforms;

mod error;

pub use error::{Error, Result};
pub use num_complex::Complex;

/// Floating point scalar usable by every operator in the crate.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + Default
    + std::iter::Sum
    + std::fmt::Display
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type ObjectVolume64 = grids::ObjectVolume<f64>;
pub type IntensityData64 = grids::IntensityData<f64>;
pub type ComplexField64 = grids::ComplexField<f64>;
pub type SparseProjector64 = radon::SparseProjector<f64>;
pub type ForwardModel64 = forward::ForwardModel<f64>;
pub type SolverConfig64 = solver::SolverConfig<f64>;

pub type ObjectVolume32 = grids::ObjectVolume<f32>;
pub type IntensityData32 = grids::IntensityData<f32>;
pub type ForwardModel32 = forward::ForwardModel<f32>;
