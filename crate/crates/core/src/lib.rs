//! Pharmacokinetic modeling and reconstruction for DCE-MRI.
//!
//! The forward chain maps Patlak parameter maps `(K^trans, v_p)` through a
//! vascular input function to tissue concentration, through the spoiled
//! gradient echo signal equation to images, and through an undersampled
//! centered Fourier transform to (k,t)-space. On top of it sit a closed-form
//! Patlak fit, a gradient-based direct reconstruction from k-space, a
//! synthetic phantom generator, image-quality metrics and a small container
//! format.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below name the common instantiations.

// `!(x > 0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fft;
pub mod io;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod patlak;
pub mod phantom;
pub mod recon;
pub mod sampling;
pub mod scalar;
pub mod volume;

pub use error::{PkError, Result};
pub use kspace::{acceleration_of, undersample, zero_fill_recon, KSpaceSeries, SamplingMask};
pub use model::{
    forward_model, image_forward, integrate_vif, patlak_forward, spgr_forward, spgr_inverse,
    AcquisitionContext, NonPhysicalPolicy, PkMaps, VascularInputFunction,
};
pub use patlak::{fit_patlak_lls, fit_patlak_oracle, GridAxis, GridSpec};
pub use recon::{
    objective_and_gradient, reconstruct_direct, InitPolicy, ParameterScaling, ReconOptions,
};
pub use sampling::{golden_angle_mask, MaskSpec};
pub use scalar::Real;
pub use volume::{Dims3, DynamicSeries, SeriesKind, Volume};

pub type PkMaps64 = PkMaps<f64>;
pub type PkMaps32 = PkMaps<f32>;
pub type Vif64 = VascularInputFunction<f64>;
pub type Vif32 = VascularInputFunction<f32>;
pub type Context64 = AcquisitionContext<f64>;
pub type Context32 = AcquisitionContext<f32>;
pub type Series64 = DynamicSeries<f64>;
pub type Series32 = DynamicSeries<f32>;
pub type KSpace64 = KSpaceSeries<f64>;
pub type KSpace32 = KSpaceSeries<f32>;
pub type Volume64 = Volume<f64>;
pub type Volume32 = Volume<f32>;
