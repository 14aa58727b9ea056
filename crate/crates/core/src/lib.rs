//! Plug-and-play ADMM with scene-adapted GMM patch priors.
//!
//! The fixed-weight GMM denoiser is a linear, symmetric operator `W` with
//! spectrum in `[0, 1)`, hence the proximity operator of a convex
//! regularizer. That makes the usual ADMM convergence theory apply to the
//! PnP iterations for hyperspectral sharpening ([`hs`]) and for deblurring
//! from a blurred/noisy pair ([`pair`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admm;
pub mod denoiser;
pub mod error;
pub mod fft;
pub mod geometry;
pub mod gmm;
pub mod hs;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pair;
pub mod par;
pub mod patch;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Cube, ImageGeometry};
