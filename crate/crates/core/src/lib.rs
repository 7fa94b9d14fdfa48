//! First-order locally orderless registration.
//!
//! Scalar volumes are lifted to directional-derivative images on the sphere,
//! compared through Parzen histograms or directly (SSD, NCC, MI, NMI), and
//! aligned with translation or cubic B-spline free-form deformations driven by
//! Adam on analytic gradients.
//!
//! All coordinates are continuous voxel indices. Values outside a volume are
//! taken to be zero, both for convolution and for interpolation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod loi;
pub mod optimize;
pub mod scalespace;
pub mod similarity;
pub mod transform;
pub mod volume;

pub use error::{FlorError, Result};
pub use volume::VolumeGrid;

/// 3-vector in voxel units.
pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}
