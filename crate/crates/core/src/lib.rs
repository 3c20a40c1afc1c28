//! Hyperelastic deformable registration of cardiac image sequences,
//! voxel-wise modulus estimation, strain features and disease
//! classification.
//!
//! Voxel-grid math is generic over the scalar type ([`Real`]: `f32` or
//! `f64`); the aliases below fix the common instantiations. Feature tables
//! and classifiers work in `f64`.

pub mod biomech;
pub mod classify;
pub mod cli_io;
pub mod error;
pub mod features;
pub mod kinematics;
pub mod phantom;
pub mod pipeline;
pub mod propagation;
pub mod scalar;
pub mod registration;
pub mod selection;
pub mod similarity;
pub mod volgrid;

pub use error::{Error, Result};
pub use scalar::Real;

pub use volgrid::Grid;

pub type Volume3 = volgrid::Volume<f64>;
pub type Volume3f = volgrid::Volume<f32>;
pub type DisplacementField3 = volgrid::DisplacementField<f64>;
pub type DisplacementField3f = volgrid::DisplacementField<f32>;
pub type TensorField3 = kinematics::TensorField<f64>;
pub type TensorField3f = kinematics::TensorField<f32>;
pub use volgrid::LabelMap as LabelMap3;
