//! Coarse-to-fine unsupervised deformable registration of 3D volumes.
//!
//! A network predicts a displacement field `φ` (normalized `[-1, 1]`
//! coordinates, added to the identity grid) that warps a moving volume onto a
//! fixed one. Fields are refined from 1/16 resolution to full resolution and
//! trained without labels on intensity MSE plus range and smoothness terms.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below name the common instantiations.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod network;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod scalar;
pub mod training;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Volume32 = volume::Volume<f32>;
pub type Volume64 = volume::Volume<f64>;
pub type Field32 = warp::DeformationField<f32>;
pub type Field64 = warp::DeformationField<f64>;
pub type Params32 = nn::ParamStore<f32>;
pub type Params64 = nn::ParamStore<f64>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type Trainer32 = training::Trainer<f32>;
