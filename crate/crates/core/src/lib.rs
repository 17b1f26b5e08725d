//! Occlusion-aware scene flow estimation on point clouds.
//!
//! A small reverse-mode autodiff tape, point-cloud geometry, a coarse-to-fine
//! network with correlation-matrix upsampling and an occlusion-aware cost
//! volume, training utilities and a synthetic scene generator. The crate is
//! `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod cmu;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ocv;
pub mod optim;
pub mod pyramid;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
