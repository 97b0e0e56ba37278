//! Joint 3D face expression neutralization and identity recognition.
//!
//! Registered face meshes are encoded by a Chebyshev spectral graph
//! convolutional autoencoder into 25-dimensional latent codes. A
//! conditional GAN translates expressive codes into neutral ones, a small
//! classifier predicts identity from the neutral code, and the decoder
//! turns the translated code back into a neutral mesh.

pub mod config;
pub mod diff;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod mesh;
pub mod models;
pub mod sparse;
pub mod synthetic;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
