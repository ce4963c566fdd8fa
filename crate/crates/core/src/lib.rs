//! Seabed relief workbench.
//!
//! Synthesizes seabed relief textures from ripple and power-law roughness
//! spectra, emulates side-scan sonar intensity imagery from them, and
//! estimates relief back from intensity with either a Gaussian Markov random
//! field estimator or a family of UNet models trained on CPU.
//!
//! Module map:
//!
//! * [`grid`] shared grid types, normalization, tiling, L1 metrics and file I/O
//! * [`relief`] spectral relief synthesis
//! * [`sas`] side-scan intensity emulation (fidelity A and B)
//! * [`gmrf`] classical intensity-to-relief estimator
//! * [`nn`] reverse-mode tensor engine and the UNet model family
//! * [`pipeline`] datasets, training, fine-tuning and evaluation
//!
//! Data-parallel loops go through [`par::Exec`]; with the `parallel` feature
//! disabled every loop runs sequentially. Results are bitwise identical in
//! both modes.

pub mod error;
pub mod gmrf;
pub mod grid;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod relief;
pub mod rng;
pub mod sas;

pub use error::{Error, Result};
pub use par::Exec;
