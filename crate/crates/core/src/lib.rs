//! Unsupervised domain adaptation on a minimal f64 autodiff tape.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndgraph`] — dense tensors and a reverse-mode Wengert tape;
//! * [`linalg`] — the small spectral toolbox (Jacobi SVD) kept out of the tape;
//! * [`datagen`] — synthetic domain-shift generators and CSV ingestion;
//! * [`models`] — feature extractor / classifier / discriminator bundles;
//! * [`divergences`] — the adaptation losses built on the tape;
//! * [`algorithms`] — per-method training steps, schedules, safe training;
//! * [`gradcheck`] — finite-difference validation of every objective;
//! * [`bench`] — the deterministic benchmark harness behind the CLI.

pub mod algorithms;
pub mod bench;
pub mod datagen;
pub mod divergences;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod models;
pub mod ndgraph;

pub use error::{Error, Result};
