//! Few-shot class-incremental learning with redundancy decoupling and
//! integration (RDI).
//!
//! A backbone is trained on the base session with the plain cosine
//! cross-entropy, then with two extra terms: features pooled from the
//! label-relevant (ALR) patches are classified as usual, and features pooled
//! from the complementary label-irrelevant (ALI) patches are pushed into an
//! extra dummy class. Incremental sessions then freeze the backbone and
//! classify with class-mean prototypes.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod rdi;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
