//! Derivation, characterization and topology planning for local
//! feature-extraction networks (FENs) cut from pre-trained CNNs.

pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod fen;
pub mod linalg;
pub mod net;
pub mod planner;
pub mod repr;
pub mod scoring;
pub mod seed;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
