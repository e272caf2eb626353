//! Core algorithms for semi-supervised instance segmentation with
//! pseudo-sequences: mask and box geometry, datasets and mask AP, losses with
//! analytic gradients, optimal-transport assignment, pseudo-label filtering
//! and scene synthesis.

pub mod assignment;
pub mod data;
pub mod error;
pub mod eval;
pub mod filter;
pub mod frame;
pub mod geometry;
pub mod losses;
pub mod synthesis;

pub use error::{Error, Result};
