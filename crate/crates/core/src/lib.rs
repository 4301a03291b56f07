//! Grid object detector with a hierarchy-weighted classification loss,
//! trained by a small reverse-mode autodiff engine and evaluated with
//! mAP@0.5 at fine and coarse class granularity.

pub mod anchors;
pub mod autodiff;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod taxonomy;
pub mod train;

pub use error::{Error, Result};
