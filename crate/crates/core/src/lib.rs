//! Audio-visual gaze following.
//!
//! The pipeline identifies the active speaker from lip motion and audio,
//! marks speaker and listener faces as two extra image channels, detects gaze
//! target candidates on the five-channel frame and matches every subject to
//! its most probable candidate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod data;
pub mod detector;
pub mod enhance;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod matcher;
pub mod nn;
pub mod pipeline;
pub mod speaker;
mod util;

pub use geometry::{iou, BBox, BoxParam};
pub use util::write_atomic;
