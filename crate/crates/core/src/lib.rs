//! Desk-scale simulation of adversarial projection attacks on a toy object
//! detector.
//!
//! [`tps`] maps projector-plane points onto the captured surface, [`color`]
//! learns how a projected color shows up on a given surface, and
//! [`compositor`] combines both to paint a patch onto an object. [`attack`]
//! optimizes that patch against [`detector`]; [`eval`] measures misdetection
//! over distance, angle and ambient sweeps. Gradients come from the small
//! reverse-mode engine in [`autodiff`].

pub mod attack;
pub mod autodiff;
pub mod bundle;
pub mod color;
pub mod compositor;
pub mod config;
pub mod detector;
pub mod diag;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod image;
pub mod optim;
pub mod synth;
pub mod tps;

pub use error::{Error, Result};
pub use image::{load_image, sample_bilinear, save_image, ImageBuffer, Point2};
