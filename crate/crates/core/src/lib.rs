//! Dual-opacity Gaussian splatting on the CPU.
//!
//! The crate renders Gaussian clouds along a geometric and an appearance
//! path, regularizes the geometric path with multi-view depth consistency
//! and scale-aligned point-map priors, and trains the whole model with
//! analytic gradients.

pub mod buffer;
pub mod camera;
pub mod error;
pub mod floater_lab;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod photometric;
pub mod render;
pub mod scale_align;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use buffer::{DepthMap, Grid, ImageBuffer, Mask};
pub use camera::{Camera, RigidTransform};
pub use error::{Error, Result};
pub use render::{render, render_backward, RenderOutput, RenderPath, RenderSettings};
pub use scene::{covariance_from, Gaussian, GaussianCloud};
