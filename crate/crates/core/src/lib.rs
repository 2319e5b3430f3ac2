//! Extrapolated-view optimization of Gaussian-splat street scenes.
//!
//! Condition maps are ray-cast from a semantic occupancy grid and 3D boxes
//! ([`condition`]), a splat cloud is fitted to training images
//! ([`gsplat`], [`trainer`]) and then refined from extrapolated cameras
//! ([`camera`]) with score-distillation gradients ([`losses`]) against a
//! pluggable denoiser ([`diffusion`]).
//!
//! ```
//! use evsforge::condition::render_conditions;
//! use evsforge::fixture;
//! use evsforge::grid::SemanticPalette;
//!
//! let cam = fixture::cameras()[1];
//! let maps = render_conditions(&fixture::grid(), &SemanticPalette::default_urban(), &[], 0, &cam.intr, &cam.pose);
//! assert_eq!(maps.control().channels, 13);
//! ```
//!
//! The guide in `book/` walks through each stage; its snippets run as
//! doc-tests of this crate.

pub mod camera;
pub mod cli;
pub mod condition;
pub mod diffusion;
pub mod fixture;
pub mod fmap;
pub mod grid;
pub mod gsplat;
pub mod losses;
pub mod metrics;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/conditions.md")]
    mod conditions {}
    #[doc = include_str!("../../../book/src/cameras.md")]
    mod cameras {}
    #[doc = include_str!("../../../book/src/splats.md")]
    mod splats {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
