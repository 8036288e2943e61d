//! Diver tracking in hand-held diving footage.
//!
//! Frames are registered to the first frame with affine maps, mosaicked into
//! a diver-free panorama, and segmented by colour against that panorama. The
//! resulting barycentre track is smoothed and fitted with a ballistic arc, and
//! the fitted gravity calibrates pixels to metres.
//!
//! | module | role |
//! |---|---|
//! | [`frame_io`] | frame-rate planning, manifests, frame loading |
//! | [`registration`] | corners, matching, RANSAC, chained affine maps |
//! | [`mosaic`] | warping and median compositing |
//! | [`segmentation`] | HSV filtering, background subtraction, components |
//! | [`trajectory`] | smoothing, gap filling, ballistic fit, metrics |
//! | [`synth`] | synthetic clips with ground truth |
//! | [`pipeline`] | configuration, stages and artifacts |
//!
//! ```
//! use divetrack::pipeline::{run_pipeline, write_synthetic_clip, PipelineConfig};
//! use divetrack::synth::vibration_scenario;
//!
//! let dir = tempfile::tempdir()?;
//! let mut spec = vibration_scenario();
//! spec.n_frames = 10;
//! spec.camera_path.truncate(10);
//! write_synthetic_clip(&spec, dir.path())?;
//! let cfg = PipelineConfig::load(&dir.path().join("config.json"), &["debug=true".into()])?;
//! let report = run_pipeline(&cfg)?;
//! assert_eq!(report.n_valid, 10);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod frame_io;
pub mod image;
pub mod mosaic;
pub mod pipeline;
pub mod registration;
pub mod segmentation;
pub mod synth;
pub mod trajectory;

// Book chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/mosaicking.md")]
    mod mosaicking {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/trajectory.md")]
    mod trajectory {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
