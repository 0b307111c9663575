//! Offline acceleration of robot demonstration datasets.
//!
//! A single annotated reference episode is segmented into `precision` and
//! `casual` spans; the labels are propagated to the remaining episodes with
//! banded DTW on proprioceptive features, refined (stability rules, coverage
//! completion, gripper-event forcing) and finally compiled into a faster
//! dataset with per-label replicate-before-downsample.

pub mod config;
pub mod dataset;
pub mod downsample;
pub mod dtw;
pub mod error;
pub mod features;
pub mod geometry;
pub mod inspect;
pub mod pipeline;
pub mod provider;
pub mod segmentation;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
