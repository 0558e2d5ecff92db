//! Multi-task no-reference image quality assessment.
//!
//! A VAN-style quality backbone is guided by an octave-convolution
//! high-frequency branch (`octave`) through attentional feature fusion
//! (`fusion`), and fused with a contrastively pretrained distortion
//! embedding (`contrastive`). `pipeline` holds the training and evaluation
//! protocol, `metrics` the correlation measures, `gmad` the maximum
//! differentiation competition.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gmad;
pub mod metrics;
pub mod nn;
pub mod octave;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
