//! Rich-U-Net: a U-shaped segmentation network built from sparse top-k
//! attention, a recurrent/convolutional fusion layer and multi-scale gated
//! decoder fusion, running on a small reverse-mode autodiff core.

pub mod attention;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod msagf;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{ModuleSet, RichUNet, RichUNetConfig};
