//! Future semantic segmentation with multi-scale convolutional LSTMs.
//!
//! Given the class maps of four consecutive frames, the model encodes every
//! frame into a four-level feature pyramid, runs one ConvLSTM (optionally
//! bidirectional) per pyramid level across the four frames, and fuses the
//! final hidden states top-down into class logits for the next frame.
//!
//! Everything numeric is built on the small reverse-mode autodiff core in
//! [`autodiff`] and [`tensor`].

pub mod autodiff;
pub mod conv;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod segnet;
pub mod tensor;
pub mod train_eval;

pub use autodiff::{GradientSet, Graph, NodeId};
pub use conv::{conv2d, Conv2dSpec};
pub use error::{Error, Result};
pub use tensor::{Dims, Element, Init, Tensor};

/// Number of observed frames the model consumes.
pub const INPUT_FRAMES: usize = 4;
