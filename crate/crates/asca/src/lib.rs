//! Hybrid convolution-attention audio classifier.
//!
//! End to end: WAV decoding and log-mel features, an MBConv/windowed
//! relative-attention backbone driven by stage strings like `C-C-C-T`, the
//! training recipe (AdamW, BCE, cosine annealing, mixup/masking/noise), and
//! multi-label evaluation. Everything runs on CPU over a hand-built
//! reverse-mode tape so gradients are verifiable by finite differences.

pub mod augment;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
