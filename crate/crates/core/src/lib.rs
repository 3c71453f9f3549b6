//! A desk-scale semantic segmentation lab comparing two backbone families:
//! a Vision Transformer pretrained by masked patch modeling against a
//! learned vector-quantized tokenizer, and a deformable-convolution
//! backbone. Both fine-tune with an UperNet decoder and are judged with
//! mIoU, long-tail diagnostics, and token-overlap analysis.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dcn;
pub mod error;
pub mod eval;
pub mod mim;
pub mod seg;
pub mod tokenizer;
pub mod util;
pub mod vit;

pub use error::{Error, Result};
