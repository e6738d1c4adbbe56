//! Cross-modal adversarial reprogramming: frozen image classifiers are
//! repurposed for token-sequence classification by learning a token-to-patch
//! program and an output label mapping.

pub mod baseline;
pub mod data;
pub mod error;
pub mod image;
pub mod program;
pub mod remap;
pub mod timing;
pub mod train;
pub mod victim;

pub use error::{Result, XmarError};
