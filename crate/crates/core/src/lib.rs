//! Cross-lingual contrastive pretraining with a sentence-to-paragraph
//! curriculum, followed by cross-lingual chain-of-thought instruction tuning,
//! on a tiny decoder-only transformer trained over a synthetic twin-language
//! testbed.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod trainer;
pub mod xcot;

pub use error::{Error, Result};
pub use tensor::Tensor;
