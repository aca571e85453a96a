//! Zero-shot sketch-based image retrieval via three-stream joint training.
//!
//! The crate trains an image encoder, an edge-map encoder, and a sketch
//! encoder together (the edge and sketch streams share weights), using
//! knowledge distillation from a frozen teacher, image/edge alignment,
//! edge-anchored center and triplet terms, and a shared classifier.
//! Retrieval runs either on cosine distance over real embeddings or on
//! Hamming distance over ITQ-binarized codes.

pub mod dataset;
pub mod edgemap;
pub mod error;
pub mod losses;
pub mod network;
pub mod optim;
pub mod parallel;
pub mod raster;
pub mod retrieval;
pub mod training;
pub mod util;

pub use error::{Error, Result};
