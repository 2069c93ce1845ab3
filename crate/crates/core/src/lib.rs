//! Low-data optical music recognition: glyph crop extraction from manuscript
//! pages, degradation-style augmentation, a self-supervised (VICReg)
//! convolutional feature extractor and few-shot classifiers evaluated with an
//! N-way-K-shot episode harness.

pub mod augment;
pub mod classifiers;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod harness;
pub mod preprocess;
pub mod seed;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};
