//! Log anomaly detection: Drain parsing, event-sequence grouping, pseudo-anomaly
//! generation by masked replacement, a two-stage trained transformer
//! discriminator, and norm-based detection.

pub mod das;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod grouper;
pub mod ingest;
pub mod linalg;
pub mod metrics;
pub mod mgag;
pub mod optim;
pub mod parser;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, ErrorCategory, Result};

/// Single-precision models, used for training and inference.
pub type Discriminator32 = das::Discriminator<f32>;
pub type Generator32 = mgag::Generator<f32>;
pub type Encoder32 = encoder::EncoderParams<f32>;

/// Double-precision models, used for gradient checks.
pub type Discriminator64 = das::Discriminator<f64>;
pub type Generator64 = mgag::Generator<f64>;
pub type Encoder64 = encoder::EncoderParams<f64>;
