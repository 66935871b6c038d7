//! Referring-expression segmentation for remote-sensing imagery.
//!
//! The model decomposes an expression into context, ground-object and
//! spatial-position fragments, fuses each with the visual pyramid, and
//! refines the fused pyramid jointly across scales before decoding a mask.

pub mod encoders;
pub mod error;
pub mod fiam;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod parser;
pub mod synth;
pub mod tmem;

pub use candle_core::{DType, Device, Tensor};
pub use encoders::{FeaturePyramid, LinguisticFeatures, TextEncoder, VisualEncoder, Vocabulary};
pub use error::{Error, Result};
pub use fiam::{Fiam, FiamConfig, FiamToggles};
pub use head::{Decoder, LossReport, Provenance, SegmentationMask};
pub use metrics::{MetricsAccumulator, MetricsReport, ThresholdRule};
pub use parser::{decompose, CategoryLexicon, DecomposedExpression, SpatialLexicon};
pub use tmem::{Tmem, TmemConfig, TmemMode, Upsample};
