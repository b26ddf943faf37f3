//! Per-vector scaled quantization: calibration, two-level scale
//! factorization, a bit-exact integer datapath simulator, small network
//! execution, and analytical cost reporting.

pub mod calibration;
pub mod cost;
pub mod datapath;
pub mod error;
pub mod fixture;
pub mod nn;
pub mod quant;
pub mod tensor;

pub use calibration::{AlphaSet, CalibMethod, Granularity};
pub use datapath::{Collector, DatapathConfig, PartialSum, ScaleWidth};
pub use error::{Result, VsqError};
pub use nn::{ErrorReport, Network, NetworkSpec, RunMode};
pub use quant::{QuantConfig, QuantizedTensor, Rounding, ScaleMode, ScaleSet};
pub use tensor::{ChannelLayout, Tensor, Vectorization};
