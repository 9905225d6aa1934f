//! Convolutional recurrent networks with minimal, time-parallel gating:
//! tensors and a reverse-mode tape, periodic convolutions, linear-recurrence
//! scans, the five cell types, the stacked forecasting network, synthetic
//! dynamics datasets, training and benchmarks.

pub mod autodiff;
pub mod bench;
pub mod cells;
pub mod conv;
pub mod dynamics;
pub mod error;
pub mod network;
pub mod norm;
pub mod report;
pub mod scan;
pub mod tensor;
pub mod trainer;

mod binio;
mod gemm;

pub use cells::CellKind;
pub use error::{Error, Result};
pub use network::{Model, ModelSpec};
pub use scan::Backend;
pub use tensor::{Scalar, Tensor};
