pub mod attention;
pub mod datasets;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{grad_check, grad_check_report, Graph, Scalar, Tensor, Var};
pub use params::{ParamStore, Session, Trainable};
