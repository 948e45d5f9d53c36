//! Adversarially defended, cascaded segmentation of synthetic brain phantoms,
//! built on a small reverse-mode autodiff engine.

pub mod adversarial;
pub mod autodiff;
pub mod cascade;
pub mod dataio;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::{LabelId, LabelMap};
pub use params::Params;
pub use tensor::{Scalar, Tensor};
