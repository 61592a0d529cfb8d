pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod export;
pub mod fcpg;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
