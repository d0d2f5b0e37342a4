pub mod autodiff;
mod bytes;
pub mod codec;
pub mod container;
pub mod energy_compaction;
pub mod entropy_model;
pub mod error;
mod kernels;
pub mod media_io;
pub mod metrics;
pub mod optim;
pub mod quantization;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod transforms;
pub mod video;

pub use error::{Error, Result};
pub use media_io::{FrameSequence, ImageTensor, SampleRange};
pub use tensor::Tensor;
pub use transforms::{ArchitectureConfig, LatentTensor, Model, ModelParams};
