pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod numcore;
pub mod quant;
pub mod soup;
pub mod teacherkit;
pub mod trainer;

pub use checkpoint::{AnyCheckpoint, Checkpoint};
pub use encoder::{Encoder, EncoderConfig, EncoderParams, Pooling};
pub use error::{Error, Result};
pub use numcore::{Gradients, Graph, Tensor, Var};
pub use quant::{QuantScheme, QuantizedCheckpoint};
