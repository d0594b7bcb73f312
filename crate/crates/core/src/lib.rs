//! Self attention grid (SAG) networks for person re-identification.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod param;
pub mod pipeline;
pub mod sag;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autograd::{Tape, Var};
pub use error::{Result, SagError};
pub use model::{build_model, BackboneConfig, DepthSet, TwoBranchModel};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = TwoBranchModel<f32>;
pub type Model64 = TwoBranchModel<f64>;
