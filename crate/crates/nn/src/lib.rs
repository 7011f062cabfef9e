//! A small reverse-mode differentiation engine on dense `f64` matrices with
//! the layers, losses and optimizers needed by the portfolio agent and the
//! sequence GANs.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, NodeId, PROB_CLAMP};
pub use layers::{Activation, BiLstm, BoundLstm, Dense, Dropout, LayerSpec, LstmCell};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Checkpoint, ParamId, ParamRecord, ParamStore};
pub use tensor::{matmul, Tensor};
