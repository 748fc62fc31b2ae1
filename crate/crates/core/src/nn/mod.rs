//! Minimal reverse-mode differentiation engine and the policy networks
//! built on it.
//!
//! Values live on a [`Tape`]; every operation appends a node and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in reverse and returns
//! the gradient of a scalar loss with respect to every node.
//!
//! ```
//! use cavg::nn::Tape;
//! use cavg::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.input(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
//! let x = tape.input(Tensor::from_rows(&[[1.0], [-1.0]])).unwrap();
//! let y = tape.matmul(w, x).unwrap();
//! let y2 = tape.mul(y, y).unwrap();
//! let loss = tape.sum(y2).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! // d‖Wx‖²/dW = 2 (Wx) xᵀ with Wx = [-1, -1]
//! assert_eq!(grads.get(w).unwrap(), &Tensor::from_rows(&[[-2.0, 2.0], [-2.0, 2.0]]));
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod optim;
pub mod policy;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{AttentionLayer, Bound, Dense, GraphConvLayer, Param, ParamStore};
pub use optim::{Adam, AdamConfig};
pub use policy::{gaussian_log_density, ActorOutput, Architecture, Policy};
pub use tape::{GraphBatch, GraphBlock, Gradients, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("agent {agent} has an empty neighbour set")]
    EmptyNeighborSet { agent: usize },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// How attention logits are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `φ_ij = softmax_j(q_i·k_j / √d_h)`.
    #[default]
    Softmax,
    /// Divides each scaled score by the row sum of scores before the
    /// softmax. Undefined when that sum is zero; kept for comparison only.
    LiteralRatio,
}
