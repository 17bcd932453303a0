//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! The engine is intentionally small: a tape ([`Graph`]) of row-major tensor
//! operations, a named [`ParamStore`] with per-parameter trainability, a few
//! layers (linear, layer norm, 3D convolution, Transformer encoder block) and
//! Adam / momentum SGD.
//!
//! ```
//! use sourceaware_nn::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", "head", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
//! let mut g = Graph::new(&store);
//! let x = g.input(Tensor::row(vec![0.5, 2.0]));
//! let wv = g.param(w);
//! let logits = g.matmul(x, wv);
//! let loss = g.cross_entropy(logits, 1);
//! let grads = g.backward(loss);
//! assert!(grads.get(w).is_some());
//! ```

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Conv3dSpec, Graph, Var};
pub use layers::{BlockTrace, Conv3d, LayerNorm, Linear, TransformerBlock};
pub use optim::{CosineSchedule, Optimizer, OptimizerKind};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    graph::softmax_in_place(&mut out);
    out
}
