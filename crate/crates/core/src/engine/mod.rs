//! Numerical substrate: layer kernels, losses, and a sequential network with a
//! reverse-mode pass.

pub mod layers;
pub mod loss;

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, pool_backward, pool_forward, relu,
    relu_backward, KERNEL, POOL,
};
pub use loss::{loss_and_grad, onehot_class, softmax, LossKind, EPSILON};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{layer}: axis {axis} expected {expected}, got {actual}")]
    Shape {
        layer: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("target is not a one-hot vector")]
    OneHot,
    #[error("gradient tape does not match the network: {0}")]
    TapeMismatch(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Pool,
    Flatten,
    Dense,
    Classifier,
}

/// Parameters of one layer. Pool and Flatten have none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Conv { weights: Tensor, biases: Tensor },
    Pool,
    Flatten,
    Dense { weights: Tensor, biases: Tensor },
    Classifier { weights: Tensor, biases: Tensor },
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Conv { .. } => LayerKind::Conv,
            LayerParams::Pool => LayerKind::Pool,
            LayerParams::Flatten => LayerKind::Flatten,
            LayerParams::Dense { .. } => LayerKind::Dense,
            LayerParams::Classifier { .. } => LayerKind::Classifier,
        }
    }

    /// Weights then biases, or nothing for parameter-free layers.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::Conv { weights, biases }
            | LayerParams::Dense { weights, biases }
            | LayerParams::Classifier { weights, biases } => vec![weights, biases],
            LayerParams::Pool | LayerParams::Flatten => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::Conv { weights, biases }
            | LayerParams::Dense { weights, biases }
            | LayerParams::Classifier { weights, biases } => vec![weights, biases],
            LayerParams::Pool | LayerParams::Flatten => Vec::new(),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::from_parts(t.dims().to_vec(), vec![0.0; t.len()]);
        match self {
            LayerParams::Conv { weights, biases } => LayerParams::Conv {
                weights: z(weights),
                biases: z(biases),
            },
            LayerParams::Dense { weights, biases } => LayerParams::Dense {
                weights: z(weights),
                biases: z(biases),
            },
            LayerParams::Classifier { weights, biases } => LayerParams::Classifier {
                weights: z(weights),
                biases: z(biases),
            },
            LayerParams::Pool => LayerParams::Pool,
            LayerParams::Flatten => LayerParams::Flatten,
        }
    }
}

/// Cached forward intermediates for one layer.
#[derive(Debug, Clone)]
pub enum TapeEntry {
    Conv { input: Tensor, pre: Tensor },
    Pool {
        input_dims: Vec<usize>,
        argmax: Vec<usize>,
        pre: Tensor,
    },
    Flatten { input_dims: Vec<usize> },
    Dense { input: Tensor, pre: Tensor },
    Classifier { input: Tensor },
}

impl TapeEntry {
    /// Output of the layer before its ReLU, for layers that have one.
    pub fn pre_activation(&self) -> Option<&Tensor> {
        match self {
            TapeEntry::Conv { pre, .. } | TapeEntry::Pool { pre, .. } | TapeEntry::Dense { pre, .. } => {
                Some(pre)
            }
            _ => None,
        }
    }
}

/// One entry per layer, in forward order.
#[derive(Debug, Clone)]
pub struct GradientTape {
    entries: Vec<TapeEntry>,
}

impl GradientTape {
    pub fn entries(&self) -> &[TapeEntry] {
        &self.entries
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub probs: Tensor,
    pub tape: GradientTape,
}

/// Per-layer gradients shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn new(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of network forward passes run on the current thread.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

/// A sequential network. Conv, Pool and hidden Dense layers are followed by a
/// ReLU; the Classifier emits logits that are turned into probabilities with
/// softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LayerParams>,
}

impl Network {
    pub fn new(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.tensors()).all(|t| t.is_finite())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass, EngineError> {
        FORWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                LayerParams::Conv { weights, biases } => {
                    let pre = conv_forward(&x, weights, biases)?;
                    let out = relu(&pre);
                    entries.push(TapeEntry::Conv { input: x, pre });
                    out
                }
                LayerParams::Pool => {
                    let (pre, argmax) = pool_forward(&x)?;
                    let out = relu(&pre);
                    entries.push(TapeEntry::Pool {
                        input_dims: x.dims().to_vec(),
                        argmax,
                        pre,
                    });
                    out
                }
                LayerParams::Flatten => {
                    entries.push(TapeEntry::Flatten {
                        input_dims: x.dims().to_vec(),
                    });
                    x.flatten()
                }
                LayerParams::Dense { weights, biases } => {
                    let pre = dense_forward(&x, weights, biases)?;
                    let out = relu(&pre);
                    entries.push(TapeEntry::Dense { input: x, pre });
                    out
                }
                LayerParams::Classifier { weights, biases } => {
                    let logits = dense_forward(&x, weights, biases)?;
                    entries.push(TapeEntry::Classifier { input: x });
                    logits
                }
            };
        }
        if x.rank() != 1 {
            return Err(EngineError::TapeMismatch(
                "network does not end in a rank-1 output".into(),
            ));
        }
        if !x.is_finite() {
            return Err(EngineError::NonFinite("forward pass"));
        }
        let probs = softmax(&x);
        Ok(ForwardPass {
            logits: x,
            probs,
            tape: GradientTape { entries },
        })
    }

    /// Reverse pass from logit gradients, accumulating into `grads`.
    pub fn backward(
        &self,
        tape: GradientTape,
        dlogits: &Tensor,
        grads: &mut Gradients,
    ) -> Result<(), EngineError> {
        if tape.entries.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(EngineError::TapeMismatch(format!(
                "{} layers, {} tape entries, {} gradient slots",
                self.layers.len(),
                tape.entries.len(),
                grads.layers.len()
            )));
        }
        let mut g = dlogits.clone();
        for (i, (entry, (layer, slot))) in tape
            .entries
            .into_iter()
            .zip(self.layers.iter().zip(grads.layers.iter_mut()))
            .enumerate()
            .rev()
        {
            let want_input = i > 0;
            g = match (entry, layer, slot) {
                (
                    TapeEntry::Conv { input, pre },
                    LayerParams::Conv { weights, .. },
                    LayerParams::Conv {
                        weights: dw,
                        biases: db,
                    },
                ) => {
                    let dpre = relu_backward(&pre, &g);
                    match conv_backward(&input, weights, &dpre, dw.data_mut(), db.data_mut(), want_input) {
                        Some(d) => d,
                        None => break,
                    }
                }
                (
                    TapeEntry::Pool {
                        input_dims,
                        argmax,
                        pre,
                    },
                    LayerParams::Pool,
                    _,
                ) => {
                    let dpre = relu_backward(&pre, &g);
                    pool_backward(&argmax, &dpre, &input_dims)
                }
                (TapeEntry::Flatten { input_dims }, LayerParams::Flatten, _) => g.reshape(input_dims)?,
                (
                    TapeEntry::Dense { input, pre },
                    LayerParams::Dense { weights, .. },
                    LayerParams::Dense {
                        weights: dw,
                        biases: db,
                    },
                ) => {
                    let dpre = relu_backward(&pre, &g);
                    match dense_backward(&input, weights, &dpre, dw.data_mut(), db.data_mut(), want_input) {
                        Some(d) => d,
                        None => break,
                    }
                }
                (
                    TapeEntry::Classifier { input },
                    LayerParams::Classifier { weights, .. },
                    LayerParams::Classifier {
                        weights: dw,
                        biases: db,
                    },
                ) => match dense_backward(&input, weights, &g, dw.data_mut(), db.data_mut(), want_input) {
                    Some(d) => d,
                    None => break,
                },
                (_, layer, _) => {
                    return Err(EngineError::TapeMismatch(format!(
                        "tape entry {i} does not match {:?} layer",
                        layer.kind()
                    )))
                }
            };
        }
        Ok(())
    }
}
