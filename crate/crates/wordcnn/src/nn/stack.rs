//! A sequential layer stack with named parameters and a full backward pass.
//!
//! The stack is architecture-agnostic: the model module assembles the two
//! canonical configurations on top of it. Input is always a fixed-length
//! token-id sequence; the first layer is an embedding lookup.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers;
use crate::nn::tensor::{Scalar, Tensor};
use crate::text::PAD_ID;

/// Forward mode: training draws dropout masks from the supplied stream,
/// evaluation is deterministic and seed-independent.
pub enum Pass<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar> {
    /// Token-id lookup table, `V x D`. Row 0 (PAD) is frozen at zero.
    Embedding {
        name: String,
        weights: Tensor<T>,
        trainable: bool,
    },
    /// `F x k x D` filters plus per-filter bias.
    Conv1d {
        name: String,
        filters: Tensor<T>,
        bias: Tensor<T>,
    },
    Relu,
    MaxPool { pool: usize },
    GlobalMaxPool,
    Dropout { p: f64 },
    Flatten,
    /// `in x out` weights plus bias.
    Dense {
        name: String,
        weights: Tensor<T>,
        bias: Tensor<T>,
    },
}

/// Per-layer values cached by a forward pass for the matching backward.
pub enum Cache<T: Scalar> {
    Embedding { ids: Vec<u32> },
    Conv1d { input: Tensor<T> },
    Relu { positive: Vec<bool> },
    MaxPool { argmax: Vec<usize>, in_rows: usize },
    GlobalMaxPool { argmax: Vec<usize>, in_rows: usize },
    Dropout { mask: Option<Vec<T>> },
    Flatten { in_shape: Vec<usize> },
    Dense { input: Tensor<T> },
}

/// Named parameter gradients, iterated in name order.
pub type GradSet<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack<T: Scalar> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> LayerStack<T> {
    /// Validate and wrap a layer sequence: the first layer must be the
    /// embedding, and parameter names must be unique.
    pub fn new(layers: Vec<Layer<T>>) -> Result<LayerStack<T>> {
        if !matches!(layers.first(), Some(Layer::Embedding { .. })) {
            return Err(Error::Config(
                "layer stack must start with an embedding layer".to_string(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for layer in &layers {
            for (name, _) in layer_params(layer) {
                if !seen.insert(name.clone()) {
                    return Err(Error::Config(format!("duplicate parameter name `{name}`")));
                }
            }
        }
        Ok(LayerStack { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn embedding_trainable(&self) -> bool {
        match &self.layers[0] {
            Layer::Embedding { trainable, .. } => *trainable,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match &self.layers[0] {
            Layer::Embedding { weights, .. } => weights.rows(),
            _ => unreachable!("validated at construction"),
        }
    }

    /// All named parameters in stack order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers.iter().flat_map(layer_params).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        for layer in &mut self.layers {
            match layer {
                Layer::Embedding { name: n, weights, .. } if n == name => return Some(weights),
                Layer::Conv1d { name: n, filters, bias } => {
                    if format!("{n}.filters") == name {
                        return Some(filters);
                    }
                    if format!("{n}.bias") == name {
                        return Some(bias);
                    }
                }
                Layer::Dense { name: n, weights, bias } => {
                    if format!("{n}.weights") == name {
                        return Some(weights);
                    }
                    if format!("{n}.bias") == name {
                        return Some(bias);
                    }
                }
                _ => {}
            }
        }
        None
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Run the stack over one token-id sequence. Returns the logits and the
    /// per-layer caches needed by [`LayerStack::backward`].
    pub fn forward(&self, ids: &[u32], pass: &mut Pass) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        if ids.is_empty() {
            return Err(Error::Input("empty token-id sequence".to_string()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut value = Tensor::zeros(&[0]);
        for (li, layer) in self.layers.iter().enumerate() {
            value = match layer {
                Layer::Embedding { weights, .. } => {
                    let dim = weights.cols();
                    let vocab = weights.rows();
                    let mut out = Tensor::zeros(&[ids.len(), dim]);
                    for (row, &id) in ids.iter().enumerate() {
                        if id as usize >= vocab {
                            return Err(Error::Input(format!(
                                "token id {id} out of range for vocabulary of {vocab}"
                            )));
                        }
                        let src = id as usize * dim;
                        out.data_mut()[row * dim..(row + 1) * dim]
                            .copy_from_slice(&weights.data()[src..src + dim]);
                    }
                    caches.push(Cache::Embedding { ids: ids.to_vec() });
                    out
                }
                Layer::Conv1d { filters, bias, .. } => {
                    let out = layers::conv1d_forward(&value, filters, bias)?;
                    caches.push(Cache::Conv1d { input: value });
                    out
                }
                Layer::Relu => {
                    let (out, positive) = layers::relu_forward(&value);
                    caches.push(Cache::Relu { positive });
                    out
                }
                Layer::MaxPool { pool } => {
                    let (out, argmax) = layers::maxpool1d_forward(&value, *pool)?;
                    let in_rows = value.shape()[0];
                    caches.push(Cache::MaxPool { argmax, in_rows });
                    out
                }
                Layer::GlobalMaxPool => {
                    let (out, argmax) = layers::global_maxpool_forward(&value)?;
                    let in_rows = value.shape()[0];
                    caches.push(Cache::GlobalMaxPool { argmax, in_rows });
                    out
                }
                Layer::Dropout { p } => {
                    let (out, mask) = match pass {
                        Pass::Train(rng) => layers::dropout_forward(&value, *p, Some(rng))?,
                        Pass::Eval => layers::dropout_forward(&value, *p, None)?,
                    };
                    caches.push(Cache::Dropout { mask });
                    out
                }
                Layer::Flatten => {
                    let in_shape = value.shape().to_vec();
                    let out = value.reshaped(&[value.len()])?;
                    caches.push(Cache::Flatten { in_shape });
                    out
                }
                Layer::Dense { weights, bias, .. } => {
                    let out = layers::dense_forward(&value, weights, bias)?;
                    caches.push(Cache::Dense { input: value });
                    out
                }
            };
            debug_assert!(
                value.all_finite(),
                "non-finite activation after layer {li} ({})",
                layer_label(layer)
            );
        }
        Ok((value, caches))
    }

    /// Propagate a logit gradient back through the stack, returning the
    /// gradient of every named parameter.
    pub fn backward(&self, caches: &[Cache<T>], grad_logits: &Tensor<T>) -> Result<GradSet<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape(
                "backward",
                format!("{} caches for {} layers", caches.len(), self.layers.len()),
            ));
        }
        let mut grads = GradSet::new();
        let mut grad = grad_logits.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            grad = match (layer, cache) {
                (Layer::Embedding { name, weights, .. }, Cache::Embedding { ids }) => {
                    let dim = weights.cols();
                    let mut g = Tensor::zeros(&[weights.rows(), dim]);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = id as usize * dim;
                        for d in 0..dim {
                            g.data_mut()[dst + d] =
                                g.data()[dst + d] + grad.data()[row * dim + d];
                        }
                    }
                    grads.insert(name.clone(), g);
                    break; // embedding consumes the ids; nothing upstream
                }
                (Layer::Conv1d { name, filters, .. }, Cache::Conv1d { input }) => {
                    let (gi, gf, gb) = layers::conv1d_backward(&grad, input, filters)?;
                    grads.insert(format!("{name}.filters"), gf);
                    grads.insert(format!("{name}.bias"), gb);
                    gi
                }
                (Layer::Relu, Cache::Relu { positive }) => layers::relu_backward(&grad, positive),
                (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_rows }) => {
                    layers::maxpool1d_backward(&grad, argmax, *in_rows)
                }
                (Layer::GlobalMaxPool, Cache::GlobalMaxPool { argmax, in_rows }) => {
                    layers::global_maxpool_backward(&grad, argmax, *in_rows)
                }
                (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
                    layers::dropout_backward(&grad, mask.as_deref())
                }
                (Layer::Flatten, Cache::Flatten { in_shape }) => grad.reshaped(in_shape)?,
                (Layer::Dense { name, weights, .. }, Cache::Dense { input }) => {
                    let (gx, gw, gb) = layers::dense_backward(&grad, input, weights)?;
                    grads.insert(format!("{name}.weights"), gw);
                    grads.insert(format!("{name}.bias"), gb);
                    gx
                }
                _ => {
                    return Err(Error::shape(
                        "backward",
                        "cache does not match layer sequence".to_string(),
                    ))
                }
            };
        }
        Ok(grads)
    }

    /// Zero the PAD-row gradient (padding must not inject signal) and drop
    /// the embedding gradient entirely when embeddings are frozen. Applied
    /// at update time so raw backward output stays the true gradient.
    pub fn apply_freeze(&self, grads: &mut GradSet<T>) {
        let (name, dim, trainable) = match &self.layers[0] {
            Layer::Embedding {
                name,
                weights,
                trainable,
            } => (name.clone(), weights.cols(), *trainable),
            _ => unreachable!("validated at construction"),
        };
        if !trainable {
            grads.remove(&name);
            return;
        }
        if let Some(g) = grads.get_mut(&name) {
            let pad_start = PAD_ID as usize * dim;
            for v in &mut g.data_mut()[pad_start..pad_start + dim] {
                *v = T::zero();
            }
        }
    }

    /// Convert every parameter to another precision (used to build a Double
    /// copy for gradient checking).
    pub fn cast<U: Scalar>(&self) -> LayerStack<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Embedding {
                    name,
                    weights,
                    trainable,
                } => Layer::Embedding {
                    name: name.clone(),
                    weights: weights.cast(),
                    trainable: *trainable,
                },
                Layer::Conv1d { name, filters, bias } => Layer::Conv1d {
                    name: name.clone(),
                    filters: filters.cast(),
                    bias: bias.cast(),
                },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { pool } => Layer::MaxPool { pool: *pool },
                Layer::GlobalMaxPool => Layer::GlobalMaxPool,
                Layer::Dropout { p } => Layer::Dropout { p: *p },
                Layer::Flatten => Layer::Flatten,
                Layer::Dense { name, weights, bias } => Layer::Dense {
                    name: name.clone(),
                    weights: weights.cast(),
                    bias: bias.cast(),
                },
            })
            .collect();
        LayerStack { layers }
    }
}

fn layer_params<T: Scalar>(layer: &Layer<T>) -> Vec<(String, &Tensor<T>)> {
    match layer {
        Layer::Embedding { name, weights, .. } => vec![(name.clone(), weights)],
        Layer::Conv1d { name, filters, bias } => vec![
            (format!("{name}.filters"), filters),
            (format!("{name}.bias"), bias),
        ],
        Layer::Dense { name, weights, bias } => vec![
            (format!("{name}.weights"), weights),
            (format!("{name}.bias"), bias),
        ],
        _ => Vec::new(),
    }
}

fn layer_label<T: Scalar>(layer: &Layer<T>) -> &'static str {
    match layer {
        Layer::Embedding { .. } => "embedding",
        Layer::Conv1d { .. } => "conv1d",
        Layer::Relu => "relu",
        Layer::MaxPool { .. } => "maxpool",
        Layer::GlobalMaxPool => "global_maxpool",
        Layer::Dropout { .. } => "dropout",
        Layer::Flatten => "flatten",
        Layer::Dense { .. } => "dense",
    }
}
