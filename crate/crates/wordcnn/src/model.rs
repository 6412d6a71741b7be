//! Declarative model configurations, builders for the two canonical
//! architectures, symbolic shape traces, and checkpoint serialization.
//!
//! Model A is a single conv block (300 filters of width 2) with a size-2
//! max-pool followed by a global max-pool over the feature maps. Model B
//! stacks three conv blocks (128 filters of width 5, pools 5/5/35); with a
//! 1000-token input the final pool consumes the entire remaining sequence.

use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::stack::{Layer, LayerStack, Pass};
use crate::nn::tensor::{scalar, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WCNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    A,
    B,
    Custom,
}

/// Pooling applied after a conv block: a fixed window or the whole sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSpec {
    Size(usize),
    Global,
}

impl Serialize for PoolSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PoolSpec::Size(n) => serializer.serialize_u64(*n as u64),
            PoolSpec::Global => serializer.serialize_str("global"),
        }
    }
}

impl<'de> Deserialize<'de> for PoolSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct PoolVisitor;
        impl Visitor<'_> for PoolVisitor {
            type Value = PoolSpec;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or the string \"global\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<PoolSpec, E> {
                if v == 0 {
                    return Err(E::custom("pool size must be >= 1"));
                }
                Ok(PoolSpec::Size(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<PoolSpec, E> {
                if v <= 0 {
                    return Err(E::custom("pool size must be >= 1"));
                }
                Ok(PoolSpec::Size(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<PoolSpec, E> {
                if v == "global" {
                    Ok(PoolSpec::Global)
                } else {
                    Err(E::custom(format!("unknown pool spec `{v}`")))
                }
            }
        }
        deserializer.deserialize_any(PoolVisitor)
    }
}

/// What reduces the last conv block's output to the classifier's input
/// vector: a global max-pool over positions, or flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalPool {
    Global,
    Flatten,
}

/// Declarative description of an architecture. All conv-block vectors are
/// indexed per block and must have equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub max_len: usize,
    pub embedding_dim: usize,
    pub region_sizes: Vec<usize>,
    pub feature_maps: Vec<usize>,
    pub pool_sizes: Vec<PoolSpec>,
    pub final_pool: FinalPool,
    pub dropout_p: f64,
    pub dense_hidden: Option<usize>,
    pub num_classes: usize,
    pub embeddings_trainable: bool,
}

impl ModelConfig {
    /// Canonical Model A: one conv block, 300 filters of width 2, max-pool 2,
    /// global pool, dropout 0.2.
    pub fn model_a(embedding_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::A,
            max_len: 1000,
            embedding_dim,
            region_sizes: vec![2],
            feature_maps: vec![300],
            pool_sizes: vec![PoolSpec::Size(2)],
            final_pool: FinalPool::Global,
            dropout_p: 0.2,
            dense_hidden: None,
            num_classes: 2,
            embeddings_trainable: true,
        }
    }

    /// Model A variant whose only pooling is the global max-pool.
    pub fn model_a_global_only(embedding_dim: usize) -> ModelConfig {
        let mut config = ModelConfig::model_a(embedding_dim);
        config.pool_sizes = vec![PoolSpec::Global];
        config.final_pool = FinalPool::Flatten;
        config
    }

    /// Canonical Model B: three stacked conv blocks of 128 width-5 filters
    /// with pools 5, 5, and 35, then a 128-unit hidden layer, dropout 0.5.
    pub fn model_b(embedding_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::B,
            max_len: 1000,
            embedding_dim,
            region_sizes: vec![5, 5, 5],
            feature_maps: vec![128, 128, 128],
            pool_sizes: vec![PoolSpec::Size(5), PoolSpec::Size(5), PoolSpec::Size(35)],
            final_pool: FinalPool::Flatten,
            dropout_p: 0.5,
            dense_hidden: Some(128),
            num_classes: 2,
            embeddings_trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.max_len < 1 || self.embedding_dim < 1 {
            return Err(Error::Config(
                "max_len and embedding_dim must be >= 1".to_string(),
            ));
        }
        let blocks = self.region_sizes.len();
        if blocks == 0 {
            return Err(Error::Config("at least one conv block required".to_string()));
        }
        if self.feature_maps.len() != blocks || self.pool_sizes.len() != blocks {
            return Err(Error::Config(format!(
                "region_sizes ({blocks}), feature_maps ({}), and pool_sizes ({}) must have equal length",
                self.feature_maps.len(),
                self.pool_sizes.len()
            )));
        }
        if self.region_sizes.iter().any(|&k| k == 0)
            || self.feature_maps.iter().any(|&f| f == 0)
        {
            return Err(Error::Config(
                "region sizes and feature maps must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.dense_hidden == Some(0) {
            return Err(Error::Config("dense_hidden must be >= 1".to_string()));
        }
        shape_trace(self).map(|_| ())
    }

    /// Key-sorted JSON, the canonical textual form used in checkpoints and
    /// config hashes.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

/// Ordered (layer name, output shape) pairs for a config, computed
/// symbolically without allocating parameters.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Predict every layer's output shape, failing on the first transition that
/// is inconsistent under the layer arithmetic.
pub fn shape_trace(config: &ModelConfig) -> Result<ShapeTrace> {
    let mut trace: ShapeTrace = Vec::new();
    let mut rows = config.max_len;
    let mut cols = config.embedding_dim;
    let mut pooled_to_vector = false; // a block-level global pool emitted a vector
    trace.push(("embedding".to_string(), vec![rows, cols]));

    for (i, ((&k, &maps), &pool)) in config
        .region_sizes
        .iter()
        .zip(&config.feature_maps)
        .zip(&config.pool_sizes)
        .enumerate()
    {
        let block = i + 1;
        if pooled_to_vector {
            return Err(Error::shape(
                format!("conv{block}"),
                "input already pooled to a vector".to_string(),
            ));
        }
        if rows < k {
            return Err(Error::shape(
                format!("conv{block}"),
                format!("input length {rows} shorter than kernel {k}"),
            ));
        }
        rows = rows - k + 1;
        cols = maps;
        trace.push((format!("conv{block}"), vec![rows, cols]));
        trace.push((format!("relu{block}"), vec![rows, cols]));
        match pool {
            PoolSpec::Size(p) => {
                if rows < p {
                    return Err(Error::shape(
                        format!("pool{block}"),
                        format!("input length {rows} shorter than pool {p}"),
                    ));
                }
                rows /= p;
                trace.push((format!("pool{block}"), vec![rows, cols]));
            }
            PoolSpec::Global => {
                pooled_to_vector = true;
                trace.push((format!("pool{block}"), vec![cols]));
            }
        }
    }

    let features = match config.final_pool {
        FinalPool::Global => {
            if pooled_to_vector {
                return Err(Error::shape(
                    "final pool",
                    "input already pooled to a vector".to_string(),
                ));
            }
            trace.push(("global_pool".to_string(), vec![cols]));
            cols
        }
        FinalPool::Flatten => {
            let n = if pooled_to_vector { cols } else { rows * cols };
            trace.push(("flatten".to_string(), vec![n]));
            n
        }
    };

    trace.push(("dropout".to_string(), vec![features]));
    let mut dense_index = 1;
    if let Some(hidden) = config.dense_hidden {
        trace.push((format!("dense{dense_index}"), vec![hidden]));
        trace.push((format!("relu_dense{dense_index}"), vec![hidden]));
        dense_index += 1;
    }
    trace.push((format!("dense{dense_index}"), vec![config.num_classes]));
    Ok(trace)
}

/// The sequence lengths a trace passes through (rank-2 shapes only), useful
/// for comparing against hand arithmetic.
pub fn sequence_lengths(trace: &ShapeTrace) -> Vec<usize> {
    trace
        .iter()
        .filter(|(_, shape)| shape.len() == 2)
        .map(|(_, shape)| shape[0])
        .collect()
}

/// A built model: the layer stack plus the config that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub stack: LayerStack<T>,
}

impl<T: Scalar> Model<T> {
    /// Eval-mode class prediction with both class probabilities.
    /// Ties resolve to the lower class index.
    pub fn predict(&self, ids: &[u32]) -> Result<(usize, Vec<T>)> {
        let (logits, _) = self.stack.forward(ids, &mut Pass::Eval)?;
        let probs = softmax_probs(logits.data());
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok((best, probs))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            stack: self.stack.cast(),
        }
    }
}

/// Stable softmax without a loss attached (prediction path).
pub fn softmax_probs<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(logits[0], |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Parameter initialization: weights uniform in (-a, a) with
/// `a = sqrt(6 / (fan_in + fan_out))`, biases zero. This is the only place
/// model parameters are sampled; everything is a function of `seed`.
fn init_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<T> = (0..len).map(|_| scalar(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("volume matches")
}

/// Build the layer sequence for a config. When `params` is `Some`, conv and
/// dense parameters are drawn from it (checkpoint load); otherwise they are
/// initialized from the seeded RNG.
fn build_layers<T: Scalar>(
    config: &ModelConfig,
    embedding: Tensor<T>,
    mut init: Option<&mut ChaCha8Rng>,
    mut take_param: impl FnMut(&str, &[usize]) -> Result<Tensor<T>>,
) -> Result<Vec<Layer<T>>> {
    let trace = shape_trace(config)?;
    let dim = config.embedding_dim;
    let mut layers: Vec<Layer<T>> = vec![Layer::Embedding {
        name: "embedding".to_string(),
        weights: embedding,
        trainable: config.embeddings_trainable,
    }];

    let mut in_channels = dim;
    for (i, (&k, &maps)) in config
        .region_sizes
        .iter()
        .zip(&config.feature_maps)
        .enumerate()
    {
        let name = format!("conv{}", i + 1);
        let filter_shape = [maps, k, in_channels];
        let fan_in = k * in_channels;
        let fan_out = k * maps;
        let (filters, bias) = match init.as_deref_mut() {
            Some(rng) => (
                init_uniform(rng, &filter_shape, fan_in, fan_out),
                Tensor::zeros(&[maps]),
            ),
            None => (
                take_param(&format!("{name}.filters"), &filter_shape)?,
                take_param(&format!("{name}.bias"), &[maps])?,
            ),
        };
        layers.push(Layer::Conv1d { name, filters, bias });
        layers.push(Layer::Relu);
        match config.pool_sizes[i] {
            PoolSpec::Size(p) => layers.push(Layer::MaxPool { pool: p }),
            PoolSpec::Global => layers.push(Layer::GlobalMaxPool),
        }
        in_channels = maps;
    }

    match config.final_pool {
        FinalPool::Global => layers.push(Layer::GlobalMaxPool),
        FinalPool::Flatten => layers.push(Layer::Flatten),
    }
    layers.push(Layer::Dropout { p: config.dropout_p });

    // classifier input size comes straight off the symbolic trace
    let features = trace
        .iter()
        .find(|(name, _)| name == "dropout")
        .map(|(_, shape)| shape[0])
        .expect("trace always contains dropout");

    let mut dense_in = features;
    let mut dense_index = 1;
    if let Some(hidden) = config.dense_hidden {
        let name = format!("dense{dense_index}");
        let (weights, bias) = match init.as_deref_mut() {
            Some(rng) => (
                init_uniform(rng, &[dense_in, hidden], dense_in, hidden),
                Tensor::zeros(&[hidden]),
            ),
            None => (
                take_param(&format!("{name}.weights"), &[dense_in, hidden])?,
                take_param(&format!("{name}.bias"), &[hidden])?,
            ),
        };
        layers.push(Layer::Dense { name, weights, bias });
        layers.push(Layer::Relu);
        dense_in = hidden;
        dense_index += 1;
    }
    let name = format!("dense{dense_index}");
    let (weights, bias) = match init.as_deref_mut() {
        Some(rng) => (
            init_uniform(rng, &[dense_in, config.num_classes], dense_in, config.num_classes),
            Tensor::zeros(&[config.num_classes]),
        ),
        None => (
            take_param(&format!("{name}.weights"), &[dense_in, config.num_classes])?,
            take_param(&format!("{name}.bias"), &[config.num_classes])?,
        ),
    };
    layers.push(Layer::Dense { name, weights, bias });
    Ok(layers)
}

/// Build a model from a validated config and an assembled embedding matrix.
/// Conv and dense parameters are initialized from `seed`.
pub fn build_model<T: Scalar>(
    config: &ModelConfig,
    embedding: EmbeddingMatrix<T>,
    seed: u64,
) -> Result<Model<T>> {
    config.validate()?;
    if embedding.dimension() != config.embedding_dim {
        return Err(Error::Config(format!(
            "embedding matrix dimension {} != config embedding_dim {}",
            embedding.dimension(),
            config.embedding_dim
        )));
    }
    if embedding.trainable != config.embeddings_trainable {
        return Err(Error::Config(
            "embedding matrix trainable flag disagrees with config".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = build_layers(config, embedding.matrix, Some(&mut rng), |name, _| {
        Err(Error::Config(format!("missing parameter source for `{name}`")))
    })?;
    Ok(Model {
        config: config.clone(),
        stack: LayerStack::new(layers)?,
    })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::parse("checkpoint", format!("truncated reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize a model: magic, format version, the canonical config JSON
/// (length-prefixed), then each parameter in name order as name, rank, dims
/// (u32 little-endian each), and raw little-endian f32 data.
pub fn save_checkpoint<W: Write>(writer: &mut W, model: &Model<f32>) -> Result<()> {
    writer.write_all(CHECKPOINT_MAGIC)?;
    writer.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config_json = model.config.canonical_json();
    write_u32(writer, config_json.len() as u32)?;
    writer.write_all(config_json.as_bytes())?;

    let mut params = model.stack.params();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, tensor) in params {
        write_u32(writer, name.len() as u32)?;
        writer.write_all(name.as_bytes())?;
        write_u32(writer, tensor.shape().len() as u32)?;
        for &dim in tensor.shape() {
            write_u32(writer, dim as u32)?;
        }
        for &v in tensor.data() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Deserialize a model saved by [`save_checkpoint`]. Parameters are restored
/// bit-for-bit; any truncation, bad magic, or missing parameter is a format
/// error and no partial model is returned.
pub fn load_checkpoint<R: Read>(reader: &mut R) -> Result<Model<f32>> {
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::parse("checkpoint", "truncated reading magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::parse("checkpoint", "bad magic bytes"));
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| Error::parse("checkpoint", "truncated reading version"))?;
    let version = u16::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            "checkpoint",
            format!("unsupported format version {version}"),
        ));
    }
    let config_len = read_u32(reader, "config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    reader
        .read_exact(&mut config_bytes)
        .map_err(|_| Error::parse("checkpoint", "truncated reading config"))?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::parse("checkpoint", format!("bad config JSON: {e}")))?;
    config.validate()?;

    let mut params: std::collections::BTreeMap<String, Tensor<f32>> =
        std::collections::BTreeMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match reader.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        reader
            .read_exact(&mut name_bytes)
            .map_err(|_| Error::parse("checkpoint", "truncated reading parameter name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::parse("checkpoint", "parameter name is not UTF-8"))?;
        let rank = read_u32(reader, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(reader, "shape dim")? as usize);
        }
        let volume: usize = shape.iter().product();
        let mut data_bytes = vec![0u8; volume * 4];
        reader.read_exact(&mut data_bytes).map_err(|_| {
            Error::parse("checkpoint", format!("truncated reading data of `{name}`"))
        })?;
        let data: Vec<f32> = data_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }

    let embedding = params.remove("embedding").ok_or_else(|| {
        Error::parse("checkpoint", "missing embedding parameter")
    })?;
    if embedding.shape().len() != 2 || embedding.cols() != config.embedding_dim {
        return Err(Error::parse(
            "checkpoint",
            format!(
                "embedding shape {:?} inconsistent with config dim {}",
                embedding.shape(),
                config.embedding_dim
            ),
        ));
    }
    let layers = build_layers(&config, embedding, None, |name, shape| {
        let tensor = params
            .remove(name)
            .ok_or_else(|| Error::parse("checkpoint", format!("missing parameter `{name}`")))?;
        if tensor.shape() != shape {
            return Err(Error::parse(
                "checkpoint",
                format!(
                    "parameter `{name}` shape {:?} != expected {shape:?}",
                    tensor.shape()
                ),
            ));
        }
        Ok(tensor)
    })?;
    if let Some(extra) = params.keys().next() {
        return Err(Error::parse(
            "checkpoint",
            format!("unexpected parameter `{extra}`"),
        ));
    }
    Ok(Model {
        config,
        stack: LayerStack::new(layers)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::assemble_matrix;
    use crate::text::Vocabulary;

    fn tiny_vocab(n: usize) -> Vocabulary {
        let tokens: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
        Vocabulary::build([tokens], n).0
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut config = ModelConfig::model_a(4);
        config.max_len = 8;
        config.feature_maps = vec![3];
        let vocab = tiny_vocab(5);
        let emb = assemble_matrix::<f32>(&vocab, None, 4, seed, true).unwrap();
        build_model(&config, emb, seed).unwrap()
    }

    #[test]
    fn model_a_canonical_trace() {
        let config = ModelConfig::model_a(100);
        let trace = shape_trace(&config).unwrap();
        assert_eq!(sequence_lengths(&trace), vec![1000, 999, 999, 499]);
        let last = trace.last().unwrap();
        assert_eq!(last.1, vec![2]);
        let global = trace.iter().find(|(n, _)| n == "global_pool").unwrap();
        assert_eq!(global.1, vec![300]);
    }

    #[test]
    fn model_a_kernel_5_trace() {
        let mut config = ModelConfig::model_a(100);
        config.region_sizes = vec![5];
        let trace = shape_trace(&config).unwrap();
        assert_eq!(sequence_lengths(&trace), vec![1000, 996, 996, 498]);
    }

    #[test]
    fn model_b_canonical_trace_ends_at_length_one() {
        let config = ModelConfig::model_b(300);
        let trace = shape_trace(&config).unwrap();
        let lengths: Vec<usize> = trace
            .iter()
            .filter(|(name, shape)| shape.len() == 2 && !name.starts_with("relu"))
            .map(|(_, shape)| shape[0])
            .collect();
        assert_eq!(lengths, vec![1000, 996, 199, 195, 39, 35, 1]);
        let flatten = trace.iter().find(|(n, _)| n == "flatten").unwrap();
        assert_eq!(flatten.1, vec![128]);
    }

    #[test]
    fn oversized_kernel_is_shape_error() {
        let mut config = ModelConfig::model_a(8);
        config.region_sizes = vec![config.max_len + 1];
        assert!(matches!(shape_trace(&config), Err(Error::Shape { .. })));
    }

    #[test]
    fn model_b_short_input_with_canonical_pools_fails() {
        let mut config = ModelConfig::model_b(8);
        config.max_len = 100;
        assert!(shape_trace(&config).is_err());
    }

    #[test]
    fn model_b_reduced_pools_are_valid() {
        let mut config = ModelConfig::model_b(8);
        config.max_len = 50;
        config.pool_sizes = vec![PoolSpec::Size(2), PoolSpec::Size(2), PoolSpec::Global];
        assert!(shape_trace(&config).is_ok());
    }

    #[test]
    fn forward_shapes_match_trace_for_both_variants() {
        for (mut config, n_vocab) in [
            (ModelConfig::model_a(6), 9),
            (ModelConfig::model_b(6), 9),
        ] {
            config.max_len = 60;
            config.feature_maps = config.feature_maps.iter().map(|_| 4).collect();
            if config.variant == Variant::B {
                config.pool_sizes =
                    vec![PoolSpec::Size(2), PoolSpec::Size(2), PoolSpec::Global];
                config.dense_hidden = Some(5);
            }
            let vocab = tiny_vocab(n_vocab);
            let emb = assemble_matrix::<f32>(&vocab, None, 6, 3, true).unwrap();
            let model = build_model(&config, emb, 3).unwrap();
            let ids: Vec<u32> = (0..config.max_len as u32).map(|i| 2 + i % 5).collect();
            let (logits, _) = model.stack.forward(&ids, &mut Pass::Eval).unwrap();
            let trace = shape_trace(&config).unwrap();
            assert_eq!(logits.shape(), trace.last().unwrap().1.as_slice());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = tiny_model(21);
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &model).unwrap();
        let loaded = load_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.config, model.config);
        for (name, tensor) in model.stack.params() {
            let other = loaded.stack.param(&name).unwrap();
            assert_eq!(tensor.data(), other.data(), "parameter {name}");
        }
        let mut again = Vec::new();
        save_checkpoint(&mut again, &loaded).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = tiny_model(4);
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &model).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(load_checkpoint(&mut bad_magic.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(load_checkpoint(&mut &truncated[..]).is_err());
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let model = tiny_model(8);
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &model).unwrap();
        let loaded = load_checkpoint(&mut bytes.as_slice()).unwrap();
        let ids = vec![2u32, 3, 4, 2, 0, 0, 0, 0];
        let (a, pa) = model.predict(&ids).unwrap();
        let (b, pb) = loaded.predict(&ids).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn canonical_json_is_key_sorted() {
        let config = ModelConfig::model_a(10);
        let json = config.canonical_json();
        let dense_pos = json.find("dense_hidden").unwrap();
        let variant_pos = json.find("variant").unwrap();
        let dropout_pos = json.find("dropout_p").unwrap();
        assert!(dense_pos < dropout_pos && dropout_pos < variant_pos);
        // round-trips through serde
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn pool_spec_serde_forms() {
        let sizes: Vec<PoolSpec> = serde_json::from_str(r#"[2, "global"]"#).unwrap();
        assert_eq!(sizes, vec![PoolSpec::Size(2), PoolSpec::Global]);
        assert!(serde_json::from_str::<Vec<PoolSpec>>(r#"["huge"]"#).is_err());
        assert_eq!(serde_json::to_string(&sizes).unwrap(), r#"[2,"global"]"#);
    }
}
