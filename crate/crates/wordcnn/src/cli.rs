//! Command-line workflows wiring the pipeline together.
//!
//! Conventions: stdout carries only machine-readable JSON results, human
//! diagnostics go to stderr, and exit codes are 0 (ok), 2 (usage/config
//! error), 3 (numeric failure). `WORDCNN_THREADS` caps evaluation and
//! cross-validation parallelism; the default of 1 keeps runs bitwise
//! deterministic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{
    build_city_allowlist, map_label, read_dataset, split, write_dataset, DatasetRecord, FoldPlan,
    ReviewReader, SplitPlan,
};
use crate::embed::{
    assemble_matrix, parse_binary_vectors, parse_text_vectors, EmbeddingMatrix, WordVectorTable,
};
use crate::error::{Error, Result};
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, shape_trace, FinalPool, Model, ModelConfig,
    PoolSpec, Variant,
};
use crate::nn::gradcheck::gradient_check;
use crate::optim::{
    OptimizerKind, DEFAULT_EPSILON, NADAM_DEFAULT_BETA1, NADAM_DEFAULT_BETA2, NADAM_DEFAULT_LR,
    RMSPROP_DEFAULT_LR, RMSPROP_DEFAULT_RHO, SGD_DEFAULT_LR,
};
use crate::text::{encode, tokenize, LabeledExample, Vocabulary};
use crate::train::{
    append_run_log, content_hash, cross_validate, dataset_fingerprint, evaluate, fit,
    sweep_region_sizes, RunLogEntry, TrainConfig,
};

pub const DEFAULT_VOCAB_CAPACITY: usize = 100_000;

#[derive(Parser)]
#[command(name = "wordcnn", about = "Word-level CNN sentiment classification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Filter and label a raw review dump into a TSV dataset.
    Prepare {
        /// JSON-lines review file (keys: stars, text, business_id)
        #[arg(long)]
        reviews: PathBuf,
        /// JSON-lines business file (keys: business_id, city); enables city filtering
        #[arg(long)]
        business: Option<PathBuf>,
        /// Cities to keep, comma separated; omit to keep all businesses
        #[arg(long, value_delimiter = ',')]
        cities: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the frequency-capped vocabulary from a TSV dataset.
    Vocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_CAPACITY)]
        capacity: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model described by a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// key=value pairs merged over the config file
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a TSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// K-fold cross-validation of a config.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Cross-validated sweep over convolution region sizes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "region-sizes", value_delimiter = ',')]
        region_sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Verify analytic gradients against finite differences on a reduced model.
    Gradcheck {
        /// Architecture to check: a or b
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the symbolic shape trace of a config.
    Describe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Classify one piece of text with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Report format, entry count, dimension, and skip counters of a vector file.
    InspectVectors {
        #[arg(long)]
        path: PathBuf,
        /// glove_text, fasttext_text, or word2vec_binary
        #[arg(long)]
        format: String,
    },
}

/// Flat, strict run configuration. Unknown keys are rejected so typos fail
/// before any computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture: "a", "b", or "custom".
    pub model: String,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Update rule: "sgd", "rmsprop", or "nadam".
    pub optimizer: String,
    /// Path to the TSV dataset produced by `prepare`.
    pub data: String,

    /// Embedding source: "glove_text", "fasttext_text", "word2vec_binary", or "random".
    pub embedding_source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_path: Option<String>,
    /// Required for the random source; for file sources it must match the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_capacity: Option<usize>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_maps: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_sizes: Option<Vec<PoolSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_pool: Option<FinalPool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_trainable: Option<bool>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_log: Option<String>,
}

impl RunConfig {
    /// Load a config file and merge `key=value` overrides on top. Values
    /// parse as JSON when they can (numbers, booleans, arrays) and fall back
    /// to strings, so `--override optimizer=rmsprop` works unquoted.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config root must be a JSON object".to_string()))?;
        for entry in overrides {
            let (key, raw) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{entry}` is not of the form key=value"))
            })?;
            let parsed = serde_json::from_str::<serde_json::Value>(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(key.to_string(), parsed);
        }
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config schema violation: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.train_count.is_some() && self.train_fraction.is_some() {
            return Err(Error::Config(
                "set train_count (fixed-count split) or train_fraction (fraction split), not both"
                    .to_string(),
            ));
        }
        if self.train_count.is_none()
            && self.train_fraction.is_none()
            && (self.test_count.is_some() || self.validation_count.is_some())
        {
            return Err(Error::Config(
                "validation_count/test_count need train_count or train_fraction".to_string(),
            ));
        }
        Ok(())
    }

    /// Canonical key-sorted JSON of the effective config.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    fn optimizer_kind(&self) -> Result<OptimizerKind> {
        let forbid = |name: &str, set: &[(&str, bool)]| -> Result<()> {
            for (key, present) in set {
                if *present {
                    return Err(Error::Config(format!(
                        "`{key}` is not a hyperparameter of the {name} optimizer"
                    )));
                }
            }
            Ok(())
        };
        match self.optimizer.as_str() {
            "sgd" => {
                forbid(
                    "sgd",
                    &[
                        ("beta1", self.beta1.is_some()),
                        ("beta2", self.beta2.is_some()),
                        ("rho", self.rho.is_some()),
                        ("epsilon", self.epsilon.is_some()),
                    ],
                )?;
                Ok(OptimizerKind::Sgd {
                    learning_rate: self.learning_rate.unwrap_or(SGD_DEFAULT_LR),
                })
            }
            "rmsprop" => {
                forbid(
                    "rmsprop",
                    &[
                        ("beta1", self.beta1.is_some()),
                        ("beta2", self.beta2.is_some()),
                    ],
                )?;
                Ok(OptimizerKind::RmsProp {
                    learning_rate: self.learning_rate.unwrap_or(RMSPROP_DEFAULT_LR),
                    rho: self.rho.unwrap_or(RMSPROP_DEFAULT_RHO),
                    epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
                })
            }
            "nadam" => {
                forbid("nadam", &[("rho", self.rho.is_some())])?;
                Ok(OptimizerKind::Nadam {
                    learning_rate: self.learning_rate.unwrap_or(NADAM_DEFAULT_LR),
                    beta1: self.beta1.unwrap_or(NADAM_DEFAULT_BETA1),
                    beta2: self.beta2.unwrap_or(NADAM_DEFAULT_BETA2),
                    epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
                })
            }
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd, rmsprop, or nadam)"
            ))),
        }
    }

    fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer_kind()?,
            seed: self.seed,
            eval_every: self.eval_every,
        })
    }

    /// Resolve the architecture with `embedding_dim` already settled.
    fn model_config(&self, embedding_dim: usize) -> Result<ModelConfig> {
        let mut config = match self.model.as_str() {
            "a" => ModelConfig::model_a(embedding_dim),
            "b" => ModelConfig::model_b(embedding_dim),
            "custom" => {
                let region_sizes = self.region_sizes.clone().ok_or_else(|| {
                    Error::Config("custom model requires region_sizes".to_string())
                })?;
                let feature_maps = self.feature_maps.clone().ok_or_else(|| {
                    Error::Config("custom model requires feature_maps".to_string())
                })?;
                let pool_sizes = self.pool_sizes.clone().ok_or_else(|| {
                    Error::Config("custom model requires pool_sizes".to_string())
                })?;
                ModelConfig {
                    variant: Variant::Custom,
                    max_len: 1000,
                    embedding_dim,
                    region_sizes,
                    feature_maps,
                    pool_sizes,
                    final_pool: self.final_pool.unwrap_or(FinalPool::Global),
                    dropout_p: 0.2,
                    dense_hidden: None,
                    num_classes: 2,
                    embeddings_trainable: true,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown model `{other}` (expected a, b, or custom)"
                )))
            }
        };
        if let Some(v) = self.max_len {
            config.max_len = v;
        }
        if let Some(v) = &self.region_sizes {
            config.region_sizes = v.clone();
        }
        if let Some(v) = &self.feature_maps {
            config.feature_maps = v.clone();
        }
        if let Some(v) = &self.pool_sizes {
            config.pool_sizes = v.clone();
        }
        if let Some(v) = self.final_pool {
            config.final_pool = v;
        }
        if let Some(v) = self.dropout_p {
            config.dropout_p = v;
        }
        if let Some(v) = self.dense_hidden {
            config.dense_hidden = Some(v);
        }
        if let Some(v) = self.embeddings_trainable {
            config.embeddings_trainable = v;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Thread cap from `WORDCNN_THREADS`; defaults to 1 for bitwise determinism.
pub fn thread_cap() -> usize {
    std::env::var("WORDCNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn open_buffered(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(file))
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

/// Loaded pretrained table or `None` for the random (end-to-end learned) source.
fn load_vector_table(config: &RunConfig) -> Result<Option<WordVectorTable>> {
    let path = config.embedding_path.as_deref();
    let need_path = |p: Option<&str>| -> Result<&str> {
        p.ok_or_else(|| {
            Error::Config("embedding_path is required for file embedding sources".to_string())
        })
    };
    let table = match config.embedding_source.as_str() {
        "random" => None,
        "glove_text" => Some(parse_text_vectors(
            open_buffered(Path::new(need_path(path)?))?,
            false,
        )?),
        "fasttext_text" => Some(parse_text_vectors(
            open_buffered(Path::new(need_path(path)?))?,
            true,
        )?),
        "word2vec_binary" => Some(parse_binary_vectors(open_buffered(Path::new(need_path(
            path,
        )?))?)?),
        other => {
            return Err(Error::Config(format!(
                "unknown embedding_source `{other}` (expected glove_text, fasttext_text, \
                 word2vec_binary, or random)"
            )))
        }
    };
    Ok(table)
}

/// Settle the embedding dimension from config and table.
fn resolve_dim(config: &RunConfig, table: Option<&WordVectorTable>) -> Result<usize> {
    match (table, config.embedding_dim) {
        (Some(t), Some(d)) if t.dimension() != d => Err(Error::Config(format!(
            "embedding_dim {d} contradicts vector file dimension {}",
            t.dimension()
        ))),
        (Some(t), _) => Ok(t.dimension()),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(Error::Config(
            "embedding_dim is required with the random embedding source".to_string(),
        )),
    }
}

/// Read the dimension of a vector file from its head without parsing it all.
fn peek_dimension(path: &Path, source: &str) -> Result<usize> {
    let mut reader = open_buffered(path)?;
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let line = first.trim_end();
    match source {
        "glove_text" => {
            let fields = line.split(' ').count();
            if fields < 2 {
                return Err(Error::parse("line 1", "expected token and values"));
            }
            Ok(fields - 1)
        }
        "fasttext_text" | "word2vec_binary" => {
            let dim = line
                .split_whitespace()
                .nth(1)
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::parse("line 1", "header must be `<count> <dim>`"))?;
            Ok(dim)
        }
        other => Err(Error::Config(format!("unknown embedding_source `{other}`"))),
    }
}

struct PreparedData {
    vocab: Vocabulary,
    examples: Vec<LabeledExample>,
    dropped_empty: usize,
}

/// Read the TSV, settle the vocabulary (file or freshly built), and encode
/// every record to a fixed-length example. Records that tokenize to nothing
/// are dropped with a counter.
fn prepare_examples(config: &RunConfig, max_len: usize) -> Result<PreparedData> {
    let records = read_dataset(open_buffered(Path::new(&config.data))?)?;
    if records.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", config.data)));
    }
    let vocab = match &config.vocab {
        Some(path) => Vocabulary::read(open_buffered(Path::new(path))?)?,
        None => {
            let capacity = config.vocab_capacity.unwrap_or(DEFAULT_VOCAB_CAPACITY);
            let streams = records.iter().map(|r| tokenize(&r.text));
            Vocabulary::build(streams, capacity).0
        }
    };
    let mut examples = Vec::with_capacity(records.len());
    let mut dropped_empty = 0usize;
    for record in &records {
        let ids = encode(&tokenize(&record.text), &vocab, max_len);
        match LabeledExample::new(ids, record.label) {
            Ok(ex) => examples.push(ex),
            Err(_) => dropped_empty += 1,
        }
    }
    if examples.is_empty() {
        return Err(Error::Config(
            "every dataset record tokenized to nothing".to_string(),
        ));
    }
    Ok(PreparedData {
        vocab,
        examples,
        dropped_empty,
    })
}

fn split_plan(config: &RunConfig) -> Option<SplitPlan> {
    if let Some(train_count) = config.train_count {
        Some(SplitPlan::FixedCounts {
            train_count,
            validation_count: config.validation_count.unwrap_or(0),
            test_count: config.test_count.unwrap_or(0),
            seed: config.seed,
        })
    } else {
        config
            .train_fraction
            .map(|train_fraction| SplitPlan::FractionSplit {
                train_fraction,
                validation_count: config.validation_count.unwrap_or(0),
                seed: config.seed,
            })
    }
}

fn gather(examples: &[LabeledExample], indices: &[usize]) -> Vec<LabeledExample> {
    indices.iter().map(|&i| examples[i].clone()).collect()
}

/// Assemble the embedding and build the model for one seed.
fn build_for_seed(
    model_config: &ModelConfig,
    vocab: &Vocabulary,
    table: Option<&WordVectorTable>,
    trainable: bool,
    seed: u64,
) -> Result<Model<f32>> {
    let embedding: EmbeddingMatrix<f32> =
        assemble_matrix(vocab, table, model_config.embedding_dim, seed, trainable)?;
    build_model(model_config, embedding, seed)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            reviews,
            business,
            cities,
            out,
        } => cmd_prepare(&reviews, business.as_deref(), &cities, &out),
        Command::Vocab { data, capacity, out } => cmd_vocab(&data, capacity, &out),
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Eval {
            checkpoint,
            data,
            vocab,
        } => cmd_eval(&checkpoint, &data, &vocab),
        Command::Cv {
            config,
            folds,
            overrides,
        } => cmd_cv(&config, folds, &overrides),
        Command::Sweep {
            config,
            region_sizes,
            folds,
            overrides,
        } => cmd_sweep(&config, &region_sizes, folds, &overrides),
        Command::Gradcheck { model, tolerance } => cmd_gradcheck(&model, tolerance),
        Command::Describe { config, overrides } => cmd_describe(&config, &overrides),
        Command::Predict {
            checkpoint,
            vocab,
            text,
        } => cmd_predict(&checkpoint, &vocab, &text),
        Command::InspectVectors { path, format } => cmd_inspect_vectors(&path, &format),
    }
}

fn cmd_prepare(
    reviews: &Path,
    business: Option<&Path>,
    cities: &[String],
    out: &Path,
) -> Result<()> {
    let allowlist = match (business, cities.is_empty()) {
        (Some(path), false) => {
            let list = build_city_allowlist(open_buffered(path)?, cities)?;
            eprintln!(
                "allowlist: {} businesses in requested cities ({} lines skipped)",
                list.ids.len(),
                list.skipped
            );
            Some(list.ids)
        }
        (None, false) => {
            return Err(Error::Config(
                "--cities requires --business to resolve city names".to_string(),
            ))
        }
        _ => None,
    };

    let mut reader = ReviewReader::new(open_buffered(reviews)?, allowlist);
    let out_file = File::create(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let mut writer = BufWriter::new(out_file);
    let mut dropped_neutral = 0u64;
    let mut written = 0u64;
    for review in &mut reader {
        match map_label(review.stars)? {
            Some(label) => {
                let record = DatasetRecord {
                    label,
                    stars: review.stars,
                    text: review.text,
                };
                write_dataset(&mut writer, std::iter::once(&record))?;
                written += 1;
            }
            None => dropped_neutral += 1,
        }
    }
    writer.flush()?;
    let stats = reader.stats();
    emit(&json!({
        "total_lines": stats.lines,
        "filtered_by_city": stats.filtered,
        "dropped_3_star": dropped_neutral,
        "malformed": stats.malformed,
        "written": written,
    }));
    Ok(())
}

fn cmd_vocab(data: &Path, capacity: usize, out: &Path) -> Result<()> {
    if capacity < 1 {
        return Err(Error::Config("capacity must be >= 1".to_string()));
    }
    let records = read_dataset(open_buffered(data)?)?;
    if records.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", data.display())));
    }
    let streams = records.iter().map(|r| tokenize(&r.text));
    let (vocab, stats) = Vocabulary::build(streams, capacity);
    let out_file = File::create(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let mut writer = BufWriter::new(out_file);
    vocab.write(&mut writer)?;
    writer.flush()?;
    emit(&json!({
        "size": vocab.size(),
        "distinct_tokens": stats.distinct_tokens,
        "coverage": stats.coverage(),
    }));
    Ok(())
}

fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let threads = thread_cap();
    let table = load_vector_table(&config)?;
    let dim = resolve_dim(&config, table.as_ref())?;
    let model_config = config.model_config(dim)?;
    let data = prepare_examples(&config, model_config.max_len)?;
    if data.dropped_empty > 0 {
        eprintln!(
            "dropped {} empty-after-tokenization records",
            data.dropped_empty
        );
    }

    let (train_set, validation_set, test_set) = match split_plan(&config) {
        Some(plan) => {
            let s = split(data.examples.len(), &plan)?;
            (
                gather(&data.examples, &s.train),
                gather(&data.examples, &s.validation),
                gather(&data.examples, &s.test),
            )
        }
        None => (data.examples.clone(), Vec::new(), Vec::new()),
    };
    eprintln!(
        "examples: {} train / {} validation / {} test (vocab {})",
        train_set.len(),
        validation_set.len(),
        test_set.len(),
        data.vocab.size()
    );

    let mut model = build_for_seed(
        &model_config,
        &data.vocab,
        table.as_ref(),
        model_config.embeddings_trainable,
        config.seed,
    )?;
    let train_cfg = config.train_config()?;
    let validation = (!validation_set.is_empty()).then_some(validation_set.as_slice());
    let report = fit(&mut model, &train_set, validation, &train_cfg)?;

    let checkpoint_path = config
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| "model.ckpt".to_string());
    let ckpt_file = File::create(&checkpoint_path)
        .map_err(|e| Error::Config(format!("cannot create {checkpoint_path}: {e}")))?;
    let mut writer = BufWriter::new(ckpt_file);
    save_checkpoint(&mut writer, &model)?;
    writer.flush()?;

    let final_record = report.final_record().cloned();
    let test_metrics = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&model, &test_set, threads)?)
    };

    let config_json = config.canonical_json();
    let config_hash = content_hash(&config_json);
    let log_path = config
        .run_log
        .clone()
        .unwrap_or_else(|| "runs.jsonl".to_string());
    let entry = RunLogEntry::new(
        config_hash.clone(),
        "train".to_string(),
        dataset_fingerprint(&train_set),
        final_record.as_ref().and_then(|r| r.train),
        report.history.clone(),
    )
    .with_config(serde_json::to_value(&config).expect("config serializes"));
    append_run_log(Path::new(&log_path), &entry)?;

    emit(&json!({
        "config_hash": config_hash,
        "checkpoint": checkpoint_path,
        "train": final_record.as_ref().and_then(|r| r.train),
        "validation": final_record.as_ref().and_then(|r| r.validation),
        "test": test_metrics,
    }));
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, vocab_path: &Path) -> Result<()> {
    let model = load_checkpoint(&mut open_buffered(checkpoint)?)?;
    let vocab = Vocabulary::read(open_buffered(vocab_path)?)?;
    let records = read_dataset(open_buffered(data)?)?;
    let mut examples = Vec::new();
    let mut dropped = 0usize;
    for record in &records {
        let ids = encode(&tokenize(&record.text), &vocab, model.config.max_len);
        match LabeledExample::new(ids, record.label) {
            Ok(ex) => examples.push(ex),
            Err(_) => dropped += 1,
        }
    }
    if dropped > 0 {
        eprintln!("dropped {dropped} empty-after-tokenization records");
    }
    let metrics = evaluate(&model, &examples, thread_cap())?;
    emit(&serde_json::to_value(metrics).expect("metrics serialize"));
    Ok(())
}

fn cmd_cv(config_path: &Path, folds: usize, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let table = load_vector_table(&config)?;
    let dim = resolve_dim(&config, table.as_ref())?;
    let model_config = config.model_config(dim)?;
    let data = prepare_examples(&config, model_config.max_len)?;
    let train_cfg = config.train_config()?;
    let plan = FoldPlan {
        k: folds,
        seed: config.seed,
        stratified: true,
    };
    let report = cross_validate(
        &data.examples,
        |seed| {
            build_for_seed(
                &model_config,
                &data.vocab,
                table.as_ref(),
                model_config.embeddings_trainable,
                seed,
            )
        },
        &train_cfg,
        &plan,
        thread_cap(),
    )?;

    let config_json = config.canonical_json();
    let config_hash = content_hash(&config_json);
    let log_path = config
        .run_log
        .clone()
        .unwrap_or_else(|| "runs.jsonl".to_string());
    let entry = RunLogEntry::new(
        config_hash.clone(),
        format!("cv --folds {folds}"),
        dataset_fingerprint(&data.examples),
        None,
        Vec::new(),
    )
    .with_config(serde_json::to_value(&config).expect("config serializes"));
    append_run_log(Path::new(&log_path), &entry)?;

    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["config_hash"] = json!(config_hash);
    emit(&value);
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    region_sizes: &[usize],
    folds: usize,
    overrides: &[String],
) -> Result<()> {
    if region_sizes.is_empty() {
        return Err(Error::Config("--region-sizes must not be empty".to_string()));
    }
    let config = RunConfig::load(config_path, overrides)?;
    let table = load_vector_table(&config)?;
    let dim = resolve_dim(&config, table.as_ref())?;
    let base = config.model_config(dim)?;
    let data = prepare_examples(&config, base.max_len)?;
    let train_cfg = config.train_config()?;
    let plan = FoldPlan {
        k: folds,
        seed: config.seed,
        stratified: true,
    };
    let rows = sweep_region_sizes(
        &data.examples,
        region_sizes,
        |size, seed| {
            let mut model_config = base.clone();
            model_config.region_sizes = vec![size; base.region_sizes.len()];
            model_config.validate()?;
            build_for_seed(
                &model_config,
                &data.vocab,
                table.as_ref(),
                model_config.embeddings_trainable,
                seed,
            )
        },
        &train_cfg,
        &plan,
        thread_cap(),
    )?;
    emit(&serde_json::to_value(&rows).expect("rows serialize"));
    Ok(())
}

/// Reduced architectures for the gradient check: vocabulary of 20 rows,
/// 8-dimensional embeddings, short sequences.
pub fn reduced_gradcheck_model(which: &str) -> Result<(Model<f64>, Vec<u32>)> {
    let tokens: Vec<String> = (0..18).map(|i| format!("tok{i}")).collect();
    let vocab = Vocabulary::build([tokens], 18).0;
    let (config, max_len) = match which {
        "a" => {
            let mut config = ModelConfig::model_a(8);
            config.max_len = 12;
            config.feature_maps = vec![6];
            (config, 12)
        }
        "b" => {
            let mut config = ModelConfig::model_b(8);
            config.max_len = 50;
            config.feature_maps = vec![4, 4, 4];
            config.pool_sizes = vec![PoolSpec::Size(2), PoolSpec::Size(2), PoolSpec::Global];
            config.dense_hidden = Some(10);
            (config, 50)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown model `{other}` (expected a or b)"
            )))
        }
    };
    let embedding: EmbeddingMatrix<f64> = assemble_matrix(&vocab, None, 8, 1234, true)?;
    let model = build_model(&config, embedding, 1234)?;
    // deterministic synthetic input covering the id range
    let ids: Vec<u32> = (0..max_len).map(|i| 2 + (i * 7 % 18) as u32).collect();
    Ok((model, ids))
}

fn cmd_gradcheck(which: &str, tolerance: f64) -> Result<()> {
    let (mut model, ids) = reduced_gradcheck_model(which)?;
    let report = gradient_check(&mut model.stack, &ids, 1, tolerance, 99)?;
    emit(&json!({
        "model": which,
        "coords_checked": report.coords_checked,
        "max_rel_err": report.max_rel_err,
        "worst_param": report.worst_param,
        "tolerance": report.tolerance,
        "pass": report.pass,
    }));
    if !report.pass {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {} >= tolerance {} at {}[{}]",
            report.max_rel_err, report.tolerance, report.worst_param, report.worst_index
        )));
    }
    Ok(())
}

fn cmd_describe(config_path: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let dim = match (config.embedding_dim, config.embedding_source.as_str()) {
        (Some(d), _) => d,
        (None, "random") => {
            return Err(Error::Config(
                "embedding_dim is required with the random embedding source".to_string(),
            ))
        }
        (None, source) => {
            let path = config.embedding_path.as_deref().ok_or_else(|| {
                Error::Config("embedding_path is required for file embedding sources".to_string())
            })?;
            peek_dimension(Path::new(path), source)?
        }
    };
    let model_config = config.model_config(dim)?;
    let trace = shape_trace(&model_config)?;
    let entries: Vec<serde_json::Value> = trace
        .iter()
        .map(|(name, shape)| json!({ "layer": name, "shape": shape }))
        .collect();
    emit(&json!({
        "variant": model_config.variant,
        "trace": entries,
    }));
    Ok(())
}

fn cmd_predict(checkpoint: &Path, vocab_path: &Path, text: &str) -> Result<()> {
    let model = load_checkpoint(&mut open_buffered(checkpoint)?)?;
    let vocab = Vocabulary::read(open_buffered(vocab_path)?)?;
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Input("text tokenizes to nothing".to_string()));
    }
    let ids = encode(&tokens, &vocab, model.config.max_len);
    let (label, probs) = model.predict(&ids)?;
    emit(&json!({
        "label": if label == 1 { "positive" } else { "negative" },
        "probabilities": {
            "negative": probs[0],
            "positive": probs[1],
        },
    }));
    Ok(())
}

fn cmd_inspect_vectors(path: &Path, format: &str) -> Result<()> {
    let table = match format {
        "glove_text" => parse_text_vectors(open_buffered(path)?, false)?,
        "fasttext_text" => parse_text_vectors(open_buffered(path)?, true)?,
        "word2vec_binary" => parse_binary_vectors(open_buffered(path)?)?,
        other => {
            return Err(Error::Config(format!(
                "unknown format `{other}` (expected glove_text, fasttext_text, or word2vec_binary)"
            )))
        }
    };
    println!("format {format}");
    println!("count {}", table.len());
    println!("dimension {}", table.dimension());
    println!(
        "skipped {}",
        table.skipped_duplicates + table.skipped_invalid_utf8
    );
    Ok(())
}
