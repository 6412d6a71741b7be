//! Training loops, evaluation, cross-validation, and hyperparameter sweeps.
//!
//! Everything reported here is a deterministic function of (seed, data,
//! config). Training itself is single-threaded; evaluation and
//! cross-validation folds may run on a thread pool, with per-item results
//! collected in input order so outcomes do not depend on thread count.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{batches, make_folds, FoldPlan, Polarity};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::softmax_xent;
use crate::nn::stack::{GradSet, Pass};
use crate::nn::tensor::{scalar, Scalar, Tensor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::text::LabeledExample;

/// Training regime: batching, epochs, update rule, and the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(flatten)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record validation metrics every this many batches (besides per epoch).
    pub eval_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, optimizer: OptimizerKind, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            optimizer,
            seed,
            eval_every: None,
        }
    }
}

/// Binary confusion counts; rows are the true label, columns the prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

/// Evaluation result over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub example_count: usize,
    pub confusion: Confusion,
}

/// One history record: end-of-epoch metrics, or a mid-epoch validation
/// snapshot when `eval_every` is set (then `batch` is present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<HistoryRecord>,
}

impl FitReport {
    /// Final-epoch metrics (run logs record final-epoch values).
    pub fn final_record(&self) -> Option<&HistoryRecord> {
        self.history.iter().rev().find(|r| r.batch.is_none())
    }
}

/// Deterministic evaluation: accuracy, mean loss, and the confusion matrix
/// over all examples. Prediction is the argmax of the softmax probabilities,
/// ties to the lower class index.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    examples: &[LabeledExample],
    threads: usize,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty example set".to_string()));
    }
    let per_example = |ex: &LabeledExample| -> Result<(f64, usize)> {
        let (logits, _) = model.stack.forward(&ex.token_ids, &mut Pass::Eval)?;
        let sm = softmax_xent(logits.data(), ex.label.code() as usize)?;
        let mut best = 0usize;
        for (i, &p) in sm.probs.iter().enumerate() {
            if p > sm.probs[best] {
                best = i;
            }
        }
        Ok((sm.loss.to_f64().unwrap_or(f64::NAN), best))
    };

    // Per-example results land in input order, so the reduction below is
    // identical for any thread count.
    let results: Vec<Result<(f64, usize)>> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| examples.par_iter().map(per_example).collect())
    } else {
        examples.iter().map(per_example).collect()
    };

    let mut confusion = Confusion::default();
    let mut loss_sum = 0.0f64;
    for (ex, result) in examples.iter().zip(results) {
        let (loss, pred) = result?;
        loss_sum += loss;
        match (ex.label, pred) {
            (Polarity::Negative, 0) => confusion.tn += 1,
            (Polarity::Negative, _) => confusion.fp += 1,
            (Polarity::Positive, 0) => confusion.fn_ += 1,
            (Polarity::Positive, _) => confusion.tp += 1,
        }
    }
    let n = examples.len();
    Ok(Metrics {
        accuracy: (confusion.tn + confusion.tp) as f64 / n as f64,
        loss: loss_sum / n as f64,
        example_count: n,
        confusion,
    })
}

/// Train in place: per epoch, seeded shuffled batches, mean-of-batch loss
/// backward, one optimizer step per batch. History records eval-mode metrics
/// on the train set (and validation set, when given) after every epoch.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &[LabeledExample],
    validation: Option<&[LabeledExample]>,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Input("cannot fit on an empty train set".to_string()));
    }
    if cfg.batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".to_string()));
    }
    let mut optimizer: Optimizer<T> = Optimizer::new(cfg.optimizer);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        for (batch_idx, batch) in batches(&indices, cfg.batch_size, epoch_seed).iter().enumerate() {
            let mut acc: Option<GradSet<T>> = None;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let ex = &train[i];
                let (logits, caches) = model
                    .stack
                    .forward(&ex.token_ids, &mut Pass::Train(&mut dropout_rng))?;
                let sm = softmax_xent(logits.data(), ex.label.code() as usize)?;
                batch_loss += sm.loss.to_f64().unwrap_or(f64::NAN);
                let grads = model
                    .stack
                    .backward(&caches, &Tensor::vector(sm.grad_logits))?;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let slot = acc.get_mut(&name).expect("same parameter set");
                            for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                                *a = *a + b;
                            }
                        }
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            let mut grads = acc.expect("non-empty batch");
            let inv: T = scalar(1.0 / batch.len() as f64);
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v = *v * inv;
                }
            }
            model.stack.apply_freeze(&mut grads);
            optimizer.step(&mut model.stack, &grads)?;

            if let (Some(every), Some(val)) = (cfg.eval_every, validation) {
                if every > 0 && (batch_idx + 1) % every == 0 {
                    history.push(HistoryRecord {
                        epoch,
                        batch: Some(batch_idx),
                        train: None,
                        validation: Some(evaluate(model, val, 1)?),
                    });
                }
            }
        }
        history.push(HistoryRecord {
            epoch,
            batch: None,
            train: Some(evaluate(model, train, 1)?),
            validation: match validation {
                Some(val) => Some(evaluate(model, val, 1)?),
                None => None,
            },
        });
    }
    Ok(FitReport { history })
}

/// Per-fold metrics plus the headline statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub per_fold: Vec<Metrics>,
    /// Unweighted arithmetic mean of per-fold accuracies.
    pub mean_accuracy: f64,
    /// Population standard deviation over folds.
    pub stddev_accuracy: f64,
}

/// K-fold cross-validation. Each fold trains a freshly built model (the
/// builder receives `cfg.seed + fold_index`) on the other folds and
/// evaluates on its own; folds share nothing mutable, so they may run
/// concurrently and are reported in fold order either way.
pub fn cross_validate<T, F>(
    examples: &[LabeledExample],
    build: F,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    threads: usize,
) -> Result<CvReport>
where
    T: Scalar,
    F: Fn(u64) -> Result<Model<T>> + Sync,
{
    let labels: Vec<Polarity> = examples.iter().map(|e| e.label).collect();
    let folds = make_folds(&labels, plan)?;
    let run_fold = |fold_idx: usize| -> Result<Metrics> {
        let with_fold = |e: Error| Error::Numeric(format!("fold {fold_idx}: {e}"));
        let fold = &folds[fold_idx];
        let in_fold: std::collections::HashSet<usize> = fold.iter().copied().collect();
        let train_set: Vec<LabeledExample> = (0..examples.len())
            .filter(|i| !in_fold.contains(i))
            .map(|i| examples[i].clone())
            .collect();
        let test_set: Vec<LabeledExample> = fold.iter().map(|&i| examples[i].clone()).collect();
        let fold_seed = cfg.seed.wrapping_add(fold_idx as u64);
        let mut model = build(fold_seed).map_err(with_fold)?;
        let fold_cfg = TrainConfig {
            seed: fold_seed,
            ..cfg.clone()
        };
        fit(&mut model, &train_set, None, &fold_cfg).map_err(with_fold)?;
        evaluate(&model, &test_set, 1).map_err(with_fold)
    };

    let per_fold: Vec<Metrics> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..folds.len())
                .into_par_iter()
                .map(run_fold)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..folds.len()).map(run_fold).collect::<Result<Vec<_>>>()?
    };

    let k = per_fold.len() as f64;
    let mean = per_fold.iter().map(|m| m.accuracy).sum::<f64>() / k;
    let var = per_fold
        .iter()
        .map(|m| (m.accuracy - mean).powi(2))
        .sum::<f64>()
        / k;
    Ok(CvReport {
        per_fold,
        mean_accuracy: mean,
        stddev_accuracy: var.sqrt(),
    })
}

/// One row of the region-size sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub region_size: usize,
    pub mean_accuracy: f64,
    pub per_fold: Vec<Metrics>,
}

/// Cross-validate one model per region size; the builder receives
/// `(region_size, seed)` and must produce the corresponding architecture.
pub fn sweep_region_sizes<T, F>(
    examples: &[LabeledExample],
    sizes: &[usize],
    build: F,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    threads: usize,
) -> Result<Vec<SweepRow>>
where
    T: Scalar,
    F: Fn(usize, u64) -> Result<Model<T>> + Sync,
{
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let report = cross_validate(examples, |seed| build(size, seed), cfg, plan, threads)?;
        rows.push(SweepRow {
            region_size: size,
            mean_accuracy: report.mean_accuracy,
            per_fold: report.per_fold,
        });
    }
    Ok(rows)
}

/// Fingerprint of an example set: count plus a content hash covering every
/// label and token id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub example_count: usize,
    pub content_hash: String,
}

pub fn dataset_fingerprint(examples: &[LabeledExample]) -> DatasetFingerprint {
    let mut hasher = Sha256::new();
    for ex in examples {
        hasher.update([ex.label.code()]);
        for &id in &ex.token_ids {
            hasher.update(id.to_le_bytes());
        }
        hasher.update([0xff]);
    }
    DatasetFingerprint {
        example_count: examples.len(),
        content_hash: hex_digest(hasher),
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 hex of arbitrary config text (used for run-log config hashes).
pub fn content_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_digest(hasher)
}

/// One side-by-side optimizer comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRun {
    pub optimizer: String,
    pub final_train: Option<Metrics>,
    pub test: Metrics,
    pub data_hash: String,
}

/// Two full fit+evaluate runs identical in everything but the update rule.
pub fn compare_optimizers<T, F>(
    train_set: &[LabeledExample],
    test_set: &[LabeledExample],
    build: F,
    cfg: &TrainConfig,
    optimizers: [OptimizerKind; 2],
) -> Result<[OptimizerRun; 2]>
where
    T: Scalar,
    F: Fn(u64) -> Result<Model<T>>,
{
    let train_fp = dataset_fingerprint(train_set);
    let test_fp = dataset_fingerprint(test_set);
    let data_hash = content_hash(&format!(
        "{}+{}",
        train_fp.content_hash, test_fp.content_hash
    ));
    let mut runs = Vec::with_capacity(2);
    for kind in optimizers {
        let mut model = build(cfg.seed)?;
        let run_cfg = TrainConfig {
            optimizer: kind,
            ..cfg.clone()
        };
        let report = fit(&mut model, train_set, None, &run_cfg)?;
        runs.push(OptimizerRun {
            optimizer: kind.name().to_string(),
            final_train: report.final_record().and_then(|r| r.train),
            test: evaluate(&model, test_set, 1)?,
            data_hash: data_hash.clone(),
        });
    }
    let [a, b]: [OptimizerRun; 2] = runs.try_into().expect("two runs");
    Ok([a, b])
}

/// One line of the append-only run log. `config` echoes the run's effective
/// configuration in full so result tables stay auditable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub timestamp: u64,
    pub config_hash: String,
    pub command: String,
    pub dataset: DatasetFingerprint,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub history: Vec<HistoryRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl RunLogEntry {
    pub fn new(
        config_hash: String,
        command: String,
        dataset: DatasetFingerprint,
        metrics: Option<Metrics>,
        history: Vec<HistoryRecord>,
    ) -> Self {
        RunLogEntry {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_hash,
            command,
            dataset,
            metrics,
            history,
            config: None,
        }
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }
}

/// Append one JSON line to the run log.
pub fn append_run_log(path: &std::path::Path, entry: &RunLogEntry) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(entry)
        .map_err(|e| Error::Config(format!("run log serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}
