//! Streaming, filtering, labeling, splitting, and batching of the review corpus.
//!
//! Input files are JSON lines (one object per line). Malformed lines are
//! counted and skipped, never fatal: large crowd-sourced dumps contain junk.
//! All shuffling goes through seeded ChaCha8 so splits and batch orders are
//! stable across runs and platforms.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

/// One raw review record from the corpus dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub review_id: String,
    pub business_id: String,
    /// Star rating, always in 1..=5.
    pub stars: u8,
    pub text: String,
}

/// Binary sentiment label. Integer codes are fixed (0/1) for checkpoint stability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative = 0,
    Positive = 1,
}

impl Polarity {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Polarity> {
        match code {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

/// Map a star rating to a polarity: 1-2 negative, 4-5 positive, 3 dropped.
pub fn map_label(stars: u8) -> Result<Option<Polarity>> {
    match stars {
        1 | 2 => Ok(Some(Polarity::Negative)),
        3 => Ok(None),
        4 | 5 => Ok(Some(Polarity::Positive)),
        other => Err(Error::Input(format!("stars must be in 1..=5, got {other}"))),
    }
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(default)]
    review_id: String,
    business_id: String,
    stars: f64,
    text: String,
}

/// Counters exposed by [`ReviewReader`] after a pass over the stream.
///
/// `yielded + malformed + filtered` always equals the number of lines seen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: u64,
    pub yielded: u64,
    pub malformed: u64,
    pub filtered: u64,
}

/// Lazy reader over a JSON-lines review stream.
///
/// Yields one [`Review`] per valid line in file order. Lines that fail to
/// parse, miss a required field, carry a non-integral or out-of-range star
/// value, or have empty text are counted as malformed and skipped. Lines whose
/// business is absent from the allowlist (when one is supplied) are counted as
/// filtered and skipped.
pub struct ReviewReader<R: BufRead> {
    reader: R,
    allowlist: Option<HashSet<String>>,
    stats: IngestStats,
    buf: String,
}

impl<R: BufRead> ReviewReader<R> {
    pub fn new(reader: R, allowlist: Option<HashSet<String>>) -> Self {
        ReviewReader {
            reader,
            allowlist,
            stats: IngestStats::default(),
            buf: String::new(),
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn parse_line(&self, line: &str) -> Option<Review> {
        let raw: RawReview = serde_json::from_str(line).ok()?;
        // Non-integer stars (e.g. 4.5) are malformed; exactly-integral floats pass.
        if raw.stars.fract() != 0.0 || !(1.0..=5.0).contains(&raw.stars) {
            return None;
        }
        if raw.text.trim().is_empty() {
            return None;
        }
        Some(Review {
            review_id: raw.review_id,
            business_id: raw.business_id,
            stars: raw.stars as u8,
            text: raw.text,
        })
    }
}

impl<R: BufRead> Iterator for ReviewReader<R> {
    type Item = Review;

    fn next(&mut self) -> Option<Review> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                // Unreadable bytes (e.g. invalid UTF-8) count as a malformed line.
                Err(_) => {
                    self.stats.lines += 1;
                    self.stats.malformed += 1;
                    continue;
                }
            }
            self.stats.lines += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                self.stats.malformed += 1;
                continue;
            }
            match self.parse_line(line) {
                Some(review) => {
                    if let Some(allow) = &self.allowlist {
                        if !allow.contains(&review.business_id) {
                            self.stats.filtered += 1;
                            continue;
                        }
                    }
                    self.stats.yielded += 1;
                    return Some(review);
                }
                None => {
                    self.stats.malformed += 1;
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct RawBusiness {
    business_id: String,
    city: String,
}

/// Business-id allowlist built from a city filter, plus its skip counter.
#[derive(Debug, Clone, Default)]
pub struct CityAllowlist {
    pub ids: HashSet<String>,
    pub skipped: u64,
}

/// Collect ids of businesses whose `city` matches any requested city.
/// Matching is case-insensitive and whitespace-trimmed: the dump's `city`
/// field is inconsistently cased.
pub fn build_city_allowlist<R: BufRead>(reader: R, cities: &[String]) -> Result<CityAllowlist> {
    let wanted: HashSet<String> = cities
        .iter()
        .map(|c| c.trim().to_lowercase())
        .collect();
    let mut out = CityAllowlist::default();
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => {
                out.skipped += 1;
                continue;
            }
        };
        if line.trim().is_empty() {
            out.skipped += 1;
            continue;
        }
        match serde_json::from_str::<RawBusiness>(&line) {
            Ok(biz) => {
                if wanted.contains(&biz.city.trim().to_lowercase()) {
                    out.ids.insert(biz.business_id);
                }
            }
            Err(_) => out.skipped += 1,
        }
    }
    Ok(out)
}

/// How to carve a corpus into train/validation/test index sets.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitPlan {
    /// Draw `validation_count` examples, then split the remainder by fraction:
    /// `train_fraction` of it to train, the rest to test.
    FractionSplit {
        train_fraction: f64,
        validation_count: usize,
        seed: u64,
    },
    /// Draw validation, then test, then up to `train_count` for train.
    FixedCounts {
        train_count: usize,
        validation_count: usize,
        test_count: usize,
        seed: u64,
    },
}

/// Disjoint index sets produced by [`split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split `n` example indices per the plan. The assignment is a deterministic
/// function of (seed, n).
pub fn split(n: usize, plan: &SplitPlan) -> Result<Splits> {
    let seed = match plan {
        SplitPlan::FractionSplit { seed, .. } | SplitPlan::FixedCounts { seed, .. } => *seed,
    };
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    match *plan {
        SplitPlan::FractionSplit {
            train_fraction,
            validation_count,
            ..
        } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "train_fraction must be in (0,1), got {train_fraction}"
                )));
            }
            if validation_count > n {
                return Err(Error::Config(format!(
                    "validation_count {validation_count} exceeds corpus size {n}"
                )));
            }
            let validation = indices[..validation_count].to_vec();
            let rest = &indices[validation_count..];
            let train_len = (train_fraction * rest.len() as f64).floor() as usize;
            Ok(Splits {
                train: rest[..train_len].to_vec(),
                validation,
                test: rest[train_len..].to_vec(),
            })
        }
        SplitPlan::FixedCounts {
            train_count,
            validation_count,
            test_count,
            ..
        } => {
            let total = train_count + validation_count + test_count;
            if total > n {
                return Err(Error::Config(format!(
                    "requested {total} examples (train {train_count} + validation \
                     {validation_count} + test {test_count}) but corpus has {n}"
                )));
            }
            let validation = indices[..validation_count].to_vec();
            let test = indices[validation_count..validation_count + test_count].to_vec();
            let start = validation_count + test_count;
            let train = indices[start..start + train_count].to_vec();
            Ok(Splits {
                train,
                validation,
                test,
            })
        }
    }
}

/// Cross-validation fold layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
}

/// Partition example indices into `k` folds.
///
/// Fold sizes differ by at most one. In stratified mode each class's examples
/// are dealt round-robin with a cursor that carries over between classes, so
/// per-class counts across folds also differ by at most one.
pub fn make_folds(labels: &[Polarity], plan: &FoldPlan) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if plan.k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {}", plan.k)));
    }
    if plan.k > n {
        return Err(Error::Config(format!(
            "k = {} exceeds example count {n}",
            plan.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); plan.k];
    let mut cursor = 0usize;
    if plan.stratified {
        for class in [Polarity::Negative, Polarity::Positive] {
            let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            members.shuffle(&mut rng);
            for idx in members {
                folds[cursor].push(idx);
                cursor = (cursor + 1) % plan.k;
            }
        }
    } else {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        for idx in indices {
            folds[cursor].push(idx);
            cursor = (cursor + 1) % plan.k;
        }
    }
    Ok(folds)
}

/// Shuffle `indices` with the epoch seed and chunk into batches of
/// `batch_size`; the final batch may be smaller.
pub fn batches(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut shuffled = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    shuffled.shuffle(&mut rng);
    shuffled.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One line of the materialized dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub label: Polarity,
    pub stars: u8,
    pub text: String,
}

/// Write records as `<label>\t<stars>\t<text>` lines; tab, newline, and
/// carriage-return characters inside the text become single spaces.
pub fn write_dataset<'a, W: Write>(
    writer: &mut W,
    records: impl IntoIterator<Item = &'a DatasetRecord>,
) -> Result<usize> {
    let mut written = 0usize;
    for rec in records {
        let clean: String = rec
            .text
            .chars()
            .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        writeln!(writer, "{}\t{}\t{}", rec.label.code(), rec.stars, clean)?;
        written += 1;
    }
    Ok(written)
}

/// Read a materialized dataset file back. Strict: every line must have the
/// three tab-separated fields with a 0/1 label and stars in 1..=5.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let loc = format!("dataset line {}", lineno + 1);
        let mut parts = line.splitn(3, '\t');
        let label_str = parts
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing label field"))?;
        let stars_str = parts
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing stars field"))?;
        let text = parts
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing text field"))?
            .to_string();
        let label_code: u8 = label_str
            .parse()
            .map_err(|_| Error::parse(&loc, format!("bad label `{label_str}`")))?;
        let label = Polarity::from_code(label_code)
            .ok_or_else(|| Error::parse(&loc, format!("label must be 0 or 1, got {label_code}")))?;
        let stars: u8 = stars_str
            .parse()
            .map_err(|_| Error::parse(&loc, format!("bad stars `{stars_str}`")))?;
        if !(1..=5).contains(&stars) {
            return Err(Error::parse(&loc, format!("stars must be 1..=5, got {stars}")));
        }
        out.push(DatasetRecord { label, stars, text });
    }
    Ok(out)
}
