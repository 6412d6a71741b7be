//! Tokenization, the frequency-capped vocabulary, and fixed-length encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::corpus::Polarity;
use crate::error::{Error, Result};

/// Reserved id for the padding token.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercase and split on maximal runs of non-alphanumeric characters.
/// Mirrors the usual preprocessing for lowercase pretrained word vectors.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token table capped at the most frequent `capacity` corpus tokens.
///
/// Ids are dense: 0 = PAD, 1 = UNK, then corpus tokens in descending
/// frequency order with ties broken by first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    frequencies: Vec<u64>,
    capacity: usize,
}

/// Counters from a vocabulary build, for coverage reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VocabBuildStats {
    /// Token occurrences seen across all streams.
    pub total_occurrences: u64,
    /// Distinct tokens seen.
    pub distinct_tokens: usize,
    /// Occurrences covered by retained tokens.
    pub retained_occurrences: u64,
}

impl VocabBuildStats {
    /// Fraction of corpus token occurrences the vocabulary retains.
    pub fn coverage(&self) -> f64 {
        if self.total_occurrences == 0 {
            0.0
        } else {
            self.retained_occurrences as f64 / self.total_occurrences as f64
        }
    }
}

impl Vocabulary {
    /// Count tokens across the streams and retain the `capacity` most frequent.
    pub fn build<I, S>(streams: I, capacity: usize) -> (Vocabulary, VocabBuildStats)
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = String>,
    {
        assert!(capacity >= 1, "capacity must be >= 1");
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut first_seen = 0usize;
        let mut total = 0u64;
        for stream in streams {
            for token in stream {
                total += 1;
                counts
                    .entry(token)
                    .and_modify(|e| e.0 += 1)
                    .or_insert_with(|| {
                        let order = first_seen;
                        first_seen += 1;
                        (1, order)
                    });
            }
        }
        let distinct = counts.len();
        let mut ranked: Vec<(String, u64, usize)> = counts
            .into_iter()
            .map(|(tok, (freq, seen))| (tok, freq, seen))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(capacity);

        let mut vocab = Vocabulary::empty(capacity);
        let mut retained = 0u64;
        for (token, freq, _) in ranked {
            retained += freq;
            vocab.push_token(token, freq);
        }
        let stats = VocabBuildStats {
            total_occurrences: total,
            distinct_tokens: distinct,
            retained_occurrences: retained,
        };
        (vocab, stats)
    }

    fn empty(capacity: usize) -> Vocabulary {
        Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            frequencies: vec![0, 0],
            capacity,
        }
    }

    fn push_token(&mut self, token: String, freq: u64) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.frequencies.push(freq);
    }

    /// Total id count including PAD and UNK.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.frequencies.get(id as usize).copied()
    }

    /// Corpus tokens in id order (PAD/UNK excluded).
    pub fn corpus_tokens(&self) -> impl Iterator<Item = (&str, u64)> {
        self.id_to_token
            .iter()
            .zip(&self.frequencies)
            .skip(2)
            .map(|(t, &f)| (t.as_str(), f))
    }

    /// Write one `token<TAB>frequency` line per corpus token, in id order.
    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        for (token, freq) in self.corpus_tokens() {
            writeln!(writer, "{token}\t{freq}")?;
        }
        Ok(())
    }

    /// Rebuild a vocabulary from its file form; ids are assigned in file
    /// order starting at 2, reproducing the original assignment.
    pub fn read<R: BufRead>(reader: R) -> Result<Vocabulary> {
        let mut vocab = Vocabulary::empty(0);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let loc = format!("vocabulary line {}", lineno + 1);
            let (token, freq_str) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&loc, "expected token<TAB>frequency"))?;
            if token.is_empty() {
                return Err(Error::parse(&loc, "empty token"));
            }
            if vocab.token_to_id.contains_key(token) {
                return Err(Error::parse(&loc, format!("duplicate token `{token}`")));
            }
            let freq: u64 = freq_str
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad frequency `{freq_str}`")))?;
            vocab.push_token(token.to_string(), freq);
        }
        vocab.capacity = vocab.size().saturating_sub(2);
        Ok(vocab)
    }
}

/// Map tokens to ids (unknowns become UNK), truncate to the first `max_len`
/// tokens, and pad the tail with PAD to exactly `max_len`.
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 1, "max_len must be >= 1");
    let mut ids: Vec<u32> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect();
    ids.resize(max_len, PAD_ID);
    ids
}

/// A fixed-length encoded review with its polarity label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub token_ids: Vec<u32>,
    pub label: Polarity,
}

impl LabeledExample {
    /// Rejects all-PAD encodings: an example must carry at least one real token.
    pub fn new(token_ids: Vec<u32>, label: Polarity) -> Result<LabeledExample> {
        if token_ids.iter().all(|&id| id == PAD_ID) {
            return Err(Error::Input(
                "example encodes to all-PAD (empty after tokenization)".to_string(),
            ));
        }
        Ok(LabeledExample { token_ids, label })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn tokenize_splits_on_nonalnum_runs() {
        assert_eq!(tokenize("Great food!!"), vec!["great", "food"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("5-star place"), vec!["5", "star", "place"]);
        assert_eq!(tokenize("  ...  "), Vec::<String>::new());
    }

    fn stream(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_caps_by_frequency() {
        let (vocab, _) = Vocabulary::build([stream(&["a", "b", "a"])], 1);
        assert_eq!(vocab.size(), 3);
        assert_eq!(vocab.id("a"), Some(2));
        assert_eq!(vocab.id("b"), None);
    }

    #[test]
    fn build_breaks_ties_by_first_seen() {
        let (vocab, _) = Vocabulary::build([stream(&["a", "b"]), stream(&["b", "c"])], 2);
        assert_eq!(vocab.id("b"), Some(2));
        assert_eq!(vocab.id("a"), Some(3));
        assert_eq!(vocab.id("c"), None);
    }

    #[test]
    fn build_empty_streams_only_pad_unk() {
        let (vocab, stats) = Vocabulary::build(Vec::<Vec<String>>::new(), 5);
        assert_eq!(vocab.size(), 2);
        assert_eq!(stats.total_occurrences, 0);
        assert_eq!(stats.coverage(), 0.0);
    }

    #[test]
    fn encode_pads_truncates_and_maps_unknowns() {
        let (vocab, _) = Vocabulary::build([stream(&["a", "a"])], 4);
        assert_eq!(encode(&stream(&["a"]), &vocab, 3), vec![2, 0, 0]);
        assert_eq!(encode(&stream(&["x"]), &vocab, 2), vec![1, 0]);
        let long = vec!["a".to_string(); 1200];
        let ids = encode(&long, &vocab, 1000);
        assert_eq!(ids.len(), 1000);
        assert!(ids.iter().all(|&id| id == 2));
    }

    #[test]
    fn labeled_example_rejects_all_pad() {
        assert!(LabeledExample::new(vec![0, 0, 0], Polarity::Positive).is_err());
        assert!(LabeledExample::new(vec![2, 0, 0], Polarity::Positive).is_ok());
    }

    #[test]
    fn vocab_file_round_trip() {
        let (vocab, _) = Vocabulary::build(
            [stream(&["red", "red", "green", "blue", "red", "green"])],
            10,
        );
        let mut buf = Vec::new();
        vocab.write(&mut buf).unwrap();
        let loaded = Vocabulary::read(Cursor::new(&buf)).unwrap();
        assert_eq!(loaded.id("red"), vocab.id("red"));
        assert_eq!(loaded.id("green"), vocab.id("green"));
        assert_eq!(loaded.frequency(2), Some(3));
        let mut again = Vec::new();
        loaded.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn vocab_read_rejects_duplicates() {
        let bad = "a\t3\na\t2\n";
        assert!(Vocabulary::read(Cursor::new(bad.as_bytes())).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
        proptest::collection::vec(
            proptest::collection::vec("[a-e][a-z]{0,3}", 0..20),
            0..6,
        )
    }

    proptest! {
        #[test]
        fn encode_length_is_always_max_len(
            tokens in proptest::collection::vec("[a-z]{1,4}", 0..30),
            max_len in 1usize..40,
        ) {
            let (vocab, _) = Vocabulary::build([stream(&["a", "b"])], 2);
            prop_assert_eq!(encode(&tokens, &vocab, max_len).len(), max_len);
        }

        #[test]
        fn vocab_size_bounded_and_frequencies_ordered(corpus in arb_corpus(), cap in 1usize..8) {
            let (vocab, _) = Vocabulary::build(corpus.clone(), cap);
            prop_assert!(vocab.size() <= cap + 2);
            // Every retained token at least as frequent as every discarded one.
            let mut true_counts: HashMap<String, u64> = HashMap::new();
            for s in &corpus {
                for t in s {
                    *true_counts.entry(t.clone()).or_insert(0) += 1;
                }
            }
            let min_kept = vocab.corpus_tokens().map(|(_, f)| f).min();
            if let Some(min_kept) = min_kept {
                for (tok, freq) in &true_counts {
                    if vocab.id(tok).is_none() {
                        prop_assert!(*freq <= min_kept);
                    }
                }
            }
        }

        #[test]
        fn decode_of_encode_reproduces_prefix(corpus in arb_corpus(), cap in 1usize..8, max_len in 1usize..24) {
            let (vocab, _) = Vocabulary::build(corpus.clone(), cap);
            for doc in &corpus {
                let ids = encode(doc, &vocab, max_len);
                let decoded: Vec<&str> = ids
                    .iter()
                    .take_while(|&&id| id != PAD_ID)
                    .map(|&id| vocab.token(id).unwrap())
                    .collect();
                let expected: Vec<String> = doc
                    .iter()
                    .take(max_len)
                    .map(|t| {
                        if vocab.id(t).is_some() {
                            t.clone()
                        } else {
                            "<unk>".to_string()
                        }
                    })
                    .collect();
                prop_assert_eq!(decoded, expected);
            }
        }
    }
}
