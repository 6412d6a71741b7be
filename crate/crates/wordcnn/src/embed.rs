//! Pretrained word-vector file formats and embedding-matrix assembly.
//!
//! Two on-disk formats are supported, both bit-exact under write-then-parse:
//!
//! - text: optional `<count> <dim>` header line, then one
//!   `token v1 ... vD` line per entry (GloVe has no header, fastText `.vec`
//!   does);
//! - binary: ASCII `<count> <dim>\n` header, then per entry the token bytes,
//!   one space, and `dim` little-endian IEEE-754 f32 values, optionally
//!   followed by a newline (the word2vec convention).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{scalar, Scalar, Tensor};
use crate::text::{Vocabulary, PAD_ID, UNK_ID};

/// Half-width of the uniform interval used to initialize rows with no
/// pretrained vector.
pub const OOV_INIT_BOUND: f64 = 0.25;

/// Parsed word-vector table. Entry order matches the file so writing is the
/// exact inverse of parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dimension: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
    /// Count from the file header, when the format carries one.
    pub declared_count: Option<usize>,
    /// Later occurrences of an already-seen token (first one wins).
    pub skipped_duplicates: u64,
    /// Binary entries whose token bytes were not valid UTF-8.
    pub skipped_invalid_utf8: u64,
    /// Whether binary entries end with a newline after the float block.
    trailing_newlines: bool,
}

impl WordVectorTable {
    pub fn new(dimension: usize) -> WordVectorTable {
        WordVectorTable {
            dimension,
            tokens: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            declared_count: None,
            skipped_duplicates: 0,
            skipped_invalid_utf8: 0,
            trailing_newlines: true,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.tokens
            .iter()
            .zip(&self.vectors)
            .map(|(t, v)| (t.as_str(), v.as_slice()))
    }

    /// Insert an entry; duplicates keep the first vector and bump the counter.
    pub fn insert(&mut self, token: String, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::shape(
                "WordVectorTable::insert",
                format!("vector length {} != dimension {}", vector.len(), self.dimension),
            ));
        }
        if self.index.contains_key(&token) {
            self.skipped_duplicates += 1;
            return Ok(());
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.vectors.push(vector);
        Ok(())
    }
}

/// Parse the text vector format. With `expect_header` the first line must be
/// `<count> <dim>`; otherwise the dimension is inferred from the first data
/// line. Any line whose value count disagrees is a parse error naming the line.
pub fn parse_text_vectors<R: BufRead>(reader: R, expect_header: bool) -> Result<WordVectorTable> {
    let mut lines = reader.lines().enumerate();
    let mut dimension: Option<usize> = None;
    let mut declared: Option<usize> = None;

    if expect_header {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "empty file"))?;
        let line = line?;
        let loc = format!("line {}", idx + 1);
        let mut parts = line.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(&loc, "header must be `<count> <dim>`"))?;
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(&loc, "header must be `<count> <dim>`"))?;
        if parts.next().is_some() {
            return Err(Error::parse(&loc, "header must be exactly two integers"));
        }
        if dim == 0 {
            return Err(Error::parse(&loc, "dimension must be >= 1"));
        }
        declared = Some(count);
        dimension = Some(dim);
    }

    let mut table: Option<WordVectorTable> = None;
    for (idx, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {}", idx + 1);
        let mut parts = line.split(' ');
        let token = parts
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing token"))?;
        if token.is_empty() {
            return Err(Error::parse(&loc, "empty token"));
        }
        let values: Vec<&str> = parts.collect();
        let dim = match dimension {
            Some(d) => d,
            None => {
                if values.is_empty() {
                    return Err(Error::parse(&loc, "data line has no values"));
                }
                dimension = Some(values.len());
                values.len()
            }
        };
        if values.len() != dim {
            return Err(Error::parse(
                &loc,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        let mut vector = Vec::with_capacity(dim);
        for v in values {
            let x: f32 = v
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad float `{v}`")))?;
            vector.push(x);
        }
        let table = table.get_or_insert_with(|| WordVectorTable::new(dim));
        table.insert(token.to_string(), vector)?;
    }

    let mut table = table.unwrap_or_else(|| match dimension {
        Some(d) => WordVectorTable::new(d),
        None => WordVectorTable::new(0),
    });
    if table.dimension == 0 {
        return Err(Error::parse("end of file", "no vector entries found"));
    }
    table.declared_count = declared;
    if let Some(count) = declared {
        if table.len() + table.skipped_duplicates as usize != count {
            return Err(Error::parse(
                "end of file",
                format!("header declared {count} entries, file has {}", table.len()),
            ));
        }
    }
    Ok(table)
}

/// Write the text format. Floats use the shortest decimal form that parses
/// back to the same f32, so write-then-parse is the identity.
pub fn write_text_vectors<W: Write>(
    writer: &mut W,
    table: &WordVectorTable,
    with_header: bool,
) -> Result<()> {
    if with_header {
        writeln!(writer, "{} {}", table.len(), table.dimension())?;
    }
    for (token, vector) in table.iter() {
        write!(writer, "{token}")?;
        for v in vector {
            write!(writer, " {v}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

fn read_until_byte<R: BufRead>(reader: &mut R, delim: u8, loc: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    reader.read_until(delim, &mut buf)?;
    match buf.pop() {
        Some(b) if b == delim => Ok(buf),
        _ => Err(Error::parse(
            loc,
            format!("stream ended before `{}`", delim as char),
        )),
    }
}

/// Peek one byte; consume and report true if it equals `expected`.
fn eat_byte_if<R: BufRead>(reader: &mut R, expected: u8) -> Result<bool> {
    let buf = reader.fill_buf()?;
    if buf.first() == Some(&expected) {
        reader.consume(1);
        return Ok(true);
    }
    Ok(false)
}

/// Parse the word2vec binary format. Exactly `count` entries are read; a
/// truncated stream is a parse error naming the entry index. Tokens that are
/// not valid UTF-8 are skipped with a counter rather than failing the file.
pub fn parse_binary_vectors<R: BufRead>(mut reader: R) -> Result<WordVectorTable> {
    let header = read_until_byte(&mut reader, b'\n', "header")?;
    let header = String::from_utf8(header)
        .map_err(|_| Error::parse("header", "header is not UTF-8"))?;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse("header", "header must be `<count> <dim>`"))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse("header", "header must be `<count> <dim>`"))?;
    if parts.next().is_some() {
        return Err(Error::parse("header", "header must be exactly two integers"));
    }
    if dim == 0 {
        return Err(Error::parse("header", "dimension must be >= 1"));
    }

    let mut table = WordVectorTable::new(dim);
    table.declared_count = Some(count);
    let mut saw_newline = false;
    for entry in 0..count {
        let loc = format!("entry {}", entry + 1);
        let token_bytes = read_until_byte(&mut reader, b' ', &loc)?;
        let mut floats = vec![0u8; dim * 4];
        reader
            .read_exact(&mut floats)
            .map_err(|_| Error::parse(&loc, "stream truncated inside float block"))?;
        if eat_byte_if(&mut reader, b'\n')? {
            saw_newline = true;
        }
        let vector: Vec<f32> = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        match String::from_utf8(token_bytes) {
            Ok(token) => table.insert(token, vector)?,
            Err(_) => table.skipped_invalid_utf8 += 1,
        }
    }
    table.trailing_newlines = saw_newline;
    Ok(table)
}

/// Write the word2vec binary format. Entry order, float bytes, and the
/// presence of per-entry trailing newlines all mirror what was parsed, so
/// write-then-parse round-trips byte-for-byte.
pub fn write_binary_vectors<W: Write>(writer: &mut W, table: &WordVectorTable) -> Result<()> {
    writeln!(writer, "{} {}", table.len(), table.dimension())?;
    for (token, vector) in table.iter() {
        writer.write_all(token.as_bytes())?;
        writer.write_all(b" ")?;
        for v in vector {
            writer.write_all(&v.to_le_bytes())?;
        }
        if table.trailing_newlines {
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Where an embedding row's values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowProvenance {
    Pretrained,
    RandomOov,
    PadZero,
}

/// The model's V x D embedding table with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T: Scalar> {
    pub matrix: Tensor<T>,
    pub trainable: bool,
    pub provenance: Vec<RowProvenance>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dimension(&self) -> usize {
        self.matrix.cols()
    }

    pub fn count(&self, tag: RowProvenance) -> usize {
        self.provenance.iter().filter(|&&p| p == tag).count()
    }
}

/// Draw from the open interval (-bound, bound), resampling the (measure-zero
/// but representable) boundary hits so the result is strictly inside after
/// conversion to `T`.
fn uniform_open<T: Scalar>(rng: &mut ChaCha8Rng, bound: f64) -> T {
    loop {
        let x: f64 = rng.gen_range(-bound..bound);
        let v: T = scalar(x);
        if v > scalar(-bound) && v < scalar(bound) {
            return v;
        }
    }
}

/// Assemble the embedding matrix for a vocabulary.
///
/// Row 0 (PAD) is zero. The UNK row and every vocabulary token missing from
/// the table are sampled uniformly from (-0.25, 0.25); tokens present in the
/// table copy their file vector. With no table every non-PAD row is random
/// (the end-to-end learned configuration). Deterministic in (vocab, table,
/// seed): rows are visited in id order.
pub fn assemble_matrix<T: Scalar>(
    vocab: &Vocabulary,
    table: Option<&WordVectorTable>,
    dimension: usize,
    seed: u64,
    trainable: bool,
) -> Result<EmbeddingMatrix<T>> {
    if let Some(table) = table {
        if table.dimension() != dimension {
            return Err(Error::Config(format!(
                "embedding dimension {dimension} != table dimension {}",
                table.dimension()
            )));
        }
    }
    let vocab_size = vocab.size();
    let mut matrix = Tensor::zeros(&[vocab_size, dimension]);
    let mut provenance = vec![RowProvenance::PadZero; vocab_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for id in 0..vocab_size as u32 {
        if id == PAD_ID {
            continue; // row stays zero
        }
        let pretrained = if id == UNK_ID {
            None
        } else {
            let token = vocab.token(id).expect("dense ids");
            table.and_then(|t| t.get(token))
        };
        match pretrained {
            Some(vector) => {
                for (d, &v) in vector.iter().enumerate() {
                    *matrix.at2_mut(id as usize, d) = scalar(v as f64);
                }
                provenance[id as usize] = RowProvenance::Pretrained;
            }
            None => {
                for d in 0..dimension {
                    *matrix.at2_mut(id as usize, d) = uniform_open(&mut rng, OOV_INIT_BOUND);
                }
                provenance[id as usize] = RowProvenance::RandomOov;
            }
        }
    }

    Ok(EmbeddingMatrix {
        matrix,
        trainable,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn vocab_of(tokens: &[&str]) -> Vocabulary {
        let streams = vec![tokens.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        Vocabulary::build(streams, tokens.len().max(1)).0
    }

    #[test]
    fn text_parse_without_header() {
        let input = "cat 1.0 2.0\ndog 3.0 4.0\n";
        let table = parse_text_vectors(Cursor::new(input.as_bytes()), false).unwrap();
        assert_eq!(table.dimension(), 2);
        assert_eq!(table.get("cat"), Some(&[1.0f32, 2.0][..]));
        assert_eq!(table.get("dog"), Some(&[3.0f32, 4.0][..]));
        assert_eq!(table.declared_count, None);
    }

    #[test]
    fn text_parse_header_arity_violation() {
        let input = "2 3\na 1 2 3 4\n";
        let err = parse_text_vectors(Cursor::new(input.as_bytes()), true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "got: {msg}");
    }

    #[test]
    fn text_parse_inconsistent_dimension_names_line() {
        let input = "a 1.0 2.0\nb 3.0\n";
        let err = parse_text_vectors(Cursor::new(input.as_bytes()), false).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn text_parse_empty_file_is_error() {
        assert!(parse_text_vectors(Cursor::new(b""), false).is_err());
        assert!(parse_text_vectors(Cursor::new(b""), true).is_err());
    }

    #[test]
    fn text_parse_header_counts_entries() {
        let input = "1 2\na 1.0 2.0\n";
        let table = parse_text_vectors(Cursor::new(input.as_bytes()), true).unwrap();
        assert_eq!(table.declared_count, Some(1));
        let bad = "3 2\na 1.0 2.0\n";
        assert!(parse_text_vectors(Cursor::new(bad.as_bytes()), true).is_err());
    }

    #[test]
    fn binary_parse_basic() {
        let mut bytes = b"1 2\nhi ".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_le_bytes());
        bytes.push(b'\n');
        let table = parse_binary_vectors(Cursor::new(&bytes)).unwrap();
        assert_eq!(table.dimension(), 2);
        assert_eq!(table.get("hi"), Some(&[1.0f32, -1.0][..]));
    }

    #[test]
    fn binary_parse_truncation_names_entry() {
        let mut bytes = b"2 2\nhi ".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.push(b'\n');
        // second entry missing entirely
        let err = parse_binary_vectors(Cursor::new(&bytes)).unwrap_err();
        assert!(err.to_string().contains("entry 2"), "got: {err}");
    }

    #[test]
    fn binary_parse_bad_header() {
        assert!(parse_binary_vectors(Cursor::new(b"x y\n")).is_err());
        assert!(parse_binary_vectors(Cursor::new(b"1\n")).is_err());
    }

    #[test]
    fn binary_duplicate_tokens_first_wins() {
        let mut bytes = b"2 1\n".to_vec();
        bytes.extend_from_slice(b"a ");
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.push(b'\n');
        bytes.extend_from_slice(b"a ");
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.push(b'\n');
        let table = parse_binary_vectors(Cursor::new(&bytes)).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table.skipped_duplicates, 1);
        assert_eq!(table.get("a"), Some(&[1.0f32][..]));
    }

    #[test]
    fn binary_invalid_utf8_token_is_skipped() {
        let mut bytes = b"1 1\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe, b' ']);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.push(b'\n');
        let table = parse_binary_vectors(Cursor::new(&bytes)).unwrap();
        assert_eq!(table.len(), 0);
        assert_eq!(table.skipped_invalid_utf8, 1);
    }

    #[test]
    fn binary_round_trip_without_newlines() {
        let mut bytes = b"2 1\n".to_vec();
        bytes.extend_from_slice(b"a ");
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(b"b ");
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        let table = parse_binary_vectors(Cursor::new(&bytes)).unwrap();
        let mut out = Vec::new();
        write_binary_vectors(&mut out, &table).unwrap();
        assert_eq!(out, bytes);
    }

    #[test]
    fn assemble_copies_pretrained_rows() {
        let vocab = vocab_of(&["a"]);
        let mut table = WordVectorTable::new(2);
        table.insert("a".to_string(), vec![0.5, 0.5]).unwrap();
        let m = assemble_matrix::<f32>(&vocab, Some(&table), 2, 1, true).unwrap();
        let id = vocab.id("a").unwrap() as usize;
        assert_eq!(m.matrix.at2(id, 0), 0.5);
        assert_eq!(m.matrix.at2(id, 1), 0.5);
        assert_eq!(m.provenance[id], RowProvenance::Pretrained);
        assert_eq!(m.provenance[0], RowProvenance::PadZero);
        assert_eq!(m.provenance[1], RowProvenance::RandomOov); // UNK
    }

    #[test]
    fn assemble_oov_rows_in_open_interval() {
        let vocab = vocab_of(&["q"]);
        let table = WordVectorTable::new(2); // "q" not present
        let m = assemble_matrix::<f32>(&vocab, Some(&table), 2, 9, true).unwrap();
        let id = vocab.id("q").unwrap() as usize;
        assert_eq!(m.provenance[id], RowProvenance::RandomOov);
        for d in 0..2 {
            let v = m.matrix.at2(id, d);
            assert!(v > -0.25 && v < 0.25, "coordinate {v} outside open interval");
        }
    }

    #[test]
    fn assemble_without_table_is_all_random() {
        let vocab = vocab_of(&["x", "y", "z"]);
        let m = assemble_matrix::<f32>(&vocab, None, 4, 2, true).unwrap();
        assert!(m.trainable);
        assert_eq!(m.count(RowProvenance::PadZero), 1);
        assert_eq!(m.count(RowProvenance::RandomOov), vocab.size() - 1);
        assert!(m.matrix.data()[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_dimension_mismatch_is_config_error() {
        let vocab = vocab_of(&["a"]);
        let table = WordVectorTable::new(3);
        assert!(matches!(
            assemble_matrix::<f32>(&vocab, Some(&table), 2, 0, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn assemble_is_deterministic_and_accounted() {
        let vocab = vocab_of(&["a", "b", "c", "d"]);
        let mut table = WordVectorTable::new(3);
        table.insert("b".to_string(), vec![1.0, 2.0, 3.0]).unwrap();
        table.insert("d".to_string(), vec![4.0, 5.0, 6.0]).unwrap();
        table.insert("zzz".to_string(), vec![0.0, 0.0, 0.0]).unwrap();
        let m1 = assemble_matrix::<f32>(&vocab, Some(&table), 3, 77, false).unwrap();
        let m2 = assemble_matrix::<f32>(&vocab, Some(&table), 3, 77, false).unwrap();
        assert_eq!(m1, m2);
        // coverage accounting: pretrained = |vocab tokens in table|
        assert_eq!(m1.count(RowProvenance::Pretrained), 2);
        assert_eq!(
            m1.count(RowProvenance::Pretrained) + m1.count(RowProvenance::RandomOov) + 1,
            vocab.size()
        );
    }

    fn arb_token() -> impl Strategy<Value = String> {
        // Tokens may be multibyte UTF-8 but never contain space or newline.
        proptest::collection::vec(
            prop_oneof![
                proptest::char::range('a', 'z'),
                proptest::char::range('0', '9'),
                Just('é'),
                Just('日'),
                Just('_'),
            ],
            1..8,
        )
        .prop_map(|cs| cs.into_iter().collect())
    }

    fn arb_table() -> impl Strategy<Value = WordVectorTable> {
        (1usize..5).prop_flat_map(|dim| {
            proptest::collection::btree_map(
                arb_token(),
                proptest::collection::vec(-100.0f32..100.0, dim..=dim),
                1..12,
            )
            .prop_map(move |entries| {
                let mut table = WordVectorTable::new(dim);
                for (t, v) in entries {
                    table.insert(t, v).unwrap();
                }
                table
            })
        })
    }

    proptest! {
        #[test]
        fn text_write_parse_round_trip(table in arb_table(), header in any::<bool>()) {
            let mut bytes = Vec::new();
            write_text_vectors(&mut bytes, &table, header).unwrap();
            let parsed = parse_text_vectors(Cursor::new(&bytes), header).unwrap();
            prop_assert_eq!(parsed.dimension(), table.dimension());
            prop_assert_eq!(parsed.len(), table.len());
            for (t, v) in table.iter() {
                prop_assert_eq!(parsed.get(t).unwrap(), v);
            }
            let mut again = Vec::new();
            write_text_vectors(&mut again, &parsed, header).unwrap();
            prop_assert_eq!(bytes, again);
        }

        #[test]
        fn binary_write_parse_round_trip(table in arb_table()) {
            let mut bytes = Vec::new();
            write_binary_vectors(&mut bytes, &table).unwrap();
            let parsed = parse_binary_vectors(Cursor::new(&bytes)).unwrap();
            for (t, v) in table.iter() {
                prop_assert_eq!(parsed.get(t).unwrap(), v);
            }
            let mut again = Vec::new();
            write_binary_vectors(&mut again, &parsed).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn oov_sampling_stays_strictly_inside_over_a_million_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1_000_000 {
            let v: f32 = uniform_open(&mut rng, OOV_INIT_BOUND);
            assert!(v > -0.25 && v < 0.25);
        }
    }
}
