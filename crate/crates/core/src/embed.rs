//! Word-vector tables in the plain-text `.vec` format plus exact cosine kNN.
//!
//! A `.vec` file starts with a header line `V n` followed by `V` lines of the
//! form `token v1 ... vn`. Vectors are kept exactly as read; no normalisation
//! happens at load time.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("empty vector file")]
    EmptyFile,
    #[error("malformed header {0:?}: expected `<count> <dim>`")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: invalid number {value:?}")]
    InvalidNumber { line: usize, value: String },
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("header announces {expected} rows but the file holds {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("query vector has zero norm")]
    ZeroQuery,
    #[error("requested {k} neighbours but only {available} tokens are eligible")]
    KTooLarge { k: usize, available: usize },
    #[error("query has length {found}, table dimension is {expected}")]
    QueryLength { expected: usize, found: usize },
}

/// One entry of a ranked neighbour list. `rank` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub token: String,
    pub row: usize,
    pub rank: usize,
    pub distance: f64,
}

/// Vocabulary plus a dense row-major `V x n` matrix of word vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    words: Vec<String>,
    vectors: Vec<f64>,
    dim: usize,
    index: HashMap<String, usize>,
    norms: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from parallel token and row-major vector storage.
    pub fn new(words: Vec<String>, vectors: Vec<f64>, dim: usize) -> Result<Self, EmbedError> {
        if words.is_empty() {
            return Err(EmbedError::EmptyFile);
        }
        if dim == 0 || vectors.len() != words.len() * dim {
            return Err(EmbedError::DimensionMismatch {
                line: 0,
                expected: words.len() * dim.max(1),
                found: vectors.len(),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (row, word) in words.iter().enumerate() {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(EmbedError::InvalidToken(word.clone()));
            }
            if index.insert(word.clone(), row).is_some() {
                return Err(EmbedError::DuplicateToken {
                    line: row + 2,
                    token: word.clone(),
                });
            }
        }
        let norms = vectors.chunks_exact(dim).map(l2_norm).collect();
        Ok(Self {
            words,
            vectors,
            dim,
            index,
            norms,
        })
    }

    pub fn from_rows<S: Into<String>>(
        rows: impl IntoIterator<Item = (S, Vec<f64>)>,
    ) -> Result<Self, EmbedError> {
        let mut words = Vec::new();
        let mut vectors = Vec::new();
        let mut dim = None;
        for (i, (word, row)) in rows.into_iter().enumerate() {
            let expected = *dim.get_or_insert(row.len());
            if row.len() != expected {
                return Err(EmbedError::DimensionMismatch {
                    line: i + 2,
                    expected,
                    found: row.len(),
                });
            }
            words.push(word.into());
            vectors.extend_from_slice(&row);
        }
        Self::new(words, vectors, dim.unwrap_or(0))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, row: usize) -> &str {
        &self.words[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Looks up a token; unknown tokens are an error, never a null vector.
    pub fn vector(&self, token: &str) -> Result<&[f64], EmbedError> {
        self.index_of(token)
            .map(|row| self.row(row))
            .ok_or_else(|| EmbedError::UnknownToken(token.to_string()))
    }

    /// Exact cosine kNN by full scan. Ties keep vocabulary order.
    pub fn nearest_neighbors(
        &self,
        query: &[f64],
        k: usize,
        exclude: &[&str],
    ) -> Result<Vec<Neighbor>, EmbedError> {
        if query.len() != self.dim {
            return Err(EmbedError::QueryLength {
                expected: self.dim,
                found: query.len(),
            });
        }
        let query_norm = l2_norm(query);
        if query_norm < 1e-12 {
            return Err(EmbedError::ZeroQuery);
        }
        let excluded: HashSet<usize> = exclude.iter().filter_map(|t| self.index_of(t)).collect();
        let available = self.len() - excluded.len();
        if k > available {
            return Err(EmbedError::KTooLarge { k, available });
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|row| !excluded.contains(row))
            .map(|row| (self.cosine_distance_to_row(query, query_norm, row), row))
            .collect();
        let by_distance =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, by_distance);
            scored.truncate(k);
        }
        scored.sort_by(by_distance);
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (distance, row))| Neighbor {
                token: self.words[row].clone(),
                row,
                rank: i + 1,
                distance,
            })
            .collect())
    }

    /// `1 - cos(query, row)` clamped to `[0, 2]`; zero rows sit at distance 1.
    pub fn cosine_distance_to_row(&self, query: &[f64], query_norm: f64, row: usize) -> f64 {
        let norm = self.norms[row];
        if norm == 0.0 || query_norm == 0.0 {
            return 1.0;
        }
        let cos = dot(query, self.row(row)) / (query_norm * norm);
        (1.0 - cos.clamp(-1.0, 1.0)).clamp(0.0, 2.0)
    }

    /// Writes the table in `.vec` format with six significant digits.
    pub fn write_vectors<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (word, row) in self.words.iter().zip(self.rows()) {
            write!(out, "{word}")?;
            for v in row {
                write!(out, " {v:.5e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_vectors(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut out = io::BufWriter::new(File::create(path)?);
        self.write_vectors(&mut out)?;
        out.flush()
    }
}

/// Reads a `.vec` file, keeping the first `limit` rows when given.
pub fn load_vectors(
    path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<EmbeddingTable, EmbedError> {
    let file = File::open(path)?;
    parse_vectors(BufReader::new(file), limit)
}

pub fn parse_vectors<R: BufRead>(
    reader: R,
    limit: Option<usize>,
) -> Result<EmbeddingTable, EmbedError> {
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            None => return Err(EmbedError::EmptyFile),
            Some(line) => {
                let line = line?;
                let line = line.trim_end_matches('\r');
                if !line.trim().is_empty() {
                    break line.to_string();
                }
            }
        }
    };
    let (count, dim) = parse_header(&header)?;
    let wanted = limit.map_or(count, |l| l.min(count));
    if wanted == 0 {
        return Err(EmbedError::EmptyFile);
    }

    let mut words = Vec::with_capacity(wanted);
    let mut vectors = Vec::with_capacity(wanted * dim);
    let mut seen = HashSet::with_capacity(wanted);
    for (i, line) in lines.enumerate() {
        if words.len() == wanted {
            break;
        }
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let start = vectors.len();
        for field in fields {
            let value: f64 = field.parse().map_err(|_| EmbedError::InvalidNumber {
                line: line_no,
                value: field.to_string(),
            })?;
            vectors.push(value);
        }
        let found = vectors.len() - start;
        if found != dim {
            return Err(EmbedError::DimensionMismatch {
                line: line_no,
                expected: dim,
                found,
            });
        }
        if !seen.insert(token.to_string()) {
            return Err(EmbedError::DuplicateToken {
                line: line_no,
                token: token.to_string(),
            });
        }
        words.push(token.to_string());
    }
    if words.len() < wanted {
        return Err(EmbedError::TruncatedFile {
            expected: wanted,
            found: words.len(),
        });
    }
    EmbeddingTable::new(words, vectors, dim)
}

fn parse_header(line: &str) -> Result<(usize, usize), EmbedError> {
    let bad = || EmbedError::MalformedHeader(line.to_string());
    let mut fields = line.split_whitespace();
    let count: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let dim: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if fields.next().is_some() || count == 0 || dim == 0 {
        return Err(bad());
    }
    Ok((count, dim))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, limit: Option<usize>) -> Result<EmbeddingTable, EmbedError> {
        parse_vectors(text.as_bytes(), limit)
    }

    #[test]
    fn loads_small_file() {
        let table = parse("2 3\napple 1 0 0\npear 0 1 0", None).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dim(), 3);
        assert_eq!(table.words(), ["apple", "pear"]);
        assert_eq!(table.row(1), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn limit_truncates_in_file_order() {
        let table = parse("2 3\napple 1 0 0\npear 0 1 0", Some(1)).unwrap();
        assert_eq!(table.words(), ["apple"]);
    }

    #[test]
    fn short_row_is_rejected() {
        let err = parse("2 3\napple 1 0\npear 0 1 0", None).unwrap_err();
        assert!(matches!(
            err,
            EmbedError::DimensionMismatch {
                line: 2,
                expected: 3,
                found: 2
            }
        ));
    }

    #[test]
    fn header_and_duplicates() {
        assert!(matches!(
            parse("x 3\n", None),
            Err(EmbedError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse("2\n", None),
            Err(EmbedError::MalformedHeader(_))
        ));
        assert!(matches!(parse("", None), Err(EmbedError::EmptyFile)));
        assert!(matches!(
            parse("2 1\na 1\na 2\n", None),
            Err(EmbedError::DuplicateToken { .. })
        ));
        assert!(matches!(
            parse("3 1\na 1\nb 2\n", None),
            Err(EmbedError::TruncatedFile {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn accepts_crlf_and_trailing_space() {
        let table = parse("2 2\r\na 1 2 \r\nb 3 4\r\n", None).unwrap();
        assert_eq!(table.row(0), [1.0, 2.0]);
        assert_eq!(table.row(1), [3.0, 4.0]);
    }

    #[test]
    fn unknown_lookup_fails() {
        let table = parse("1 1\na 1\n", None).unwrap();
        assert!(matches!(
            table.vector("b"),
            Err(EmbedError::UnknownToken(_))
        ));
    }

    fn abc() -> EmbeddingTable {
        EmbeddingTable::from_rows([
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![0.9, 0.1]),
        ])
        .unwrap()
    }

    #[test]
    fn knn_matches_hand_computed_distances() {
        let table = abc();
        let hits = table.nearest_neighbors(&[1.0, 0.0], 2, &[]).unwrap();
        assert_eq!(hits[0].token, "a");
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[1].token, "c");
        // 1 - 0.9 / sqrt(0.82)
        assert!((hits[1].distance - 0.006_116_265_326_381).abs() < 1e-12);
        assert_eq!(hits[1].rank, 2);
    }

    #[test]
    fn knn_self_exclusion_and_bounds() {
        let table = abc();
        let hits = table.nearest_neighbors(table.row(0), 1, &["a"]).unwrap();
        assert_eq!(hits[0].token, "c");
        assert!(matches!(
            table.nearest_neighbors(&[1.0, 0.0], 4, &[]),
            Err(EmbedError::KTooLarge { k: 4, available: 3 })
        ));
        assert!(matches!(
            table.nearest_neighbors(&[0.0, 0.0], 1, &[]),
            Err(EmbedError::ZeroQuery)
        ));
    }

    #[test]
    fn knn_ties_keep_vocabulary_order() {
        let table = EmbeddingTable::from_rows([
            ("x", vec![2.0, 0.0]),
            ("y", vec![1.0, 0.0]),
            ("z", vec![0.0, 1.0]),
        ])
        .unwrap();
        let hits = table.nearest_neighbors(&[1.0, 0.0], 2, &[]).unwrap();
        assert_eq!(hits[0].token, "x");
        assert_eq!(hits[1].token, "y");
    }

    #[test]
    fn norm_cache_matches_rows() {
        let table = abc();
        for row in 0..table.len() {
            let direct = table.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((table.norm(row) - direct).abs() <= 1e-9 * direct.max(1.0));
        }
    }
}
