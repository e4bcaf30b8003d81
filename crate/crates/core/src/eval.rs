//! Monolingual embedding quality: word-pair similarity (Spearman against
//! gold scores) and 3CosAdd analogy accuracy.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dims::profiles_from_codes;
use crate::embed::{dot, EmbedError, EmbeddingTable};
use crate::math::{spearman_rho, MathError};
use crate::model::{ModelCheckpoint, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("only {used} similarity pairs are in vocabulary (need at least 2)")]
    InsufficientPairs { used: usize },
    #[error("no useful latent dimensions")]
    NoUsefulDims,
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub word_a: String,
    pub word_b: String,
    pub gold: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityPairset {
    pub pairs: Vec<SimilarityPair>,
}

impl SimilarityPairset {
    /// Parses `word1<TAB>word2<TAB>score` lines; `#` starts a comment line.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, EvalError> {
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |message: String| EvalError::Parse {
                line: i + 1,
                message,
            };
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let gold: f64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad score {:?}", fields[2])))?;
            if !gold.is_finite() {
                return Err(parse_err("score is not finite".into()));
            }
            pairs.push(SimilarityPair {
                word_a: fields[0].trim().to_string(),
                word_b: fields[1].trim().to_string(),
                gold,
            });
        }
        Ok(Self { pairs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyQuestion {
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalogySection {
    pub name: String,
    pub questions: Vec<AnalogyQuestion>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnalogySet {
    pub sections: Vec<AnalogySection>,
}

impl AnalogySet {
    /// Google analogy format: `: section` headers, then `a b c d` lines.
    /// Tokens are lowercased.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, EvalError> {
        let mut sections: Vec<AnalogySection> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix(':') {
                sections.push(AnalogySection {
                    name: name.trim().to_string(),
                    questions: Vec::new(),
                });
                continue;
            }
            let words: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
            let [a, b, c, d]: [String; 4] =
                words
                    .try_into()
                    .map_err(|w: Vec<String>| EvalError::Parse {
                        line: i + 1,
                        message: format!("expected 4 tokens, found {}", w.len()),
                    })?;
            if sections.is_empty() {
                sections.push(AnalogySection {
                    name: "default".into(),
                    questions: Vec::new(),
                });
            }
            sections
                .last_mut()
                .expect("pushed above")
                .questions
                .push(AnalogyQuestion { a, b, c, d });
        }
        Ok(Self { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.sections.iter().map(|s| s.questions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evenly strided subsample of at most `limit` questions across all
    /// sections (deterministic).
    pub fn subsample(&self, limit: usize) -> AnalogySet {
        let total = self.len();
        if total <= limit {
            return self.clone();
        }
        let mut index = 0usize;
        let mut next_pick = 0usize;
        let mut picked = 0usize;
        let sections = self
            .sections
            .iter()
            .map(|section| {
                let mut questions = Vec::new();
                for q in &section.questions {
                    if picked < limit && index == next_pick {
                        questions.push(q.clone());
                        picked += 1;
                        next_pick = picked * total / limit;
                    }
                    index += 1;
                }
                AnalogySection {
                    name: section.name.clone(),
                    questions,
                }
            })
            .collect();
        AnalogySet { sections }
    }
}

/// Case-insensitive view of a table's vocabulary. The first row (in file
/// order) wins when several tokens fold to the same lowercase form.
struct FoldedIndex {
    rows: HashMap<String, usize>,
}

impl FoldedIndex {
    fn new(table: &EmbeddingTable, limit: usize) -> Self {
        let mut rows = HashMap::with_capacity(limit);
        for (row, word) in table.words().iter().take(limit).enumerate() {
            rows.entry(word.to_lowercase()).or_insert(row);
        }
        Self { rows }
    }

    fn get(&self, token: &str) -> Option<usize> {
        self.rows.get(&token.to_lowercase()).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub rho: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Spearman correlation between gold scores and cosine similarities.
/// Pairs with an out-of-vocabulary word are skipped and counted.
pub fn semantic_similarity_score(
    table: &EmbeddingTable,
    pairs: &SimilarityPairset,
) -> Result<SimilarityScore, EvalError> {
    let index = FoldedIndex::new(table, table.len());
    let mut gold = Vec::new();
    let mut model = Vec::new();
    let mut skipped = 0;
    for pair in &pairs.pairs {
        match (index.get(&pair.word_a), index.get(&pair.word_b)) {
            (Some(a), Some(b)) => {
                let (na, nb) = (table.norm(a), table.norm(b));
                let cos = if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(table.row(a), table.row(b)) / (na * nb)
                };
                gold.push(pair.gold);
                model.push(cos);
            }
            _ => skipped += 1,
        }
    }
    if gold.len() < 2 {
        return Err(EvalError::InsufficientPairs { used: gold.len() });
    }
    let rho = spearman_rho(&gold, &model)?;
    Ok(SimilarityScore {
        rho,
        used: gold.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionScore {
    pub name: String,
    /// `None` when every question in the section was skipped.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub answered: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogyScore {
    /// `None` when every question was skipped.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub answered: usize,
    pub skipped: usize,
    pub per_section: Vec<SectionScore>,
}

/// 3CosAdd: predict `argmax cos(v, b - a + c)` over unit-normalised rows,
/// excluding `a`, `b` and `c`. With `candidate_limit`, only the first rows
/// of the table form the vocabulary; questions touching other words are
/// skipped.
pub fn analogy_accuracy(
    table: &EmbeddingTable,
    questions: &AnalogySet,
    candidate_limit: Option<usize>,
) -> AnalogyScore {
    let limit = candidate_limit.unwrap_or(table.len()).min(table.len());
    let index = FoldedIndex::new(table, limit);
    let dim = table.dim();
    let unit: Vec<f64> = (0..limit)
        .flat_map(|row| {
            let norm = table.norm(row);
            table
                .row(row)
                .iter()
                .map(move |v| if norm > 0.0 { v / norm } else { 0.0 })
        })
        .collect();
    let unit_row = |r: usize| &unit[r * dim..(r + 1) * dim];

    let per_section: Vec<SectionScore> = questions
        .sections
        .iter()
        .map(|section| {
            let outcomes: Vec<Option<bool>> = section
                .questions
                .par_iter()
                .map(|q| {
                    let rows = [&q.a, &q.b, &q.c, &q.d].map(|w| index.get(w));
                    let [Some(a), Some(b), Some(c), Some(d)] = rows else {
                        return None;
                    };
                    let target: Vec<f64> = (0..dim)
                        .map(|i| unit_row(b)[i] - unit_row(a)[i] + unit_row(c)[i])
                        .collect();
                    let mut best: Option<(usize, f64)> = None;
                    for r in 0..limit {
                        if r == a || r == b || r == c {
                            continue;
                        }
                        let score = dot(unit_row(r), &target);
                        if best.is_none_or(|(_, s)| score > s) {
                            best = Some((r, score));
                        }
                    }
                    Some(best.is_some_and(|(r, _)| r == d))
                })
                .collect();
            let answered = outcomes.iter().flatten().count();
            let correct = outcomes.iter().flatten().filter(|ok| **ok).count();
            SectionScore {
                name: section.name.clone(),
                accuracy: (answered > 0).then(|| correct as f64 / answered as f64),
                correct,
                answered,
                skipped: outcomes.len() - answered,
            }
        })
        .collect();

    let correct = per_section.iter().map(|s| s.correct).sum();
    let answered: usize = per_section.iter().map(|s| s.answered).sum();
    AnalogyScore {
        accuracy: (answered > 0).then(|| correct as f64 / answered as f64),
        correct,
        answered,
        skipped: per_section.iter().map(|s| s.skipped).sum(),
        per_section,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSelection {
    All,
    UsefulOnly,
}

impl std::str::FromStr for DimSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(DimSelection::All),
            "useful" | "useful_only" => Ok(DimSelection::UsefulOnly),
            other => Err(format!(
                "unknown dimension selection {other:?} (expected all or useful)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEvaluation {
    pub dims: Vec<usize>,
    pub useful_dims: usize,
    pub semeval: Option<SimilarityScore>,
    pub analogy: Option<AnalogyScore>,
}

/// Builds a table whose rows are the latent means of `table`'s words,
/// restricted to `dims`.
pub fn latent_table(
    model: &ModelCheckpoint,
    table: &EmbeddingTable,
    dims: &[usize],
) -> Result<EmbeddingTable, EvalError> {
    let codes = model.encode_table(table)?;
    latent_table_from_codes(&codes, table, dims)
}

pub(crate) fn latent_table_from_codes(
    codes: &crate::model::LatentCodes,
    table: &EmbeddingTable,
    dims: &[usize],
) -> Result<EmbeddingTable, EvalError> {
    if dims.is_empty() {
        return Err(EvalError::NoUsefulDims);
    }
    let mut vectors = Vec::with_capacity(table.len() * dims.len());
    for row in 0..table.len() {
        let mean = codes.mean(row);
        vectors.extend(dims.iter().map(|&j| mean[j]));
    }
    Ok(EmbeddingTable::new(
        table.words().to_vec(),
        vectors,
        dims.len(),
    )?)
}

/// Runs both metrics on latent means over all or only the useful dims.
pub fn evaluate_latent(
    model: &ModelCheckpoint,
    table: &EmbeddingTable,
    pairs: Option<&SimilarityPairset>,
    questions: Option<&AnalogySet>,
    selection: DimSelection,
    candidate_limit: Option<usize>,
) -> Result<LatentEvaluation, EvalError> {
    let codes = model.encode_table(table)?;
    let useful: Vec<bool> = profiles_from_codes(&codes)
        .iter()
        .map(|p| p.useful)
        .collect();
    let useful_dims = useful.iter().filter(|u| **u).count();
    let dims: Vec<usize> = match selection {
        DimSelection::All => (0..model.latent_dim()).collect(),
        DimSelection::UsefulOnly => (0..model.latent_dim()).filter(|&j| useful[j]).collect(),
    };
    let view = latent_table_from_codes(&codes, table, &dims)?;
    let semeval = pairs
        .map(|p| semantic_similarity_score(&view, p))
        .transpose()?;
    let analogy = questions.map(|q| analogy_accuracy(&view, q, candidate_limit));
    Ok(LatentEvaluation {
        dims,
        useful_dims,
        semeval,
        analogy,
    })
}
