//! Synthetic embeddings with a known low-rank factor structure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embed::{dot, l2_norm, EmbedError, EmbeddingTable};
use crate::eval::{SimilarityPair, SimilarityPairset};

#[derive(Debug, Clone)]
pub struct FactorData {
    pub table: EmbeddingTable,
    /// Row-major `samples x rank` latent factors.
    pub factors: Vec<f64>,
    pub rank: usize,
    /// Row-major `dim x rank` mixing matrix.
    pub mixing: Vec<f64>,
}

impl FactorData {
    pub fn factor(&self, row: usize) -> &[f64] {
        &self.factors[row * self.rank..(row + 1) * self.rank]
    }
}

/// `x = A f + noise * e` with `f` and `e` standard normal and `A` a fixed
/// random `dim x rank` matrix with `N(0, 1/rank)` entries, so every clean
/// coordinate has unit variance. Tokens are `w0`, `w1`, ...
pub fn factor_table(
    samples: usize,
    rank: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<FactorData, EmbedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let scale = (rank as f64).sqrt().recip();
    let mixing: Vec<f64> = (0..dim * rank).map(|_| scale * gauss()).collect();
    let mut factors = Vec::with_capacity(samples * rank);
    let mut vectors = Vec::with_capacity(samples * dim);
    for _ in 0..samples {
        let f: Vec<f64> = (0..rank).map(|_| gauss()).collect();
        for i in 0..dim {
            vectors.push(dot(&mixing[i * rank..(i + 1) * rank], &f) + noise * gauss());
        }
        factors.extend(f);
    }
    let words = (0..samples).map(|i| format!("w{i}")).collect();
    Ok(FactorData {
        table: EmbeddingTable::new(words, vectors, dim)?,
        factors,
        rank,
        mixing,
    })
}

/// Word pairs scored by the cosine similarity of their true factors.
pub fn factor_similarity_pairs(data: &FactorData, count: usize, seed: u64) -> SimilarityPairset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.table.len();
    let pairs = (0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let (fa, fb) = (data.factor(a), data.factor(b));
            SimilarityPair {
                word_a: data.table.word(a).to_string(),
                word_b: data.table.word(b).to_string(),
                gold: dot(fa, fb) / (l2_norm(fa) * l2_norm(fb)),
            }
        })
        .collect();
    SimilarityPairset { pairs }
}
