//! Perturbation probing of single latent dimensions, projection scenes and
//! word clouds.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dims::{profiles_from_codes, useful_indices, DimensionProfile};
use crate::embed::{l2_norm, EmbedError, EmbeddingTable, Neighbor};
use crate::math::{
    absolute_angle, pca_first_component, MathError, Projection2d, DEFAULT_PCA_ITERS,
    DEFAULT_PCA_TOL,
};
use crate::model::{LatentCodes, ModelCheckpoint, ModelError};

pub const DEFAULT_PROBE_SAMPLES: usize = 700;
pub const DEFAULT_INTERPOLATION_SAMPLES: usize = 50;
pub const DEFAULT_NEIGHBORS: usize = 10;
pub const DEFAULT_CLOUD_SAMPLES: usize = 50;
pub const ANGLE_BINS: usize = 18;
pub const ANGLE_BIN_WIDTH: f64 = 5.0;

/// A perturbation whose reconstructions all lie within this fraction of
/// their centroid's norm is treated as collapsed.
pub const COLLAPSE_REL_TOL: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("dimension {dim} out of range (latent dimension is {latent_dim})")]
    DimensionOutOfRange { dim: usize, latent_dim: usize },
    #[error("{w1:?} and {w2:?} reconstruct to the same vector")]
    ZeroSemanticDirection { w1: String, w2: String },
    #[error("empty range [{a}, {b}]")]
    EmptyRange { a: f64, b: f64 },
    #[error("{name} must be at least {min}, got {value}")]
    InvalidCount {
        name: &'static str,
        value: usize,
        min: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub dim: usize,
    pub theta: f64,
    pub phi: f64,
    pub encoding_level: f64,
    pub extent_w1: f64,
    pub extent_w2: f64,
    pub regressed_dir_w1: Vec<f64>,
    pub regressed_dir_w2: Vec<f64>,
    pub degenerate: bool,
}

/// Encoding levels binned into 5-degree bins over [0, 90] and normalised
/// as a density (integrates to 1 when non-empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
}

impl AngleHistogram {
    pub fn from_levels(levels: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0usize; ANGLE_BINS];
        for level in levels {
            let bin = ((level / ANGLE_BIN_WIDTH).floor().max(0.0) as usize).min(ANGLE_BINS - 1);
            counts[bin] += 1;
        }
        let total: usize = counts.iter().sum();
        let density = counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / (total as f64 * ANGLE_BIN_WIDTH)
                }
            })
            .collect();
        Self {
            bin_width: ANGLE_BIN_WIDTH,
            counts,
            density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub reports: Vec<ProbeReport>,
    pub histogram: AngleHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub label: String,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneNeighbor {
    /// 0 for the first word of the pair, 1 for the second.
    pub anchor: usize,
    pub token: String,
    pub rank: usize,
    pub distance: f64,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    pub t: f64,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPoint {
    pub value: f64,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionScene {
    pub dim: usize,
    pub anchors: [ScenePoint; 2],
    pub interpolation: Vec<InterpolationPoint>,
    pub neighbors: Vec<SceneNeighbor>,
    pub perturbations: [Vec<PerturbationPoint>; 2],
    pub theta: f64,
    pub phi: f64,
    pub degenerate: bool,
    pub explained_variance: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCloudEntry {
    pub token: String,
    pub frequency: u64,
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCloud {
    pub dim: usize,
    /// Range actually sampled, after clamping to the observed range.
    pub range: [f64; 2],
    pub clamped: bool,
    pub seed: u64,
    pub samples: usize,
    pub diversity: usize,
    pub entries: Vec<WordCloudEntry>,
}

/// Sums `k - rank` over every ranked list a token appears in. Each list is
/// ordered best first; tokens past position `k` are ignored. Tokens seen
/// only at rank `k` are kept with frequency 0.
pub fn inverse_rank_frequencies<S: AsRef<str>>(
    lists: &[Vec<S>],
    k: usize,
) -> BTreeMap<String, u64> {
    let mut freq = BTreeMap::new();
    for list in lists {
        for (i, token) in list.iter().take(k).enumerate() {
            *freq.entry(token.as_ref().to_string()).or_insert(0) += (k - (i + 1)) as u64;
        }
    }
    freq
}

/// Read-only probing over one checkpoint and its vocabulary.
pub struct Prober<'a> {
    model: &'a ModelCheckpoint,
    table: &'a EmbeddingTable,
    codes: Cow<'a, LatentCodes>,
    profiles: Cow<'a, [DimensionProfile]>,
}

/// Reconstructions of one word with one coordinate swept.
struct Sweep {
    values: Vec<f64>,
    points: Vec<Vec<f64>>,
}

impl<'a> Prober<'a> {
    pub fn new(model: &'a ModelCheckpoint, table: &'a EmbeddingTable) -> Result<Self, ProbeError> {
        let codes = model.encode_table(table)?;
        let profiles = profiles_from_codes(&codes);
        Ok(Self {
            model,
            table,
            codes: Cow::Owned(codes),
            profiles: Cow::Owned(profiles),
        })
    }

    /// Reuses codes and profiles computed earlier for the same model and table.
    pub fn with_cache(
        model: &'a ModelCheckpoint,
        table: &'a EmbeddingTable,
        codes: &'a LatentCodes,
        profiles: &'a [DimensionProfile],
    ) -> Self {
        Self {
            model,
            table,
            codes: Cow::Borrowed(codes),
            profiles: Cow::Borrowed(profiles),
        }
    }

    pub fn profiles(&self) -> &[DimensionProfile] {
        &self.profiles
    }

    pub fn codes(&self) -> &LatentCodes {
        &self.codes
    }

    /// Row of a word; exact match first, then its lowercase form.
    pub fn row_of(&self, word: &str) -> Result<usize, ProbeError> {
        self.table
            .index_of(word)
            .or_else(|| self.table.index_of(&word.to_lowercase()))
            .ok_or_else(|| ProbeError::UnknownWord(word.to_string()))
    }

    pub fn latent_mean(&self, word: &str) -> Result<&[f64], ProbeError> {
        Ok(self.codes.mean(self.row_of(word)?))
    }

    fn check_dim(&self, dim: usize) -> Result<(), ProbeError> {
        let latent_dim = self.model.latent_dim();
        if dim >= latent_dim {
            return Err(ProbeError::DimensionOutOfRange { dim, latent_dim });
        }
        Ok(())
    }

    /// `|mu_j(w1) - mu_j(w2)|` for every latent dimension.
    pub fn pair_differences(&self, w1: &str, w2: &str) -> Result<Vec<f64>, ProbeError> {
        let (a, b) = (self.latent_mean(w1)?, self.latent_mean(w2)?);
        Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
    }

    fn semantic_direction(
        &self,
        w1: &str,
        w2: &str,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ProbeError> {
        let x1 = self.model.decode(self.latent_mean(w1)?)?;
        let x2 = self.model.decode(self.latent_mean(w2)?)?;
        let s: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a - b).collect();
        let scale = l2_norm(&x1).max(l2_norm(&x2)).max(1.0);
        if l2_norm(&s) <= 1e-12 * scale {
            return Err(ProbeError::ZeroSemanticDirection {
                w1: w1.to_string(),
                w2: w2.to_string(),
            });
        }
        Ok((x1, x2, s))
    }

    fn sweep(&self, mean: &[f64], dim: usize, values: Vec<f64>) -> Result<Sweep, ProbeError> {
        let points = values
            .par_iter()
            .map(|&v| {
                let mut z = mean.to_vec();
                z[dim] = v;
                self.model.decode(&z)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Sweep { values, points })
    }

    /// Cosine neighbours of a reconstruction; a zero vector has none.
    fn neighbors_of(&self, x: &[f64], k: usize) -> Result<Vec<Neighbor>, ProbeError> {
        match self.table.nearest_neighbors(x, k, &[]) {
            Err(EmbedError::ZeroQuery) => Ok(Vec::new()),
            other => Ok(other?),
        }
    }

    fn grid(&self, dim: usize, samples: usize) -> Vec<f64> {
        let profile = &self.profiles[dim];
        let (a, b) = (profile.mean_min, profile.mean_max);
        let last = (samples - 1) as f64;
        (0..samples)
            .map(|i| a + (b - a) * (i as f64 / last))
            .collect()
    }

    fn probe_with_sweeps(
        &self,
        w1: &str,
        w2: &str,
        dim: usize,
        samples: usize,
        s: &[f64],
    ) -> Result<(ProbeReport, [Sweep; 2]), ProbeError> {
        let values = self.grid(dim, samples);
        let sweeps = [
            self.sweep(self.latent_mean(w1)?, dim, values.clone())?,
            self.sweep(self.latent_mean(w2)?, dim, values)?,
        ];
        let fits: Vec<Option<(Vec<f64>, f64)>> = sweeps
            .iter()
            .map(|sweep| regress(&sweep.points))
            .collect::<Result<_, _>>()?;
        let report = match (&fits[0], &fits[1]) {
            (Some((dir1, extent1)), Some((dir2, extent2))) => {
                let theta = absolute_angle(dir1, s)?;
                let phi = absolute_angle(dir2, s)?;
                ProbeReport {
                    dim,
                    theta,
                    phi,
                    encoding_level: (theta + phi) / 2.0,
                    extent_w1: *extent1,
                    extent_w2: *extent2,
                    regressed_dir_w1: dir1.clone(),
                    regressed_dir_w2: dir2.clone(),
                    degenerate: false,
                }
            }
            _ => {
                let n = self.model.input_dim();
                let dir = |fit: &Option<(Vec<f64>, f64)>| {
                    fit.as_ref().map_or_else(|| vec![0.0; n], |f| f.0.clone())
                };
                ProbeReport {
                    dim,
                    theta: 90.0,
                    phi: 90.0,
                    encoding_level: 90.0,
                    extent_w1: 0.0,
                    extent_w2: 0.0,
                    regressed_dir_w1: dir(&fits[0]),
                    regressed_dir_w2: dir(&fits[1]),
                    degenerate: true,
                }
            }
        };
        Ok((report, sweeps))
    }

    fn check_samples(name: &'static str, value: usize, min: usize) -> Result<(), ProbeError> {
        if value < min {
            return Err(ProbeError::InvalidCount { name, value, min });
        }
        Ok(())
    }

    /// Sweeps `dim` over its observed range for both words and compares the
    /// regressed directions with the pair's semantic direction.
    pub fn probe_dimension(
        &self,
        w1: &str,
        w2: &str,
        dim: usize,
        samples: usize,
    ) -> Result<ProbeReport, ProbeError> {
        self.check_dim(dim)?;
        Self::check_samples("samples", samples, 2)?;
        let (_, _, s) = self.semantic_direction(w1, w2)?;
        Ok(self.probe_with_sweeps(w1, w2, dim, samples, &s)?.0)
    }

    /// Probes `dims`, or every useful dimension when `None`.
    pub fn probe_all(
        &self,
        w1: &str,
        w2: &str,
        dims: Option<&[usize]>,
        samples: usize,
    ) -> Result<ProbeSet, ProbeError> {
        let dims: Vec<usize> = match dims {
            Some(d) => d.to_vec(),
            None => useful_indices(&self.profiles),
        };
        for &dim in &dims {
            self.check_dim(dim)?;
        }
        Self::check_samples("samples", samples, 2)?;
        let (_, _, s) = self.semantic_direction(w1, w2)?;
        let reports = dims
            .par_iter()
            .map(|&dim| {
                self.probe_with_sweeps(w1, w2, dim, samples, &s)
                    .map(|r| r.0)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let histogram = AngleHistogram::from_levels(reports.iter().map(|r| r.encoding_level));
        Ok(ProbeSet { reports, histogram })
    }

    /// Everything the projection view draws for one word pair and dimension,
    /// projected onto a 2-D PCA basis fit on all scene points.
    pub fn projection_scene(
        &self,
        w1: &str,
        w2: &str,
        dim: usize,
        t_samples: usize,
        k: usize,
        p_samples: usize,
    ) -> Result<ProjectionScene, ProbeError> {
        self.check_dim(dim)?;
        Self::check_samples("t_samples", t_samples, 2)?;
        Self::check_samples("p_samples", p_samples, 2)?;
        let (x1, x2, s) = self.semantic_direction(w1, w2)?;
        let (report, sweeps) = self.probe_with_sweeps(w1, w2, dim, p_samples, &s)?;

        let (mu1, mu2) = (self.latent_mean(w1)?, self.latent_mean(w2)?);
        let last = (t_samples - 1) as f64;
        let ts: Vec<f64> = (0..t_samples).map(|i| i as f64 / last).collect();
        let path = ts
            .par_iter()
            .map(|&t| {
                let z: Vec<f64> = mu1
                    .iter()
                    .zip(mu2)
                    .map(|(a, b)| (1.0 - t) * a + t * b)
                    .collect();
                self.model.decode(&z)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;

        let neighbor_lists: [Vec<Neighbor>; 2] =
            [self.neighbors_of(&x1, k)?, self.neighbors_of(&x2, k)?];

        let mut basis: Vec<&[f64]> = vec![&x1, &x2];
        basis.extend(path.iter().map(Vec::as_slice));
        for sweep in &sweeps {
            basis.extend(sweep.points.iter().map(Vec::as_slice));
        }
        for list in &neighbor_lists {
            basis.extend(list.iter().map(|nb| self.table.row(nb.row)));
        }
        let projection = Projection2d::fit(&basis)?;

        let anchors = [
            ScenePoint {
                label: self.table.word(self.row_of(w1)?).to_string(),
                xy: projection.project(&x1),
            },
            ScenePoint {
                label: self.table.word(self.row_of(w2)?).to_string(),
                xy: projection.project(&x2),
            },
        ];
        let interpolation = ts
            .iter()
            .zip(&path)
            .map(|(&t, x)| InterpolationPoint {
                t,
                xy: projection.project(x),
            })
            .collect();
        let projection = &projection;
        let neighbors = neighbor_lists
            .iter()
            .enumerate()
            .flat_map(|(anchor, list)| {
                list.iter().map(move |nb| SceneNeighbor {
                    anchor,
                    token: nb.token.clone(),
                    rank: nb.rank,
                    distance: nb.distance,
                    xy: projection.project(self.table.row(nb.row)),
                })
            })
            .collect();
        let project_sweep = |sweep: &Sweep| -> Vec<PerturbationPoint> {
            sweep
                .values
                .iter()
                .zip(&sweep.points)
                .map(|(&value, x)| PerturbationPoint {
                    value,
                    xy: projection.project(x),
                })
                .collect()
        };
        Ok(ProjectionScene {
            dim,
            anchors,
            interpolation,
            neighbors,
            perturbations: [project_sweep(&sweeps[0]), project_sweep(&sweeps[1])],
            theta: report.theta,
            phi: report.phi,
            degenerate: report.degenerate,
            explained_variance: projection.explained_variance,
        })
    }

    /// Samples `n` values per word uniformly in `range` (clamped to the
    /// observed range of `dim`), decodes them and scores the vocabulary
    /// neighbours of the reconstructions by summed inverse rank.
    #[allow(clippy::too_many_arguments)]
    pub fn word_cloud(
        &self,
        w1: &str,
        w2: &str,
        dim: usize,
        range: (f64, f64),
        n: usize,
        k: usize,
        seed: u64,
    ) -> Result<WordCloud, ProbeError> {
        self.check_dim(dim)?;
        Self::check_samples("n", n, 1)?;
        Self::check_samples("k", k, 1)?;
        let (mu1, mu2) = (self.latent_mean(w1)?, self.latent_mean(w2)?);
        let profile = &self.profiles[dim];
        let (lo, hi) = (profile.mean_min, profile.mean_max);
        if !(range.0.is_finite() && range.1.is_finite()) {
            return Err(ProbeError::EmptyRange {
                a: range.0,
                b: range.1,
            });
        }
        let (a, b) = (range.0.clamp(lo, hi), range.1.clamp(lo, hi));
        let clamped = a != range.0 || b != range.1;
        if a >= b {
            return Err(ProbeError::EmptyRange { a, b });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut latents = Vec::with_capacity(2 * n);
        for mu in [mu1, mu2] {
            for _ in 0..n {
                let u: f64 = rng.random();
                let mut z = mu.to_vec();
                z[dim] = a + (b - a) * u;
                latents.push(z);
            }
        }
        let samples = latents
            .par_iter()
            .map(|z| self.model.decode(z))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let lists = samples
            .par_iter()
            .map(|x| {
                self.neighbors_of(x, k)
                    .map(|nbs| nbs.into_iter().map(|nb| nb.row).collect::<Vec<usize>>())
            })
            .collect::<Result<Vec<_>, ProbeError>>()?;

        let token_lists: Vec<Vec<&str>> = lists
            .iter()
            .map(|rows| rows.iter().map(|&r| self.table.word(r)).collect())
            .collect();
        let freq = inverse_rank_frequencies(&token_lists, k);
        let diversity = freq.len();
        let sample_norms: Vec<f64> = samples.iter().map(|x| l2_norm(x)).collect();
        let mut entries: Vec<WordCloudEntry> = freq
            .into_iter()
            .filter(|(_, f)| *f >= 1)
            .map(|(token, frequency)| {
                let row = self
                    .table
                    .index_of(&token)
                    .expect("neighbour comes from the table");
                let min_distance = samples
                    .iter()
                    .zip(&sample_norms)
                    .map(|(x, &norm)| self.table.cosine_distance_to_row(x, norm, row))
                    .fold(f64::INFINITY, f64::min);
                WordCloudEntry {
                    token,
                    frequency,
                    min_distance,
                }
            })
            .collect();
        entries.sort_by(|x, y| {
            y.frequency
                .cmp(&x.frequency)
                .then_with(|| x.token.cmp(&y.token))
        });
        Ok(WordCloud {
            dim,
            range: [a, b],
            clamped,
            seed,
            samples: 2 * n,
            diversity,
            entries,
        })
    }
}

/// First principal direction and explained variance of a sweep, or `None`
/// when the reconstructions have collapsed onto one point.
fn regress(points: &[Vec<f64>]) -> Result<Option<(Vec<f64>, f64)>, ProbeError> {
    let n = points[0].len();
    let mut centroid = vec![0.0; n];
    for p in points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in &mut centroid {
        *c /= points.len() as f64;
    }
    let spread = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    if spread <= COLLAPSE_REL_TOL * l2_norm(&centroid) {
        return Ok(None);
    }
    match pca_first_component(points, DEFAULT_PCA_ITERS, DEFAULT_PCA_TOL) {
        Ok(pca) => Ok(Some((pca.component, pca.explained_variance))),
        Err(MathError::DegeneratePoints) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_cloud_example() {
        // q is rank 2 for sample 1, rank 1 for sample 2, absent after that
        let lists = vec![
            vec!["a", "q", "b"],
            vec!["q", "c", "a"],
            vec!["d", "e", "f"],
            vec!["d", "a", "e"],
        ];
        let freq = inverse_rank_frequencies(&lists, 3);
        assert_eq!(freq["q"], 3);
        assert_eq!(freq["a"], 2 + 1);
        assert_eq!(freq["b"], 0);
    }

    #[test]
    fn histogram_is_a_density() {
        let h = AngleHistogram::from_levels([0.0, 4.9, 45.0, 90.0, 90.0]);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.counts[17], 2);
        let area: f64 = h.density.iter().map(|d| d * h.bin_width).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert!(AngleHistogram::from_levels([])
            .density
            .iter()
            .all(|&d| d == 0.0));
    }

    #[test]
    fn collapsed_sweep_is_degenerate() {
        let points = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(regress(&points).unwrap().is_none());
        let mut nearly = points.clone();
        nearly[0][0] += 1e-4;
        assert!(regress(&nearly).unwrap().is_none());
        let spread: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let (dir, extent) = regress(&spread).unwrap().unwrap();
        assert!((dir[0].abs() - 1.0).abs() < 1e-9);
        assert!((extent - 2.5).abs() < 1e-9);
    }
}
