//! Per-dimension latent statistics, the useful/deprecated split, and the
//! per-epoch training trace.

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::eval::{
    analogy_accuracy, latent_table_from_codes, semantic_similarity_score, AnalogySet,
    SimilarityPairset,
};
use crate::math::{histogram_entropy, quantile_sorted, DEFAULT_BIN_WIDTH};
use crate::model::{gaussian_kl, LatentCodes, ModelCheckpoint, ModelError};

/// Smallest entropy gap (nats) that separates useful from deprecated dims.
pub const DEFAULT_MIN_GAP: f64 = 0.5;
/// Analogy questions used per epoch of telemetry.
pub const DEFAULT_TELEMETRY_ANALOGIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionProfile {
    pub index: usize,
    pub entropy: f64,
    pub mean_min: f64,
    pub mean_max: f64,
    pub q1: f64,
    pub q3: f64,
    /// Average per-word sigma; absent for an AE.
    pub avg_sigma: Option<f64>,
    pub useful: bool,
}

/// Encodes every word and summarises each latent dimension.
pub fn dimension_profiles(
    model: &ModelCheckpoint,
    table: &EmbeddingTable,
) -> Result<Vec<DimensionProfile>, ModelError> {
    Ok(profiles_from_codes(&model.encode_table(table)?))
}

pub fn profiles_from_codes(codes: &LatentCodes) -> Vec<DimensionProfile> {
    let mut profiles: Vec<DimensionProfile> = (0..codes.latent_dim)
        .into_par_iter()
        .map(|dim| {
            let mut means = codes.mean_column(dim);
            let entropy = histogram_entropy(&means, DEFAULT_BIN_WIDTH);
            means.sort_by(f64::total_cmp);
            let avg_sigma = codes
                .sigma_column(dim)
                .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64);
            DimensionProfile {
                index: dim,
                entropy,
                mean_min: means[0],
                mean_max: means[means.len() - 1],
                q1: quantile_sorted(&means, 0.25),
                q3: quantile_sorted(&means, 0.75),
                avg_sigma,
                useful: true,
            }
        })
        .collect();
    // Without a variational posterior there is no prior for a dimension to
    // collapse onto, and AE code scales are arbitrary, so nothing is deprecated.
    if codes.log_variances.is_some() {
        let entropies: Vec<f64> = profiles.iter().map(|p| p.entropy).collect();
        for (profile, useful) in profiles
            .iter_mut()
            .zip(classify_dimensions(&entropies, DEFAULT_MIN_GAP))
        {
            profile.useful = useful;
        }
    }
    profiles
}

/// Splits dimensions at the largest gap between consecutive sorted
/// entropies. Returns one flag per input (true = useful). When the largest
/// gap is below `min_gap`, every dimension is useful.
pub fn classify_dimensions(entropies: &[f64], min_gap: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    let mut best: Option<(usize, f64)> = None;
    for i in 1..order.len() {
        let gap = entropies[order[i - 1]] - entropies[order[i]];
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((i, gap));
        }
    }
    let mut useful = vec![true; entropies.len()];
    if let Some((cut, gap)) = best {
        if gap >= min_gap {
            let threshold = entropies[order[cut - 1]];
            for (flag, &e) in useful.iter_mut().zip(entropies) {
                *flag = e >= threshold;
            }
        }
    }
    useful
}

pub fn useful_indices(profiles: &[DimensionProfile]) -> Vec<usize> {
    profiles
        .iter()
        .filter(|p| p.useful)
        .map(|p| p.index)
        .collect()
}

pub fn deprecated_indices(profiles: &[DimensionProfile]) -> Vec<usize> {
    profiles
        .iter()
        .filter(|p| !p.useful)
        .map(|p| p.index)
        .collect()
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub recon_loss: f64,
    /// Absent for an AE.
    pub kl_loss: Option<f64>,
    pub useful_dims: Option<usize>,
    pub semeval: Option<f64>,
    pub analogy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainingTrace {
    records: Vec<TraceRecord>,
}

impl TrainingTrace {
    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Appends a record.
    ///
    /// # Panics
    /// If the epoch does not increase.
    pub fn push(&mut self, record: TraceRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.epoch > last.epoch, "trace epochs must increase");
        }
        self.records.push(record);
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> io::Result<Self> {
        let mut trace = TrainingTrace::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            if trace.last().is_some_and(|l| l.epoch >= record.epoch) {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "trace epochs must increase",
                ));
            }
            trace.records.push(record);
        }
        Ok(trace)
    }
}

/// Optional evaluation data for per-epoch telemetry.
#[derive(Debug, Clone, Default)]
pub struct EvalBundle {
    pub pairs: Option<SimilarityPairset>,
    pub questions: Option<AnalogySet>,
    pub candidate_limit: Option<usize>,
}

impl EvalBundle {
    /// Keeps every pair but only a strided subsample of analogy questions.
    pub fn for_telemetry(
        pairs: Option<SimilarityPairset>,
        questions: Option<AnalogySet>,
        analogy_limit: usize,
    ) -> Self {
        Self {
            pairs,
            questions: questions.map(|q| q.subsample(analogy_limit)),
            candidate_limit: None,
        }
    }
}

/// Statistics of a checkpoint over the full table: mean reconstruction
/// error of mean-decoded words, mean KL, useful-dimension count and, when
/// data is supplied, similarity/analogy scores on the useful latent dims.
/// Metric failures are recorded as `None`.
pub fn epoch_metrics(
    model: &ModelCheckpoint,
    table: &EmbeddingTable,
    bundle: &EvalBundle,
) -> Result<TraceRecord, ModelError> {
    let codes = model.encode_table(table)?;
    let profiles = profiles_from_codes(&codes);
    let useful = useful_indices(&profiles);

    let recon: Vec<f64> = (0..table.len())
        .into_par_iter()
        .map(|row| {
            let x = table.row(row);
            let x_hat = model.decode(codes.mean(row))?;
            Ok(x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect::<Result<_, ModelError>>()?;
    let recon_loss = recon.iter().sum::<f64>() / table.len() as f64;
    let kl_loss = codes.log_variances.as_ref().map(|lv| {
        codes
            .means
            .iter()
            .zip(lv)
            .map(|(&mu, &v)| gaussian_kl(mu, v))
            .sum::<f64>()
            / table.len() as f64
    });

    let view = latent_table_from_codes(&codes, table, &useful).ok();
    let semeval = match (&view, &bundle.pairs) {
        (Some(view), Some(pairs)) => semantic_similarity_score(view, pairs).ok().map(|s| s.rho),
        _ => None,
    };
    let analogy = match (&view, &bundle.questions) {
        (Some(view), Some(questions)) => {
            analogy_accuracy(view, questions, bundle.candidate_limit).accuracy
        }
        _ => None,
    };
    Ok(TraceRecord {
        epoch: model.epoch,
        recon_loss,
        kl_loss,
        useful_dims: Some(useful.len()),
        semeval,
        analogy,
    })
}

/// Epoch callback for [`crate::model::train`] that fills in the useful-dim
/// count and the similarity/analogy scores.
pub fn telemetry_hook<'a>(
    table: &'a EmbeddingTable,
    bundle: &'a EvalBundle,
) -> impl FnMut(&ModelCheckpoint, &mut TraceRecord) + 'a {
    move |model, record| {
        if let Ok(metrics) = epoch_metrics(model, table, bundle) {
            record.useful_dims = metrics.useful_dims;
            record.semeval = metrics.semeval;
            record.analogy = metrics.analogy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autoencoder_codes_are_never_deprecated() {
        // dim 0 spread over [-5, 5], dim 1 squeezed into [-0.05, 0.05]
        let means: Vec<f64> = (0..200)
            .flat_map(|i| {
                let t = i as f64 / 199.0 - 0.5;
                [10.0 * t, 0.1 * t]
            })
            .collect();
        let ae = LatentCodes {
            latent_dim: 2,
            means: means.clone(),
            log_variances: None,
        };
        assert!(profiles_from_codes(&ae).iter().all(|p| p.useful));
        let vae = LatentCodes {
            latent_dim: 2,
            means,
            log_variances: Some(vec![0.0; 400]),
        };
        let useful: Vec<bool> = profiles_from_codes(&vae).iter().map(|p| p.useful).collect();
        assert_eq!(useful, vec![true, false]);
    }

    #[test]
    fn gap_rule_examples() {
        assert_eq!(
            classify_dimensions(&[4.1, 4.0, 3.9, 0.2, 0.1], 0.5),
            vec![true, true, true, false, false]
        );
        assert_eq!(classify_dimensions(&[2.0, 2.0, 2.0], 0.5), vec![true; 3]);
        assert_eq!(classify_dimensions(&[1.0], 0.5), vec![true]);
        assert_eq!(classify_dimensions(&[], 0.5), Vec::<bool>::new());
        // gap just under the threshold keeps everything
        assert_eq!(classify_dimensions(&[1.0, 0.6], 0.5), vec![true, true]);
    }

    #[test]
    fn gap_rule_ignores_input_order() {
        assert_eq!(
            classify_dimensions(&[0.1, 3.9, 0.2, 4.1, 4.0], 0.5),
            vec![false, true, false, true, true]
        );
    }

    fn codes_two_dims() -> LatentCodes {
        // dim 0: one mean in each of 160 bins over [-4, 4); dim 1: all zero
        let v = 160;
        let mut means = Vec::with_capacity(2 * v);
        for i in 0..v {
            means.push(-4.0 + (i as f64 + 0.5) * 0.05);
            means.push(0.0);
        }
        LatentCodes {
            latent_dim: 2,
            means,
            log_variances: Some(vec![0.0; 2 * v]),
        }
    }

    #[test]
    fn profiles_of_synthetic_codes() {
        let profiles = profiles_from_codes(&codes_two_dims());
        assert!((profiles[0].entropy - 160f64.ln()).abs() < 1e-12);
        assert_eq!(profiles[1].entropy, 0.0);
        assert_eq!((profiles[1].mean_min, profiles[1].mean_max), (0.0, 0.0));
        assert!(profiles[0].useful);
        assert!(!profiles[1].useful);
        assert_eq!(profiles[1].avg_sigma, Some(1.0));
        let p = &profiles[0];
        assert!(p.mean_min <= p.q1 && p.q1 <= p.q3 && p.q3 <= p.mean_max);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let mut trace = TrainingTrace::default();
        trace.push(TraceRecord {
            epoch: 1,
            recon_loss: 2.5,
            kl_loss: None,
            useful_dims: Some(3),
            semeval: Some(0.5),
            analogy: None,
        });
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"epoch\":1,\"recon_loss\":2.5,\"kl_loss\":null,\"useful_dims\":3,\"semeval\":0.5,\"analogy\":null}\n"
        );
        assert_eq!(TrainingTrace::read_jsonl(&buf[..]).unwrap(), trace);
    }

    #[test]
    #[should_panic(expected = "epochs must increase")]
    fn trace_rejects_non_increasing_epochs() {
        let record = TraceRecord {
            epoch: 1,
            recon_loss: 0.0,
            kl_loss: None,
            useful_dims: None,
            semeval: None,
            analogy: None,
        };
        let mut trace = TrainingTrace::default();
        trace.push(record.clone());
        trace.push(record);
    }
}
