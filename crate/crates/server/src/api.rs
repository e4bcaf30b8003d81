use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use latentprobe::probe::{
    AngleHistogram, DEFAULT_CLOUD_SAMPLES, DEFAULT_INTERPOLATION_SAMPLES, DEFAULT_NEIGHBORS,
    DEFAULT_PROBE_SAMPLES,
};
use latentprobe::{DimensionProfile, ProbeSet, Prober, ProjectionScene, TraceRecord, WordCloud};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::error::ApiError;
use crate::{ModelEntry, SessionRegistry};

const DEFAULT_VOCAB_LIMIT: usize = 20;
const MAX_VOCAB_LIMIT: usize = 1000;

type ProbeKey = (String, String, String, usize);

struct AppState {
    registry: SessionRegistry,
    /// Probe results over the useful dims, keyed by model, pair and sample count.
    probe_cache: RwLock<HashMap<ProbeKey, Arc<ProbeSet>>>,
}

type Shared = State<Arc<AppState>>;

pub fn router(registry: SessionRegistry) -> Router {
    let state = Arc::new(AppState {
        registry,
        probe_cache: RwLock::new(HashMap::new()),
    });
    Router::new()
        .route("/api/models", get(list_models))
        .route("/api/models/{id}/trace", get(trace))
        .route("/api/models/{id}/dims", get(dims))
        .route("/api/models/{id}/probe", post(probe))
        .route("/api/models/{id}/projection", post(projection))
        .route("/api/models/{id}/wordcloud", post(wordcloud))
        .route("/api/models/{id}/vocab", get(vocab))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Every model-scoped response carries the model id, its epoch and the
/// request seed (null when the request had none).
#[derive(Serialize)]
struct Envelope<T> {
    model: String,
    epoch: usize,
    seed: Option<u64>,
    #[serde(flatten)]
    body: T,
}

fn envelope<T>(entry: &ModelEntry, seed: Option<u64>, body: T) -> Json<Envelope<T>> {
    Json(Envelope {
        model: entry.id.clone(),
        epoch: entry.checkpoint.epoch,
        seed,
        body,
    })
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<ModelEntry>, ApiError> {
    state
        .registry
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::UnknownModel(id.to_string()))
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::BadRequest(e.body_text()))
}

fn query<T>(params: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    params
        .map(|Query(v)| v)
        .map_err(|e| ApiError::BadRequest(e.body_text()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn prober(entry: &ModelEntry) -> Prober<'_> {
    Prober::with_cache(
        &entry.checkpoint,
        &entry.table,
        &entry.codes,
        &entry.profiles,
    )
}

#[derive(Deserialize)]
struct SeedQuery {
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ModelSummary {
    id: String,
    kind: String,
    beta: f64,
    epoch: usize,
    latent_dim: usize,
    useful_dims: usize,
}

#[derive(Serialize)]
struct ModelList {
    seed: Option<u64>,
    models: Vec<ModelSummary>,
}

async fn list_models(
    State(state): Shared,
    params: Result<Query<SeedQuery>, QueryRejection>,
) -> Result<Json<ModelList>, ApiError> {
    let params = query(params)?;
    let models = state
        .registry
        .iter()
        .map(|e| ModelSummary {
            id: e.id.clone(),
            kind: e.checkpoint.kind().to_string(),
            beta: e.checkpoint.config.effective_beta(),
            epoch: e.checkpoint.epoch,
            latent_dim: e.checkpoint.latent_dim(),
            useful_dims: e.useful_dims(),
        })
        .collect();
    Ok(Json(ModelList {
        seed: params.seed,
        models,
    }))
}

#[derive(Serialize)]
struct TraceBody {
    records: Vec<TraceRecord>,
}

async fn trace(
    State(state): Shared,
    Path(id): Path<String>,
    params: Result<Query<SeedQuery>, QueryRejection>,
) -> Result<Json<Envelope<TraceBody>>, ApiError> {
    let params = query(params)?;
    let entry = lookup(&state, &id)?;
    let records = entry.trace.records().to_vec();
    Ok(envelope(&entry, params.seed, TraceBody { records }))
}

fn cached_probe(
    state: &AppState,
    entry: &ModelEntry,
    w1: &str,
    w2: &str,
    samples: usize,
) -> Result<Arc<ProbeSet>, ApiError> {
    let key = (entry.id.clone(), w1.to_string(), w2.to_string(), samples);
    if let Some(hit) = state
        .probe_cache
        .read()
        .expect("probe cache poisoned")
        .get(&key)
    {
        return Ok(hit.clone());
    }
    let set = Arc::new(prober(entry).probe_all(w1, w2, None, samples)?);
    state
        .probe_cache
        .write()
        .expect("probe cache poisoned")
        .insert(key, set.clone());
    Ok(set)
}

#[derive(Deserialize)]
struct DimsQuery {
    sort: Option<String>,
    pair: Option<String>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct DimRow {
    #[serde(flatten)]
    profile: DimensionProfile,
    /// Encoding level for the requested pair; null for deprecated dims or
    /// when no pair was given.
    level: Option<f64>,
    pair_diff: Option<f64>,
}

#[derive(Serialize)]
struct DimsBody {
    sort: String,
    pair: Option<[String; 2]>,
    dims: Vec<DimRow>,
}

fn split_pair(pair: &str) -> Result<[String; 2], ApiError> {
    match pair.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok([a.trim().to_string(), b.trim().to_string()])
        }
        _ => Err(ApiError::BadRequest(format!(
            "pair must be \"w1,w2\", got {pair:?}"
        ))),
    }
}

async fn dims(
    State(state): Shared,
    Path(id): Path<String>,
    params: Result<Query<DimsQuery>, QueryRejection>,
) -> Result<Json<Envelope<DimsBody>>, ApiError> {
    let params = query(params)?;
    let entry = lookup(&state, &id)?;
    let sort = params.sort.unwrap_or_else(|| "entropy".to_string());
    if !matches!(sort.as_str(), "entropy" | "angle" | "pair_diff") {
        return Err(ApiError::BadRequest(format!("unknown sort key {sort:?}")));
    }
    let pair = params.pair.as_deref().map(split_pair).transpose()?;
    if pair.is_none() && sort != "entropy" {
        return Err(ApiError::BadRequest(format!(
            "sort {sort:?} needs pair=w1,w2"
        )));
    }
    let (task_state, task_entry) = (state.clone(), entry.clone());
    let body = blocking(move || {
        let (state, entry) = (task_state, task_entry);
        let mut rows: Vec<DimRow> = entry
            .profiles
            .iter()
            .map(|p| DimRow {
                profile: p.clone(),
                level: None,
                pair_diff: None,
            })
            .collect();
        if let Some([w1, w2]) = &pair {
            let diffs = prober(&entry).pair_differences(w1, w2)?;
            for (row, d) in rows.iter_mut().zip(diffs) {
                row.pair_diff = Some(d);
            }
            let set = cached_probe(&state, &entry, w1, w2, DEFAULT_PROBE_SAMPLES)?;
            for report in &set.reports {
                rows[report.dim].level = Some(report.encoding_level);
            }
        }
        match sort.as_str() {
            "entropy" => rows.sort_by(|a, b| b.profile.entropy.total_cmp(&a.profile.entropy)),
            "angle" => rows.sort_by(|a, b| match (a.level, b.level) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            }),
            _ => rows.sort_by(|a, b| {
                b.pair_diff
                    .unwrap_or(0.0)
                    .total_cmp(&a.pair_diff.unwrap_or(0.0))
            }),
        }
        Ok(DimsBody {
            sort,
            pair,
            dims: rows,
        })
    })
    .await?;
    Ok(envelope(&entry, params.seed, body))
}

#[derive(Deserialize)]
struct ProbeRequest {
    word1: String,
    word2: String,
    /// Defaults to the useful dims of the model.
    dims: Option<Vec<usize>>,
    samples: Option<usize>,
    seed: Option<u64>,
}

/// The per-dimension glyph data. `extent` is the mean of the two words'
/// regression extents.
#[derive(Serialize)]
struct ProbeGlyph {
    dim: usize,
    theta: f64,
    phi: f64,
    level: f64,
    extent: f64,
    extent_w1: f64,
    extent_w2: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct ProbeBody {
    word1: String,
    word2: String,
    samples: usize,
    reports: Vec<ProbeGlyph>,
    histogram: AngleHistogram,
}

async fn probe(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<ProbeRequest>, JsonRejection>,
) -> Result<Json<Envelope<ProbeBody>>, ApiError> {
    let req = body(payload)?;
    let entry = lookup(&state, &id)?;
    let samples = req.samples.unwrap_or(DEFAULT_PROBE_SAMPLES);
    let (task_state, task_entry) = (state.clone(), entry.clone());
    let (word1, word2, dims) = (req.word1, req.word2, req.dims);
    let body = blocking(move || {
        let set = match &dims {
            None => cached_probe(&task_state, &task_entry, &word1, &word2, samples)?,
            Some(dims) => {
                Arc::new(prober(&task_entry).probe_all(&word1, &word2, Some(dims), samples)?)
            }
        };
        let reports = set
            .reports
            .iter()
            .map(|r| ProbeGlyph {
                dim: r.dim,
                theta: r.theta,
                phi: r.phi,
                level: r.encoding_level,
                extent: 0.5 * (r.extent_w1 + r.extent_w2),
                extent_w1: r.extent_w1,
                extent_w2: r.extent_w2,
                degenerate: r.degenerate,
            })
            .collect();
        Ok(ProbeBody {
            word1,
            word2,
            samples,
            reports,
            histogram: set.histogram.clone(),
        })
    })
    .await?;
    Ok(envelope(&entry, req.seed, body))
}

#[derive(Deserialize)]
struct ProjectionRequest {
    word1: String,
    word2: String,
    dim: usize,
    k: Option<usize>,
    t_samples: Option<usize>,
    p_samples: Option<usize>,
    seed: Option<u64>,
}

async fn projection(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<ProjectionRequest>, JsonRejection>,
) -> Result<Json<Envelope<ProjectionScene>>, ApiError> {
    let req = body(payload)?;
    let entry = lookup(&state, &id)?;
    let task_entry = entry.clone();
    let seed = req.seed;
    let scene = blocking(move || {
        Ok(prober(&task_entry).projection_scene(
            &req.word1,
            &req.word2,
            req.dim,
            req.t_samples.unwrap_or(DEFAULT_INTERPOLATION_SAMPLES),
            req.k.unwrap_or(DEFAULT_NEIGHBORS),
            req.p_samples.unwrap_or(DEFAULT_PROBE_SAMPLES),
        )?)
    })
    .await?;
    Ok(envelope(&entry, seed, scene))
}

#[derive(Deserialize)]
struct WordCloudRequest {
    word1: String,
    word2: String,
    dim: usize,
    range: [f64; 2],
    n: Option<usize>,
    k: Option<usize>,
    seed: Option<u64>,
}

async fn wordcloud(
    State(state): Shared,
    Path(id): Path<String>,
    payload: Result<Json<WordCloudRequest>, JsonRejection>,
) -> Result<Json<Envelope<serde_json::Map<String, serde_json::Value>>>, ApiError> {
    let req = body(payload)?;
    let entry = lookup(&state, &id)?;
    let task_entry = entry.clone();
    let seed = req.seed.unwrap_or(0);
    let cloud: WordCloud = blocking(move || {
        Ok(prober(&task_entry).word_cloud(
            &req.word1,
            &req.word2,
            req.dim,
            (req.range[0], req.range[1]),
            req.n.unwrap_or(DEFAULT_CLOUD_SAMPLES),
            req.k.unwrap_or(DEFAULT_NEIGHBORS),
            seed,
        )?)
    })
    .await?;
    // the envelope already carries the seed
    let serde_json::Value::Object(mut fields) =
        serde_json::to_value(cloud).map_err(|e| ApiError::Internal(e.to_string()))?
    else {
        return Err(ApiError::Internal(
            "word cloud did not serialize to an object".into(),
        ));
    };
    fields.remove("seed");
    Ok(envelope(&entry, Some(seed), fields))
}

#[derive(Deserialize)]
struct VocabQuery {
    prefix: Option<String>,
    limit: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct VocabBody {
    words: Vec<String>,
}

async fn vocab(
    State(state): Shared,
    Path(id): Path<String>,
    params: Result<Query<VocabQuery>, QueryRejection>,
) -> Result<Json<Envelope<VocabBody>>, ApiError> {
    let params = query(params)?;
    let entry = lookup(&state, &id)?;
    let prefix = params.prefix.unwrap_or_default();
    let limit = params
        .limit
        .unwrap_or(DEFAULT_VOCAB_LIMIT)
        .min(MAX_VOCAB_LIMIT);
    let words = entry
        .table
        .words()
        .iter()
        .filter(|w| w.starts_with(&prefix))
        .take(limit)
        .cloned()
        .collect();
    Ok(envelope(&entry, params.seed, VocabBody { words }))
}
