//! Word-embedding compression with AE and beta-VAE models, detection of
//! deprecated latent dimensions, and perturbation probing of what each
//! latent dimension encodes.

pub mod checkpoint;
pub mod dims;
pub mod embed;
pub mod eval;
pub mod math;
pub mod model;
pub mod nn;
pub mod probe;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dims::{
    classify_dimensions, dimension_profiles, DimensionProfile, EvalBundle, TraceRecord,
    TrainingTrace, DEFAULT_MIN_GAP,
};
pub use embed::{load_vectors, EmbedError, EmbeddingTable, Neighbor};
pub use eval::{
    analogy_accuracy, evaluate_latent, semantic_similarity_score, AnalogySet, DimSelection,
    EvalError, LatentEvaluation, SimilarityPairset,
};
pub use model::{train, train_from, ModelCheckpoint, ModelError, ModelKind, TrainConfig};
pub use probe::{
    ProbeError, ProbeReport, ProbeSet, Prober, ProjectionScene, WordCloud, WordCloudEntry,
};
