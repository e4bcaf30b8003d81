//! HTTP JSON API over loaded checkpoints: telemetry, dimension statistics,
//! probing, projection scenes and word clouds.

mod api;
mod error;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use latentprobe::dims::profiles_from_codes;
use latentprobe::model::LatentCodes;
use latentprobe::{DimensionProfile, EmbeddingTable, ModelCheckpoint, ModelError, TrainingTrace};
use thiserror::Error;
use tokio::net::TcpListener;

pub use api::router;
pub use error::ApiError;

/// One servable model. Codes and profiles are computed once at load time;
/// nothing here changes afterwards.
#[derive(Debug)]
pub struct ModelEntry {
    pub id: String,
    pub checkpoint: ModelCheckpoint,
    pub table: Arc<EmbeddingTable>,
    pub trace: TrainingTrace,
    pub codes: LatentCodes,
    pub profiles: Vec<DimensionProfile>,
}

impl ModelEntry {
    pub fn new(
        id: impl Into<String>,
        checkpoint: ModelCheckpoint,
        table: Arc<EmbeddingTable>,
        trace: TrainingTrace,
    ) -> Result<Self, ModelError> {
        let codes = checkpoint.encode_table(&table)?;
        let profiles = profiles_from_codes(&codes);
        Ok(Self {
            id: id.into(),
            checkpoint,
            table,
            trace,
            codes,
            profiles,
        })
    }

    pub fn useful_dims(&self) -> usize {
        self.profiles.iter().filter(|p| p.useful).count()
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model id {0:?} is already registered")]
    DuplicateId(String),
}

#[derive(Debug, Default)]
pub struct SessionRegistry {
    models: BTreeMap<String, Arc<ModelEntry>>,
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: ModelEntry) -> Result<(), RegistryError> {
        if self.models.contains_key(&entry.id) {
            return Err(RegistryError::DuplicateId(entry.id));
        }
        self.models.insert(entry.id.clone(), Arc::new(entry));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ModelEntry>> {
        self.models.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<ModelEntry>> {
        self.models.values()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("no models loaded")]
    NoModels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::PortInUse(addr.port()),
        _ => ServeError::Io(e),
    })
}

/// Serves the API on an already bound listener until the process is stopped.
pub async fn serve_on(listener: TcpListener, registry: SessionRegistry) -> Result<(), ServeError> {
    if registry.is_empty() {
        return Err(ServeError::NoModels);
    }
    axum::serve(listener, router(registry)).await?;
    Ok(())
}

pub async fn serve(registry: SessionRegistry, addr: SocketAddr) -> Result<(), ServeError> {
    if registry.is_empty() {
        return Err(ServeError::NoModels);
    }
    serve_on(bind(addr).await?, registry).await
}
