//! HTTP inference service for interactive mask editing: label schema,
//! content-addressed assets, face parsing, generation with per-session
//! embedding caches, and atomic checkpoint swaps.

pub mod api;
pub mod assets;
pub mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use maskface_core::{Checkpoint, Dataset, LabelSchema};

pub use api::router;
pub use assets::AssetStore;
pub use state::{AppState, ModelSlot, ModelSnapshot};

/// Default upload limit in bytes.
pub const DEFAULT_MAX_UPLOAD: usize = 8 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub assets_dir: PathBuf,
    /// Schema and resolution used when no checkpoint is given at start-up.
    pub schema: LabelSchema,
    pub resolution: usize,
    /// Prepared dataset whose sample ids become valid references.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub parser: Option<PathBuf>,
    pub max_upload_bytes: usize,
}

/// Loads everything named by `config`. A GAN checkpoint, when given,
/// decides the schema and resolution.
pub fn build_state(config: &ServiceConfig) -> anyhow::Result<Arc<AppState>> {
    let (schema, resolution) = match &config.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (ckpt.meta.schema.clone(), ckpt.meta.spec.resolution)
        }
        None => (config.schema.clone(), config.resolution),
    };
    let dataset = config
        .dataset
        .as_deref()
        .map(|p| Dataset::load(p, &schema, resolution))
        .transpose()
        .context("loading dataset")?;
    let state = AppState {
        assets: AssetStore::open(&config.assets_dir).context("opening asset store")?,
        schema,
        resolution,
        dataset,
        model: ModelSlot::default(),
        sessions: Default::default(),
        max_upload_bytes: config.max_upload_bytes,
    };
    let generator = config
        .checkpoint
        .as_deref()
        .map(|p| state::load_generator(p, &state.schema))
        .transpose()?;
    let parser = config
        .parser
        .as_deref()
        .map(|p| state::load_parser(p, &state.schema))
        .transpose()?;
    if generator.is_some() || parser.is_some() {
        state.model.swap(generator, parser);
    }
    Ok(Arc::new(state))
}

/// Serves until the process is interrupted. Calls `on_bound` with the
/// actual listening address once the socket is open.
pub fn serve(config: &ServiceConfig, on_bound: impl FnOnce(SocketAddr)) -> anyhow::Result<()> {
    let state = build_state(config)?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.addr)
            .await
            .with_context(|| format!("binding {}", config.addr))?;
        on_bound(listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving")
    })
}
