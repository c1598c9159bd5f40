//! Desk-scale lab for learning from single-rater subjective ordinal labels.
//!
//! The core idea: every rater gets a small latent code, injected into a shared
//! differentiable backbone through a learned linear map. Codes and backbone
//! weights are trained jointly by MAP estimation on the raters' own labels,
//! so the shared weights capture the common signal while the codes absorb
//! rater-specific tendencies. At inference the model can simulate any rater,
//! average all of them ("mean rater"), or average a validation-selected
//! subset ("greedy rater").
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors with tape-based reverse-mode
//!   differentiation, sized for backbones that train in seconds.
//! - [`ordinal`] — binary-decomposition loss over ordered classes and the
//!   scalar severity score derived from it.
//! - [`latent`] / [`backbone`] / [`model`] — the latent codebook, injection
//!   arithmetic, the shared network, and the fitted-model variants
//!   (plain, latent, multi-head, one-model-per-rater).
//! - [`sim`] / [`data`] — a synthetic subjective-rater simulator and the
//!   dataset CSV/metadata formats.
//! - [`train`] — joint optimisation plus per-rater code fine-tuning.
//! - [`eval`] — virtual-rater inference, ROC / partial AUC / rank-index
//!   metrics, and greedy rater selection.
//! - [`analysis`] — latent-space interpolation, PCA, component sweeps.
//! - [`config`] / [`checkpoint`] / [`pipeline`] — the experiment harness
//!   behind the `addle` binary.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod latent;
pub mod model;
pub mod ordinal;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
