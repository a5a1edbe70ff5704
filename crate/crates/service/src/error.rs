use thiserror::Error;

use crate::session::{Endpoint, Phase};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown {kind} {id:?}")]
    NotFound { kind: &'static str, id: String },
    #[error("{endpoint:?} is not allowed in phase {phase:?}")]
    Phase { endpoint: Endpoint, phase: Phase },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("config: {0}")]
    Config(String),
    #[error("corrupt session store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] tactile::model::ModelError),
    #[error(transparent)]
    Init(#[from] tactile::init::InitError),
    #[error(transparent)]
    Dss(#[from] tactile::dss::DssError),
    #[error(transparent)]
    Dsp(#[from] tactile::dsp::DspError),
    #[error(transparent)]
    Corpus(#[from] tactile::corpus::CorpusError),
    #[error("io at {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn io(path: impl Into<std::path::PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn status(&self) -> u16 {
        match self {
            Self::NotFound { .. } => 404,
            Self::Phase { .. } | Self::Conflict(_) => 409,
            Self::BadRequest(_) | Self::Dss(tactile::dss::DssError::SliderRange(_)) => 400,
            _ => 500,
        }
    }
}
