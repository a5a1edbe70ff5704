use std::fmt;

use tactile::corpus::CorpusError;
use tactile::dsp::DspError;
use tactile::dss::DssError;
use tactile::eval::EvalError;
use tactile::init::InitError;
use tactile::model::ModelError;
use tactile::simuser::SimError;
use tactile_service::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        })
    }
}

/// Printed as a single `error kind=<kind> msg=<json string>` line.
#[derive(Debug, thiserror::Error)]
#[error("error kind={kind} msg={}", serde_json::to_string(.message).unwrap_or_default())]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl fmt::Display) -> Self {
        Self { kind, message: message.to_string().replace('\n', " ") }
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        Self::new(Kind::Usage, message)
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self::new(Kind::Data, message)
    }

    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |e| Self::data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn dsp_kind(e: &DspError) -> Kind {
    match e {
        DspError::NonFinite => Kind::Numeric,
        _ => Kind::Data,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::NonFinite { .. } | ModelError::Nnet(_) => Kind::Numeric,
        ModelError::Dsp(d) => dsp_kind(d),
        _ => Kind::Data,
    }
}

fn dss_kind(e: &DssError) -> Kind {
    match e {
        DssError::Model(m) => model_kind(m),
        DssError::NonFinite(_) | DssError::DegenerateJacobian => Kind::Numeric,
        _ => Kind::Data,
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        Self::new(dsp_kind(&e), e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e)
    }
}

impl From<DssError> for CliError {
    fn from(e: DssError) -> Self {
        Self::new(dss_kind(&e), e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match &e {
            CorpusError::Dsp(d) => dsp_kind(d),
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<InitError> for CliError {
    fn from(e: InitError) -> Self {
        Self::data(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let kind = match &e {
            SimError::Dss(d) => dss_kind(d),
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match e {
            EvalError::RankDeficient | EvalError::NonFinite => Kind::Numeric,
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        let kind = match &e {
            ServiceError::Model(m) => model_kind(m),
            ServiceError::Dss(d) => dss_kind(d),
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::data(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e)
    }
}
