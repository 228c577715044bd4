use std::path::{Path, PathBuf};
use tasd_core::metrics::MetricError;
use tasd_core::segnet::SegNetError;
use tasd_core::shape_dictionary::DictError;
use tasd_core::synthdata::SynthError;
use tasd_core::tta::TtaError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const MISSING_ARTIFACT: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing {what}: expected {path}")]
    MissingArtifact { what: &'static str, path: PathBuf },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dict(#[from] DictError),
    #[error(transparent)]
    Net(#[from] SegNetError),
    #[error(transparent)]
    Tta(#[from] TtaError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::MissingArtifact { .. } => exit::MISSING_ARTIFACT,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Synth(e) => synth_code(e),
            CliError::Dict(e) => dict_code(e),
            CliError::Net(e) => net_code(e),
            CliError::Tta(e) => match e {
                TtaError::Net(n) => net_code(n),
                TtaError::Diff(_) | TtaError::FrozenParamsChanged | TtaError::Metric(_) => exit::NUMERIC,
                TtaError::Log(_) => exit::IO,
                TtaError::IdenticalSeeds(_) | TtaError::NoShapeBranch(_) => exit::CONFIG,
            },
            CliError::Metric(MetricError::ResolutionMismatch { .. }) => exit::CONFIG,
            CliError::Metric(_) => exit::NUMERIC,
        }
    }
}

fn synth_code(e: &SynthError) -> i32 {
    match e {
        SynthError::Io(_) | SynthError::Json(_) | SynthError::BadSampleFile { .. } => exit::IO,
        _ => exit::CONFIG,
    }
}

fn dict_code(e: &DictError) -> i32 {
    match e {
        DictError::Io(_)
        | DictError::BadMagic
        | DictError::UnsupportedVersion(_)
        | DictError::Truncated { .. }
        | DictError::SizeMismatch { .. } => exit::IO,
        DictError::NonFinite(_) | DictError::NoSamples => exit::NUMERIC,
        _ => exit::CONFIG,
    }
}

fn net_code(e: &SegNetError) -> i32 {
    match e {
        SegNetError::Io(_) | SegNetError::Checkpoint(_) => exit::IO,
        SegNetError::Layer { .. } | SegNetError::Diff(_) | SegNetError::Diverged { .. } => exit::NUMERIC,
        SegNetError::Dict(d) => dict_code(d),
        _ => exit::CONFIG,
    }
}
