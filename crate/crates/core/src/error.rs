use thiserror::Error;

pub type Result<T, E = ArosError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArosError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad IDX magic 0x{observed:08x}")]
    BadMagic { observed: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("corruption {kind} is not supported on {domain} data")]
    UnsupportedCorruption { kind: String, domain: String },

    #[error("class {class} has {count} samples, need at least 2")]
    TooFewSamples { class: usize, count: usize },

    #[error(
        "fake-OOD sampling exhausted for class {class}: accepted {accepted}/{wanted} \
         after {draws} draws (acceptance rate {rate:.3e})"
    )]
    SamplingExhausted {
        class: usize,
        accepted: usize,
        wanted: usize,
        draws: usize,
        rate: f64,
    },

    #[error("ODE state diverged at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("degenerate head: column norm {norm:e} below tolerance")]
    DegenerateHead { norm: f64 },

    #[error("non-finite loss term `{term}`")]
    LossTerm { term: &'static str },

    #[error("attack failed on restart {restart}: {source}")]
    Attack {
        restart: usize,
        #[source]
        source: Box<ArosError>,
    },

    #[error("incompatible artifact: {0}")]
    Compatibility(String),

    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl ArosError {
    pub fn contract(msg: impl Into<String>) -> Self {
        ArosError::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ArosError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ArosError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            ArosError::Config { .. } | ArosError::Serde(_) => ErrorCategory::Config,
            ArosError::Io { .. } | ArosError::Csv(_) => ErrorCategory::Io,
            ArosError::NonFinite { .. }
            | ArosError::Numeric(_)
            | ArosError::Divergence { .. }
            | ArosError::Training { .. }
            | ArosError::LossTerm { .. }
            | ArosError::SamplingExhausted { .. }
            | ArosError::DegenerateHead { .. } => ErrorCategory::Numeric,
            ArosError::Attack { source, .. } => source.category(),
            ArosError::BadMagic { .. } | ArosError::Truncated { .. } => ErrorCategory::Format,
            _ => ErrorCategory::Contract,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
    Contract,
    Format,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Contract => 5,
            ErrorCategory::Format => 6,
        }
    }
}
