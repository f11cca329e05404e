use std::fmt;

/// Errors raised by every layer of the stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A NaN or infinity appeared in a value or gradient.
    #[error("numeric failure at {location}: {detail}")]
    Numeric { location: String, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("pivot translation failed: {0}")]
    Pivot(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn routing(msg: impl fmt::Display) -> Self {
        Error::Routing(msg.to_string())
    }

    pub fn numeric(location: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Numeric { location: location.to_string(), detail: detail.to_string() }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage: stage.to_string(), source: Box::new(e) },
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Routing(_) => 2,
            Error::Io(_) | Error::Corrupt(_) | Error::Version { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
