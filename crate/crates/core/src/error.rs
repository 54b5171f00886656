use std::fmt;

/// Pipeline stage a failure originated from, used to tag diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    DepthHead,
    Crf,
    Lift,
    Pool,
    Fusion,
    Decoder,
    Io,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Backbone => "backbone",
            Stage::DepthHead => "depth-head",
            Stage::Crf => "crf",
            Stage::Lift => "lift",
            Stage::Pool => "pool",
            Stage::Fusion => "fusion",
            Stage::Decoder => "decoder",
            Stage::Io => "io",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or spec dimension disagreed with what an operation expects.
    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary or text file; `offset` is the byte offset where parsing failed.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("weight bundle: missing key(s): {}", .0.join(", "))]
    MissingWeights(Vec<String>),

    #[error("weight bundle: unknown key(s): {unknown:?}; expected names: {expected:?}")]
    UnknownWeights {
        unknown: Vec<String>,
        expected: Vec<String>,
    },

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Strips stage tags to reach the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }

    pub fn is_shape(&self) -> bool {
        matches!(self.root(), Error::Shape { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
