use std::fmt;

/// Coarse error classes. The CLI prints these as a stable token so scripts
/// can branch on the failure kind without parsing the message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Shape,
    InvalidInput,
    Config,
    Io,
    Format,
    Version,
    MissingArtifact,
    Numerical,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Shape => "shape",
            Category::InvalidInput => "invalid-input",
            Category::Config => "config",
            Category::Io => "io",
            Category::Format => "format",
            Category::Version => "version",
            Category::MissingArtifact => "missing-artifact",
            Category::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidInput(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{what} version mismatch: found {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("missing {0}")]
    MissingArtifact(String),
    #[error("non-finite value in {0}")]
    Numerical(String),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Shape { .. } => Category::Shape,
            Error::InvalidInput(_) => Category::InvalidInput,
            Error::Config(_) => Category::Config,
            Error::Io { .. } => Category::Io,
            Error::Format { .. } => Category::Format,
            Error::Version { .. } => Category::Version,
            Error::MissingArtifact(_) => Category::MissingArtifact,
            Error::Numerical(_) => Category::Numerical,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
