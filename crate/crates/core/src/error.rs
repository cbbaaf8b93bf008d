use std::path::PathBuf;

use crate::validate::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value outside support: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scenario `{name}`; valid names: {}", valid.join(", "))]
    UnknownScenario { name: String, valid: Vec<String> },

    #[error("dataset failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Violation>),

    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("{}: unsupported artifact version {found} (this build reads up to {supported})", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn summarize(v: &[Violation]) -> String {
    let mut s = v
        .iter()
        .take(5)
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    if v.len() > 5 {
        s.push_str(&format!("; ... and {} more", v.len() - 5));
    }
    s
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
