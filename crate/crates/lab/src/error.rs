use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] enkbf_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} bound violation(s) in strict mode")]
    Strict(usize),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    /// 1 for validation and i/o problems, 2 for numerical failures, 3 for
    /// strict-mode bound violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Core(e) if e.is_numerical() => 2,
            LabError::Strict(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
