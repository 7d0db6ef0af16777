use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mjp_core::Error),
}

pub type LabResult<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config/data, 3 numerical divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use mjp_core::Error as E;
        match self {
            LabError::Config(_) | LabError::Malformed { .. } => 2,
            LabError::Diverged { .. } => 3,
            LabError::Io { .. } => 4,
            LabError::Core(e) => match e {
                E::Io(_) => 4,
                E::NonFinite(_) | E::Diverged(_) => 3,
                _ => 2,
            },
        }
    }
}

impl From<toml::de::Error> for LabError {
    fn from(e: toml::de::Error) -> Self {
        LabError::Config(e.to_string())
    }
}
