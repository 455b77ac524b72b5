use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("config error at `{path}`: {reason}")]
    Schema { path: String, reason: String },

    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(mvmdl_core::Error),
}

impl CliError {
    /// 2 for configuration and input problems, 3 for numeric failures, 1
    /// for everything else.
    pub fn exit_code(&self) -> u8 {
        use mvmdl_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Schema { .. } | CliError::Missing(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::NonFinite(_) => 3,
                E::Domain { .. }
                | E::Precondition(_)
                | E::Dimension { .. }
                | E::Budget { .. }
                | E::Parse { .. }
                | E::Json(_) => 2,
                E::Protocol(_) | E::Decode { .. } | E::Io(_) => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                CliError::Missing(path)
            } else {
                CliError::Io { path, source }
            }
        }
    }
}

impl From<mvmdl_core::Error> for CliError {
    fn from(e: mvmdl_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
