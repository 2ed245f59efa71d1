use stem_core::StemError;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INVARIANT: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] StemError),

    #[error("cannot write {path}: {source}")]
    Write {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant check failed: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn field(name: &str, reason: &str) -> Self {
        CliError::Usage(format!("invalid `{name}`: {reason}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invariant(_) => EXIT_INVARIANT,
            _ => EXIT_USAGE,
        }
    }
}
