use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad inputs, bad config, violated preconditions.
    #[error("validation: {0}")]
    Validation(String),

    /// Malformed dataset or checkpoint contents.
    #[error("load: {0}")]
    Load(String),

    /// Tensor dimension disagreement.
    #[error("shape: {0}")]
    Shape(String),

    /// Training aborts: non-finite losses and friends.
    #[error("runtime: {0}")]
    Runtime(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Runtime(_) => 2,
            _ => 1,
        }
    }
}

#[macro_export]
macro_rules! validation_err {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
