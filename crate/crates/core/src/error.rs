use std::fmt;

/// Error type shared across the engine.
#[derive(Debug)]
pub enum CoreError {
    /// Tensor/layer shape disagreement.
    Shape(String),
    /// Invalid configuration (architecture, scheme, schedule, ...).
    Config(String),
    /// Bad or inconsistent data (manifests, clips, checkpoints, images).
    Data(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Non-finite values where finite ones are required (NaN/inf loss, ...).
    Numeric(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Data(m) => write!(f, "data error: {m}"),
            CoreError::Io(e) => write!(f, "io error: {e}"),
            CoreError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

// Display already folds the io::Error text in, so exposing it again through
// source() would make chain-printing reporters repeat the message.
impl std::error::Error for CoreError {}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e)
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Data(format!("json: {e}"))
    }
}

impl From<image::ImageError> for CoreError {
    fn from(e: image::ImageError) -> Self {
        CoreError::Data(format!("image: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

/// Convenience constructors used throughout the crate.
pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Data(msg.into()))
}
