use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes disagree along a named axis.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

/// Returns a [`Error::Dimension`] unless `got == expected`.
pub(crate) fn expect_dim(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    got: usize,
) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            axis,
            expected,
            got,
        })
    }
}
