use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid sequence lengths: {0}")]
    Lengths(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    /// A grouped GEMM sub-problem failed validation.
    #[error("grouped problem {index}: {detail}")]
    Problem { index: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    /// Weight file header or payload does not match what the loader expects.
    #[error("weight file field `{field}`: {detail}")]
    WeightFormat { field: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report serialization: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
