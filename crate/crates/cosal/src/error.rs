use thiserror::Error;

#[derive(Debug, Error)]
pub enum CosalError {
    #[error("{layer}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient in {layer}")]
    NonFiniteGrad { layer: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CosalError>;

impl CosalError {
    /// Shapes can be given as anything Debug-printable (`&[usize]` mostly)
    /// or as a plain description string.
    pub fn shape_mismatch(
        layer: &str,
        expected: impl ShapeDesc,
        got: impl ShapeDesc,
    ) -> Self {
        CosalError::ShapeMismatch {
            layer: layer.to_string(),
            expected: expected.describe(),
            got: got.describe(),
        }
    }
}

pub trait ShapeDesc {
    fn describe(&self) -> String;
}

impl ShapeDesc for &str {
    fn describe(&self) -> String {
        self.to_string()
    }
}

impl ShapeDesc for &String {
    fn describe(&self) -> String {
        self.to_string()
    }
}

impl ShapeDesc for String {
    fn describe(&self) -> String {
        self.clone()
    }
}

impl ShapeDesc for &[usize] {
    fn describe(&self) -> String {
        format!("{self:?}")
    }
}
