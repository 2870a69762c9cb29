use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dense Hessian refused: dimension {dim} exceeds cap {cap}; apply the Hessian through hvp instead")]
    HessianTooLarge { dim: usize, cap: usize },

    #[error("non-finite value during {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },

    #[error("non-finite Hessian-free direction at backward step {step} (delta = {delta:e}); delta may be too small")]
    NonFiniteHessianFree { step: usize, delta: f64 },

    #[error("empty dataset: {0}")]
    EmptyData(&'static str),

    #[error("partition infeasible: class {class} needs {requested} samples but only {available} exist")]
    InfeasiblePartition {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    ShortFile { path: PathBuf, expected: u64, found: u64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("client {client}: {source}")]
    ClientUpdate {
        client: usize,
        #[source]
        source: Box<Error>,
    },
}
