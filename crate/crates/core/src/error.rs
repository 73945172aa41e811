use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid case: {0}")]
    Validation(String),

    #[error("outage of branch {branch} islands buses {component:?}")]
    Islanding { branch: u32, component: Vec<u32> },

    #[error("unknown bus {0}")]
    UnknownBus(u32),

    #[error("unknown branch {0}")]
    UnknownBranch(u32),

    #[error("branch {0} is out of service")]
    BranchOutOfService(u32),

    #[error("power flow did not converge after {iterations} iterations (last mismatch {last_mismatch:.3e} pu)")]
    Divergence {
        iterations: usize,
        last_mismatch: f64,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at epoch {epoch} (loss is not finite); try a lower learning rate")]
    TrainingDiverged { epoch: usize },

    #[error("feature schema mismatch: {0}")]
    Schema(String),

    #[error("system is unobservable: rank {rank} < {required}")]
    Unobservable { rank: usize, required: usize },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad inputs rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Islanding { .. }
                | Error::UnknownBus(_)
                | Error::UnknownBranch(_)
                | Error::BranchOutOfService(_)
                | Error::Dimension(_)
                | Error::Schema(_)
                | Error::Config(_)
                | Error::Parse(_)
                | Error::CorruptModel(_)
                | Error::VersionMismatch { .. }
        )
    }
}
