use thiserror::Error;

pub type Result<T, E = PkError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PkError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {time} min lies outside the input function range [{lo}, {hi}] min")]
    OutOfRange { time: f64, lo: f64, hi: f64 },

    #[error("non-finite value at voxel {voxel:?}, frame {frame}: {detail}")]
    NumericDomain {
        voxel: [usize; 3],
        frame: usize,
        detail: String,
    },

    #[error("signal outside the SPGR model range at voxel {voxel:?}, frame {frame}")]
    NonPhysicalSignal { voxel: [usize; 3], frame: usize },

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("inputs are identical: PSNR is infinite")]
    InfinitePsnr,
}

pub(crate) fn invalid(msg: impl Into<String>) -> PkError {
    PkError::InvalidInput(msg.into())
}
