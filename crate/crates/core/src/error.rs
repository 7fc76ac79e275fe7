use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("element {element} references vertex {vertex}, but the mesh has {count} vertices")]
    IndexOutOfRange {
        element: usize,
        vertex: usize,
        count: usize,
    },

    #[error("degenerate tetrahedra (volume below 1e-12 of the mean): {0:?}")]
    DegenerateElements(Vec<usize>),

    #[error("scene bounding box has zero extent")]
    ZeroExtent,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("barrier evaluated at infeasible distance {0}")]
    InfeasibleDistance(f64),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("singular Schur block for vertex {0}")]
    SingularSchur(usize),

    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),

    #[error("NNLS exceeded {0} iterations")]
    NnlsIterationCap(usize),

    #[error("missing basis rows for element {element} in sub-problem {vertex}")]
    MissingRows { vertex: usize, element: usize },

    #[error("scene config: {0}")]
    Config(String),

    #[error("cache: {0}")]
    Cache(String),

    #[error("reference Newton solve did not converge in frame {0}")]
    ReferenceDiverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
