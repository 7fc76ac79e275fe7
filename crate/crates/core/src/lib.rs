//! Implicit-Euler FEM elastodynamics solved by parallel per-vertex Newton
//! relaxation, where each local solve is regularized by a precomputed
//! perturbation subspace so that it tracks the global Newton step instead of
//! overshooting its local minimizer.
//!
//! The crate is organized bottom-up:
//!
//! - [`mesh`]: tetrahedral meshes, lumped masses, coloring, scene normalization.
//! - [`energy`]: inertia, stable Neo-Hookean elasticity and the log barrier.
//! - [`assembly`]: global energy/gradient/Hessian and the Newton reference solver.
//! - [`subspace`]: perturbation bases (exact, full-coordinate precompute, co-rotation).
//! - [`cubature`]: NNLS and greedy cubature training for the reduced terms.
//! - [`local_solver`]: Jacobi / colored Gauss-Seidel sweeps and the outer loop.
//! - [`harness`]: scene files, the time-stepping driver and solver comparison.

pub mod assembly;
pub mod autodiff;
pub mod cubature;
pub mod energy;
pub mod harness;
pub mod linalg;
pub mod local_solver;
pub mod mesh;
pub mod subspace;

mod error;

pub use error::{Error, Result};

pub use assembly::{IterationStats, Model, SparseSystem, SystemState};
pub use cubature::{CubatureSet, TrainingSet};
pub use energy::{BarrierParams, ElementDerivatives, HalfSpace, MaterialParams};
pub use harness::{MetricsRow, SceneConfig, SolverTag};
pub use local_solver::{Mode, Precomputed, SolverConfig, SubspaceKind, SweepStats};
pub use mesh::{SceneNormalization, TetMesh};
pub use subspace::{PerturbationBasis, RotationField};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Vec12 = nalgebra::SVector<f64, 12>;
pub type Mat12 = nalgebra::SMatrix<f64, 12, 12>;
pub type Mat12x3 = nalgebra::SMatrix<f64, 12, 3>;
