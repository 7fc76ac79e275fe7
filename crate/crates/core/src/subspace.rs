//! Perturbation subspaces: for a sub-problem (one vertex, or a whole color
//! group), the displacement the rest of the mesh undergoes when the
//! sub-problem's DOFs are perturbed with everything else in incremental
//! equilibrium. Built once at rest and co-rotated per vertex at runtime.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, Model, SystemState};
use crate::energy::deformation_gradient;
use crate::linalg::{polar_rotation, CsrMatrix, SkylineCholesky};
use crate::{Error, Mat12x3, Mat3, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBasis {
    pub vertex: usize,
    /// Vertex block of `-(S H^-1 S^T)^-1`, the negated Schur complement.
    pub gbar: Mat3,
    /// Row blocks of the basis, keyed by vertex. The entry for `vertex` is identity.
    pub rows: BTreeMap<usize, Mat3>,
    /// Sum over all other vertices of `m_j U_j^T U_j`.
    pub reduced_mass: Mat3,
    /// Full N x 3 basis; only kept while training or verifying.
    #[serde(skip)]
    pub full_basis: Option<DMatrix<f64>>,
}

impl PerturbationBasis {
    pub fn row(&self, v: usize) -> Option<&Mat3> {
        self.rows.get(&v)
    }

    /// Drops every row block not listed in `keep` (plus the vertex itself) and the full basis.
    pub fn truncate(&mut self, keep: &[usize]) {
        let vertex = self.vertex;
        self.rows
            .retain(|v, _| *v == vertex || keep.binary_search(v).is_ok());
        self.full_basis = None;
    }

    /// Stacked 12 x 3 rows for the four vertices of a tet.
    pub fn element_rows(&self, e: usize, tet: &[usize; 4]) -> Result<Mat12x3> {
        let mut out = Mat12x3::zeros();
        for (k, v) in tet.iter().enumerate() {
            let r = self.rows.get(v).ok_or(Error::MissingRows {
                vertex: self.vertex,
                element: e,
            })?;
            out.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(r);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationField {
    pub rotations: Vec<Mat3>,
}

impl RotationField {
    pub fn identity(n: usize) -> Self {
        Self {
            rotations: vec![Mat3::identity(); n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecomputePath {
    /// One factorization of the full rest Hessian, Schur blocks per sub-problem.
    FullCoordinate,
    /// One factorization of the complement block per sub-problem.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrecomputeReport {
    pub factorizations: usize,
    pub solves: usize,
}

/// Rest Hessian `M/h^2 + d2Psi(rest)`, fixed DOFs eliminated (identity rows).
/// Contact is left out even if the rest pose is within the barrier range.
pub fn rest_hessian(model: &Model, h: f64) -> Result<CsrMatrix> {
    let elastic = model.without_contact();
    let state = SystemState::at_rest(&elastic, h)?;
    Ok(assemble(&elastic, &state, true)?.hessian)
}

fn vertex_dofs(vs: &[usize]) -> Vec<usize> {
    vs.iter()
        .flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2])
        .collect()
}

/// Complement DOFs of a set of (sorted) sub-problem DOFs.
fn complement(n: usize, local: &[usize]) -> Vec<usize> {
    (0..n).filter(|d| local.binary_search(d).is_err()).collect()
}

/// Newton-equivalent update of vertex `i` from the block system, factorizing
/// the complement block for this call:
/// `(H_ii + H_iC U_C)^-1 (H_iC H_CC^-1 g_C - g_i)` with `U_C = -H_CC^-1 H_iC^T`.
pub fn exact_local_update(h: &CsrMatrix, g: &[f64], i: usize) -> Result<Vec3> {
    let n = h.nrows();
    let local = vertex_dofs(&[i]);
    let comp = complement(n, &local);
    let hcc = h.principal_submatrix(&comp);
    let chol = SkylineCholesky::factor(&hcc).map_err(|_| Error::SingularSchur(i))?;
    let hci = DMatrix::from_fn(comp.len(), 3, |r, c| h.get(comp[r], local[c]));
    let uc = -chol.solve_columns(&hci);
    let gc = DVector::from_iterator(comp.len(), comp.iter().map(|&d| g[d]));
    let y = chol.solve_vector(&gc);
    let hii = Mat3::from_fn(|r, c| h.get(local[r], local[c]));
    let a = hii + Mat3::from_fn(|r, c| hci.column(r).dot(&uc.column(c)));
    let rhs = Vec3::from_fn(|r, _| hci.column(r).dot(&y) - g[local[r]]);
    a.try_inverse()
        .map(|inv| inv * rhs)
        .ok_or(Error::SingularSchur(i))
}

/// Bases for one sub-problem group from a factorization of the full matrix:
/// `Y = H^-1 S^T`, Schur block `S Y`, basis `U = Y (S Y)^-1`. Returns one N x 3
/// block per group vertex and the matching vertex block of `-(S Y)^-1`.
pub fn group_bases_full_coordinate(
    chol: &SkylineCholesky,
    group: &[usize],
) -> Result<Vec<(DMatrix<f64>, Mat3)>> {
    let n = chol.dim();
    let local = vertex_dofs(group);
    let mut rhs = DMatrix::zeros(n, local.len());
    for (c, &d) in local.iter().enumerate() {
        rhs[(d, c)] = 1.0;
    }
    let y = chol.solve_columns(&rhs);
    let schur = DMatrix::from_fn(local.len(), local.len(), |r, c| y[(local[r], c)]);
    let schur = (&schur + schur.transpose()) * 0.5;
    let inv = schur
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularSchur(group.first().copied().unwrap_or(0)))?;
    let u = &y * &inv;
    Ok(group
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let mut cols = u.columns(3 * k, 3).into_owned();
            // constrained rows are exactly identity / zero
            for (r, &d) in local.iter().enumerate() {
                for c in 0..3 {
                    cols[(d, c)] = if r == 3 * k + c { 1.0 } else { 0.0 };
                }
            }
            let gbar = -Mat3::from_fn(|r, c| inv[(3 * k + r, 3 * k + c)]);
            (cols, gbar)
        })
        .collect())
}

/// Same bases by factorizing the complement block of the group directly.
pub fn group_bases_naive(h: &CsrMatrix, group: &[usize]) -> Result<Vec<(DMatrix<f64>, Mat3)>> {
    let n = h.nrows();
    let mut local = vertex_dofs(group);
    local.sort_unstable();
    let comp = complement(n, &local);
    let hcc = h.principal_submatrix(&comp);
    let first = group.first().copied().unwrap_or(0);
    let chol = SkylineCholesky::factor(&hcc).map_err(|_| Error::SingularSchur(first))?;
    let mut out = Vec::with_capacity(group.len());
    for &v in group {
        let dofs = vertex_dofs(&[v]);
        let hci = DMatrix::from_fn(comp.len(), 3, |r, c| h.get(comp[r], dofs[c]));
        let uc = -chol.solve_columns(&hci);
        let mut full = DMatrix::zeros(n, 3);
        for (r, &d) in comp.iter().enumerate() {
            for c in 0..3 {
                full[(d, c)] = uc[(r, c)];
            }
        }
        for c in 0..3 {
            full[(dofs[c], c)] = 1.0;
        }
        // Schur complement of the group block: H_GG + H_GC U_C restricted to v
        let mut schur = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                schur[(r, c)] = h
                    .row(dofs[r])
                    .map(|(col, val)| val * full[(col, c)])
                    .sum::<f64>();
            }
        }
        out.push((full, -schur));
    }
    Ok(out)
}

fn basis_from_full(model: &Model, v: usize, full: DMatrix<f64>, gbar: Mat3) -> PerturbationBasis {
    let mut rows = BTreeMap::new();
    let mut reduced_mass = Mat3::zeros();
    for j in 0..model.vertex_count() {
        let block = Mat3::from_fn(|r, c| full[(3 * j + r, c)]);
        if j != v && !model.fixed[j] {
            reduced_mass += block.transpose() * block * model.mass(j);
        }
        rows.insert(j, block);
    }
    rows.insert(v, Mat3::identity());
    PerturbationBasis {
        vertex: v,
        gbar: (gbar + gbar.transpose()) * 0.5,
        rows,
        reduced_mass,
        full_basis: Some(full),
    }
}

/// Bases for every free vertex. `groups` partitions the vertices into
/// sub-problems (singletons for Jacobi, color groups for Gauss-Seidel); fixed
/// vertices are skipped. Entry `v` of the result is `None` for fixed vertices.
pub fn precompute_bases(
    model: &Model,
    hbar: &CsrMatrix,
    groups: &[Vec<usize>],
    path: PrecomputePath,
) -> Result<(Vec<Option<PerturbationBasis>>, PrecomputeReport)> {
    let groups: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            g.iter()
                .copied()
                .filter(|&v| !model.fixed[v])
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect();
    let mut report = PrecomputeReport::default();
    let per_group: Vec<Vec<(DMatrix<f64>, Mat3)>> = match path {
        PrecomputePath::FullCoordinate => {
            let chol = SkylineCholesky::factor(hbar)?;
            report.factorizations = 1;
            report.solves = groups.iter().map(|g| 3 * g.len()).sum();
            groups
                .par_iter()
                .map(|g| group_bases_full_coordinate(&chol, g))
                .collect::<Result<_>>()?
        }
        PrecomputePath::Naive => {
            report.factorizations = groups.len();
            report.solves = groups.iter().map(|g| 3 * g.len()).sum();
            groups
                .par_iter()
                .map(|g| group_bases_naive(hbar, g))
                .collect::<Result<_>>()?
        }
    };
    let mut bases: Vec<Option<PerturbationBasis>> = vec![None; model.vertex_count()];
    for (g, blocks) in groups.iter().zip(per_group) {
        for (&v, (full, gbar)) in g.iter().zip(blocks) {
            bases[v] = Some(basis_from_full(model, v, full, gbar));
        }
    }
    Ok((bases, report))
}

/// Per-vertex rotation: polar factor of the volume-weighted mean deformation
/// gradient of the incident elements.
pub fn vertex_rotations(model: &Model, x: &[Vec3]) -> RotationField {
    let mesh = &model.mesh;
    let fs: Vec<Mat3> = (0..mesh.element_count())
        .into_par_iter()
        .map(|e| {
            deformation_gradient(&model.element_positions(x, e), &mesh.dm_inv[e])
                * mesh.rest_volumes[e]
        })
        .collect();
    let rotations = (0..mesh.vertex_count())
        .into_par_iter()
        .map(|v| {
            let mut f = Mat3::zeros();
            let mut w = 0.0;
            for &e in &mesh.incident[v] {
                f += fs[e];
                w += mesh.rest_volumes[e];
            }
            if w > 0.0 {
                polar_rotation(&(f / w))
            } else {
                Mat3::identity()
            }
        })
        .collect();
    RotationField { rotations }
}

/// Row blocks co-rotated into the current pose: `R_v U_v R_i^T`.
pub fn corotated_rows(
    basis: &PerturbationBasis,
    rotations: &RotationField,
) -> BTreeMap<usize, Mat3> {
    let ri_t = rotations.rotations[basis.vertex].transpose();
    basis
        .rows
        .iter()
        .map(|(&v, u)| (v, rotations.rotations[v] * u * ri_t))
        .collect()
}

/// Free DOFs (not eliminated by Dirichlet constraints), ascending.
pub fn free_dofs(model: &Model) -> Vec<usize> {
    (0..model.vertex_count())
        .filter(|&v| !model.fixed[v])
        .flat_map(|v| [3 * v, 3 * v + 1, 3 * v + 2])
        .collect()
}

/// The `k` lowest eigenpairs of `h` restricted to the free DOFs, embedded back
/// into full-length vectors (unit Euclidean norm, ascending eigenvalue).
pub fn rest_eigenmodes(model: &Model, h: &CsrMatrix, k: usize) -> Result<Vec<(f64, DVector<f64>)>> {
    let free = free_dofs(model);
    let sub = h.principal_submatrix(&free).to_dense();
    let sub = (&sub + sub.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(sub, 1e-14, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..free.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    Ok(order
        .into_iter()
        .take(k)
        .map(|c| {
            let mut v = DVector::zeros(h.nrows());
            for (r, &d) in free.iter().enumerate() {
                v[d] = eig.eigenvectors[(r, c)];
            }
            (eig.eigenvalues[c], v)
        })
        .collect())
}
