//! Outer iteration built from per-vertex 3x3 Newton solves, swept in Jacobi
//! or colored Gauss-Seidel order. Each local system is the full system
//! projected onto the vertex's perturbation subspace: exact (recomputed from
//! the current Hessian), co-rotated with cubature for the far field, or
//! absent (plain vertex block descent).
//!
//! The local gradient always projects the true assembled gradient, so a
//! global equilibrium is a fixed point of every variant.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, total_energy, Model, SystemState};
use crate::assembly::{flatten, unflatten};
use crate::cubature::{
    eval_sampled_reduced, train_cubature, training_system, CubatureSet, TrainingParams, TrainingSet,
};
use crate::energy::{
    barrier_energy_grad_hess, inertia_energy_grad_hess, point_distances, point_triangle_distance,
    ContactPair, ContactStencil, ElementDerivatives,
};
use crate::linalg::{CsrMatrix, SkylineCholesky};
use crate::subspace::{
    precompute_bases, rest_hessian, vertex_rotations, PerturbationBasis, PrecomputePath,
    RotationField,
};
use crate::{Error, Mat3, Result, Vec12, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Jacobi,
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceKind {
    Exact,
    CorotatedCubature,
    None,
}

/// Exact mode refactors the global Hessian every sweep; it is refused above this size.
pub const EXACT_MAX_DOFS: usize = 6000;

const MIN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mode: Mode,
    pub subspace: SubspaceKind,
    /// Stop when the normalized sweep displacement drops below this.
    pub tol_dx: f64,
    pub max_outer: usize,
    pub local_line_search: bool,
    /// Evaluate the global energy after every sweep (logging only).
    pub log_energy: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Jacobi,
            subspace: SubspaceKind::CorotatedCubature,
            tol_dx: 1e-3,
            max_outer: 500,
            local_line_search: true,
            log_energy: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(self.tol_dx > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol_dx must be positive, got {}",
                self.tol_dx
            )));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidParameter(
                "max_outer must be at least 1".into(),
            ));
        }
        if self.subspace == SubspaceKind::Exact && model.dof_count() > EXACT_MAX_DOFS {
            return Err(Error::InvalidParameter(format!(
                "exact subspace mode is limited to {EXACT_MAX_DOFS} DOFs, scene has {}",
                model.dof_count()
            )));
        }
        Ok(())
    }
}

/// One outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub iter: usize,
    /// Global energy after the sweep (NaN when not logged).
    pub energy: f64,
    /// Normalized length of the sweep's total displacement.
    pub dx_norm: f64,
    /// Gradient norm at the start of the sweep.
    pub grad_norm: f64,
    /// Largest single-vertex step, normalized.
    pub max_step: f64,
    /// Local line searches that returned a step below 1.
    pub line_search_activations: usize,
    /// Cumulative wall time since the solve started.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterResult {
    pub x: Vec<Vec3>,
    pub sweeps: Vec<SweepStats>,
    pub converged: bool,
}

/// Sub-problem groups: singletons for Jacobi, color classes for Gauss-Seidel.
pub fn sub_problem_groups(model: &Model, mode: Mode) -> Vec<Vec<usize>> {
    match mode {
        Mode::Jacobi => (0..model.vertex_count()).map(|v| vec![v]).collect(),
        Mode::GaussSeidel => model.mesh.color_groups(),
    }
}

/// Rest-pose bases and trained cubature for every free vertex, with basis rows
/// truncated to what the runtime reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precomputed {
    pub h: f64,
    pub bases: Vec<Option<PerturbationBasis>>,
    pub cubature: Vec<CubatureSet>,
    pub smoothing_steps: usize,
    pub near_rings: usize,
    #[serde(skip)]
    pub rest: Option<RestOperator>,
}

/// Rest Hessian and the inverses of its vertex diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RestOperator {
    pub hbar: CsrMatrix,
    pub diag_inv: Vec<Mat3>,
}

impl RestOperator {
    pub fn new(hbar: CsrMatrix) -> Self {
        let n = hbar.nrows() / 3;
        let diag_inv = (0..n)
            .map(|v| {
                let d = Mat3::from_fn(|r, c| hbar.get(3 * v + r, 3 * v + c));
                d.try_inverse().unwrap_or_else(Mat3::zeros)
            })
            .collect();
        Self { hbar, diag_inv }
    }

    /// Splits `g = H y + r` with `y` from `steps` block-Jacobi sweeps on `H y = g`.
    pub fn split(&self, g: &[Vec3], steps: usize) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut y = vec![Vec3::zeros(); g.len()];
        let mut r = g.to_vec();
        for _ in 0..steps {
            for v in 0..g.len() {
                y[v] += self.diag_inv[v] * r[v] * SMOOTHING_WEIGHT;
            }
            let hy = unflatten(&self.hbar.mul_vec(&flatten(&y)));
            r = g.iter().zip(&hy).map(|(a, b)| a - b).collect();
        }
        (y, r)
    }
}

const SMOOTHING_WEIGHT: f64 = 0.7;

impl Precomputed {
    /// Bases are per vertex for both sweep orders.
    pub fn build(model: &Model, h: f64, params: &TrainingParams, seed: u64) -> Result<Self> {
        let hbar = rest_hessian(model, h)?;
        let groups = sub_problem_groups(model, Mode::Jacobi);
        let (bases, report) =
            precompute_bases(model, &hbar, &groups, PrecomputePath::FullCoordinate)?;
        log::info!(
            "precompute: {} factorization(s), {} solves",
            report.factorizations,
            report.solves
        );
        let (smoothing_steps, near_rings) = (params.smoothing_steps, params.near_rings);
        let mut training =
            TrainingSet::from_eigenmodes(model, &hbar, h, params.poses, params.amplitude)?;
        let rest = RestOperator::new(hbar.clone());
        for g in &mut training.gradients {
            *g = rest.split(g, smoothing_steps).1;
        }
        let trained: Vec<(Option<PerturbationBasis>, CubatureSet)> = bases
            .into_par_iter()
            .enumerate()
            .map(|(v, basis)| {
                let Some(mut basis) = basis else {
                    return Ok((None, CubatureSet::default()));
                };
                let system = training_system(model, &basis, &training, near_rings);
                let cub = train_cubature(
                    &system,
                    params,
                    seed.wrapping_add((v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                )?;
                let mut keep: Vec<usize> = crate::cubature::near_field(model, v, near_rings);
                keep.extend(cub.elements.iter().flat_map(|&e| model.mesh.tets[e]));
                keep.sort_unstable();
                keep.dedup();
                basis.truncate(&keep);
                Ok((Some(basis), cub))
            })
            .collect::<Result<_>>()?;
        let (bases, cubature) = trained.into_iter().unzip();
        Ok(Self {
            h,
            bases,
            cubature,
            smoothing_steps,
            near_rings,
            rest: Some(rest),
        })
    }

    /// Rebuilds the rest operator, which is not serialized.
    pub fn attach_rest(&mut self, model: &Model) -> Result<()> {
        self.rest = Some(RestOperator::new(rest_hessian(model, self.h)?));
        Ok(())
    }

    /// Fraction of sub-problems whose cubature met the training target.
    pub fn converged_fraction(&self) -> f64 {
        let trained: Vec<&CubatureSet> = self
            .bases
            .iter()
            .zip(&self.cubature)
            .filter(|(b, _)| b.is_some())
            .map(|(_, c)| c)
            .collect();
        if trained.is_empty() {
            return 1.0;
        }
        trained.iter().filter(|c| c.converged).count() as f64 / trained.len() as f64
    }
}

/// Current derivatives shared by all local solves of a batch.
struct Snapshot {
    elements: Vec<ElementDerivatives>,
    pairs: Vec<(ContactPair, ElementDerivatives)>,
    pairs_of: Vec<Vec<usize>>,
    grad: Vec<Vec3>,
}

impl Snapshot {
    fn new(model: &Model, x: &[Vec3], z: &[Vec3], h: f64) -> Result<Self> {
        let mut snap = Self {
            elements: model.all_element_derivatives(x, true),
            pairs: vec![],
            pairs_of: vec![],
            grad: vec![],
        };
        snap.rebuild(model, x, z, h)?;
        Ok(snap)
    }

    /// Re-evaluates the elements touched by `moved`, then contacts and the gradient.
    fn update(
        &mut self,
        model: &Model,
        x: &[Vec3],
        z: &[Vec3],
        h: f64,
        moved: &[usize],
    ) -> Result<()> {
        let touched: BTreeSet<usize> = moved
            .iter()
            .flat_map(|&v| model.mesh.incident[v].iter().copied())
            .collect();
        let touched: Vec<usize> = touched.into_iter().collect();
        let fresh: Vec<ElementDerivatives> = touched
            .par_iter()
            .map(|&e| model.element_derivatives(x, e, true))
            .collect();
        for (e, ed) in touched.into_iter().zip(fresh) {
            self.elements[e] = ed;
        }
        self.rebuild(model, x, z, h)
    }

    fn rebuild(&mut self, model: &Model, x: &[Vec3], z: &[Vec3], h: f64) -> Result<()> {
        let n = model.vertex_count();
        self.pairs.clear();
        if let Some(params) = &model.barrier {
            for pair in model.contact_pairs(x) {
                let ed = pair.barrier(params, true)?;
                self.pairs.push((pair, ed));
            }
        }
        self.pairs_of = vec![Vec::new(); n];
        for (p, (pair, _)) in self.pairs.iter().enumerate() {
            for v in pair.stencil.vertices() {
                self.pairs_of[v].push(p);
            }
        }
        let mut grad: Vec<Vec3> = (0..n)
            .map(|v| {
                if model.fixed[v] {
                    Vec3::zeros()
                } else {
                    inertia_energy_grad_hess(&x[v], &z[v], model.mass(v), h).1
                }
            })
            .collect();
        let mut add = |verts: &[usize], g: &Vec12| {
            for (k, &v) in verts.iter().enumerate() {
                if !model.fixed[v] {
                    grad[v] += g.fixed_rows::<3>(3 * k);
                }
            }
        };
        for (e, ed) in self.elements.iter().enumerate() {
            add(&model.mesh.tets[e], &ed.gradient);
        }
        for (pair, ed) in &self.pairs {
            add(&pair.stencil.vertices(), &ed.gradient);
        }
        self.grad = grad;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StencilKind {
    Element(usize),
    Pair(usize),
}

/// A stencil whose exact energy replaces its quadratic model in the local line
/// search; `rows[k]` maps the local step to the motion of the k-th stencil vertex.
#[derive(Debug, Clone)]
struct LocalStencil {
    kind: StencilKind,
    rows: Vec<Mat3>,
}

/// The 3x3 system `A dx = b` of one sub-problem.
#[derive(Debug, Clone)]
pub struct LocalSystem {
    pub vertex: usize,
    pub a: Mat3,
    pub b: Vec3,
    stencils: Vec<LocalStencil>,
}

struct ExactLocal {
    a: Mat3,
    b: Vec3,
    rows: BTreeMap<usize, Mat3>,
}

/// Everything a batch of local solves reads: the current iterate, its
/// derivatives, vertex rotations and (in exact mode) the current bases.
pub struct LocalContext<'a> {
    model: &'a Model,
    z: &'a [Vec3],
    h: f64,
    kind: SubspaceKind,
    pre: Option<&'a Precomputed>,
    pub x: Vec<Vec3>,
    snap: Snapshot,
    rotations: RotationField,
    exact: BTreeMap<usize, ExactLocal>,
    /// Smoothed part (rest frame) and residual (world frame) of the gradient.
    split: Option<(Vec<Vec3>, Vec<Vec3>)>,
}

impl<'a> LocalContext<'a> {
    pub fn new(
        model: &'a Model,
        x: Vec<Vec3>,
        z: &'a [Vec3],
        h: f64,
        kind: SubspaceKind,
        pre: Option<&'a Precomputed>,
    ) -> Result<Self> {
        if kind == SubspaceKind::CorotatedCubature && pre.is_none() {
            return Err(Error::InvalidParameter(
                "co-rotated cubature mode needs precomputed bases".into(),
            ));
        }
        let snap = Snapshot::new(model, &x, z, h)?;
        let rotations = match kind {
            SubspaceKind::CorotatedCubature => vertex_rotations(model, &x),
            _ => RotationField::identity(model.vertex_count()),
        };
        let mut ctx = Self {
            model,
            z,
            h,
            kind,
            pre,
            x,
            snap,
            rotations,
            exact: BTreeMap::new(),
            split: None,
        };
        ctx.refresh_split();
        Ok(ctx)
    }

    fn refresh_split(&mut self) {
        let Some(pre) = self
            .pre
            .filter(|p| self.kind == SubspaceKind::CorotatedCubature && p.smoothing_steps > 0)
        else {
            return;
        };
        let rest = pre.rest.as_ref().expect("rest operator attached");
        let rot = &self.rotations.rotations;
        let g_rest: Vec<Vec3> = self
            .snap
            .grad
            .iter()
            .zip(rot)
            .map(|(g, r)| r.transpose() * g)
            .collect();
        let (y, r) = rest.split(&g_rest, pre.smoothing_steps);
        let r_world = r.iter().zip(rot).map(|(r, q)| q * r).collect();
        self.split = Some((y, r_world));
    }

    /// Gradient norm at the current iterate.
    pub fn grad_norm(&self) -> f64 {
        self.snap
            .grad
            .iter()
            .map(|g| g.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Moves the vertices in `moved` to their entries in `x_new` and refreshes
    /// the derivatives they touch.
    pub fn apply(&mut self, steps: &[(usize, Vec3)]) -> Result<()> {
        for &(v, d) in steps {
            self.x[v] += d;
        }
        let moved: Vec<usize> = steps.iter().map(|s| s.0).collect();
        self.snap
            .update(self.model, &self.x, self.z, self.h, &moved)?;
        self.exact.clear();
        self.refresh_split();
        Ok(())
    }

    /// Exact-mode bases for `groups` from the current SPD-projected Hessian.
    pub fn prepare_exact(&mut self, groups: &[Vec<usize>]) -> Result<()> {
        let model = self.model;
        let state = SystemState {
            x: self.x.clone(),
            x_prev: self.x.clone(),
            v: vec![Vec3::zeros(); model.vertex_count()],
            z: self.z.to_vec(),
            h: self.h,
            rotations: Vec::new(),
        };
        let sys = assemble(model, &state, true)?;
        let chol = SkylineCholesky::factor(&sys.hessian)?;
        let n = model.dof_count();
        let snap = &self.snap;
        let per_group: Vec<Vec<(usize, ExactLocal)>> = groups
            .par_iter()
            .map(|group| {
                let group: Vec<usize> =
                    group.iter().copied().filter(|&v| !model.fixed[v]).collect();
                if group.is_empty() {
                    return Ok(Vec::new());
                }
                let k = 3 * group.len();
                let mut st = DMatrix::zeros(n, k);
                for (a, &v) in group.iter().enumerate() {
                    for c in 0..3 {
                        st[(3 * v + c, 3 * a + c)] = 1.0;
                    }
                }
                let y = chol.solve_columns(&st);
                let m = DMatrix::from_fn(k, k, |r, c| y[(3 * group[r / 3] + r % 3, c)]);
                let m = (&m + m.transpose()) * 0.5;
                let minv = m
                    .cholesky()
                    .ok_or(Error::SingularSchur(group[0]))?
                    .inverse();
                let u = &y * &minv;
                let mut out = Vec::with_capacity(group.len());
                for (a, &i) in group.iter().enumerate() {
                    let ui = u.columns(3 * a, 3);
                    let block = |v: usize| -> Mat3 {
                        if v == i {
                            Mat3::identity()
                        } else if group.contains(&v) || model.fixed[v] {
                            Mat3::zeros()
                        } else {
                            Mat3::from_fn(|r, c| ui[(3 * v + r, c)])
                        }
                    };
                    let mut b = Vec3::zeros();
                    for v in 0..model.vertex_count() {
                        b -= block(v).transpose() * snap.grad[v];
                    }
                    let mut rows = BTreeMap::new();
                    for v in model.mesh.neighbors(i) {
                        rows.insert(v, block(v));
                    }
                    for &p in &snap.pairs_of[i] {
                        for v in snap.pairs[p].0.stencil.vertices() {
                            rows.entry(v).or_insert_with(|| block(v));
                        }
                    }
                    let a_ii = Mat3::from_fn(|r, c| minv[(3 * a + r, 3 * a + c)]);
                    out.push((i, ExactLocal { a: a_ii, b, rows }));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        self.exact = per_group.into_iter().flatten().collect();
        Ok(())
    }

    /// Local system of vertex `i` under the context's subspace mode.
    pub fn system(&self, i: usize) -> Result<LocalSystem> {
        match self.kind {
            SubspaceKind::None => Ok(self.plain_system(i)),
            SubspaceKind::Exact => self.exact_system(i),
            SubspaceKind::CorotatedCubature => self.cubature_system(i),
        }
    }

    fn inertia_block(&self, v: usize) -> Mat3 {
        Mat3::identity() * (self.model.mass(v) / (self.h * self.h))
    }

    /// Barrier stencils at `i` with only `i` moving.
    fn pair_stencils(&self, i: usize) -> Vec<LocalStencil> {
        self.snap.pairs_of[i]
            .iter()
            .map(|&p| {
                let rows = self.snap.pairs[p]
                    .0
                    .stencil
                    .vertices()
                    .iter()
                    .map(|&v| {
                        if v == i {
                            Mat3::identity()
                        } else {
                            Mat3::zeros()
                        }
                    })
                    .collect();
                LocalStencil {
                    kind: StencilKind::Pair(p),
                    rows,
                }
            })
            .collect()
    }

    fn element_stencils(&self, i: usize, row: impl Fn(usize) -> Mat3) -> Vec<LocalStencil> {
        self.model.mesh.incident[i]
            .iter()
            .map(|&e| LocalStencil {
                kind: StencilKind::Element(e),
                rows: self.model.mesh.tets[e].iter().map(|&v| row(v)).collect(),
            })
            .collect()
    }

    fn plain_system(&self, i: usize) -> LocalSystem {
        let mut a = self.inertia_block(i);
        let mut stencils = self.element_stencils(i, |v| {
            if v == i {
                Mat3::identity()
            } else {
                Mat3::zeros()
            }
        });
        stencils.extend(self.pair_stencils(i));
        for s in &stencils {
            a += self.project_stencil(s);
        }
        LocalSystem {
            vertex: i,
            a,
            b: -self.snap.grad[i],
            stencils,
        }
    }

    fn exact_system(&self, i: usize) -> Result<LocalSystem> {
        let ex = self.exact.get(&i).ok_or_else(|| {
            Error::InvalidParameter(format!("no exact basis prepared for vertex {i}"))
        })?;
        let row = |v: usize| ex.rows.get(&v).copied().unwrap_or_else(Mat3::zeros);
        let mut stencils = self.element_stencils(i, row);
        stencils.extend(self.snap.pairs_of[i].iter().map(|&p| {
            LocalStencil {
                kind: StencilKind::Pair(p),
                rows: self.snap.pairs[p]
                    .0
                    .stencil
                    .vertices()
                    .iter()
                    .map(|&v| row(v))
                    .collect(),
            }
        }));
        Ok(LocalSystem {
            vertex: i,
            a: ex.a,
            b: ex.b,
            stencils,
        })
    }

    fn cubature_system(&self, i: usize) -> Result<LocalSystem> {
        let model = self.model;
        let pre = self.pre.expect("checked in new");
        let basis = pre.bases[i]
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("no basis for vertex {i}")))?;
        let rot = &self.rotations.rotations;
        let ri_t = rot[i].transpose();
        let rows: BTreeMap<usize, Mat3> = basis
            .rows
            .iter()
            .map(|(&v, u)| {
                (
                    v,
                    if v == i {
                        Mat3::identity()
                    } else {
                        rot[v] * u * ri_t
                    },
                )
            })
            .collect();
        let neighbors = crate::cubature::near_field(model, i, pre.near_rings);
        let far = |v: usize| v != i && !model.fixed[v] && neighbors.binary_search(&v).is_err();
        let reduced_mass_rot = rot[i] * basis.reduced_mass * ri_t;
        let (field, smooth_part) = match &self.split {
            Some((y, r)) => (r, rot[i] * (-basis.gbar * y[i])),
            None => (&self.snap.grad, Vec3::zeros()),
        };
        let (far_h, far_g) = eval_sampled_reduced(
            i,
            &rows,
            &pre.cubature[i],
            &model.mesh,
            &self.snap.elements,
            field,
            far,
            &reduced_mass_rot,
            self.h,
        )?;

        let row = |v: usize| rows.get(&v).copied().unwrap_or_else(Mat3::zeros);
        let mut stencils = self.element_stencils(i, row);
        stencils.extend(self.pair_stencils(i));
        let mut a = self.inertia_block(i) + far_h;
        for s in &stencils {
            a += self.project_stencil(s);
        }
        a += self.contact_extension_hessian(i);

        let mut g = smooth_part + field[i] + far_g;
        for &v in &neighbors {
            if !model.fixed[v] {
                g += row(v).transpose() * field[v];
            }
        }
        Ok(LocalSystem {
            vertex: i,
            a,
            b: -g,
            stencils,
        })
    }

    /// `R^T H R` for one stencil under its rows.
    fn project_stencil(&self, s: &LocalStencil) -> Mat3 {
        let hess = match s.kind {
            StencilKind::Element(e) => &self.snap.elements[e].hessian,
            StencilKind::Pair(p) => &self.snap.pairs[p].1.hessian,
        };
        let mut out = Mat3::zeros();
        for (a, ra) in s.rows.iter().enumerate() {
            for (b, rb) in s.rows.iter().enumerate() {
                out += ra.transpose() * hess.fixed_view::<3, 3>(3 * a, 3 * b) * rb;
            }
        }
        out
    }

    /// Energy response of other bodies in contact with `i`: their colliding
    /// vertices are assumed to follow `i`, so their inertia and the elastic
    /// elements around them stiffen the local system.
    fn contact_extension_hessian(&self, i: usize) -> Mat3 {
        let model = self.model;
        let colliding: BTreeSet<usize> = self.snap.pairs_of[i]
            .iter()
            .flat_map(|&p| contact_subspace_extension(model, &self.snap.pairs[p].0, i))
            .map(|(v, _)| v)
            .collect();
        if colliding.is_empty() {
            return Mat3::zeros();
        }
        let mut out = Mat3::zeros();
        let elements: BTreeSet<usize> = colliding
            .iter()
            .flat_map(|&v| model.mesh.incident[v].iter().copied())
            .collect();
        for e in elements {
            let tet = &model.mesh.tets[e];
            let hess = &self.snap.elements[e].hessian;
            for (a, va) in tet.iter().enumerate() {
                for (b, vb) in tet.iter().enumerate() {
                    if colliding.contains(va) && colliding.contains(vb) {
                        out += hess.fixed_view::<3, 3>(3 * a, 3 * b);
                    }
                }
            }
        }
        for &v in &colliding {
            out += self.inertia_block(v);
        }
        out
    }

    /// Per-vertex step caps (fractions of the proposed step) that keep every
    /// contact pair at positive distance when all `steps` are applied at once.
    pub fn clearance_caps(&self, steps: &[(usize, Vec3)]) -> Vec<f64> {
        let mut caps = vec![1.0; steps.len()];
        let Some(params) = &self.model.barrier else {
            return caps;
        };
        let longest = steps.iter().map(|(_, d)| d.norm()).fold(0.0, f64::max);
        if longest == 0.0 {
            return caps;
        }
        let mut step_of = vec![Vec3::zeros(); self.model.vertex_count()];
        for &(v, d) in steps {
            step_of[v] = d;
        }
        let radius = params.dhat.max(2.3 * longest);
        let mut clearance = vec![f64::INFINITY; self.model.vertex_count()];
        let mut plane_cap = vec![1.0f64; self.model.vertex_count()];
        for pair in point_distances(&self.model.contact_geometry(&self.x), radius) {
            match pair.stencil {
                ContactStencil::VertexPlane { vertex, plane } => {
                    let rate = self.model.planes[plane].normal.dot(&step_of[vertex]);
                    if rate < 0.0 {
                        plane_cap[vertex] = plane_cap[vertex].min(0.9 * pair.d / -rate);
                    }
                }
                ContactStencil::VertexTriangle { .. } => {
                    for v in pair.stencil.vertices() {
                        clearance[v] = clearance[v].min(pair.d);
                    }
                }
            }
        }
        for (k, &(v, d)) in steps.iter().enumerate() {
            let len = d.norm();
            let mut cap = plane_cap[v];
            if len > 0.0 && clearance[v].is_finite() {
                cap = cap.min(0.45 * clearance[v] / len);
            }
            caps[k] = cap.min(1.0);
        }
        caps
    }

    /// Change of the local energy estimate along `alpha * delta`: the quadratic
    /// model, with each local stencil's quadratic replaced by its exact energy.
    /// Also returns the round-off level of the stencil energy differences.
    fn local_estimate(&self, sys: &LocalSystem, delta: &Vec3, alpha: f64) -> (f64, f64) {
        let mut phi = -alpha * sys.b.dot(delta) + 0.5 * alpha * alpha * delta.dot(&(sys.a * delta));
        let mut magnitude = 0.0;
        for s in &sys.stencils {
            let mut d = Vec12::zeros();
            for (k, r) in s.rows.iter().enumerate() {
                d.fixed_rows_mut::<3>(3 * k).copy_from(&(r * delta));
            }
            let (exact, ed) = match s.kind {
                StencilKind::Element(e) => {
                    let tet = &self.model.mesh.tets[e];
                    let mut x = tet.map(|v| self.x[v]);
                    for k in 0..4 {
                        x[k] += d.fixed_rows::<3>(3 * k) * alpha;
                    }
                    let m = &self.model.mesh;
                    let energy = crate::energy::element_energy(
                        &x,
                        &m.dm_inv[e],
                        &self.model.materials[e],
                        m.rest_volumes[e],
                    );
                    (energy, &self.snap.elements[e])
                }
                StencilKind::Pair(p) => {
                    let (pair, ed) = &self.snap.pairs[p];
                    let moved = |k: usize, v: usize| self.x[v] + d.fixed_rows::<3>(3 * k) * alpha;
                    let dist = match pair.stencil {
                        ContactStencil::VertexPlane { vertex, plane } => {
                            self.model.planes[plane].distance(&moved(0, vertex))
                        }
                        ContactStencil::VertexTriangle { vertex, tri } => {
                            point_triangle_distance(
                                &moved(0, vertex),
                                &[moved(1, tri[0]), moved(2, tri[1]), moved(3, tri[2])],
                            )
                            .0
                        }
                    };
                    let params = self
                        .model
                        .barrier
                        .as_ref()
                        .expect("pairs exist only with a barrier");
                    match barrier_energy_grad_hess(dist, params) {
                        Ok((b, _, _)) => (b, ed),
                        Err(_) => return (f64::INFINITY, 0.0),
                    }
                }
            };
            phi += exact
                - ed.energy
                - alpha * ed.gradient.dot(&d)
                - 0.5 * alpha * alpha * d.dot(&(ed.hessian * d));
            magnitude += exact.abs() + ed.energy.abs();
        }
        (phi, 16.0 * f64::EPSILON * magnitude)
    }

    /// Backtracking on the local estimate from `min(1, cap)`, halving until it decreases.
    pub fn line_search(&self, sys: &LocalSystem, delta: &Vec3, cap: f64) -> f64 {
        if delta.norm() == 0.0 {
            return 1.0;
        }
        let mut alpha = cap.min(1.0);
        let floor = MIN_STEP.min(alpha);
        while alpha > floor {
            let (phi, noise) = self.local_estimate(sys, delta, alpha);
            if phi < 0.0 || (phi <= noise && phi.is_finite()) {
                return alpha;
            }
            alpha *= 0.5;
        }
        log::debug!(
            "local line search at vertex {} hit the step floor",
            sys.vertex
        );
        floor
    }
}

/// Substitute basis rows for the other body's vertices of a contact pair
/// involving vertex `i`: each free colliding vertex follows `i` (identity row).
/// Plane contacts have no such vertices.
pub fn contact_subspace_extension(
    model: &Model,
    pair: &ContactPair,
    i: usize,
) -> Vec<(usize, Mat3)> {
    match pair.stencil {
        ContactStencil::VertexPlane { .. } => Vec::new(),
        ContactStencil::VertexTriangle { .. } => pair
            .stencil
            .vertices()
            .into_iter()
            .filter(|&v| v != i && model.body[v] != model.body[i] && !model.fixed[v])
            .map(|v| (v, Mat3::identity()))
            .collect(),
    }
}

/// Direct 3x3 SPD solve; falls back to a scaled gradient step if `a` is not SPD.
pub fn solve_local(a: &Mat3, b: &Vec3) -> Vec3 {
    if let Some(ch) = a.cholesky() {
        return ch.solve(b);
    }
    let tr = a.trace();
    log::warn!("local system is not positive definite; taking a gradient step");
    if tr > 0.0 {
        b / tr
    } else {
        Vec3::zeros()
    }
}

/// Solves and line-searches every vertex of `batch` against the context, returning the steps.
fn solve_batch(
    ctx: &LocalContext<'_>,
    batch: &[usize],
    line_search: bool,
) -> Result<(Vec<(usize, Vec3)>, usize)> {
    let proposed: Vec<(LocalSystem, Vec3)> = batch
        .par_iter()
        .map(|&i| {
            let sys = ctx.system(i)?;
            let delta = solve_local(&sys.a, &sys.b);
            Ok((sys, delta))
        })
        .collect::<Result<_>>()?;
    let raw: Vec<(usize, Vec3)> = proposed.iter().map(|(s, d)| (s.vertex, *d)).collect();
    let caps = ctx.clearance_caps(&raw);
    let scaled: Vec<(usize, Vec3, bool)> = proposed
        .par_iter()
        .zip(&caps)
        .map(|((sys, delta), &cap)| {
            let alpha = if line_search {
                ctx.line_search(sys, delta, cap)
            } else {
                cap.min(1.0)
            };
            (sys.vertex, delta * alpha, alpha < 1.0)
        })
        .collect();
    let activations = scaled.iter().filter(|s| s.2).count();
    Ok((
        scaled.into_iter().map(|(v, d, _)| (v, d)).collect(),
        activations,
    ))
}

/// One sweep from `x`. Returns the new iterate and the sweep's statistics
/// (`iter` and `wall_ms` are left for the caller).
pub fn sweep(
    model: &Model,
    x: &[Vec3],
    z: &[Vec3],
    h: f64,
    config: &SolverConfig,
    pre: Option<&Precomputed>,
) -> Result<(Vec<Vec3>, SweepStats)> {
    let mut ctx = LocalContext::new(model, x.to_vec(), z, h, config.subspace, pre)?;
    let grad_norm = ctx.grad_norm();
    let free = |v: &usize| !model.fixed[*v];
    let mut activations = 0;
    let mut all_steps = Vec::with_capacity(model.vertex_count());
    match config.mode {
        Mode::Jacobi => {
            let batch: Vec<usize> = (0..model.vertex_count()).filter(free).collect();
            if config.subspace == SubspaceKind::Exact {
                ctx.prepare_exact(&batch.iter().map(|&v| vec![v]).collect::<Vec<_>>())?;
            }
            let (steps, act) = solve_batch(&ctx, &batch, config.local_line_search)?;
            activations += act;
            all_steps = steps;
            for &(v, d) in &all_steps {
                ctx.x[v] += d;
            }
        }
        Mode::GaussSeidel => {
            for color in model.mesh.color_groups() {
                let batch: Vec<usize> = color.into_iter().filter(free).collect();
                if batch.is_empty() {
                    continue;
                }
                if config.subspace == SubspaceKind::Exact {
                    ctx.prepare_exact(std::slice::from_ref(&batch))?;
                }
                let (steps, act) = solve_batch(&ctx, &batch, config.local_line_search)?;
                activations += act;
                ctx.apply(&steps)?;
                all_steps.extend(steps);
            }
        }
    }
    let mut dx = vec![Vec3::zeros(); model.vertex_count()];
    for &(v, d) in &all_steps {
        dx[v] += d;
    }
    let scale = model.normalization.scale;
    let stats = SweepStats {
        iter: 0,
        energy: if config.log_energy {
            total_energy(model, &ctx.x, z, h)?
        } else {
            f64::NAN
        },
        dx_norm: model.normalized_norm(&dx),
        grad_norm,
        max_step: all_steps.iter().map(|(_, d)| d.norm()).fold(0.0, f64::max) * scale,
        line_search_activations: activations,
        wall_ms: 0.0,
    };
    Ok((ctx.x, stats))
}

/// Sweeps from `state.x` until the normalized sweep displacement is below
/// `tol_dx` or `max_outer` sweeps have run. `observer` sees every sweep.
pub fn outer_solve(
    model: &Model,
    state: &SystemState,
    config: &SolverConfig,
    pre: Option<&Precomputed>,
    mut observer: impl FnMut(&SweepStats, &[Vec3]),
) -> Result<OuterResult> {
    config.validate(model)?;
    if config.subspace == SubspaceKind::CorotatedCubature {
        let pre = pre.ok_or_else(|| {
            Error::InvalidParameter("co-rotated cubature mode needs precomputed bases".into())
        })?;
        if pre.bases.len() != model.vertex_count() {
            return Err(Error::InvalidParameter(
                "precomputed data does not match the model".into(),
            ));
        }
        if pre.smoothing_steps > 0 && pre.rest.is_none() {
            return Err(Error::InvalidParameter(
                "precomputed data is missing its rest operator (call attach_rest)".into(),
            ));
        }
        if (pre.h - state.h).abs() > 1e-12 * state.h {
            return Err(Error::InvalidParameter(format!(
                "bases were precomputed for h = {}, step uses h = {}",
                pre.h, state.h
            )));
        }
    }
    let start = Instant::now();
    let mut x = state.x.clone();
    let mut sweeps = Vec::new();
    let mut converged = false;
    for iter in 0..config.max_outer {
        let (next, mut stats) = sweep(model, &x, &state.z, state.h, config, pre)?;
        stats.iter = iter;
        stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        x = next;
        observer(&stats, &x);
        sweeps.push(stats);
        if stats.dx_norm < config.tol_dx {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "outer solve stopped at {} sweeps without converging",
            config.max_outer
        );
    }
    Ok(OuterResult {
        x,
        sweeps,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{compute_z, flatten, unflatten};
    use crate::energy::{BarrierParams, HalfSpace, MaterialParams};
    use crate::mesh::TetMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn beam(cells: [usize; 3], young: f64) -> Model {
        let mesh =
            TetMesh::generate_box(Vec3::zeros(), Vec3::new(1.0, 0.2, 0.2), cells, 1000.0).unwrap();
        let mat = MaterialParams::from_young_poisson(young, 0.3, 1000.0).unwrap();
        let mut m = Model::new(
            vec![(mesh, mat)],
            Vec::new(),
            None,
            Vec3::new(0.0, -9.8, 0.0),
        )
        .unwrap();
        for v in 0..m.vertex_count() {
            m.fixed[v] = m.mesh.rest_positions[v].x < 1e-9;
        }
        m
    }

    fn perturbed_state(model: &Model, h: f64, amp: f64, seed: u64) -> SystemState {
        let mut s = SystemState::at_rest(model, h).unwrap();
        compute_z(model, &mut s, None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in 0..model.vertex_count() {
            if !model.fixed[v] {
                s.x[v] += Vec3::new(
                    rng.gen_range(-amp..amp),
                    rng.gen_range(-amp..amp),
                    rng.gen_range(-amp..amp),
                );
            }
        }
        s
    }

    #[test]
    fn solve_local_cases() {
        let b = Vec3::new(1.0, -2.0, 0.5);
        assert_eq!(solve_local(&Mat3::identity(), &b), b);
        assert_eq!(
            solve_local(&Mat3::identity(), &Vec3::zeros()),
            Vec3::zeros()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let a = m * m.transpose() + Mat3::identity() * 0.1;
            let x = solve_local(&a, &b);
            let oracle = a.lu().solve(&b).unwrap();
            assert!((x - oracle).norm() <= 1e-12 * oracle.norm().max(1.0));
        }
        // indefinite: gradient step
        let a = Mat3::from_diagonal(&Vec3::new(2.0, -1.0, 2.0));
        assert!((solve_local(&a, &b) - b / 3.0).norm() < 1e-15);
    }

    #[test]
    fn plain_mode_is_vertex_block_descent() {
        let model = beam([4, 1, 1], 1e5);
        let s = perturbed_state(&model, 0.01, 0.01, 1);
        let ctx =
            LocalContext::new(&model, s.x.clone(), &s.z, s.h, SubspaceKind::None, None).unwrap();
        let sys = assemble(&model, &s, true).unwrap();
        for i in (0..model.vertex_count()).filter(|&v| !model.fixed[v]) {
            let ls = ctx.system(i).unwrap();
            let h_ii = Mat3::from_fn(|r, c| sys.hessian.get(3 * i + r, 3 * i + c));
            let g_i = Vec3::new(
                sys.gradient[3 * i],
                sys.gradient[3 * i + 1],
                sys.gradient[3 * i + 2],
            );
            assert!((ls.a - h_ii).norm() < 1e-9 * h_ii.norm());
            assert!((ls.b + g_i).norm() < 1e-9 * g_i.norm().max(1.0));
        }
    }

    #[test]
    fn isolated_vertex_reaches_target_in_one_solve() {
        let mesh =
            TetMesh::generate_box(Vec3::zeros(), Vec3::repeat(1.0), [1, 1, 1], 1000.0).unwrap();
        let mut p = mesh.rest_positions.clone();
        let tets = mesh.tets.clone();
        p.push(Vec3::new(5.0, 5.0, 5.0));
        let lonely = p.len() - 1;
        let mut mesh = TetMesh::new(p, tets, 1000.0).unwrap();
        mesh.vertex_masses[lonely] = 1.0;
        let mat = MaterialParams::from_young_poisson(1e5, 0.3, 1000.0).unwrap();
        let model = Model::new(
            vec![(mesh, mat)],
            Vec::new(),
            None,
            Vec3::new(0.0, -9.8, 0.0),
        )
        .unwrap();
        let mut s = SystemState::at_rest(&model, 0.01).unwrap();
        s.v[lonely] = Vec3::new(1.0, 2.0, 3.0);
        compute_z(&model, &mut s, None);
        for kind in [SubspaceKind::None, SubspaceKind::Exact] {
            let cfg = SolverConfig {
                subspace: kind,
                log_energy: false,
                ..Default::default()
            };
            let (x, _) = sweep(&model, &s.x, &s.z, s.h, &cfg, None).unwrap();
            assert!((x[lonely] - s.z[lonely]).norm() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn pure_inertia_converges_in_one_sweep() {
        let mesh =
            TetMesh::generate_box(Vec3::zeros(), Vec3::repeat(1.0), [2, 2, 2], 1000.0).unwrap();
        let mat = MaterialParams::from_young_poisson(1e5, 0.3, 1000.0).unwrap();
        let mut model = Model::new(
            vec![(mesh, mat)],
            Vec::new(),
            None,
            Vec3::new(0.0, -9.8, 0.0),
        )
        .unwrap();
        // no elasticity left
        model
            .materials
            .iter_mut()
            .for_each(|m| (m.mu, m.lambda) = (0.0, 0.0));
        let mut s = SystemState::at_rest(&model, 0.01).unwrap();
        compute_z(&model, &mut s, None);
        for mode in [Mode::Jacobi, Mode::GaussSeidel] {
            let cfg = SolverConfig {
                mode,
                subspace: SubspaceKind::None,
                ..Default::default()
            };
            let (x, _) = sweep(&model, &s.x, &s.z, s.h, &cfg, None).unwrap();
            for v in 0..model.vertex_count() {
                assert!((x[v] - s.z[v]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_jacobi_sweep_is_the_newton_step() {
        let model = beam([5, 2, 2], 1e5);
        let s = perturbed_state(&model, 0.01, 0.002, 7);
        let sys = assemble(&model, &s, true).unwrap();
        let chol = SkylineCholesky::factor(&sys.hessian).unwrap();
        let newton = unflatten(&chol.solve(&sys.gradient.iter().map(|g| -g).collect::<Vec<_>>()));
        let cfg = SolverConfig {
            subspace: SubspaceKind::Exact,
            local_line_search: false,
            log_energy: false,
            ..Default::default()
        };
        let (x, _) = sweep(&model, &s.x, &s.z, s.h, &cfg, None).unwrap();
        for v in (0..model.vertex_count()).filter(|&v| !model.fixed[v]) {
            let d = x[v] - s.x[v];
            assert!(
                (d - newton[v]).norm() <= 1e-8 * newton[v].norm(),
                "vertex {v}"
            );
        }
    }

    #[test]
    fn jacobi_and_gs_agree_on_decoupled_vertices() {
        let mut p = Vec::new();
        let mut tets = Vec::new();
        for k in 0..3 {
            let o = Vec3::new(3.0 * k as f64, 0.0, 0.0);
            let base = p.len();
            p.extend([o, o + Vec3::x(), o + Vec3::y(), o + Vec3::z()]);
            tets.push([base, base + 1, base + 2, base + 3]);
        }
        let mesh = TetMesh::new(p, tets, 1000.0).unwrap();
        let mat = MaterialParams::from_young_poisson(1e4, 0.3, 1000.0).unwrap();
        let model = Model::new(
            vec![(mesh, mat)],
            Vec::new(),
            None,
            Vec3::new(0.0, -9.8, 0.0),
        )
        .unwrap();
        let s = perturbed_state(&model, 0.01, 0.05, 2);
        let run = |mode| {
            let cfg = SolverConfig {
                mode,
                subspace: SubspaceKind::None,
                log_energy: false,
                ..Default::default()
            };
            sweep(&model, &s.x, &s.z, s.h, &cfg, None).unwrap().0
        };
        // every vertex of a lone tet touches the other three, so only
        // vertices in different tets are decoupled; compare one vertex per tet
        let colors = model.mesh.colors.clone();
        let jac = run(Mode::Jacobi);
        let gs = run(Mode::GaussSeidel);
        for v in 0..model.vertex_count() {
            if colors[v] == 0 {
                assert_eq!(jac[v], gs[v]);
            }
        }
    }

    #[test]
    fn line_search_stops_before_plane_crossing() {
        let mesh =
            TetMesh::generate_box(Vec3::zeros(), Vec3::repeat(0.1), [1, 1, 1], 1000.0).unwrap();
        let mat = MaterialParams::from_young_poisson(1e5, 0.3, 1000.0).unwrap();
        let plane = HalfSpace::new(Vec3::new(0.0, -0.01, 0.0), Vec3::y()).unwrap();
        let barrier = BarrierParams {
            dhat: 0.02,
            kappa: 1.0,
        };
        let model =
            Model::new(vec![(mesh, mat)], vec![plane], Some(barrier), Vec3::zeros()).unwrap();
        let mut s = SystemState::at_rest(&model, 0.01).unwrap();
        compute_z(&model, &mut s, None);
        let ctx =
            LocalContext::new(&model, s.x.clone(), &s.z, s.h, SubspaceKind::None, None).unwrap();
        let v = (0..model.vertex_count())
            .find(|&v| model.mesh.rest_positions[v] == Vec3::zeros())
            .unwrap();
        let sys = ctx.system(v).unwrap();
        let delta = Vec3::new(0.0, -0.05, 0.0);
        let crossing = 0.01 / 0.05;
        let cap = ctx.clearance_caps(&[(v, delta)])[0];
        assert!(cap < crossing);
        let alpha = ctx.line_search(&sys, &delta, cap);
        assert!(alpha > 0.0 && alpha < crossing);
        assert_eq!(ctx.line_search(&sys, &Vec3::zeros(), 1.0), 1.0);
    }

    #[test]
    fn quadratic_model_takes_full_step() {
        let model = beam([4, 1, 1], 1e5);
        let s = perturbed_state(&model, 0.01, 1e-6, 5);
        let ctx =
            LocalContext::new(&model, s.x.clone(), &s.z, s.h, SubspaceKind::None, None).unwrap();
        for i in (0..model.vertex_count()).filter(|&v| !model.fixed[v]) {
            let sys = ctx.system(i).unwrap();
            let delta = solve_local(&sys.a, &sys.b);
            assert_eq!(ctx.line_search(&sys, &delta, 1.0), 1.0);
        }
    }

    #[test]
    fn extension_is_noop_for_planes_and_psd_for_triangles() {
        let a = TetMesh::generate_box(Vec3::zeros(), Vec3::repeat(0.1), [1, 1, 1], 1000.0).unwrap();
        let b = TetMesh::generate_box(
            Vec3::new(0.0, 0.105, 0.0),
            Vec3::new(0.1, 0.205, 0.1),
            [1, 1, 1],
            1000.0,
        )
        .unwrap();
        let mat = MaterialParams::from_young_poisson(1e5, 0.3, 1000.0).unwrap();
        let plane = HalfSpace::new(Vec3::new(0.0, -0.005, 0.0), Vec3::y()).unwrap();
        let barrier = BarrierParams {
            dhat: 0.01,
            kappa: 10.0,
        };
        let model = Model::new(
            vec![(a, mat), (b, mat)],
            vec![plane],
            Some(barrier),
            Vec3::zeros(),
        )
        .unwrap();
        let s = SystemState::at_rest(&model, 0.01).unwrap();
        let pairs = model.contact_pairs(&s.x);
        assert!(pairs
            .iter()
            .any(|p| matches!(p.stencil, ContactStencil::VertexPlane { .. })));
        assert!(pairs
            .iter()
            .any(|p| matches!(p.stencil, ContactStencil::VertexTriangle { .. })));
        let ctx =
            LocalContext::new(&model, s.x.clone(), &s.x, s.h, SubspaceKind::None, None).unwrap();
        for pair in &pairs {
            let i = pair.stencil.vertices()[0];
            let ext = contact_subspace_extension(&model, pair, i);
            match pair.stencil {
                ContactStencil::VertexPlane { .. } => assert!(ext.is_empty()),
                ContactStencil::VertexTriangle { .. } => {
                    assert_eq!(ext.len(), 3);
                    let hx = ctx.contact_extension_hessian(i);
                    let eig = (hx + hx.transpose()).symmetric_eigenvalues() * 0.5;
                    assert!(eig.min() >= -1e-9 * eig.amax());
                }
            }
        }
        // separated bodies: no pairs, no extension
        let far = SystemState {
            x: s.x
                .iter()
                .enumerate()
                .map(|(v, p)| {
                    if model.body[v] == 1 {
                        p + Vec3::y()
                    } else {
                        *p
                    }
                })
                .collect(),
            ..s
        };
        let ctx = LocalContext::new(
            &model,
            far.x.clone(),
            &far.x,
            far.h,
            SubspaceKind::None,
            None,
        )
        .unwrap();
        for v in 0..model.vertex_count() {
            if model.body[v] == 0 && model.mesh.rest_positions[v].y > 0.05 {
                assert_eq!(ctx.contact_extension_hessian(v), Mat3::zeros());
            }
        }
    }

    #[test]
    fn cubature_mode_fixed_point_is_equilibrium() {
        let model = beam([6, 2, 2], 1e5);
        let h = 0.01;
        let pre = Precomputed::build(
            &model,
            h,
            &TrainingParams {
                max_size: 6,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let mut s = SystemState::at_rest(&model, h).unwrap();
        compute_z(&model, &mut s, None);
        let newton = crate::assembly::newton_solve(
            &model,
            &s,
            &crate::assembly::NewtonConfig {
                tol_dx: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = SolverConfig {
            local_line_search: false,
            log_energy: false,
            ..Default::default()
        };
        let (x, _) = sweep(&model, &newton.x, &s.z, h, &cfg, Some(&pre)).unwrap();
        let moved = x
            .iter()
            .zip(&newton.x)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(moved < 1e-9, "{moved}");
    }

    #[test]
    fn sweeps_are_deterministic() {
        let model = beam([5, 2, 2], 1e5);
        let s = perturbed_state(&model, 0.01, 0.005, 9);
        for mode in [Mode::Jacobi, Mode::GaussSeidel] {
            let cfg = SolverConfig {
                mode,
                subspace: SubspaceKind::None,
                ..Default::default()
            };
            let a = sweep(&model, &s.x, &s.z, s.h, &cfg, None).unwrap();
            let b = sweep(&model, &s.x, &s.z, s.h, &cfg, None).unwrap();
            assert_eq!(flatten(&a.0), flatten(&b.0));
            assert_eq!(a.1.energy.to_bits(), b.1.energy.to_bits());
        }
    }
}
