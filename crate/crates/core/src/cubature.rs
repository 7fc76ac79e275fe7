//! Cubature for the far part of each sub-problem's reduced gradient: a few
//! sample elements with nonnegative weights, trained against exact labels on
//! low-frequency rest poses.
//!
//! The far part of the reduced gradient of vertex `i` is
//! `sum_{v far} U_v^T g_v`, where "far" means neither `i` nor one of its
//! neighbors, and `g` is the assembled gradient. Element `e` contributes
//! `sum_{v in e, v far} U_v^T g_v / valence(v)`, so weight 1 on every element
//! reproduces the label exactly.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{nodal_gradient, Model};
use crate::energy::ElementDerivatives;
use crate::linalg::CsrMatrix;
use crate::mesh::TetMesh;
use crate::subspace::{rest_eigenmodes, PerturbationBasis};
use crate::{Error, Mat3, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CubatureSet {
    pub elements: Vec<usize>,
    pub weights: Vec<f64>,
    /// Relative training residual of the final fit.
    pub residual: f64,
    pub converged: bool,
}

impl CubatureSet {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingParams {
    pub poses: usize,
    /// Largest vertex displacement of a pose, as a fraction of the bounding-box diagonal.
    pub amplitude: f64,
    pub target_residual: f64,
    pub candidates_per_round: usize,
    pub max_size: usize,
    /// Rings around a vertex whose reduced gradient is summed exactly at runtime.
    pub near_rings: usize,
    /// Block-Jacobi steps that move the smooth part of the gradient onto the rest operator.
    pub smoothing_steps: usize,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            poses: 20,
            amplitude: 0.02,
            target_residual: 0.01,
            candidates_per_round: 32,
            max_size: 4,
            near_rings: 2,
            smoothing_steps: 2,
        }
    }
}

/// Training poses (displacements from rest) and the assembled gradient at each.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub poses: Vec<Vec<Vec3>>,
    pub gradients: Vec<Vec<Vec3>>,
}

impl TrainingSet {
    /// Lowest `count` eigenmodes of the rest Hessian, each scaled so its largest
    /// vertex displacement is `amplitude` times the bounding-box diagonal.
    /// Gradients are taken with the inertia target at rest and without contact.
    pub fn from_eigenmodes(
        model: &Model,
        hbar: &CsrMatrix,
        h: f64,
        count: usize,
        amplitude: f64,
    ) -> Result<Self> {
        let elastic = model.without_contact();
        let rest = &model.mesh.rest_positions;
        let (mut lo, mut hi) = (rest[0], rest[0]);
        for p in rest {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let diag = (hi - lo).norm();
        let modes = rest_eigenmodes(model, hbar, count)?;
        let mut poses = Vec::with_capacity(modes.len());
        let mut gradients = Vec::with_capacity(modes.len());
        for (_, u) in modes {
            let disp: Vec<Vec3> = u
                .as_slice()
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect();
            let largest = disp.iter().map(|d| d.norm()).fold(0.0, f64::max);
            if largest == 0.0 {
                continue;
            }
            let scale = amplitude * diag / largest;
            let disp: Vec<Vec3> = disp.iter().map(|d| d * scale).collect();
            let x: Vec<Vec3> = rest.iter().zip(&disp).map(|(p, d)| p + d).collect();
            gradients.push(nodal_gradient(&elastic, &x, rest, h)?);
            poses.push(disp);
        }
        Ok(Self { poses, gradients })
    }
}

/// Vertices counted in the far part for sub-problem `i`: free and outside its near field.
pub fn far_mask(model: &Model, i: usize, rings: usize) -> Vec<bool> {
    let mut far: Vec<bool> = (0..model.vertex_count()).map(|v| !model.fixed[v]).collect();
    far[i] = false;
    for v in near_field(model, i, rings) {
        far[v] = false;
    }
    far
}

/// Vertices within `rings` edge hops of `i`, excluding `i`, ascending.
pub fn near_field(model: &Model, i: usize, rings: usize) -> Vec<usize> {
    let mut set = std::collections::BTreeSet::from([i]);
    let mut frontier = vec![i];
    for _ in 0..rings {
        let mut next = Vec::new();
        for v in frontier {
            for w in model.mesh.neighbors(v) {
                if set.insert(w) {
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    set.remove(&i);
    set.into_iter().collect()
}

fn row_block(basis: &PerturbationBasis, v: usize) -> Mat3 {
    match &basis.full_basis {
        Some(full) => Mat3::from_fn(|r, c| full[(3 * v + r, c)]),
        None => basis.rows.get(&v).copied().unwrap_or_else(Mat3::zeros),
    }
}

/// Exact far part of the reduced gradient for one gradient field.
pub fn exact_reduced_gradient(basis: &PerturbationBasis, far: &[bool], g: &[Vec3]) -> Vec3 {
    (0..g.len())
        .filter(|&v| far[v])
        .fold(Vec3::zeros(), |acc, v| {
            acc + row_block(basis, v).transpose() * g[v]
        })
}

/// Contribution of element `e` to the far reduced gradient.
pub fn element_column(
    basis: &PerturbationBasis,
    mesh: &TetMesh,
    far: &[bool],
    e: usize,
    g: &[Vec3],
) -> Vec3 {
    mesh.tets[e]
        .iter()
        .filter(|&&v| far[v])
        .fold(Vec3::zeros(), |acc, &v| {
            acc + row_block(basis, v).transpose() * g[v] / mesh.incident[v].len() as f64
        })
}

/// Lawson-Hanson active-set NNLS: `min ||A w - b||` subject to `w >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    let mut w = DVector::zeros(n);
    if n == 0 {
        return Ok(w);
    }
    let tol = 10.0
        * f64::EPSILON
        * a.column_iter()
            .map(|c| c.amax())
            .fold(0.0, f64::max)
            .max(1.0)
        * (m.max(n) as f64);
    let mut passive = vec![false; n];
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(m, idx.len(), |r, c| a[(r, idx[c])]);
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(idx.len()));
        let mut s = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            s[j] = sol[k];
        }
        s
    };
    // Variables whose entry produced no positive weight (round-off gradient on
    // a rank-deficient passive set); cleared whenever `w` changes.
    let mut blocked = vec![false; n];
    let mut iter = 0;
    loop {
        let grad = a.transpose() * (b - a * &w);
        let next = (0..n)
            .filter(|&j| !passive[j] && !blocked[j])
            .max_by(|&x, &y| grad[x].total_cmp(&grad[y]));
        let Some(j) = next else { break };
        if grad[j] <= tol {
            break;
        }
        passive[j] = true;
        let mut entering = true;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::NnlsIterationCap(max_iter));
            }
            let s = solve_passive(&passive);
            if std::mem::take(&mut entering) && s[j] <= 0.0 {
                passive[j] = false;
                blocked[j] = true;
                break;
            }
            blocked.iter_mut().for_each(|x| *x = false);
            if (0..n).filter(|&k| passive[k]).all(|k| s[k] > 0.0) {
                w = s;
                break;
            }
            let alpha = (0..n)
                .filter(|&k| passive[k] && s[k] <= 0.0)
                .map(|k| w[k] / (w[k] - s[k]))
                .fold(f64::INFINITY, f64::min);
            w += (&s - &w) * alpha;
            for k in 0..n {
                if passive[k] && w[k] <= tol {
                    passive[k] = false;
                    w[k] = 0.0;
                }
            }
        }
    }
    Ok(w)
}

/// Largest violation of the NNLS optimality conditions at `w`.
pub fn nnls_kkt_residual(a: &DMatrix<f64>, b: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let grad = a.transpose() * (a * w - b);
    (0..w.len())
        .map(|j| {
            let neg = (-w[j]).max(0.0);
            if w[j] > 0.0 {
                grad[j].abs().max(neg)
            } else {
                (-grad[j]).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Normalized training system for sub-problem `i`: right-hand side of stacked
/// unit labels and one column per candidate element.
pub struct TrainingSystem {
    pub rhs: DVector<f64>,
    pub candidates: Vec<usize>,
    pub columns: DMatrix<f64>,
}

pub fn training_system(
    model: &Model,
    basis: &PerturbationBasis,
    training: &TrainingSet,
    rings: usize,
) -> TrainingSystem {
    let i = basis.vertex;
    let mesh = &model.mesh;
    let far = far_mask(model, i, rings);
    let labels: Vec<Vec3> = training
        .gradients
        .iter()
        .map(|g| exact_reduced_gradient(basis, &far, g))
        .collect();
    let largest = labels.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let used: Vec<usize> = (0..labels.len())
        .filter(|&t| labels[t].norm() > 1e-12 * largest && largest > 0.0)
        .collect();

    let candidates: Vec<usize> = (0..mesh.element_count())
        .filter(|&e| !mesh.tets[e].contains(&i) && mesh.tets[e].iter().any(|&v| far[v]))
        .collect();
    let rows = 3 * used.len();
    let mut rhs = DVector::zeros(rows);
    let mut columns = DMatrix::zeros(rows, candidates.len());
    for (k, &t) in used.iter().enumerate() {
        let norm = labels[t].norm();
        for r in 0..3 {
            rhs[3 * k + r] = labels[t][r] / norm;
        }
        for (c, &e) in candidates.iter().enumerate() {
            let col = element_column(basis, mesh, &far, e, &training.gradients[t]) / norm;
            for r in 0..3 {
                columns[(3 * k + r, c)] = col[r];
            }
        }
    }
    TrainingSystem {
        rhs,
        candidates,
        columns,
    }
}

/// Greedy selection: each round scores a random sample of unused candidates by
/// the correlation of their column with the current residual, adds the best
/// one, and refits every weight by NNLS.
pub fn train_cubature(
    system: &TrainingSystem,
    params: &TrainingParams,
    seed: u64,
) -> Result<CubatureSet> {
    let bnorm = system.rhs.norm();
    if bnorm == 0.0 || system.candidates.is_empty() {
        return Ok(CubatureSet {
            residual: 0.0,
            converged: true,
            ..Default::default()
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::new();
    let mut weights = DVector::zeros(0);
    let mut residual = system.rhs.clone();
    let mut rel = 1.0;
    let mut pool: Vec<usize> = (0..system.candidates.len()).collect();
    while rel > params.target_residual && chosen.len() < params.max_size && !pool.is_empty() {
        pool.shuffle(&mut rng);
        let take = params.candidates_per_round.min(pool.len());
        let best = pool[..take]
            .iter()
            .enumerate()
            .map(|(slot, &c)| {
                let col = system.columns.column(c);
                let n = col.norm();
                let score = if n > 0.0 {
                    col.dot(&residual) / n
                } else {
                    f64::NEG_INFINITY
                };
                (slot, score)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((slot, score)) = best else { break };
        if !(score > 0.0) {
            // nothing in this sample helps; try another sample unless the pool is exhausted
            if take == pool.len() {
                break;
            }
            continue;
        }
        chosen.push(pool.swap_remove(slot));
        let a = DMatrix::from_fn(system.rhs.len(), chosen.len(), |r, c| {
            system.columns[(r, chosen[c])]
        });
        weights = nnls(&a, &system.rhs, 100 * chosen.len() + 100)?;
        residual = &system.rhs - &a * &weights;
        rel = residual.norm() / bnorm;
    }
    let keep: Vec<usize> = (0..chosen.len()).filter(|&k| weights[k] > 0.0).collect();
    Ok(CubatureSet {
        elements: keep.iter().map(|&k| system.candidates[chosen[k]]).collect(),
        weights: keep.iter().map(|&k| weights[k]).collect(),
        residual: rel,
        converged: rel <= params.target_residual,
    })
}

/// Sampled far-field reduced Hessian and gradient at the current pose.
/// `rows` are the co-rotated basis rows of the sub-problem; `elements` the
/// current (SPD-projected) element derivatives; `g` the assembled gradient;
/// `far` marks far vertices. The complement inertia enters exactly through
/// `reduced_mass_rot / h^2` (already conjugated by the vertex rotation).
#[allow(clippy::too_many_arguments)]
pub fn eval_sampled_reduced(
    vertex: usize,
    rows: &std::collections::BTreeMap<usize, Mat3>,
    cubature: &CubatureSet,
    mesh: &TetMesh,
    elements: &[ElementDerivatives],
    g: &[Vec3],
    far: impl Fn(usize) -> bool,
    reduced_mass_rot: &Mat3,
    h: f64,
) -> Result<(Mat3, Vec3)> {
    let mut hess = reduced_mass_rot / (h * h);
    let mut grad = Vec3::zeros();
    for (&e, &w) in cubature.elements.iter().zip(&cubature.weights) {
        let tet = &mesh.tets[e];
        let mut u = crate::Mat12x3::zeros();
        for (k, v) in tet.iter().enumerate() {
            let r = rows
                .get(v)
                .ok_or(Error::MissingRows { vertex, element: e })?;
            u.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(r);
            if far(*v) {
                grad += r.transpose() * g[*v] * (w / mesh.incident[*v].len() as f64);
            }
        }
        hess += u.transpose() * elements[e].hessian * u * w;
    }
    Ok((hess, grad))
}
