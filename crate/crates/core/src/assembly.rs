//! Global incremental potential: inertia + elasticity + contact barrier,
//! assembled into a sparse system, and the projected Newton solver used as
//! the reference for every local method.

use std::time::Instant;

use rayon::prelude::*;

use crate::energy::{
    element_derivatives, element_energy, inertia_energy_grad_hess, point_distances, BarrierParams,
    ContactGeometry, ContactPair, ElementDerivatives, HalfSpace, MaterialParams,
};
use crate::linalg::{CsrMatrix, SkylineCholesky};
use crate::mesh::{normalize_scene, SceneNormalization, TetMesh};
use crate::{Error, Mat3, Result, Vec3};

/// Everything about the scene that does not change during a simulation.
#[derive(Debug, Clone)]
pub struct Model {
    pub mesh: TetMesh,
    /// Body index of each vertex.
    pub body: Vec<usize>,
    /// Material of each element.
    pub materials: Vec<MaterialParams>,
    pub fixed: Vec<bool>,
    pub planes: Vec<HalfSpace>,
    pub barrier: Option<BarrierParams>,
    pub gravity: Vec3,
    pub surface_vertices: Vec<usize>,
    pub normalization: SceneNormalization,
}

impl Model {
    /// Merges bodies (each with its own material) into one model.
    pub fn new(
        bodies: Vec<(TetMesh, MaterialParams)>,
        planes: Vec<HalfSpace>,
        barrier: Option<BarrierParams>,
        gravity: Vec3,
    ) -> Result<Self> {
        for (_, m) in &bodies {
            m.validate()?;
        }
        if let Some(b) = &barrier {
            b.validate()?;
        }
        let normalization = normalize_scene(&bodies.iter().map(|(m, _)| m).collect::<Vec<_>>())?;
        let materials = bodies
            .iter()
            .flat_map(|(m, p)| std::iter::repeat(*p).take(m.element_count()))
            .collect();
        let meshes: Vec<TetMesh> = bodies.into_iter().map(|(m, _)| m).collect();
        let (mesh, body) = TetMesh::merge(&meshes);
        let mut on_surface = vec![false; mesh.vertex_count()];
        for t in &mesh.surface_tris {
            for &v in t {
                on_surface[v] = true;
            }
        }
        let surface_vertices = (0..mesh.vertex_count())
            .filter(|&v| on_surface[v])
            .collect();
        Ok(Self {
            fixed: vec![false; mesh.vertex_count()],
            mesh,
            body,
            materials,
            planes,
            barrier,
            gravity,
            surface_vertices,
            normalization,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn dof_count(&self) -> usize {
        3 * self.vertex_count()
    }

    pub fn mass(&self, v: usize) -> f64 {
        self.mesh.vertex_masses[v]
    }

    /// Length of `dx` (all vertices stacked) in normalized scene units.
    pub fn normalized_norm(&self, dx: &[Vec3]) -> f64 {
        self.normalization.scale * dx.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt()
    }

    /// The same scene with the barrier switched off.
    pub fn without_contact(&self) -> Model {
        Model {
            barrier: None,
            ..self.clone()
        }
    }

    pub fn has_contact(&self) -> bool {
        self.barrier.is_some()
    }

    pub fn contact_pairs(&self, x: &[Vec3]) -> Vec<ContactPair> {
        match &self.barrier {
            None => Vec::new(),
            Some(b) => point_distances(&self.contact_geometry(x), b.dhat),
        }
    }

    pub fn contact_geometry<'a>(&'a self, x: &'a [Vec3]) -> ContactGeometry<'a> {
        ContactGeometry {
            positions: x,
            surface_tris: &self.mesh.surface_tris,
            surface_vertices: &self.surface_vertices,
            body: &self.body,
            planes: &self.planes,
        }
    }

    pub fn element_positions(&self, x: &[Vec3], e: usize) -> [Vec3; 4] {
        self.mesh.tets[e].map(|v| x[v])
    }

    pub fn element_derivatives(&self, x: &[Vec3], e: usize, project: bool) -> ElementDerivatives {
        element_derivatives(
            &self.element_positions(x, e),
            &self.mesh.dm_inv[e],
            &self.materials[e],
            self.mesh.rest_volumes[e],
            project,
        )
    }

    pub fn element_energy(&self, x: &[Vec3], e: usize) -> f64 {
        element_energy(
            &self.element_positions(x, e),
            &self.mesh.dm_inv[e],
            &self.materials[e],
            self.mesh.rest_volumes[e],
        )
    }

    /// All element derivatives, in element order.
    pub fn all_element_derivatives(&self, x: &[Vec3], project: bool) -> Vec<ElementDerivatives> {
        (0..self.mesh.element_count())
            .into_par_iter()
            .map(|e| self.element_derivatives(x, e, project))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub x: Vec<Vec3>,
    /// Positions at the end of the previous step.
    pub x_prev: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub z: Vec<Vec3>,
    pub h: f64,
    pub rotations: Vec<Mat3>,
}

impl SystemState {
    pub fn at_rest(model: &Model, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "time step must be positive, got {h}"
            )));
        }
        let x = model.mesh.rest_positions.clone();
        let n = x.len();
        Ok(Self {
            x_prev: x.clone(),
            z: x.clone(),
            x,
            v: vec![Vec3::zeros(); n],
            h,
            rotations: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub energy: f64,
    pub gradient: Vec<f64>,
    pub hessian: CsrMatrix,
}

/// Per-iteration record shared by the Newton and local solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iter: usize,
    pub energy: f64,
    pub dx_norm: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

/// Inertia target `x_prev + h v + h^2 M^-1 f_ext`; fixed vertices target their
/// current position. `external_force` defaults to gravity.
pub fn compute_z(model: &Model, state: &mut SystemState, external_force: Option<&[Vec3]>) {
    let h = state.h;
    state.z = (0..model.vertex_count())
        .map(|i| {
            if model.fixed[i] {
                return state.x_prev[i];
            }
            let accel = match external_force {
                Some(f) => f[i] / model.mass(i),
                None => model.gravity,
            };
            state.x_prev[i] + state.v[i] * h + accel * (h * h)
        })
        .collect();
}

/// Implicit Euler velocity update; `x_new` becomes the previous position of the next step.
pub fn step_velocity_update(state: &mut SystemState, x_new: Vec<Vec3>) {
    state.v = x_new
        .iter()
        .zip(&state.x_prev)
        .map(|(a, b)| (a - b) / state.h)
        .collect();
    state.x_prev = x_new.clone();
    state.x = x_new;
}

/// Total incremental potential at `x`.
pub fn total_energy(model: &Model, x: &[Vec3], z: &[Vec3], h: f64) -> Result<f64> {
    let inertia: Vec<f64> = (0..model.vertex_count())
        .into_par_iter()
        .map(|i| {
            if model.fixed[i] {
                0.0
            } else {
                inertia_energy_grad_hess(&x[i], &z[i], model.mass(i), h).0
            }
        })
        .collect();
    let elastic: Vec<f64> = (0..model.mesh.element_count())
        .into_par_iter()
        .map(|e| model.element_energy(x, e))
        .collect();
    let mut energy = inertia.iter().sum::<f64>() + elastic.iter().sum::<f64>();
    if let Some(b) = &model.barrier {
        for pair in model.contact_pairs(x) {
            energy += crate::energy::barrier_energy_grad_hess(pair.d, b)?.0;
        }
    }
    Ok(energy)
}

/// Assembled gradient per vertex (zero at fixed vertices), without the Hessian.
pub fn nodal_gradient(model: &Model, x: &[Vec3], z: &[Vec3], h: f64) -> Result<Vec<Vec3>> {
    let mut g: Vec<Vec3> = (0..model.vertex_count())
        .map(|i| {
            if model.fixed[i] {
                Vec3::zeros()
            } else {
                inertia_energy_grad_hess(&x[i], &z[i], model.mass(i), h).1
            }
        })
        .collect();
    let elements: Vec<crate::Vec12> = (0..model.mesh.element_count())
        .into_par_iter()
        .map(|e| {
            let p = model.element_positions(x, e);
            let f = crate::energy::deformation_gradient(&p, &model.mesh.dm_inv[e]);
            let (stress, _) = crate::energy::snh_stress(&f, &model.materials[e]);
            let v = crate::energy::Vec9::from_column_slice(stress.as_slice());
            crate::energy::dfdx(&model.mesh.dm_inv[e]).transpose() * v * model.mesh.rest_volumes[e]
        })
        .collect();
    let mut add = |verts: &[usize], grad: &crate::Vec12| {
        for (a, &v) in verts.iter().enumerate() {
            if !model.fixed[v] {
                g[v] += grad.fixed_rows::<3>(3 * a);
            }
        }
    };
    for (e, ge) in elements.iter().enumerate() {
        add(&model.mesh.tets[e], ge);
    }
    if let Some(b) = &model.barrier {
        for pair in model.contact_pairs(x) {
            let (_, db, _) = crate::energy::barrier_energy_grad_hess(pair.d, b)?;
            add(&pair.stencil.vertices(), &(pair.grad * db));
        }
    }
    Ok(g)
}

/// Energy, gradient and (optionally SPD-projected per stencil) Hessian at
/// `state.x`. Fixed DOFs are eliminated: zero gradient, identity rows/columns.
pub fn assemble(model: &Model, state: &SystemState, project: bool) -> Result<SparseSystem> {
    let x = &state.x;
    let n = model.dof_count();
    let mut gradient = vec![0.0; n];
    let mut triplets =
        Vec::with_capacity(144 * model.mesh.element_count() + 3 * model.vertex_count());
    let mut energy = 0.0;
    let free = |v: usize| !model.fixed[v];

    for i in 0..model.vertex_count() {
        if model.fixed[i] {
            for k in 0..3 {
                triplets.push((3 * i + k, 3 * i + k, 1.0));
            }
            continue;
        }
        let (e, g, k) = inertia_energy_grad_hess(&x[i], &state.z[i], model.mass(i), state.h);
        energy += e;
        for c in 0..3 {
            gradient[3 * i + c] += g[c];
            triplets.push((3 * i + c, 3 * i + c, k));
        }
    }

    let mut scatter = |verts: &[usize], ed: &ElementDerivatives, energy: &mut f64| {
        *energy += ed.energy;
        for (a, &va) in verts.iter().enumerate() {
            if !free(va) {
                continue;
            }
            for r in 0..3 {
                gradient[3 * va + r] += ed.gradient[3 * a + r];
            }
            for (b, &vb) in verts.iter().enumerate() {
                if !free(vb) {
                    continue;
                }
                for r in 0..3 {
                    for c in 0..3 {
                        triplets.push((3 * va + r, 3 * vb + c, ed.hessian[(3 * a + r, 3 * b + c)]));
                    }
                }
            }
        }
    };

    let elements = model.all_element_derivatives(x, project);
    for (e, ed) in elements.iter().enumerate() {
        scatter(&model.mesh.tets[e], ed, &mut energy);
    }
    if let Some(b) = &model.barrier {
        for pair in model.contact_pairs(x) {
            let ed = pair.barrier(b, project)?;
            scatter(&pair.stencil.vertices(), &ed, &mut energy);
        }
    }
    Ok(SparseSystem {
        energy,
        gradient,
        hessian: CsrMatrix::from_triplets(n, triplets),
    })
}

/// Largest step fraction in `[0, 1]` along `dx` that keeps every potential
/// contact pair at positive distance, with a 0.9 safety factor. Exact for
/// planes, conservative (relative-motion bound) for vertex-triangle pairs.
pub fn feasible_step_bound(model: &Model, x: &[Vec3], dx: &[Vec3]) -> f64 {
    if !model.has_contact() {
        return 1.0;
    }
    let mut alpha: f64 = 1.0;
    for &v in &model.surface_vertices {
        for plane in &model.planes {
            let rate = plane.normal.dot(&dx[v]);
            if rate < 0.0 {
                let d = plane.distance(&x[v]).max(0.0);
                alpha = alpha.min(0.9 * d / -rate);
            }
        }
    }
    for &v in &model.surface_vertices {
        for tri in &model.mesh.surface_tris {
            if model.body[tri[0]] == model.body[v] {
                continue;
            }
            let motion = dx[v].norm() + tri.iter().map(|&k| dx[k].norm()).fold(0.0, f64::max);
            if motion == 0.0 {
                continue;
            }
            let t = tri.map(|k| x[k]);
            let lo = t[0].inf(&t[1]).inf(&t[2]).add_scalar(-motion);
            let hi = t[0].sup(&t[1]).sup(&t[2]).add_scalar(motion);
            if (0..3).any(|k| x[v][k] < lo[k] || x[v][k] > hi[k]) {
                continue;
            }
            let (d, _, _) = crate::energy::point_triangle_distance(&x[v], &t);
            if d < motion {
                alpha = alpha.min(0.9 * d / motion);
            }
        }
    }
    alpha.max(0.0)
}

/// Starting iterate: move free vertices from the previous positions toward `z`
/// as far as contact feasibility allows.
pub fn initial_guess(model: &Model, state: &SystemState) -> Vec<Vec3> {
    let dx: Vec<Vec3> = (0..model.vertex_count())
        .map(|i| {
            if model.fixed[i] {
                Vec3::zeros()
            } else {
                state.z[i] - state.x_prev[i]
            }
        })
        .collect();
    let alpha = feasible_step_bound(model, &state.x_prev, &dx);
    state
        .x_prev
        .iter()
        .zip(&dx)
        .map(|(x, d)| x + d * alpha)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol_dx: f64,
    pub max_iters: usize,
    pub project_spd: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol_dx: 1e-3,
            max_iters: 100,
            project_spd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonResult {
    pub x: Vec<Vec3>,
    pub stats: Vec<IterationStats>,
    pub converged: bool,
    pub line_search_halvings: Vec<usize>,
}

const MAX_HALVINGS: usize = 30;

/// Projected Newton with backtracking from `state.x`.
pub fn newton_solve(
    model: &Model,
    state: &SystemState,
    config: &NewtonConfig,
) -> Result<NewtonResult> {
    newton_solve_observed(model, state, config, |_, _| {})
}

/// [`newton_solve`], calling `observer` with every accepted iterate.
pub fn newton_solve_observed(
    model: &Model,
    state: &SystemState,
    config: &NewtonConfig,
    mut observer: impl FnMut(&IterationStats, &[Vec3]),
) -> Result<NewtonResult> {
    let start = Instant::now();
    let mut work = state.clone();
    let mut stats = Vec::new();
    let mut halvings = Vec::new();
    let mut converged = false;
    for iter in 0..config.max_iters {
        let sys = assemble(model, &work, config.project_spd)?;
        let chol = SkylineCholesky::factor(&sys.hessian)?;
        let rhs: Vec<f64> = sys.gradient.iter().map(|g| -g).collect();
        let dx = unflatten(&chol.solve(&rhs));
        let grad_norm = sys.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();

        let mut alpha = feasible_step_bound(model, &work.x, &dx);
        let allowed = sys.energy + 1e-12 * sys.energy.abs();
        let mut accepted = None;
        for halving in 0..=MAX_HALVINGS {
            let trial: Vec<Vec3> = work.x.iter().zip(&dx).map(|(x, d)| x + d * alpha).collect();
            let e = total_energy(model, &trial, &work.z, work.h)?;
            if e <= allowed {
                accepted = Some((trial, e, halving));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, energy, halving)) = accepted else {
            log::warn!("newton: no decrease after {MAX_HALVINGS} halvings at iteration {iter}");
            break;
        };
        let step: Vec<Vec3> = dx.iter().map(|d| d * alpha).collect();
        let dx_norm = model.normalized_norm(&step);
        work.x = trial;
        halvings.push(halving);
        let it = IterationStats {
            iter,
            energy,
            dx_norm,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(&it, &work.x);
        stats.push(it);
        if dx_norm < config.tol_dx {
            converged = true;
            break;
        }
    }
    Ok(NewtonResult {
        x: work.x,
        stats,
        converged,
        line_search_halvings: halvings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_tets() -> TetMesh {
        let p = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
            Vec3::new(1.0, 1.0, 1.0),
        ];
        TetMesh::new(p, vec![[0, 1, 2, 3], [1, 2, 3, 4]], 1000.0).unwrap()
    }

    fn material() -> MaterialParams {
        MaterialParams::from_young_poisson(2e4, 0.3, 1000.0).unwrap()
    }

    fn beam(cells: [usize; 3]) -> Model {
        let mesh = TetMesh::generate_box(Vec3::zeros(), Vec3::new(1.0, 0.25, 0.25), cells, 1000.0)
            .unwrap();
        let mut m = Model::new(
            vec![(mesh, material())],
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

    #[test]
    fn z_cases() {
        let mut model = Model::new(
            vec![(two_tets(), material())],
            Vec::new(),
            None,
            Vec3::zeros(),
        )
        .unwrap();
        let mut s = SystemState::at_rest(&model, 0.1).unwrap();
        compute_z(&model, &mut s, None);
        assert_eq!(s.z, s.x_prev);

        model.gravity = Vec3::new(0.0, -10.0, 0.0);
        s.v = vec![Vec3::new(1.0, 0.0, 0.0); 5];
        compute_z(&model, &mut s, None);
        for i in 0..5 {
            let expect = s.x_prev[i] + Vec3::new(0.1, 0.0, 0.0) + Vec3::new(0.0, -0.1, 0.0);
            assert!((s.z[i] - expect).norm() < 1e-15);
        }
        let f: Vec<Vec3> = (0..5)
            .map(|i| model.gravity * (2.0 * model.mass(i)))
            .collect();
        let before = s.z.clone();
        compute_z(&model, &mut s, Some(&f));
        for i in 0..5 {
            let twice = before[i] + Vec3::new(0.0, -0.1, 0.0);
            assert!((s.z[i] - twice).norm() < 1e-14);
        }
    }

    #[test]
    fn rest_state_has_zero_energy_and_gradient() {
        let model = Model::new(
            vec![(two_tets(), material())],
            Vec::new(),
            None,
            Vec3::zeros(),
        )
        .unwrap();
        let s = SystemState::at_rest(&model, 0.01).unwrap();
        let sys = assemble(&model, &s, true).unwrap();
        assert!(sys.energy.abs() < 1e-9);
        assert!(sys.gradient.iter().all(|g| g.abs() < 1e-9));
        assert!(sys.hessian.asymmetry() < 1e-12);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut model = Model::new(
            vec![(two_tets(), material())],
            Vec::new(),
            None,
            Vec3::zeros(),
        )
        .unwrap();
        model.fixed[0] = true;
        let mut s = SystemState::at_rest(&model, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 1..5 {
            s.x[i] += Vec3::from_fn(|_, _| rng.gen_range(-0.2..0.2));
            s.z[i] += Vec3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
        }
        let sys = assemble(&model, &s, false).unwrap();
        let e0 = total_energy(&model, &s.x, &s.z, s.h).unwrap();
        assert!((e0 - sys.energy).abs() < 1e-10 * e0.abs());
        let eps = 1e-6;
        let gnorm = sys.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        let hdense = sys.hessian.to_dense();
        for dof in 3..15 {
            let (v, c) = (dof / 3, dof % 3);
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp.x[v][c] += eps;
            sm.x[v][c] -= eps;
            let fd = (total_energy(&model, &sp.x, &s.z, s.h).unwrap()
                - total_energy(&model, &sm.x, &s.z, s.h).unwrap())
                / (2.0 * eps);
            assert!((fd - sys.gradient[dof]).abs() < 1e-4 * gnorm);
            let gp = assemble(&model, &sp, false).unwrap().gradient;
            let gm = assemble(&model, &sm, false).unwrap().gradient;
            for r in 3..15 {
                let fdh = (gp[r] - gm[r]) / (2.0 * eps);
                assert!((fdh - hdense[(r, dof)]).abs() < 1e-3 * hdense.norm());
            }
        }
        let ng = flatten(&nodal_gradient(&model, &s.x, &s.z, s.h).unwrap());
        for (a, b) in ng.iter().zip(&sys.gradient) {
            assert!((a - b).abs() < 1e-12 * gnorm);
        }
        // eliminated vertex
        assert!(sys.gradient[..3].iter().all(|&g| g == 0.0));
        assert_eq!(hdense[(0, 0)], 1.0);
        assert_eq!(hdense[(0, 3)], 0.0);
    }

    #[test]
    fn permutation_equivariance() {
        let mesh = two_tets();
        let perm = [3usize, 0, 4, 1, 2]; // new id of old vertex
        let mut p = vec![Vec3::zeros(); 5];
        for (old, &new) in perm.iter().enumerate() {
            p[new] = mesh.rest_positions[old];
        }
        let tets = mesh.tets.iter().map(|t| t.map(|v| perm[v])).collect();
        let relabeled = TetMesh::new(p, tets, 1000.0).unwrap();
        let a = Model::new(vec![(mesh, material())], Vec::new(), None, Vec3::zeros()).unwrap();
        let b = Model::new(
            vec![(relabeled, material())],
            Vec::new(),
            None,
            Vec3::zeros(),
        )
        .unwrap();
        let mut sa = SystemState::at_rest(&a, 0.01).unwrap();
        let mut sb = SystemState::at_rest(&b, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for old in 0..5 {
            let d = Vec3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            sa.x[old] += d;
            sb.x[perm[old]] += d;
        }
        let (ga, gb) = (
            assemble(&a, &sa, true).unwrap(),
            assemble(&b, &sb, true).unwrap(),
        );
        for old in 0..5 {
            for c in 0..3 {
                assert!((ga.gradient[3 * old + c] - gb.gradient[3 * perm[old] + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn free_fall_of_isolated_vertices_converges_in_one_iteration() {
        let mut model = Model::new(
            vec![(two_tets(), material())],
            Vec::new(),
            None,
            Vec3::new(0.0, -9.8, 0.0),
        )
        .unwrap();
        // drop the elastic energy entirely by using a zero-element copy
        model.mesh.tets.clear();
        model.materials.clear();
        let mut s = SystemState::at_rest(&model, 0.01).unwrap();
        compute_z(&model, &mut s, None);
        let res = newton_solve(
            &model,
            &s,
            &NewtonConfig {
                tol_dx: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.converged);
        assert!(res.stats.len() <= 2);
        for i in 0..5 {
            assert!((res.x[i] - s.z[i]).norm() < 1e-12);
        }
        assert!(res.stats[0].dx_norm > 0.0);
    }

    #[test]
    fn newton_matches_gradient_descent_oracle() {
        let model = beam([4, 1, 1]);
        let mut s = SystemState::at_rest(&model, 0.01).unwrap();
        compute_z(&model, &mut s, None);
        s.x = initial_guess(&model, &s);
        let res = newton_solve(
            &model,
            &s,
            &NewtonConfig {
                tol_dx: 1e-12,
                max_iters: 50,
                project_spd: true,
            },
        )
        .unwrap();
        assert!(res.converged);
        for w in res.stats.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-12 * w[0].energy.abs());
        }

        // independent oracle: gradient descent with Armijo backtracking on the same energy
        let mut x = s.x.clone();
        let energy = |x: &[Vec3]| total_energy(&model, x, &s.z, s.h).unwrap();
        let mut step = 1e-6;
        for _ in 0..200_000 {
            let g = nodal_gradient(&model, &x, &s.z, s.h).unwrap();
            let gg: f64 = g.iter().map(|v| v.norm_squared()).sum();
            if gg.sqrt() < 1e-11 {
                break;
            }
            let e0 = energy(&x);
            step *= 2.0;
            loop {
                let trial: Vec<Vec3> = x.iter().zip(&g).map(|(a, b)| a - b * step).collect();
                if energy(&trial) <= e0 - 1e-4 * step * gg {
                    x = trial;
                    break;
                }
                step *= 0.5;
            }
        }
        let diff: Vec<Vec3> = x.iter().zip(&res.x).map(|(a, b)| a - b).collect();
        assert!(
            model.normalized_norm(&diff) < 1e-6,
            "{}",
            model.normalized_norm(&diff)
        );
    }

    #[test]
    fn velocity_update() {
        let model = Model::new(
            vec![(two_tets(), material())],
            Vec::new(),
            None,
            Vec3::zeros(),
        )
        .unwrap();
        let mut s = SystemState::at_rest(&model, 0.5).unwrap();
        let same = s.x.clone();
        step_velocity_update(&mut s, same);
        assert!(s.v.iter().all(|v| *v == Vec3::zeros()));
        let shifted: Vec<Vec3> = s.x.iter().map(|p| p + Vec3::new(0.1, 0.0, 0.2)).collect();
        step_velocity_update(&mut s, shifted.clone());
        for v in &s.v {
            assert!((v - Vec3::new(0.2, 0.0, 0.4)).norm() < 1e-15);
        }
        assert_eq!(s.x_prev, shifted);
    }

    #[test]
    fn feasibility_bound_for_plane() {
        let mesh = TetMesh::generate_box(
            Vec3::new(0.0, 0.1, 0.0),
            Vec3::new(1.0, 1.1, 1.0),
            [1, 1, 1],
            1000.0,
        )
        .unwrap();
        let ground = HalfSpace::new(Vec3::zeros(), Vec3::y()).unwrap();
        let model = Model::new(
            vec![(mesh, material())],
            vec![ground],
            Some(BarrierParams {
                dhat: 0.05,
                kappa: 1.0,
            }),
            Vec3::zeros(),
        )
        .unwrap();
        let dx = vec![Vec3::new(0.0, -1.0, 0.0); model.vertex_count()];
        let a = feasible_step_bound(&model, &model.mesh.rest_positions, &dx);
        assert!((a - 0.09).abs() < 1e-12);
    }
}
