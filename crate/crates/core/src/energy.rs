//! Per-stencil energies with analytic gradients and Hessians: the inertia
//! term, stable Neo-Hookean elasticity and the log barrier for contact.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DVec3, Dual2};
use crate::linalg::project_spd;
use crate::{Error, Mat12, Mat3, Result, Vec12, Vec3};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat9x12 = SMatrix<f64, 9, 12>;
pub type Vec9 = SVector<f64, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub mu: f64,
    pub lambda: f64,
    pub density: f64,
}

impl MaterialParams {
    pub fn new(mu: f64, lambda: f64, density: f64) -> Result<Self> {
        let p = Self {
            mu,
            lambda,
            density,
        };
        p.validate()?;
        Ok(p)
    }

    /// Lamé parameters from Young's modulus and Poisson's ratio.
    pub fn from_young_poisson(young: f64, poisson: f64, density: f64) -> Result<Self> {
        if !(poisson > -1.0 && poisson < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "poisson ratio {poisson} outside (-1, 0.5)"
            )));
        }
        let mu = young / (2.0 * (1.0 + poisson));
        let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
        Self::new(mu, lambda, density)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.lambda >= 0.0 && self.density > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "material needs mu > 0, lambda >= 0, density > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub dhat: f64,
    pub kappa: f64,
}

impl BarrierParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dhat > 0.0 && self.kappa > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "barrier needs dhat > 0 and kappa > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementDerivatives {
    pub energy: f64,
    pub gradient: Vec12,
    pub hessian: Mat12,
}

pub fn deformation_gradient(x: &[Vec3; 4], dm_inv: &Mat3) -> Mat3 {
    Mat3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]) * dm_inv
}

/// Jacobian of column-major vec(F) with respect to the 12 stacked vertex positions.
pub fn dfdx(dm_inv: &Mat3) -> Mat9x12 {
    let mut m = Mat9x12::zeros();
    for j in 0..3 {
        let s = -(dm_inv[(0, j)] + dm_inv[(1, j)] + dm_inv[(2, j)]);
        for r in 0..3 {
            m[(3 * j + r, r)] = s;
            for k in 0..3 {
                m[(3 * j + r, 3 * (k + 1) + r)] = dm_inv[(k, j)];
            }
        }
    }
    m
}

fn cross_matrix(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vec9(m: &Mat3) -> Vec9 {
    Vec9::from_column_slice(m.as_slice())
}

/// Strain energy density, zero at the rest state.
pub fn snh_psi(f: &Mat3, p: &MaterialParams) -> f64 {
    let ic = f.norm_squared();
    let j = f.determinant();
    0.5 * p.mu * (ic - 3.0) - 0.5 * p.mu * ((ic + 1.0) / 4.0).ln()
        + 0.5 * p.lambda * (j - 1.0).powi(2)
        - 0.75 * p.mu * (j - 1.0)
}

/// First Piola-Kirchhoff stress and its derivative with respect to vec(F).
pub fn snh_stress(f: &Mat3, p: &MaterialParams) -> (Mat3, Mat9) {
    let ic = f.norm_squared();
    let j = f.determinant();
    let (f0, f1, f2) = (
        f.column(0).into_owned(),
        f.column(1).into_owned(),
        f.column(2).into_owned(),
    );
    let cof = Mat3::from_columns(&[f1.cross(&f2), f2.cross(&f0), f0.cross(&f1)]);
    let a = p.mu * (1.0 - 1.0 / (ic + 1.0));
    let c = p.lambda * (j - 1.0) - 0.75 * p.mu;
    let stress = f * a + cof * c;

    let fv = vec9(f);
    let gv = vec9(&cof);
    let mut dp = Mat9::identity() * a
        + fv * fv.transpose() * (2.0 * p.mu / (ic + 1.0).powi(2))
        + gv * gv.transpose() * p.lambda;
    let blocks = [
        [None, Some(-cross_matrix(&f2)), Some(cross_matrix(&f1))],
        [Some(cross_matrix(&f2)), None, Some(-cross_matrix(&f0))],
        [Some(-cross_matrix(&f1)), Some(cross_matrix(&f0)), None],
    ];
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, blk) in row.iter().enumerate() {
            if let Some(b) = blk {
                let mut view = dp.fixed_view_mut::<3, 3>(3 * bi, 3 * bj);
                view += b * c;
            }
        }
    }
    (stress, dp)
}

/// Element energy `volume * psi(F)` with gradient and Hessian in the 12 vertex DOFs.
pub fn snh_energy_grad_hess(
    f: &Mat3,
    dm_inv: &Mat3,
    params: &MaterialParams,
    volume: f64,
    project: bool,
) -> ElementDerivatives {
    let (stress, dp) = snh_stress(f, params);
    let d = dfdx(dm_inv);
    let gradient = d.transpose() * vec9(&stress) * volume;
    let mut hessian = d.transpose() * dp * d * volume;
    hessian = (hessian + hessian.transpose()) * 0.5;
    if project {
        hessian = project_spd(&hessian);
    }
    ElementDerivatives {
        energy: volume * snh_psi(f, params),
        gradient,
        hessian,
    }
}

pub fn element_energy(x: &[Vec3; 4], dm_inv: &Mat3, params: &MaterialParams, volume: f64) -> f64 {
    volume * snh_psi(&deformation_gradient(x, dm_inv), params)
}

pub fn element_derivatives(
    x: &[Vec3; 4],
    dm_inv: &Mat3,
    params: &MaterialParams,
    volume: f64,
    project: bool,
) -> ElementDerivatives {
    snh_energy_grad_hess(
        &deformation_gradient(x, dm_inv),
        dm_inv,
        params,
        volume,
        project,
    )
}

/// Per-vertex inertia: energy, gradient, and the scalar of the isotropic Hessian.
pub fn inertia_energy_grad_hess(x: &Vec3, z: &Vec3, m: f64, h: f64) -> (f64, Vec3, f64) {
    let k = m / (h * h);
    let d = x - z;
    (0.5 * k * d.norm_squared(), d * k, k)
}

/// Scaled barrier value and its first two derivatives in `d`; zero for `d >= dhat`.
pub fn barrier_energy_grad_hess(d: f64, params: &BarrierParams) -> Result<(f64, f64, f64)> {
    if !(d > 0.0) {
        return Err(Error::InfeasibleDistance(d));
    }
    let dh = params.dhat;
    if d >= dh {
        return Ok((0.0, 0.0, 0.0));
    }
    let r = d - dh;
    let l = (d / dh).ln();
    let b = -r * r * l;
    let db = -2.0 * r * l - r * r / d;
    let ddb = -2.0 * l - 4.0 * r / d + r * r / (d * d);
    Ok((params.kappa * b, params.kappa * db, params.kappa * ddb))
}

/// Analytic half-space `{x : normal . (x - point) >= 0}`; `normal` is unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub point: Vec3,
    pub normal: Vec3,
}

impl HalfSpace {
    pub fn new(point: Vec3, normal: Vec3) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidParameter(
                "half-space normal must be non-zero".into(),
            ));
        }
        Ok(Self {
            point,
            normal: normal / n,
        })
    }

    pub fn distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(&(x - self.point))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactStencil {
    VertexPlane { vertex: usize, plane: usize },
    VertexTriangle { vertex: usize, tri: [usize; 3] },
}

impl ContactStencil {
    /// Participating vertices, the query vertex first.
    pub fn vertices(&self) -> Vec<usize> {
        match *self {
            Self::VertexPlane { vertex, .. } => vec![vertex],
            Self::VertexTriangle { vertex, tri } => vec![vertex, tri[0], tri[1], tri[2]],
        }
    }
}

/// An active contact pair with the distance and its derivatives in the stacked
/// coordinates of `stencil.vertices()` (only the first 3 entries for planes).
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPair {
    pub stencil: ContactStencil,
    pub d: f64,
    pub grad: Vec12,
    pub hess: Mat12,
}

impl ContactPair {
    pub fn dof_count(&self) -> usize {
        match self.stencil {
            ContactStencil::VertexPlane { .. } => 3,
            ContactStencil::VertexTriangle { .. } => 12,
        }
    }

    /// Barrier energy, gradient and Hessian of this pair in its local coordinates.
    pub fn barrier(&self, params: &BarrierParams, project: bool) -> Result<ElementDerivatives> {
        let (b, db, ddb) = barrier_energy_grad_hess(self.d, params)?;
        let mut hessian = self.grad * self.grad.transpose() * ddb + self.hess * db;
        if project {
            hessian = project_spd(&hessian);
        }
        Ok(ElementDerivatives {
            energy: b,
            gradient: self.grad * db,
            hessian,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TriRegion {
    Face,
    Edge(usize, usize),
    Vertex(usize),
}

/// Closest-point region of `p` on triangle `abc` (Voronoi-region test).
fn triangle_region(p: &Vec3, t: &[Vec3; 3]) -> TriRegion {
    let [a, b, c] = *t;
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return TriRegion::Vertex(0);
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return TriRegion::Vertex(1);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return TriRegion::Edge(0, 1);
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return TriRegion::Vertex(2);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return TriRegion::Edge(0, 2);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return TriRegion::Edge(1, 2);
    }
    TriRegion::Face
}

/// Unsigned point-triangle distance with gradient and Hessian in `[p, a, b, c]`.
pub fn point_triangle_distance(p: &Vec3, t: &[Vec3; 3]) -> (f64, Vec12, Mat12) {
    let region = triangle_region(p, t);
    let mut vals = [0.0; 12];
    for k in 0..3 {
        vals[k] = p[k];
        for (s, q) in t.iter().enumerate() {
            vals[3 * (s + 1) + k] = q[k];
        }
    }
    let vars = Dual2::<12>::variables(vals);
    let pt = |s: usize| DVec3([vars[3 * s], vars[3 * s + 1], vars[3 * s + 2]]);
    let pd = pt(0);
    let d2 = match region {
        TriRegion::Vertex(k) => pd.sub(&pt(k + 1)).norm_squared(),
        TriRegion::Edge(i, j) => {
            let (a, b) = (pt(i + 1), pt(j + 1));
            let e = b.sub(&a);
            pd.sub(&a).cross(&e).norm_squared() / e.norm_squared()
        }
        TriRegion::Face => {
            let a = pt(1);
            let n = pt(2).sub(&a).cross(&pt(3).sub(&a));
            let s = pd.sub(&a).dot(&n);
            s * s / n.norm_squared()
        }
    };
    let d = d2.sqrt();
    (d.v, d.gradient(), d.hessian())
}

/// Inputs to the proximity search: current positions, the surface of every
/// body and which body each vertex belongs to.
pub struct ContactGeometry<'a> {
    pub positions: &'a [Vec3],
    pub surface_tris: &'a [[usize; 3]],
    pub surface_vertices: &'a [usize],
    pub body: &'a [usize],
    pub planes: &'a [HalfSpace],
}

/// Brute-force list of vertex-plane and vertex-triangle pairs closer than `dhat`.
/// Vertex-triangle pairs only between distinct bodies.
pub fn point_distances(geo: &ContactGeometry<'_>, dhat: f64) -> Vec<ContactPair> {
    let mut pairs = Vec::new();
    for &v in geo.surface_vertices {
        let x = geo.positions[v];
        for (pi, plane) in geo.planes.iter().enumerate() {
            let d = plane.distance(&x);
            if d < dhat {
                let mut grad = Vec12::zeros();
                grad.fixed_rows_mut::<3>(0).copy_from(&plane.normal);
                pairs.push(ContactPair {
                    stencil: ContactStencil::VertexPlane {
                        vertex: v,
                        plane: pi,
                    },
                    d,
                    grad,
                    hess: Mat12::zeros(),
                });
            }
        }
    }
    for &v in geo.surface_vertices {
        let x = geo.positions[v];
        for tri in geo.surface_tris {
            if geo.body[tri[0]] == geo.body[v] {
                continue;
            }
            let t = tri.map(|k| geo.positions[k]);
            // cheap reject on the bounding box inflated by dhat
            let lo = t[0].inf(&t[1]).inf(&t[2]).add_scalar(-dhat);
            let hi = t[0].sup(&t[1]).sup(&t[2]).add_scalar(dhat);
            if (0..3).any(|k| x[k] < lo[k] || x[k] > hi[k]) {
                continue;
            }
            let (d, grad, hess) = point_triangle_distance(&x, &t);
            if d < dhat {
                pairs.push(ContactPair {
                    stencil: ContactStencil::VertexTriangle {
                        vertex: v,
                        tri: *tri,
                    },
                    d,
                    grad,
                    hess,
                });
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn material() -> MaterialParams {
        MaterialParams::from_young_poisson(1e5, 0.4, 1000.0).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let axis = Unit::new_normalize(Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        Rotation3::from_axis_angle(&axis, rng.gen_range(-3.0..3.0)).into_inner()
    }

    fn rest_tet() -> ([Vec3; 4], Mat3, f64) {
        let x = [
            Vec3::zeros(),
            Vec3::new(1.0, 0.1, 0.0),
            Vec3::new(0.2, 0.9, 0.1),
            Vec3::new(0.1, 0.2, 1.1),
        ];
        let dm = Mat3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
        (x, dm.try_inverse().unwrap(), dm.determinant() / 6.0)
    }

    fn stack(x: &[Vec3; 4]) -> Vec12 {
        Vec12::from_fn(|i, _| x[i / 3][i % 3])
    }

    fn unstack(v: &Vec12) -> [Vec3; 4] {
        std::array::from_fn(|k| Vec3::new(v[3 * k], v[3 * k + 1], v[3 * k + 2]))
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale.max(1e-300)
    }

    #[test]
    fn deformation_gradient_cases() {
        let (x, dm_inv, _) = rest_tet();
        assert!((deformation_gradient(&x, &dm_inv) - Mat3::identity()).norm() < 1e-14);
        let r = Rotation3::from_euler_angles(0.3, -0.2, 1.1).into_inner();
        assert!((deformation_gradient(&x.map(|p| r * p), &dm_inv) - r).norm() < 1e-14);
        assert!(
            (deformation_gradient(&x.map(|p| p * 2.0), &dm_inv) - Mat3::identity() * 2.0).norm()
                < 1e-14
        );
    }

    #[test]
    fn rest_state_is_stationary_and_rotation_invariant() {
        let p = material();
        let (x, dm_inv, vol) = rest_tet();
        let rest = element_derivatives(&x, &dm_inv, &p, vol, false);
        assert!(rest.energy.abs() < 1e-12);
        assert!(rest.gradient.norm() < 1e-9 * p.mu);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let rot = element_derivatives(&x.map(|q| r * q), &dm_inv, &p, vol, false);
            assert!(rot.energy.abs() < 1e-10 * p.mu);
            assert!(rot.gradient.norm() < 1e-9 * p.mu);

            let f = Mat3::from_fn(|_, _| rng.gen_range(-0.4..0.4)) + Mat3::identity();
            let (a, b) = (snh_psi(&f, &p), snh_psi(&(r * f), &p));
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn lambda_zero_allowed() {
        let p = MaterialParams::new(1.0, 0.0, 1.0).unwrap();
        let (s, _) = snh_stress(&Mat3::identity(), &p);
        assert!(s.norm() < 1e-15);
        assert!(MaterialParams::new(0.0, 1.0, 1.0).is_err());
        assert!(MaterialParams::new(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn elastic_derivatives_match_finite_differences() {
        let p = material();
        let (x0, dm_inv, vol) = rest_tet();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-5;
        for _ in 0..25 {
            let x = stack(&x0) + Vec12::from_fn(|_, _| rng.gen_range(-0.3..0.3));
            let ed = element_derivatives(&unstack(&x), &dm_inv, &p, vol, false);
            let mut fd_g = Vec12::zeros();
            let mut fd_h = Mat12::zeros();
            for k in 0..12 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += eps;
                xm[k] -= eps;
                fd_g[k] = (element_energy(&unstack(&xp), &dm_inv, &p, vol)
                    - element_energy(&unstack(&xm), &dm_inv, &p, vol))
                    / (2.0 * eps);
                let gp = element_derivatives(&unstack(&xp), &dm_inv, &p, vol, false).gradient;
                let gm = element_derivatives(&unstack(&xm), &dm_inv, &p, vol, false).gradient;
                fd_h.set_column(k, &((gp - gm) / (2.0 * eps)));
            }
            assert!((ed.gradient - fd_g).norm() < 1e-4 * ed.gradient.norm());
            assert!((ed.hessian - fd_h).norm() < 1e-3 * ed.hessian.norm());
        }
    }

    #[test]
    fn projection_gives_psd_and_keeps_psd_input() {
        let p = material();
        let (x0, dm_inv, vol) = rest_tet();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = stack(&x0) + Vec12::from_fn(|_, _| rng.gen_range(-0.6..0.6));
            let raw = element_derivatives(&unstack(&x), &dm_inv, &p, vol, false);
            let proj = element_derivatives(&unstack(&x), &dm_inv, &p, vol, true);
            let min = proj.hessian.symmetric_eigenvalues().min();
            assert!(min >= -1e-9 * raw.hessian.norm());
            let again = project_spd(&proj.hessian);
            assert!((again - proj.hessian).norm() <= 1e-10 * proj.hessian.norm().max(1.0));
        }
        // the rest Hessian is PSD already
        let rest = element_derivatives(&x0, &dm_inv, &p, vol, false).hessian;
        assert!((project_spd(&rest) - rest).norm() <= 1e-10 * rest.norm());
    }

    #[test]
    fn inertia_cases() {
        let (e, g, k) = inertia_energy_grad_hess(&Vec3::x(), &Vec3::zeros(), 1.0, 1.0);
        assert_eq!((e, g, k), (0.5, Vec3::x(), 1.0));
        let (e, g, _) = inertia_energy_grad_hess(&Vec3::y(), &Vec3::y(), 3.0, 0.1);
        assert_eq!((e, g), (0.0, Vec3::zeros()));
        let (_, _, k1) = inertia_energy_grad_hess(&Vec3::zeros(), &Vec3::zeros(), 2.0, 0.1);
        let (_, _, k2) = inertia_energy_grad_hess(&Vec3::zeros(), &Vec3::zeros(), 2.0, 0.2);
        assert!((k1 / k2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn barrier_values_and_derivatives() {
        let unit = BarrierParams {
            dhat: 1.0,
            kappa: 1.0,
        };
        let (b, _, _) = barrier_energy_grad_hess(0.5, &unit).unwrap();
        assert!((b - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((b - 0.173_287).abs() < 1e-6);
        assert_eq!(
            barrier_energy_grad_hess(1.0, &unit).unwrap(),
            (0.0, 0.0, 0.0)
        );
        assert!(matches!(
            barrier_energy_grad_hess(0.0, &unit),
            Err(Error::InfeasibleDistance(_))
        ));
        assert!(barrier_energy_grad_hess(-1e-3, &unit).is_err());

        let p = BarrierParams {
            dhat: 1e-2,
            kappa: 3.0,
        };
        let d = 0.3 * p.dhat;
        let eps = 1e-6 * p.dhat;
        let f = |d: f64| barrier_energy_grad_hess(d, &p).unwrap();
        let (_, db, ddb) = f(d);
        assert!(rel_err((f(d + eps).0 - f(d - eps).0) / (2.0 * eps), db, db.abs()) < 1e-6);
        assert!(rel_err((f(d + eps).1 - f(d - eps).1) / (2.0 * eps), ddb, ddb.abs()) < 1e-6);

        // value and both derivatives vanish continuously at dhat
        let below = f(p.dhat * (1.0 - 1e-6));
        let above = f(p.dhat * (1.0 + 1e-6));
        let scale = p.kappa;
        assert!(below.0.abs() < 1e-15 * scale && below.1.abs() < 1e-12 * scale / p.dhat);
        assert!(below.2.abs() < 1e-5 * scale / (p.dhat * p.dhat));
        assert_eq!(above, (0.0, 0.0, 0.0));
    }

    #[test]
    fn plane_pairs() {
        let ground = HalfSpace::new(Vec3::zeros(), Vec3::y()).unwrap();
        let positions = [Vec3::new(0.0, 0.5, 0.0), Vec3::new(1.0, 0.05, 0.0)];
        let geo = ContactGeometry {
            positions: &positions,
            surface_tris: &[],
            surface_vertices: &[0, 1],
            body: &[0, 0],
            planes: &[ground],
        };
        let pairs = point_distances(&geo, 0.1);
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            pairs[0].stencil,
            ContactStencil::VertexPlane {
                vertex: 1,
                plane: 0
            }
        );
        assert!((pairs[0].d - 0.05).abs() < 1e-15);
    }

    fn sampled_distance(p: &Vec3, t: &[Vec3; 3], n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n - i {
                let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                let q = t[0] + (t[1] - t[0]) * u + (t[2] - t[0]) * v;
                best = best.min((p - q).norm());
            }
        }
        best
    }

    #[test]
    fn point_triangle_against_sampling() {
        let t = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        let p = Vec3::new(0.25, 0.25, 0.01);
        let (d, _, _) = point_triangle_distance(&p, &t);
        assert!((d - 0.01).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t: [Vec3; 3] =
                std::array::from_fn(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let p = Vec3::from_fn(|_, _| rng.gen_range(-1.5..1.5));
            let (d, _, _) = point_triangle_distance(&p, &t);
            let s = sampled_distance(&p, &t, 200);
            assert!(d <= s + 1e-12);
            assert!(s - d < 2e-2, "{d} vs {s}");
        }
    }

    #[test]
    fn point_triangle_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-6;
        for _ in 0..100 {
            let x = Vec12::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let split = |x: &Vec12| {
                let v = unstack(x);
                (v[0], [v[1], v[2], v[3]])
            };
            let (p, t) = split(&x);
            let region = triangle_region(&p, &t);
            let (d, g, h) = point_triangle_distance(&p, &t);
            let mut fd_g = Vec12::zeros();
            let mut fd_h = Mat12::zeros();
            let mut same_region = true;
            for k in 0..12 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += eps;
                xm[k] -= eps;
                let ((pp, tp), (pm, tm)) = (split(&xp), split(&xm));
                same_region &=
                    triangle_region(&pp, &tp) == region && triangle_region(&pm, &tm) == region;
                let (dp, gp, _) = point_triangle_distance(&pp, &tp);
                let (dm, gm, _) = point_triangle_distance(&pm, &tm);
                fd_g[k] = (dp - dm) / (2.0 * eps);
                fd_h.set_column(k, &((gp - gm) / (2.0 * eps)));
            }
            if !same_region || d < 1e-3 {
                continue;
            }
            assert!((g - fd_g).norm() < 1e-6 * g.norm().max(1.0));
            assert!((h - fd_h).norm() < 1e-4 * h.norm().max(1.0));
        }
    }

    #[test]
    fn barrier_pair_hessian_matches_finite_differences() {
        let params = BarrierParams {
            dhat: 0.2,
            kappa: 10.0,
        };
        let x0 = Vec12::from_column_slice(&[
            0.3, 0.2, 0.08, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0,
        ]);
        let pair_at = |x: &Vec12| {
            let v = unstack(x);
            let (d, grad, hess) = point_triangle_distance(&v[0], &[v[1], v[2], v[3]]);
            ContactPair {
                stencil: ContactStencil::VertexTriangle {
                    vertex: 0,
                    tri: [1, 2, 3],
                },
                d,
                grad,
                hess,
            }
        };
        let b = pair_at(&x0).barrier(&params, false).unwrap();
        let eps = 1e-7;
        for k in 0..12 {
            let mut xp = x0;
            let mut xm = x0;
            xp[k] += eps;
            xm[k] -= eps;
            let (bp, bm) = (
                pair_at(&xp).barrier(&params, false).unwrap(),
                pair_at(&xm).barrier(&params, false).unwrap(),
            );
            let fd = (bp.energy - bm.energy) / (2.0 * eps);
            assert!((fd - b.gradient[k]).abs() < 1e-5 * b.gradient.norm());
            let col = (bp.gradient - bm.gradient) / (2.0 * eps);
            assert!((col - b.hessian.column(k)).norm() < 1e-4 * b.hessian.norm());
        }
    }

    #[test]
    fn triangle_pairs_skip_same_body() {
        let positions = [
            Vec3::new(0.2, 0.2, 0.01),
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
        ];
        let tris = [[1, 2, 3]];
        let mut geo = ContactGeometry {
            positions: &positions,
            surface_tris: &tris,
            surface_vertices: &[0],
            body: &[0, 1, 1, 1],
            planes: &[],
        };
        assert_eq!(point_distances(&geo, 0.1).len(), 1);
        geo.body = &[0, 0, 0, 0];
        assert!(point_distances(&geo, 0.1).is_empty());
    }
}
