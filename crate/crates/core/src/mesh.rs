//! Tetrahedral meshes: rest geometry, lumped masses, vertex adjacency,
//! greedy coloring for Gauss-Seidel scheduling, TetGen-style I/O and the
//! unit-cube scene normalization used by all convergence metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Mat3, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub rest_positions: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub surface_tris: Vec<[usize; 3]>,
    pub rest_volumes: Vec<f64>,
    pub dm_inv: Vec<Mat3>,
    pub vertex_masses: Vec<f64>,
    pub incident: Vec<Vec<usize>>,
    pub colors: Vec<usize>,
}

/// Uniform scale followed by an offset: `x' = scale * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneNormalization {
    pub scale: f64,
    pub offset: Vec3,
}

impl SceneNormalization {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        x * self.scale + self.offset
    }
}

fn shape_matrix(p: &[Vec3], t: &[usize; 4]) -> Mat3 {
    Mat3::from_columns(&[p[t[1]] - p[t[0]], p[t[2]] - p[t[0]], p[t[3]] - p[t[0]]])
}

impl TetMesh {
    /// Builds topology, rest volumes, inverse rest shape matrices, quarter-volume
    /// lumped masses and the coloring. Inverted rest tets are repaired by
    /// swapping their last two indices.
    pub fn new(rest_positions: Vec<Vec3>, mut tets: Vec<[usize; 4]>, density: f64) -> Result<Self> {
        if !(density > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "density must be positive, got {density}"
            )));
        }
        let nv = rest_positions.len();
        for (e, t) in tets.iter().enumerate() {
            if let Some(&v) = t.iter().find(|&&v| v >= nv) {
                return Err(Error::IndexOutOfRange {
                    element: e,
                    vertex: v,
                    count: nv,
                });
            }
        }

        let mut signed: Vec<f64> = tets
            .iter()
            .map(|t| shape_matrix(&rest_positions, t).determinant() / 6.0)
            .collect();
        let mean = if tets.is_empty() {
            0.0
        } else {
            signed.iter().map(|v| v.abs()).sum::<f64>() / tets.len() as f64
        };
        let degenerate: Vec<usize> = signed
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() < 1e-12 * mean || v.abs() == 0.0)
            .map(|(e, _)| e)
            .collect();
        if !degenerate.is_empty() {
            return Err(Error::DegenerateElements(degenerate));
        }
        for (t, v) in tets.iter_mut().zip(signed.iter_mut()) {
            if *v < 0.0 {
                t.swap(2, 3);
                *v = -*v;
            }
        }

        let dm_inv: Vec<Mat3> = tets
            .iter()
            .map(|t| {
                shape_matrix(&rest_positions, t)
                    .try_inverse()
                    .expect("non-degenerate")
            })
            .collect();

        let mut vertex_masses = vec![0.0; nv];
        let mut incident = vec![Vec::new(); nv];
        for (e, (t, &vol)) in tets.iter().zip(&signed).enumerate() {
            for &v in t {
                vertex_masses[v] += density * vol / 4.0;
                incident[v].push(e);
            }
        }

        let mut mesh = Self {
            surface_tris: boundary_faces(&tets),
            rest_positions,
            tets,
            rest_volumes: signed,
            dm_inv,
            vertex_masses,
            incident,
            colors: Vec::new(),
        };
        mesh.colors = greedy_color(&mesh);
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_positions.len()
    }

    pub fn element_count(&self) -> usize {
        self.tets.len()
    }

    /// Vertices sharing at least one tet with `v`, excluding `v`, ascending.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.incident[v]
            .iter()
            .flat_map(|&e| self.tets[e])
            .filter(|&u| u != v)
            .collect();
        set.into_iter().collect()
    }

    pub fn color_count(&self) -> usize {
        self.colors.iter().max().map_or(0, |c| c + 1)
    }

    /// Vertex ids per color, ascending within each color.
    pub fn color_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.color_count()];
        for (v, &c) in self.colors.iter().enumerate() {
            groups[c].push(v);
        }
        groups
    }

    /// Concatenates meshes; returns the merged mesh and each vertex's body index.
    pub fn merge(meshes: &[TetMesh]) -> (TetMesh, Vec<usize>) {
        let mut out = TetMesh {
            rest_positions: Vec::new(),
            tets: Vec::new(),
            surface_tris: Vec::new(),
            rest_volumes: Vec::new(),
            dm_inv: Vec::new(),
            vertex_masses: Vec::new(),
            incident: Vec::new(),
            colors: Vec::new(),
        };
        let mut body = Vec::new();
        for (b, m) in meshes.iter().enumerate() {
            let vo = out.rest_positions.len();
            let eo = out.tets.len();
            out.rest_positions.extend_from_slice(&m.rest_positions);
            out.tets.extend(m.tets.iter().map(|t| t.map(|v| v + vo)));
            out.surface_tris
                .extend(m.surface_tris.iter().map(|t| t.map(|v| v + vo)));
            out.rest_volumes.extend_from_slice(&m.rest_volumes);
            out.dm_inv.extend_from_slice(&m.dm_inv);
            out.vertex_masses.extend_from_slice(&m.vertex_masses);
            out.incident.extend(
                m.incident
                    .iter()
                    .map(|es| es.iter().map(|e| e + eo).collect()),
            );
            body.extend(std::iter::repeat(b).take(m.vertex_count()));
        }
        out.colors = greedy_color(&out);
        (out, body)
    }

    /// Axis-aligned box split into `cells` cubes of six tets each (all cubes cut
    /// along the same main diagonal, so the result is conforming).
    pub fn generate_box(min: Vec3, max: Vec3, cells: [usize; 3], density: f64) -> Result<Self> {
        if cells.iter().any(|&c| c == 0) || (0..3).any(|k| max[k] <= min[k]) {
            return Err(Error::InvalidParameter(
                "box needs positive extent and cell counts".into(),
            ));
        }
        let [nx, ny, nz] = cells;
        let id = |i: usize, j: usize, k: usize| (i * (ny + 1) + j) * (nz + 1) + k;
        let mut positions = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let t = Vec3::new(
                        i as f64 / nx as f64,
                        j as f64 / ny as f64,
                        k as f64 / nz as f64,
                    );
                    positions.push(min + (max - min).component_mul(&t));
                }
            }
        }
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut tets = Vec::with_capacity(6 * nx * ny * nz);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    for p in PERMS {
                        let mut c = [i, j, k];
                        let mut t = [id(c[0], c[1], c[2]); 4];
                        for (s, &axis) in p.iter().enumerate() {
                            c[axis] += 1;
                            t[s + 1] = id(c[0], c[1], c[2]);
                        }
                        tets.push(t);
                    }
                }
            }
        }
        Self::new(positions, tets, density)
    }

    pub fn total_mass(&self) -> f64 {
        self.vertex_masses.iter().sum()
    }

    /// Writes `.node` and `.ele` files (0-based, 17 significant digits).
    pub fn save(&self, node_path: &Path, ele_path: &Path) -> Result<()> {
        fs::write(node_path, node_text(&self.rest_positions))?;
        let mut ele = format!("{} 4 0\n", self.tets.len());
        for (e, t) in self.tets.iter().enumerate() {
            writeln!(ele, "{e} {} {} {} {}", t[0], t[1], t[2], t[3]).unwrap();
        }
        fs::write(ele_path, ele)?;
        Ok(())
    }
}

/// `.node` text for a set of positions.
pub fn node_text(positions: &[Vec3]) -> String {
    let mut s = format!("{} 3 0 0\n", positions.len());
    for (i, p) in positions.iter().enumerate() {
        writeln!(s, "{i} {:.16e} {:.16e} {:.16e}", p.x, p.y, p.z).unwrap();
    }
    s
}

/// Faces owned by exactly one tet, oriented with the normal pointing away from
/// the tet's fourth vertex.
fn boundary_faces(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    // for a positively oriented tet (0,1,2,3) these faces point outward
    const FACES: [[usize; 3]; 4] = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    let mut count: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
    for t in tets {
        for f in FACES {
            let face = f.map(|k| t[k]);
            let mut key = face;
            key.sort_unstable();
            count
                .entry(key)
                .and_modify(|c| c.0 += 1)
                .or_insert((1, face));
        }
    }
    count
        .into_values()
        .filter(|(c, _)| *c == 1)
        .map(|(_, f)| f)
        .collect()
}

/// First-fit greedy coloring of the vertex adjacency graph in ascending vertex order.
pub fn greedy_color(mesh: &TetMesh) -> Vec<usize> {
    let nv = mesh.vertex_count();
    let mut colors = vec![usize::MAX; nv];
    for v in 0..nv {
        let used: BTreeSet<usize> = mesh
            .neighbors(v)
            .into_iter()
            .map(|u| colors[u])
            .filter(|&c| c != usize::MAX)
            .collect();
        colors[v] = (0..).find(|c| !used.contains(c)).unwrap();
    }
    colors
}

/// True if no two vertices of any tet share a color.
pub fn coloring_is_valid(mesh: &TetMesh, colors: &[usize]) -> bool {
    mesh.tets
        .iter()
        .all(|t| (0..4).all(|a| (a + 1..4).all(|b| colors[t[a]] != colors[t[b]])))
}

/// Uniform scaling mapping the joint rest bounding box into the unit cube
/// (longest side becomes 1, min corner goes to the origin).
pub fn normalize_scene(meshes: &[&TetMesh]) -> Result<SceneNormalization> {
    let mut points = meshes
        .iter()
        .flat_map(|m| m.rest_positions.iter())
        .peekable();
    let Some(first) = points.peek().copied() else {
        return Err(Error::ZeroExtent);
    };
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(Error::ZeroExtent);
    }
    let scale = 1.0 / extent;
    Ok(SceneNormalization {
        scale,
        offset: -lo * scale,
    })
}

fn parse_header(
    path: &Path,
    lines: &mut dyn Iterator<Item = (usize, &str)>,
) -> Result<(usize, usize)> {
    let (no, line) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_owned(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let count = line
        .split_whitespace()
        .next()
        .and_then(|t| t.parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: no,
            msg: "expected a count".into(),
        })?;
    Ok((no, count))
}

/// Content lines with 1-based line numbers; `#` comments and blanks skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Loads a TetGen-style `.node`/`.ele` pair. Index base (0 or 1) is taken from
/// the first node id.
pub fn load_mesh(node_path: &Path, ele_path: &Path, density: f64) -> Result<TetMesh> {
    let node_text = fs::read_to_string(node_path)?;
    let mut lines = content_lines(&node_text);
    let (_, nv) = parse_header(node_path, &mut lines)?;
    let mut base = None;
    let mut positions = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = lines.next().ok_or_else(|| Error::Parse {
            path: node_path.to_owned(),
            line: 0,
            msg: format!("expected {nv} vertices, found {}", positions.len()),
        })?;
        let bad = |msg: &str| Error::Parse {
            path: node_path.to_owned(),
            line: no,
            msg: msg.into(),
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(bad("expected `id x y z`"));
        }
        let id: usize = tok[0].parse().map_err(|_| bad("bad vertex id"))?;
        let b = *base.get_or_insert(id.min(1));
        if id != positions.len() + b {
            return Err(bad("vertex ids must be consecutive"));
        }
        let mut p = Vec3::zeros();
        for k in 0..3 {
            p[k] = tok[k + 1].parse().map_err(|_| bad("bad coordinate"))?;
        }
        positions.push(p);
    }
    let base = base.unwrap_or(0);

    let ele_text = fs::read_to_string(ele_path)?;
    let mut lines = content_lines(&ele_text);
    let (_, ne) = parse_header(ele_path, &mut lines)?;
    let mut tets = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (no, line) = lines.next().ok_or_else(|| Error::Parse {
            path: ele_path.to_owned(),
            line: 0,
            msg: format!("expected {ne} elements, found {}", tets.len()),
        })?;
        let bad = |msg: &str| Error::Parse {
            path: ele_path.to_owned(),
            line: no,
            msg: msg.into(),
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 5 {
            return Err(bad("expected `id v0 v1 v2 v3`"));
        }
        let mut t = [0usize; 4];
        for k in 0..4 {
            let v: usize = tok[k + 1].parse().map_err(|_| bad("bad vertex index"))?;
            t[k] = v
                .checked_sub(base)
                .ok_or_else(|| bad("vertex index below base"))?;
        }
        tets.push(t);
    }
    TetMesh::new(positions, tets, density)
}

/// OBJ text of the surface triangles for a set of (possibly deformed) positions.
pub fn obj_text(objects: &[(&str, &[Vec3], &[[usize; 3]])]) -> String {
    let mut s = String::new();
    let mut offset = 1;
    for (name, positions, tris) in objects {
        writeln!(s, "o {name}").unwrap();
        for p in positions.iter() {
            writeln!(s, "v {} {} {}", p.x, p.y, p.z).unwrap();
        }
        for t in tris.iter() {
            writeln!(s, "f {} {} {}", t[0] + offset, t[1] + offset, t[2] + offset).unwrap();
        }
        offset += positions.len();
    }
    s
}
