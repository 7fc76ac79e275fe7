//! Scene files, the time-stepping driver, the solver comparison runner and the
//! precomputation cache.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{
    assemble, compute_z, initial_guess, newton_solve_observed, step_velocity_update, unflatten,
    NewtonConfig,
};
use crate::cubature::TrainingParams;
use crate::energy::element_derivatives;
use crate::linalg::SkylineCholesky;
use crate::local_solver::{outer_solve, sweep, EXACT_MAX_DOFS};
use crate::mesh::{coloring_is_valid, load_mesh, node_text, obj_text};
use crate::{
    BarrierParams, Error, HalfSpace, MaterialParams, Mode, Model, Precomputed, Result,
    SolverConfig, SubspaceKind, SystemState, TetMesh, Vec3,
};

/// Environment variable naming the precomputation cache directory.
pub const CACHE_DIR_ENV: &str = "PERTURB_CACHE_DIR";

/// Newton tolerance for the reference solution in comparisons.
const REFERENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverTag {
    Newton,
    Jgs2Exact,
    Jgs2Cubature,
    PlainLocal,
}

impl SolverTag {
    pub const ALL: [SolverTag; 4] = [
        Self::Newton,
        Self::Jgs2Exact,
        Self::Jgs2Cubature,
        Self::PlainLocal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Newton => "newton",
            Self::Jgs2Exact => "jgs2_exact",
            Self::Jgs2Cubature => "jgs2_cubature",
            Self::PlainLocal => "plain_local",
        }
    }

    /// Subspace of a local solver; `None` for Newton.
    pub fn subspace(self) -> Option<SubspaceKind> {
        match self {
            Self::Newton => None,
            Self::Jgs2Exact => Some(SubspaceKind::Exact),
            Self::Jgs2Cubature => Some(SubspaceKind::CorotatedCubature),
            Self::PlainLocal => Some(SubspaceKind::None),
        }
    }
}

impl fmt::Display for SolverTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|t| t.as_str()).collect();
                Error::Config(format!(
                    "unknown solver `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub h: f64,
    pub frames: usize,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    /// Seed for cubature candidate sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub cubature: TrainingParams,
    #[serde(default)]
    pub barrier: Option<BarrierParams>,
    #[serde(default)]
    pub ground: Option<PlaneSection>,
    pub bodies: Vec<BodySection>,
    #[serde(default)]
    pub compare: CompareSection,
    /// Directory that relative mesh paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_name() -> String {
    "scene".into()
}

fn default_gravity() -> [f64; 3] {
    [0.0, -9.8, 0.0]
}

fn default_output() -> PathBuf {
    "out".into()
}

fn default_density() -> f64 {
    1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: SolverTag,
    pub mode: Mode,
    pub tol_dx: f64,
    pub max_outer: usize,
    pub local_line_search: bool,
    pub log_energy: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let c = SolverConfig::default();
        Self {
            method: SolverTag::Jgs2Cubature,
            mode: c.mode,
            tol_dx: c.tol_dx,
            max_outer: c.max_outer,
            local_line_search: c.local_line_search,
            log_energy: c.log_energy,
        }
    }
}

impl SolverSection {
    /// Local solver configuration for `tag`; `None` for Newton.
    pub fn local_config(&self, tag: SolverTag) -> Option<SolverConfig> {
        Some(SolverConfig {
            mode: self.mode,
            subspace: tag.subspace()?,
            tol_dx: self.tol_dx,
            max_outer: self.max_outer,
            local_line_search: self.local_line_search,
            log_energy: self.log_energy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSection {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl PlaneSection {
    pub fn half_space(&self) -> Result<HalfSpace> {
        HalfSpace::new(Vec3::from(self.point), Vec3::from(self.normal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub cells: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySection {
    /// Generated box mesh; alternative to `node` + `ele`.
    #[serde(default, rename = "box")]
    pub box_mesh: Option<BoxSection>,
    #[serde(default)]
    pub node: Option<PathBuf>,
    #[serde(default)]
    pub ele: Option<PathBuf>,
    pub young: f64,
    pub poisson: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub translate: [f64; 3],
    /// Euler angles (x, y, z) in degrees, applied before the translation.
    #[serde(default)]
    pub rotate_deg: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Body-local indices of Dirichlet vertices.
    #[serde(default)]
    pub fixed: Vec<usize>,
    /// Vertices on the closed negative side of any of these planes (placed
    /// body) are fixed.
    #[serde(default)]
    pub pins: Vec<PlaneSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Element whose error is tracked; defaults to the one that moves most in the first frame.
    pub probe_element: Option<usize>,
    pub reference_tol: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            probe_element: None,
            reference_tol: REFERENCE_TOL,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "name", "h", "frames", "gravity", "seed", "output", "solver", "cubature", "barrier", "ground",
    "bodies", "compare",
];
const SOLVER_KEYS: &[&str] = &[
    "method",
    "mode",
    "tol_dx",
    "max_outer",
    "local_line_search",
    "log_energy",
];
const CUBATURE_KEYS: &[&str] = &[
    "poses",
    "amplitude",
    "target_residual",
    "candidates_per_round",
    "max_size",
    "near_rings",
    "smoothing_steps",
];
const BARRIER_KEYS: &[&str] = &["dhat", "kappa"];
const PLANE_KEYS: &[&str] = &["point", "normal"];
const BODY_KEYS: &[&str] = &[
    "box",
    "node",
    "ele",
    "young",
    "poisson",
    "density",
    "translate",
    "rotate_deg",
    "velocity",
    "fixed",
    "pins",
];
const BOX_KEYS: &[&str] = &["min", "max", "cells"];
const COMPARE_KEYS: &[&str] = &["probe_element", "reference_tol"];

fn unknown_in(table: &toml::Table, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            out.push(format!("{prefix}{key}"));
        }
    }
}

/// Every key in `table` that is not part of the scene schema, dotted.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    unknown_in(table, TOP_KEYS, "", &mut out);
    let sections: [(&str, &[&str]); 5] = [
        ("solver", SOLVER_KEYS),
        ("cubature", CUBATURE_KEYS),
        ("barrier", BARRIER_KEYS),
        ("ground", PLANE_KEYS),
        ("compare", COMPARE_KEYS),
    ];
    for (name, keys) in sections {
        if let Some(t) = table.get(name).and_then(|v| v.as_table()) {
            unknown_in(t, keys, &format!("{name}."), &mut out);
        }
    }
    if let Some(bodies) = table.get("bodies").and_then(|v| v.as_array()) {
        for (b, body) in bodies.iter().enumerate() {
            let Some(body) = body.as_table() else {
                continue;
            };
            let prefix = format!("bodies[{b}].");
            unknown_in(body, BODY_KEYS, &prefix, &mut out);
            if let Some(t) = body.get("box").and_then(|v| v.as_table()) {
                unknown_in(t, BOX_KEYS, &format!("{prefix}box."), &mut out);
            }
            if let Some(pins) = body.get("pins").and_then(|v| v.as_array()) {
                for (p, pin) in pins.iter().enumerate() {
                    if let Some(t) = pin.as_table() {
                        unknown_in(t, PLANE_KEYS, &format!("{prefix}pins[{p}]."), &mut out);
                    }
                }
            }
        }
    }
    out
}

/// Reads and validates a scene file; relative mesh paths resolve against its directory.
pub fn parse_scene(path: &Path) -> Result<SceneConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_scene_str(&text, &base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_scene_str(text: &str, base_dir: &Path) -> Result<SceneConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let unknown = unknown_keys(&table);
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown keys: {}",
            unknown.join(", ")
        )));
    }
    let mut scene: SceneConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    scene.base_dir = base_dir.to_path_buf();
    scene.validate()?;
    Ok(scene)
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.h > 0.0) {
            return bad(format!("h must be positive, got {}", self.h));
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.bodies.is_empty() {
            return bad("at least one [[bodies]] entry is required".into());
        }
        if !(self.solver.tol_dx > 0.0) || self.solver.max_outer == 0 {
            return bad("solver needs tol_dx > 0 and max_outer >= 1".into());
        }
        if self.cubature.max_size == 0 || self.cubature.poses == 0 {
            return bad("cubature needs max_size >= 1 and poses >= 1".into());
        }
        if self.ground.is_some() && self.barrier.is_none() {
            return bad("a ground plane needs a [barrier] section".into());
        }
        if let Some(b) = &self.barrier {
            b.validate()?;
        }
        for (b, body) in self.bodies.iter().enumerate() {
            match (&body.box_mesh, &body.node, &body.ele) {
                (Some(_), None, None) => {}
                (None, Some(node), Some(ele)) => {
                    for p in [node, ele] {
                        let p = self.resolve(p);
                        if !p.is_file() {
                            return bad(format!(
                                "bodies[{b}]: mesh file {} does not exist",
                                p.display()
                            ));
                        }
                    }
                }
                _ => {
                    return bad(format!(
                        "bodies[{b}]: give either `box` or both `node` and `ele`"
                    ))
                }
            }
            MaterialParams::from_young_poisson(body.young, body.poisson, body.density)
                .map_err(|e| Error::Config(format!("bodies[{b}]: {e}")))?;
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The assembled model and each vertex's initial velocity.
    pub fn build_model(&self) -> Result<(Model, Vec<Vec3>)> {
        let mut bodies = Vec::with_capacity(self.bodies.len());
        for body in &self.bodies {
            let mesh = match &body.box_mesh {
                Some(b) => TetMesh::generate_box(
                    Vec3::from(b.min),
                    Vec3::from(b.max),
                    b.cells,
                    body.density,
                )?,
                None => {
                    let (node, ele) = (
                        body.node.as_ref().expect("validated"),
                        body.ele.as_ref().expect("validated"),
                    );
                    load_mesh(&self.resolve(node), &self.resolve(ele), body.density)?
                }
            };
            let [rx, ry, rz] = body.rotate_deg.map(f64::to_radians);
            let rot = Rotation3::from_euler_angles(rx, ry, rz);
            let shift = Vec3::from(body.translate);
            let placed = mesh
                .rest_positions
                .iter()
                .map(|p| rot * p + shift)
                .collect();
            let mesh = TetMesh::new(placed, mesh.tets, body.density)?;
            let material =
                MaterialParams::from_young_poisson(body.young, body.poisson, body.density)?;
            bodies.push((mesh, material));
        }
        let counts: Vec<usize> = bodies.iter().map(|(m, _)| m.vertex_count()).collect();
        let planes = self
            .ground
            .iter()
            .map(PlaneSection::half_space)
            .collect::<Result<Vec<_>>>()?;
        let mut model = Model::new(bodies, planes, self.barrier, Vec3::from(self.gravity))?;

        let mut velocity = vec![Vec3::zeros(); model.vertex_count()];
        let mut offset = 0;
        for (b, (body, &count)) in self.bodies.iter().zip(&counts).enumerate() {
            for &v in &body.fixed {
                if v >= count {
                    return Err(Error::Config(format!(
                        "bodies[{b}]: fixed vertex {v} out of range ({count} vertices)"
                    )));
                }
                model.fixed[offset + v] = true;
            }
            let pins = body
                .pins
                .iter()
                .map(PlaneSection::half_space)
                .collect::<Result<Vec<_>>>()?;
            let tol = 1e-9 / model.normalization.scale;
            for v in offset..offset + count {
                if pins
                    .iter()
                    .any(|p| p.distance(&model.mesh.rest_positions[v]) <= tol)
                {
                    model.fixed[v] = true;
                }
                if !model.fixed[v] {
                    velocity[v] = Vec3::from(body.velocity);
                }
            }
            offset += count;
        }
        Ok((model, velocity))
    }

    /// State at the start of the first frame.
    pub fn initial_state(&self, model: &Model, velocity: &[Vec3]) -> Result<SystemState> {
        let mut state = SystemState::at_rest(model, self.h)?;
        state.v = velocity.to_vec();
        Ok(state)
    }
}

/// One outer iteration of one solver in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub frame: usize,
    pub iter: usize,
    pub solver: SolverTag,
    pub energy: f64,
    pub dx_norm: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "frame,iter,solver,energy,dx_norm,grad_norm,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.frame,
            self.iter,
            self.solver,
            self.energy,
            self.dx_norm,
            self.grad_norm,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheOptions {
    pub enabled: bool,
    pub dir: PathBuf,
}

impl CacheOptions {
    /// Enabled, in `$PERTURB_CACHE_DIR` or a directory under the system temp dir.
    pub fn from_env() -> Self {
        let dir = std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("perturb-cache"));
        Self { enabled: true, dir }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            dir: PathBuf::new(),
        }
    }
}

/// Content hash of everything the precomputation depends on.
pub fn cache_key(model: &Model, h: f64, params: &TrainingParams, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"perturb-precompute-v1");
    let mut floats = vec![h];
    floats.extend(
        model
            .mesh
            .rest_positions
            .iter()
            .flat_map(|p| [p.x, p.y, p.z]),
    );
    floats.extend(
        model
            .materials
            .iter()
            .flat_map(|m| [m.mu, m.lambda, m.density]),
    );
    for x in floats {
        hasher.update(x.to_le_bytes());
    }
    for t in &model.mesh.tets {
        t.iter()
            .for_each(|&v| hasher.update((v as u64).to_le_bytes()));
    }
    let fixed: Vec<u8> = model.fixed.iter().map(|&f| f as u8).collect();
    hasher.update(&fixed);
    hasher.update(serde_json::to_vec(params).expect("plain struct"));
    hasher.update(seed.to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Loads precomputed bases and cubature from the cache or builds (and stores) them.
/// The flag is true when the cache was used.
pub fn load_or_precompute(
    model: &Model,
    h: f64,
    params: &TrainingParams,
    seed: u64,
    cache: &CacheOptions,
) -> Result<(Precomputed, bool)> {
    let path = cache
        .dir
        .join(format!("{}.json", cache_key(model, h, params, seed)));
    if cache.enabled && path.is_file() {
        let loaded = fs::read(&path)
            .map_err(|e| Error::Cache(e.to_string()))
            .and_then(|bytes| {
                serde_json::from_slice::<Precomputed>(&bytes)
                    .map_err(|e| Error::Cache(e.to_string()))
            });
        match loaded {
            Ok(mut pre) => {
                pre.attach_rest(model)?;
                log::info!("precompute: loaded {}", path.display());
                return Ok((pre, true));
            }
            Err(e) => log::warn!(
                "precompute: ignoring unreadable cache {}: {e}",
                path.display()
            ),
        }
    }
    let start = Instant::now();
    let pre = Precomputed::build(model, h, params, seed)?;
    log::info!(
        "precompute: {} vertices in {:.2}s, {:.0}% of cubature fits met the target",
        model.vertex_count(),
        start.elapsed().as_secs_f64(),
        100.0 * pre.converged_fraction()
    );
    if cache.enabled {
        let stored = fs::create_dir_all(&cache.dir)
            .and_then(|_| fs::write(&path, serde_json::to_vec(&pre).expect("serializable")));
        if let Err(e) = stored {
            log::warn!("precompute: could not write cache {}: {e}", path.display());
        }
    }
    Ok((pre, false))
}

/// Command-line overrides and output switches shared by the verbs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub solver: Option<SolverTag>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cache: CacheOptions,
    /// Write frames and CSV files; off for in-memory runs.
    pub write_files: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            solver: None,
            output: None,
            seed: None,
            cache: CacheOptions::from_env(),
            write_files: true,
        }
    }
}

impl RunOptions {
    fn output(&self, scene: &SceneConfig) -> PathBuf {
        self.output.clone().unwrap_or_else(|| scene.output.clone())
    }

    fn seed(&self, scene: &SceneConfig) -> u64 {
        self.seed.unwrap_or(scene.seed)
    }
}

/// Solves one time step from `state.x` with `tag`. `observer` receives
/// `(iter, energy, dx_norm, grad_norm, wall_ms, x)` after every iteration.
pub fn solve_step(
    model: &Model,
    state: &SystemState,
    tag: SolverTag,
    solver: &SolverSection,
    pre: Option<&Precomputed>,
    mut observer: impl FnMut(usize, f64, f64, f64, f64, &[Vec3]),
) -> Result<(Vec<Vec3>, bool)> {
    match solver.local_config(tag) {
        None => {
            let cfg = NewtonConfig {
                tol_dx: solver.tol_dx,
                max_iters: solver.max_outer,
                project_spd: true,
            };
            let r = newton_solve_observed(model, state, &cfg, |s, x| {
                observer(s.iter, s.energy, s.dx_norm, s.grad_norm, s.wall_ms, x)
            })?;
            Ok((r.x, r.converged))
        }
        Some(cfg) => {
            let r = outer_solve(model, state, &cfg, pre, |s, x| {
                observer(s.iter, s.energy, s.dx_norm, s.grad_norm, s.wall_ms, x)
            })?;
            Ok((r.x, r.converged))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub solver: SolverTag,
    pub rows: Vec<MetricsRow>,
    /// False if some frame hit the iteration cap; the run stops after that frame.
    pub converged: bool,
    pub frames_completed: usize,
    /// Smallest contact distance seen at the end of any frame (infinite without contact).
    pub min_distance: f64,
    /// Largest distance of any vertex from its rest position over all frames.
    pub max_displacement: f64,
    pub loaded_from_cache: bool,
    pub output: PathBuf,
}

fn min_contact_distance(model: &Model, x: &[Vec3]) -> f64 {
    let pairs = model.contact_pairs(x).into_iter().map(|p| p.d);
    let planes = model
        .surface_vertices
        .iter()
        .flat_map(|&v| model.planes.iter().map(move |p| p.distance(&x[v])));
    pairs.chain(planes).fold(f64::INFINITY, f64::min)
}

/// Steps the scene for `frames` frames, writing `frame_NNNN.obj`/`.node` and
/// `metrics.csv` to the output directory.
pub fn run(scene: &SceneConfig, opts: &RunOptions) -> Result<RunReport> {
    let tag = opts.solver.unwrap_or(scene.solver.method);
    let out = opts.output(scene);
    let (model, velocity) = scene.build_model()?;
    let mut state = scene.initial_state(&model, &velocity)?;
    let (pre, loaded) = if tag == SolverTag::Jgs2Cubature {
        let (p, l) = load_or_precompute(
            &model,
            scene.h,
            &scene.cubature,
            opts.seed(scene),
            &opts.cache,
        )?;
        (Some(p), l)
    } else {
        (None, false)
    };

    let mut metrics = None;
    if opts.write_files {
        fs::create_dir_all(&out)?;
        let mut f = std::io::BufWriter::new(fs::File::create(out.join("metrics.csv"))?);
        writeln!(f, "{}", MetricsRow::HEADER)?;
        metrics = Some(f);
    }

    let mut report = RunReport {
        solver: tag,
        rows: Vec::new(),
        converged: true,
        frames_completed: 0,
        min_distance: min_contact_distance(&model, &state.x),
        max_displacement: 0.0,
        loaded_from_cache: loaded,
        output: out.clone(),
    };
    for frame in 0..scene.frames {
        compute_z(&model, &mut state, None);
        state.x = initial_guess(&model, &state);
        let first_row = report.rows.len();
        let (x, converged) = solve_step(
            &model,
            &state,
            tag,
            &scene.solver,
            pre.as_ref(),
            |iter, energy, dx, grad, ms, _| {
                report.rows.push(MetricsRow {
                    frame,
                    iter,
                    solver: tag,
                    energy,
                    dx_norm: dx,
                    grad_norm: grad,
                    wall_ms: ms,
                });
            },
        )?;
        step_velocity_update(&mut state, x);
        report.frames_completed = frame + 1;
        report.min_distance = report
            .min_distance
            .min(min_contact_distance(&model, &state.x));
        let disp = state
            .x
            .iter()
            .zip(&model.mesh.rest_positions)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        report.max_displacement = report.max_displacement.max(disp);

        if let Some(f) = metrics.as_mut() {
            for row in &report.rows[first_row..] {
                writeln!(f, "{}", row.csv_line())?;
            }
            f.flush()?;
            fs::write(
                out.join(format!("frame_{frame:04}.obj")),
                obj_text(&[(scene.name.as_str(), &state.x, &model.mesh.surface_tris)]),
            )?;
            fs::write(
                out.join(format!("frame_{frame:04}.node")),
                node_text(&state.x),
            )?;
        }
        if !converged {
            log::warn!(
                "frame {frame}: {tag} did not converge in {} iterations",
                scene.solver.max_outer
            );
            report.converged = false;
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub frame: usize,
    pub solver: SolverTag,
    /// 1-based outer iteration.
    pub iter: usize,
    /// Probe element distance to the reference, relative to the reference's
    /// distance from the starting iterate.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub frame: usize,
    pub solver: SolverTag,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub probe_element: usize,
    pub errors: Vec<ErrorRow>,
    pub iterations: Vec<IterationRow>,
}

impl CompareReport {
    /// Error curve of one solver in one frame, by iteration.
    pub fn curve(&self, frame: usize, solver: SolverTag) -> Vec<f64> {
        self.errors
            .iter()
            .filter(|r| r.frame == frame && r.solver == solver)
            .map(|r| r.error)
            .collect()
    }

    /// First iteration (1-based) at which the error is at most `level`.
    pub fn iterations_to(&self, frame: usize, solver: SolverTag, level: f64) -> Option<usize> {
        self.curve(frame, solver)
            .iter()
            .position(|&e| e <= level)
            .map(|k| k + 1)
    }

    pub fn iteration_count(&self, frame: usize, solver: SolverTag) -> Option<&IterationRow> {
        self.iterations
            .iter()
            .find(|r| r.frame == frame && r.solver == solver)
    }
}

fn probe_distance(model: &Model, e: usize, a: &[Vec3], b: &[Vec3]) -> f64 {
    model.mesh.tets[e]
        .iter()
        .map(|&v| (a[v] - b[v]).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Runs every solver in `tags` from identical per-frame starting iterates and
/// measures them against a tightly converged Newton reference, which also
/// advances the state. Writes `errors.csv` and `iterations.csv`.
pub fn compare(
    scene: &SceneConfig,
    tags: &[SolverTag],
    opts: &RunOptions,
) -> Result<CompareReport> {
    let (model, velocity) = scene.build_model()?;
    let mut state = scene.initial_state(&model, &velocity)?;
    let pre = if tags.contains(&SolverTag::Jgs2Cubature) {
        Some(
            load_or_precompute(
                &model,
                scene.h,
                &scene.cubature,
                opts.seed(scene),
                &opts.cache,
            )?
            .0,
        )
    } else {
        None
    };
    let reference_solver = SolverSection {
        tol_dx: scene.compare.reference_tol,
        max_outer: 100,
        ..scene.solver
    };
    let mut probe = scene.compare.probe_element;
    if let Some(e) = probe {
        if e >= model.mesh.element_count() {
            return Err(Error::Config(format!("probe element {e} out of range")));
        }
    }
    let mut report = CompareReport {
        probe_element: 0,
        errors: Vec::new(),
        iterations: Vec::new(),
    };

    for frame in 0..scene.frames {
        compute_z(&model, &mut state, None);
        state.x = initial_guess(&model, &state);
        let x0 = state.x.clone();
        let (reference, ok) = solve_step(
            &model,
            &state,
            SolverTag::Newton,
            &reference_solver,
            None,
            |_, _, _, _, _, _| {},
        )?;
        if !ok {
            return Err(Error::ReferenceDiverged(frame));
        }
        let e = *probe.get_or_insert_with(|| {
            (0..model.mesh.element_count())
                .max_by(|&a, &b| {
                    probe_distance(&model, a, &reference, &x0)
                        .total_cmp(&probe_distance(&model, b, &reference, &x0))
                })
                .unwrap_or(0)
        });
        let scale = probe_distance(&model, e, &reference, &x0).max(f64::MIN_POSITIVE);
        for &tag in tags {
            let (_, converged) = solve_step(
                &model,
                &state,
                tag,
                &scene.solver,
                pre.as_ref(),
                |iter, _, _, _, _, x| {
                    report.errors.push(ErrorRow {
                        frame,
                        solver: tag,
                        iter: iter + 1,
                        error: probe_distance(&model, e, x, &reference) / scale,
                    });
                },
            )?;
            let iterations = report
                .errors
                .iter()
                .filter(|r| r.frame == frame && r.solver == tag)
                .count();
            report.iterations.push(IterationRow {
                frame,
                solver: tag,
                iterations,
                converged,
            });
        }
        step_velocity_update(&mut state, reference);
    }
    report.probe_element = probe.unwrap_or(0);

    if opts.write_files {
        let out = opts.output(scene);
        fs::create_dir_all(&out)?;
        let mut errors = String::from("frame,solver,iter,error\n");
        for r in &report.errors {
            errors.push_str(&format!(
                "{},{},{},{}\n",
                r.frame, r.solver, r.iter, r.error
            ));
        }
        fs::write(out.join("errors.csv"), errors)?;
        let mut iters = String::from("frame,solver,iterations,converged\n");
        for r in &report.iterations {
            iters.push_str(&format!(
                "{},{},{},{}\n",
                r.frame, r.solver, r.iterations, r.converged
            ));
        }
        fs::write(out.join("iterations.csv"), iters)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Invariant suite on the scene's first frame.
pub fn check(scene: &SceneConfig, opts: &RunOptions) -> Result<Vec<CheckResult>> {
    let (model, velocity) = scene.build_model()?;
    let mut state = scene.initial_state(&model, &velocity)?;
    compute_z(&model, &mut state, None);
    state.x = initial_guess(&model, &state);
    let mut results = Vec::new();

    results.push(CheckResult {
        name: "coloring",
        passed: coloring_is_valid(&model.mesh, &model.mesh.colors),
        detail: format!("{} colors", model.mesh.color_count()),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed(scene));
    let mut worst: f64 = 0.0;
    let scale = 1e-3 / model.normalization.scale;
    for _ in 0..20.min(model.mesh.element_count()) {
        let e = rng.gen_range(0..model.mesh.element_count());
        let mut x = model.element_positions(&model.mesh.rest_positions, e);
        x.iter_mut()
            .for_each(|p| *p += Vec3::from_fn(|_, _| rng.gen_range(-scale..scale)));
        let (dm, mat, vol) = (
            &model.mesh.dm_inv[e],
            &model.materials[e],
            model.mesh.rest_volumes[e],
        );
        let d = element_derivatives(&x, dm, mat, vol, false);
        let step = 1e-6 / model.normalization.scale;
        for k in 0..12 {
            let (mut xp, mut xm) = (x, x);
            xp[k / 3][k % 3] += step;
            xm[k / 3][k % 3] -= step;
            let fd = (crate::energy::element_energy(&xp, dm, mat, vol)
                - crate::energy::element_energy(&xm, dm, mat, vol))
                / (2.0 * step);
            worst = worst.max((fd - d.gradient[k]).abs() / d.gradient.norm().max(1e-12));
        }
    }
    results.push(CheckResult {
        name: "element_gradient",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.2e}"),
    });

    let contact_free = model.contact_pairs(&state.x).is_empty();
    if model.dof_count() <= EXACT_MAX_DOFS && contact_free {
        let sys = assemble(&model, &state, true)?;
        let chol = SkylineCholesky::factor(&sys.hessian)?;
        let newton = unflatten(&chol.solve(&sys.gradient.iter().map(|g| -g).collect::<Vec<_>>()));
        let cfg = SolverConfig {
            subspace: SubspaceKind::Exact,
            local_line_search: false,
            log_energy: false,
            ..Default::default()
        };
        let (x, _) = sweep(&model, &state.x, &state.z, state.h, &cfg, None)?;
        let worst = (0..model.vertex_count())
            .filter(|&v| !model.fixed[v] && newton[v].norm() > 0.0)
            .map(|v| (x[v] - state.x[v] - newton[v]).norm() / newton[v].norm())
            .fold(0.0, f64::max);
        results.push(CheckResult {
            name: "exact_sweep_is_newton_step",
            passed: worst <= 1e-8,
            detail: format!("max relative block error {worst:.2e}"),
        });
    }

    let tag = opts.solver.unwrap_or(scene.solver.method);
    if let Some(cfg) = scene.solver.local_config(tag) {
        let pre = match tag {
            SolverTag::Jgs2Cubature => Some(
                load_or_precompute(
                    &model,
                    scene.h,
                    &scene.cubature,
                    opts.seed(scene),
                    &opts.cache,
                )?
                .0,
            ),
            _ => None,
        };
        let cfg = SolverConfig {
            log_energy: true,
            ..cfg
        };
        let a = sweep(&model, &state.x, &state.z, state.h, &cfg, pre.as_ref())?;
        let b = sweep(&model, &state.x, &state.z, state.h, &cfg, pre.as_ref())?;
        results.push(CheckResult {
            name: "sweep_determinism",
            passed: a.0 == b.0,
            detail: format!("{tag}, {:?}", cfg.mode),
        });

        if !model.has_contact() && cfg.local_line_search {
            let mut energies = vec![crate::assembly::total_energy(
                &model, &state.x, &state.z, state.h,
            )?];
            let short = SolverConfig {
                max_outer: 20,
                ..cfg
            };
            outer_solve(&model, &state, &short, pre.as_ref(), |s, _| {
                energies.push(s.energy)
            })?;
            let rises = energies
                .windows(2)
                .filter(|w| w[1] > w[0] + 1e-10 * w[0].abs())
                .count();
            results.push(CheckResult {
                name: "energy_non_increasing",
                passed: rises == 0,
                detail: format!("{rises} increases over {} sweeps", energies.len() - 1),
            });
        }
    }
    Ok(results)
}

/// Vertices that are fixed, for reporting.
pub fn fixed_vertices(model: &Model) -> BTreeSet<usize> {
    (0..model.vertex_count())
        .filter(|&v| model.fixed[v])
        .collect()
}
