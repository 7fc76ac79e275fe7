//! Shared fixtures for the benchmarks.

use perturb::assembly::{compute_z, initial_guess};
use perturb::{MaterialParams, Model, SystemState, TetMesh, Vec3};

pub const H: f64 = 0.01;

/// A cantilever beam with `cells` hex cells along its length, clamped at x = 0,
/// and the state at the start of its first step.
pub fn beam(cells: usize) -> (Model, SystemState) {
    let len = cells as f64 / 14.0;
    let mesh = TetMesh::generate_box(
        Vec3::zeros(),
        Vec3::new(len, 1.0 / 7.0, 1.0 / 7.0),
        [cells, 2, 2],
        1000.0,
    )
    .expect("valid box");
    let material = MaterialParams::from_young_poisson(1e5, 0.3, 1000.0).expect("valid material");
    let mut model = Model::new(
        vec![(mesh, material)],
        vec![],
        None,
        Vec3::new(0.0, -9.8, 0.0),
    )
    .expect("valid model");
    for v in 0..model.vertex_count() {
        model.fixed[v] = model.mesh.rest_positions[v].x < 1e-9;
    }
    let mut state = SystemState::at_rest(&model, H).expect("valid state");
    compute_z(&model, &mut state, None);
    state.x = initial_guess(&model, &state);
    (model, state)
}
