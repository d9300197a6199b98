//! Deterministic inputs for the benchmarks.

use epochreg::bundle::{BaProblem, InteriorFlags, ParamPolicy, SolverSettings};
use epochreg::nalgebra::Vector3;
use epochreg::synthetic::{generate_scene, EpochSpec, FlightSpec, SceneSpec};
use epochreg::{Helmert3D, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point pairs related by a Helmert transform, a share of them replaced by
/// random outliers.
pub fn helmert_pairs(n: usize, outlier_ratio: f64, seed: u64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let truth = Helmert3D::from_euler(1.3, 0.05, -0.02, 1.1, Vector3::new(120.0, -40.0, 8.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| {
        Vector3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(0.0..60.0))
    };
    (0..n)
        .map(|_| {
            let p = point(&mut rng);
            let q = if rng.random_bool(outlier_ratio) { point(&mut rng) } else { truth.apply(&p) };
            (p, q)
        })
        .collect()
}

/// A single-epoch synthetic block with `strips × per_strip` images.
pub fn block_scene(strips: usize, per_strip: usize) -> SceneSpec {
    SceneSpec {
        flight: FlightSpec { strips, images_per_strip: per_strip, ..FlightSpec::default() },
        epochs: vec![EpochSpec {
            id: "e".into(),
            rotation_noise_deg: 0.3,
            position_noise: 3.0,
            seed: 3,
            ..EpochSpec::default()
        }],
        ..SceneSpec::default()
    }
}

/// Free-network adjustment of a perturbed single-epoch block (interior
/// fixed, so the problem is well posed from intra-epoch ties alone).
pub fn ba_problem(strips: usize, per_strip: usize) -> Result<BaProblem> {
    let scene = generate_scene(&block_scene(strips, per_strip))?;
    let epoch = &scene.epochs[0];
    let policy = ParamPolicy { interior: InteriorFlags::none(), ..ParamPolicy::default() };
    let mut problem = BaProblem::from_blocks(
        std::slice::from_ref(&epoch.block),
        epoch.intra_ties.clone(),
        policy,
        SolverSettings::default(),
    )?;
    problem.initialize_points();
    Ok(problem)
}
