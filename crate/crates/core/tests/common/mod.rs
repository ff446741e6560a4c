//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use coarsegrain::features::{default_catalog, FeatureCatalog};
use coarsegrain::fem::{solve, HeatProblem, MeshSpec};
use coarsegrain::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};
use coarsegrain::training::{EmProblem, TrainingDataset, TrainingPair};

pub const LENGTH_SCALE: f64 = 0.0781;

pub fn generator(n_fine: usize) -> MicrostructureGenerator {
    MicrostructureGenerator::new(
        GrfSpec::new(n_fine, n_fine, LENGTH_SCALE).unwrap(),
        MediumSpec::with_contrast(1.0, 10.0, 0.2).unwrap(),
    )
    .unwrap()
}

/// `n` microstructures with seeds `first_seed..` and their fine solutions.
pub fn dataset(n_fine: usize, n: usize, first_seed: u64) -> TrainingDataset {
    let fine = MeshSpec::square(n_fine).unwrap();
    let gen = generator(n_fine);
    let bc = HeatProblem::default().boundary_conditions(&fine);
    let pairs = (0..n as u64)
        .map(|k| {
            let micro = gen.generate(first_seed + k);
            let u_f = solve(&fine, &micro.conductivities(), &bc).unwrap().nodal_values;
            TrainingPair { micro, u_f }
        })
        .collect();
    TrainingDataset::new(fine, pairs).unwrap()
}

/// Columns of the default catalog picked by name, in the given order.
pub fn subcatalog(names: &[&str]) -> FeatureCatalog {
    let full = default_catalog();
    let entries = names
        .iter()
        .map(|n| full.entries()[full.index_of(n).unwrap_or_else(|| panic!("no feature {n}"))].clone())
        .collect();
    FeatureCatalog::new(entries).unwrap()
}

/// Single coarse element over a 16x16 fine mesh with a four-column catalog.
pub fn toy_problem(n: usize) -> EmProblem {
    let data = dataset(16, n, 100);
    let catalog = subcatalog(&["constant", "log_sca", "convex_area_max_hi", "log_geometric_y_max"]);
    EmProblem::new(&data, &catalog, MeshSpec::square(1).unwrap(), HeatProblem::default()).unwrap()
}
