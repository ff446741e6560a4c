//! Generates a small training set, fits the model with a fixed sparsity penalty and saves it.
//!
//! `cargo run --release --example train_surrogate -- [model.json]`

use coarsegrain::features::default_catalog;
use coarsegrain::fem::{solve, HeatProblem, MeshSpec};
use coarsegrain::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};
use coarsegrain::training::{fit, EmConfig, GammaSelection, TrainingDataset, TrainingPair};

fn main() -> coarsegrain::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "model.json".into());
    let fine = MeshSpec::square(32)?;
    let generator = MicrostructureGenerator::new(GrfSpec::new(32, 32, 0.0781)?, MediumSpec::new(10.0, 1.0, 0.2)?)?;
    let problem = HeatProblem::default();
    let bc = problem.boundary_conditions(&fine);
    let pairs = (0..16)
        .map(|seed| {
            let micro = generator.generate(seed);
            let u_f = solve(&fine, &micro.conductivities(), &bc)?.nodal_values;
            Ok(TrainingPair { micro, u_f })
        })
        .collect::<coarsegrain::Result<Vec<_>>>()?;
    let data = TrainingDataset::new(fine, pairs)?;

    let config = EmConfig {
        gamma: GammaSelection::Fixed { value: 1.0 },
        max_iter: 40,
        ..EmConfig::default()
    };
    let result = fit(&data, &default_catalog(), MeshSpec::square(2)?, problem, &config)?;
    for r in &result.state.log {
        println!(
            "iter {:>3}  bound {:>12.3}  accept {:.2}  nnz {}",
            r.iteration, r.lower_bound, r.mean_accept_rate, r.nnz_theta
        );
    }
    result.params.save(out.as_ref())?;
    println!("saved {out} ({} nonzero weights)", result.params.nnz_theta());
    Ok(())
}
