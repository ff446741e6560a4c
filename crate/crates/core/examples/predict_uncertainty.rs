//! Loads a saved model and prints predictive mean and 2-sigma bands against the fine solution.
//!
//! `cargo run --release --example predict_uncertainty -- model.json [seed]`

use coarsegrain::fem::{solve, MeshSpec};
use coarsegrain::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};
use coarsegrain::surrogate::{ModelParams, Surrogate};

fn main() -> coarsegrain::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "model.json".into());
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let model = Surrogate::new(ModelParams::load(path.as_ref())?)?;
    let fine: MeshSpec = model.params.fine_mesh;
    let generator = MicrostructureGenerator::new(GrfSpec::new(fine.nel_x, fine.nel_y, 0.0781)?, MediumSpec::new(10.0, 1.0, 0.2)?)?;
    let micro = generator.generate(seed);
    let truth = solve(&fine, &micro.conductivities(), &model.params.problem.boundary_conditions(&fine))?.nodal_values;
    let ens = model.predict(&micro, 1000, seed, false)?;

    let j = fine.nel_y / 2;
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "x", "truth", "mean", "lo", "hi");
    let (mut inside, mut shown) = (0, 0);
    for i in (0..=fine.nel_x).step_by((fine.nel_x / 8).max(1)) {
        let k = fine.node_id(i, j);
        let sd = ens.variance[k].sqrt();
        let (lo, hi) = (ens.mean[k] - 2.0 * sd, ens.mean[k] + 2.0 * sd);
        shown += 1;
        inside += usize::from(truth[k] >= lo && truth[k] <= hi);
        println!("{:>6.3} {:>10.3} {:>10.3} {lo:>10.3} {hi:>10.3}", i as f64 / fine.nel_x as f64, truth[k], ens.mean[k]);
    }
    println!("{inside} of {shown} printed nodes inside the 2-sigma band");
    Ok(())
}
