//! Solves the corner-pinned heat problem on a random medium and reports a few nodal values.

use coarsegrain::fem::{solve, HeatProblem, MeshSpec};
use coarsegrain::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};

fn main() -> coarsegrain::Result<()> {
    let mesh = MeshSpec::square(64)?;
    let generator = MicrostructureGenerator::new(GrfSpec::new(64, 64, 0.0781)?, MediumSpec::new(10.0, 1.0, 0.2)?)?;
    let micro = generator.generate(1);
    let problem = HeatProblem::default();
    let u = solve(&mesh, &micro.conductivities(), &problem.boundary_conditions(&mesh))?.nodal_values;
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{} nodes, temperature range [{lo:.3}, {hi:.3}]", u.len());
    for (name, i, j) in [("upper-left", 0, 64), ("center", 32, 32), ("lower-right", 64, 0)] {
        println!("{name:>12}: {:.4}", u[mesh.node_id(i, j)]);
    }
    Ok(())
}
