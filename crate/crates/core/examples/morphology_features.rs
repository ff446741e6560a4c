//! Prints the default design matrix row and all morphological descriptors for one coarse cell.

use coarsegrain::features::{build_raw_design_matrix, default_catalog, morphology_features, partition};
use coarsegrain::fem::MeshSpec;
use coarsegrain::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};

fn main() -> coarsegrain::Result<()> {
    let generator = MicrostructureGenerator::new(GrfSpec::new(64, 64, 0.0781)?, MediumSpec::new(10.0, 1.0, 0.2)?)?;
    let micro = generator.generate(3);
    let coarse = MeshSpec::square(4)?;
    let catalog = default_catalog();
    let phi = build_raw_design_matrix(&micro, &coarse, &catalog)?;
    println!("design matrix {} x {}; row 0:", phi.n_rows, phi.n_cols);
    for (name, v) in catalog.names().iter().zip(phi.row(0)) {
        println!("  {name:<28} {v:>12.5}");
    }
    let cells = partition(&micro, &coarse)?;
    println!("all morphological descriptors of cell 5:");
    for (name, v) in morphology_features(&cells[5]) {
        println!("  {name:<28} {v:>12.5}");
    }
    Ok(())
}
