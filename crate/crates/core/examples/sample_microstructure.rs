//! Samples one binary medium and prints it as ASCII along with its volume fraction.
//!
//! `cargo run --release --example sample_microstructure -- [seed]`

use coarsegrain::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};

fn main() -> coarsegrain::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let generator = MicrostructureGenerator::new(GrfSpec::new(64, 64, 0.0781)?, MediumSpec::new(10.0, 1.0, 0.2)?)?;
    let m = generator.generate(seed);
    for iy in (0..m.ny).rev().step_by(2) {
        let row: String = (0..m.nx).map(|ix| if m.high[iy * m.nx + ix] { '#' } else { '.' }).collect();
        println!("{row}");
    }
    println!("seed {seed}: high-phase fraction {:.4} (target 0.2)", m.volume_fraction_hi());
    Ok(())
}
