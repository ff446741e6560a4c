//! Tabulates the three effective-medium estimates over the inclusion fraction.

use coarsegrain::features::{dem, mga, sca};

fn main() -> coarsegrain::Result<()> {
    let (matrix, inclusion) = (1.0, 10.0);
    println!("{:>5} {:>9} {:>9} {:>9}", "phi", "mga", "sca", "dem");
    for k in 0..=10 {
        let phi = k as f64 / 10.0;
        println!(
            "{phi:>5.1} {:>9.4} {:>9.4} {:>9.4}",
            mga(matrix, inclusion, phi)?,
            sca(matrix, inclusion, phi)?,
            dem(matrix, inclusion, phi)?
        );
    }
    Ok(())
}
