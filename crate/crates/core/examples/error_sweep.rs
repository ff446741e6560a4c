//! Runs the full pipeline (generate, sweep) for a small grid in a temporary directory.

use coarsegrain::experiment::{generate_data, sweep, sweep_csv, ExperimentConfig, Split, SweepGrid};
use coarsegrain::training::GammaSelection;

fn main() -> coarsegrain::Result<()> {
    let mut config: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "fine_mesh": {"nel_x": 32, "nel_y": 32},
        "coarse_mesh": {"nel_x": 2, "nel_y": 2},
        "n_train": 16,
        "n_test": 8,
        "n_reference": 64,
        "n_pred_samples": 200,
    }))
    .expect("valid configuration");
    config.em.gamma = GammaSelection::Fixed { value: 1.0 };
    config.em.max_iter = 30;

    let root = std::env::temp_dir().join(format!("coarsegrain-sweep-{}", std::process::id()));
    for split in [Split::Train, Split::Test, Split::Reference] {
        generate_data(&config, split, &root.join(split.name()))?;
    }
    let grid = SweepGrid {
        n_train: vec![4, 8, 16],
        coarse_dims: vec![1, 2],
    };
    let rows = sweep(&config, &grid, &root.join("train"), &root.join("test"), &root.join("reference"))?;
    print!("{}", sweep_csv(&rows)?);
    let _ = std::fs::remove_dir_all(&root);
    Ok(())
}
