//! Relative error over a grid of training-set sizes and coarse meshes.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::finish;
use super::{csv_error, design_matrices, evaluate, fit_subset, load_dataset, ExperimentConfig, SweepGrid};
use crate::error::Result;
use crate::fem::MeshSpec;
use crate::surrogate::Surrogate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_train: usize,
    pub coarse_dim: usize,
    pub relative_error: f64,
    pub nnz_theta: usize,
    pub wall_time_s: f64,
    /// `ok`, or the error that stopped this grid point.
    pub status: String,
}

/// Fits one model per (coarse dim, n_train) point on nested prefixes of the training set and
/// scores it on the test set. A failing point yields a row with `NaN` error and continues.
pub fn sweep(config: &ExperimentConfig, grid: &SweepGrid, train_dir: &Path, test_dir: &Path, reference_dir: &Path) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let (train, manifest) = load_dataset(train_dir)?;
    let (test, _) = load_dataset(test_dir)?;
    let (reference, _) = load_dataset(reference_dir)?;
    let reference: Vec<Vec<f64>> = reference.pairs.into_iter().map(|p| p.u_f).collect();
    let catalog = config.load_catalog()?;
    let n_max = grid.n_train.iter().copied().max().unwrap_or(0).min(train.len());
    // fill the design cache once per mesh so parallel points only read it
    for &d in &grid.coarse_dims {
        design_matrices(train_dir, &manifest, &train.head(n_max)?, &catalog, &MeshSpec::square(d)?)?;
    }
    let points: Vec<(usize, usize)> = grid
        .coarse_dims
        .iter()
        .flat_map(|&d| grid.n_train.iter().map(move |&n| (d, n)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(d, n)| {
            let started = Instant::now();
            let outcome = (|| -> Result<(f64, usize)> {
                let fit = fit_subset(config, train_dir, &train, &manifest, MeshSpec::square(d)?, n)?;
                let nnz = fit.params.nnz_theta();
                let model = Surrogate::new(fit.params)?;
                let m = evaluate(&model, &test.pairs, &reference, config.n_pred_samples, config.seeds.predict, config.coverage)?;
                Ok((m.relative_error, nnz))
            })();
            let wall_time_s = started.elapsed().as_secs_f64();
            match outcome {
                Ok((relative_error, nnz_theta)) => {
                    log::info!("sweep N={n} coarse {d}x{d}: relative error {relative_error:.4}, nnz {nnz_theta}");
                    SweepRow {
                        n_train: n,
                        coarse_dim: d,
                        relative_error,
                        nnz_theta,
                        wall_time_s,
                        status: "ok".into(),
                    }
                }
                Err(e) => {
                    log::error!("sweep N={n} coarse {d}x{d} failed: {e}");
                    SweepRow {
                        n_train: n,
                        coarse_dim: d,
                        relative_error: f64::NAN,
                        nnz_theta: 0,
                        wall_time_s,
                        status: e.to_string(),
                    }
                }
            }
        })
        .collect();
    Ok(rows)
}

/// Header `n_train,coarse_dim,relative_error,nnz_theta,wall_time_s,status`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["n_train", "coarse_dim", "relative_error", "nnz_theta", "wall_time_s", "status"])
            .map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    finish(w)
}
