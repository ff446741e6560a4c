//! Datasets on disk: raw little-endian `f64` arrays with JSON sidecars and a manifest that
//! records every seed and hash.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, MediumConfig};
use crate::error::{Error, Result};
use crate::features::{build_raw_design_matrix, DesignMatrix, FeatureCatalog};
use crate::fem::{solve, AffineFlux, HeatProblem, MeshSpec};
use crate::io;
use crate::microstructure::Microstructure;
use crate::rng;
use crate::training::{TrainingDataset, TrainingPair};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Reference,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Reference => "reference",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrostructureSidecar {
    pub nx: usize,
    pub ny: usize,
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    pub phi_hi: f64,
    pub l: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionSidecar {
    pub nel_x: usize,
    pub nel_y: usize,
    pub n_nodes: usize,
    /// Upper-left corner temperature.
    pub corner_value: f64,
    pub flux: AffineFlux,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub microstructure: String,
    pub microstructure_sha256: String,
    pub solution: String,
    pub solution_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub index: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub base_seed: u64,
    pub fine_mesh: MeshSpec,
    pub medium: MediumConfig,
    pub problem: HeatProblem,
    pub samples: Vec<ManifestEntry>,
    #[serde(default)]
    pub failures: Vec<GenerationFailure>,
}

fn sample_seed(base: u64, index: usize) -> u64 {
    rng::derive_seed(&[base, index as u64])
}

enum Outcome {
    Written(ManifestEntry),
    Failed(GenerationFailure),
}

/// Samples one split, solves each microstructure on the fine mesh and writes the files plus
/// `manifest.json` into `out_dir`. Samples whose solve fails are recorded and skipped.
pub fn generate_data(config: &ExperimentConfig, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let fine = config.fine_mesh;
    let generator = config.medium.generator(&fine)?;
    let bc = config.problem.boundary_conditions(&fine);
    let base_seed = config.split_seed(split);
    let outcomes: Vec<Outcome> = (0..config.split_size(split))
        .into_par_iter()
        .map(|index| {
            let seed = sample_seed(base_seed, index);
            let micro = generator.generate(seed);
            let u = match solve(&fine, &micro.conductivities(), &bc) {
                Ok(sol) => sol.nodal_values,
                Err(e) => {
                    log::error!("{} sample {index} (seed {seed}) failed: {e}", split.name());
                    return Ok(Outcome::Failed(GenerationFailure {
                        index,
                        seed,
                        message: e.to_string(),
                    }));
                }
            };
            let stem = format!("sample_{index:05}");
            let micro_bytes = io::f64s_to_bytes(&micro.conductivities());
            let u_bytes = io::f64s_to_bytes(&u);
            io::write_atomic(&out_dir.join(format!("{stem}.lambda.f64")), &micro_bytes)?;
            io::write_json(
                &out_dir.join(format!("{stem}.lambda.json")),
                &MicrostructureSidecar {
                    nx: micro.nx,
                    ny: micro.ny,
                    lambda_hi: config.medium.lambda_hi,
                    lambda_lo: config.medium.lambda_lo,
                    phi_hi: config.medium.phi_hi,
                    l: config.medium.length_scale,
                    seed,
                },
            )?;
            io::write_atomic(&out_dir.join(format!("{stem}.u.f64")), &u_bytes)?;
            io::write_json(
                &out_dir.join(format!("{stem}.u.json")),
                &SolutionSidecar {
                    nel_x: fine.nel_x,
                    nel_y: fine.nel_y,
                    n_nodes: fine.n_nodes(),
                    corner_value: config.problem.corner_value,
                    flux: config.problem.flux,
                    seed,
                },
            )?;
            Ok(Outcome::Written(ManifestEntry {
                index,
                seed,
                microstructure: format!("{stem}.lambda.f64"),
                microstructure_sha256: io::sha256_hex(&micro_bytes),
                solution: format!("{stem}.u.f64"),
                solution_sha256: io::sha256_hex(&u_bytes),
            }))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Written(e) => samples.push(e),
            Outcome::Failed(f) => failures.push(f),
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        split,
        base_seed,
        fine_mesh: fine,
        medium: config.medium,
        problem: config.problem,
        samples,
        failures,
    };
    io::write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn read_verified(dir: &Path, file: &str, sha: &str, len: usize) -> Result<Vec<f64>> {
    let path = dir.join(file);
    let bytes = io::read_bytes(&path)?;
    if io::sha256_hex(&bytes) != sha {
        return Err(Error::Data(format!("{} does not match its manifest hash", path.display())));
    }
    let values = io::bytes_to_f64s(&bytes).filter(|v| v.len() == len);
    values.ok_or_else(|| Error::Data(format!("{} does not hold {len} float64 values", path.display())))
}

/// Reads and hash-checks a dataset written by [`generate_data`].
pub fn load_dataset(dir: &Path) -> Result<(TrainingDataset, DatasetManifest)> {
    let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported dataset format {}", manifest.format_version)));
    }
    let fine = manifest.fine_mesh;
    let medium = manifest.medium.medium()?;
    let pairs = manifest
        .samples
        .par_iter()
        .map(|e| {
            let lambda = read_verified(dir, &e.microstructure, &e.microstructure_sha256, fine.n_elements())?;
            let u_f = read_verified(dir, &e.solution, &e.solution_sha256, fine.n_nodes())?;
            let micro = Microstructure::from_conductivities(fine.nel_x, fine.nel_y, &lambda, medium)?;
            Ok(TrainingPair { micro, u_f })
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dir.display())));
    }
    Ok((TrainingDataset::new(fine, pairs)?, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DesignSidecar {
    dataset_sha256: String,
    catalog_hash: String,
    coarse_mesh: MeshSpec,
    n_samples: usize,
    n_rows: usize,
    n_cols: usize,
}

/// Raw design matrices for the first `data.len()` samples, read from `<dir>/cache` when an entry
/// keyed by (manifest hash, catalog hash, coarse mesh) exists and written there otherwise.
pub fn design_matrices(
    dir: &Path,
    manifest: &DatasetManifest,
    data: &TrainingDataset,
    catalog: &FeatureCatalog,
    coarse: &MeshSpec,
) -> Result<Vec<DesignMatrix>> {
    let dataset_sha256 = io::sha256_hex(&serde_json::to_vec(manifest).expect("manifest serializes"));
    let catalog_hash = catalog.hash();
    let key = io::sha256_hex(format!("{dataset_sha256}:{catalog_hash}:{}x{}", coarse.nel_x, coarse.nel_y).as_bytes());
    let stem = dir.join("cache").join(format!("design_{}", &key[..16]));
    let bin = stem.with_extension("f64");
    let side = stem.with_extension("json");
    let (rows, cols) = (coarse.n_elements(), catalog.len());
    let expected = |n_samples| DesignSidecar {
        dataset_sha256: dataset_sha256.clone(),
        catalog_hash: catalog_hash.clone(),
        coarse_mesh: *coarse,
        n_samples,
        n_rows: rows,
        n_cols: cols,
    };
    if let Ok(found) = io::read_json::<DesignSidecar>(&side) {
        if found.n_samples >= data.len() && found == expected(found.n_samples) {
            if let Ok(values) = io::read_f64s(&bin, Some(found.n_samples * rows * cols)) {
                log::info!("design matrices from cache {}", bin.display());
                return Ok(values
                    .chunks_exact(rows * cols)
                    .take(data.len())
                    .map(|v| DesignMatrix {
                        n_rows: rows,
                        n_cols: cols,
                        values: v.to_vec(),
                        catalog_hash: catalog_hash.clone(),
                    })
                    .collect());
            }
        }
    }
    let phi: Vec<DesignMatrix> = data
        .pairs
        .iter()
        .map(|p| build_raw_design_matrix(&p.micro, coarse, catalog))
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = phi.iter().flat_map(|m| m.values.iter().copied()).collect();
    io::write_f64s(&bin, &flat)?;
    io::write_json(&side, &expected(data.len()))?;
    Ok(phi)
}
