//! Batch pipeline behind the command-line tool: configuration, on-disk datasets,
//! training, evaluation metrics and error sweeps.

mod dataset;
mod metrics;
mod sweep;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dataset::{
    design_matrices, generate_data, load_dataset, DatasetManifest, GenerationFailure, ManifestEntry, MicrostructureSidecar,
    SolutionSidecar, Split,
};
pub use metrics::{
    evaluate, evaluate_predictions, reference_variance, CoverageMode, MetricsReport, SampleMetrics, COVERAGE_K,
};
pub use sweep::{sweep, sweep_csv, SweepRow};

use crate::error::{Error, Result};
use crate::features::{default_catalog, FeatureCatalog};
use crate::fem::{HeatProblem, MeshSpec};
use crate::io;
use crate::microstructure::{GrfSpec, MediumSpec, MicrostructureGenerator};
use crate::rng;
use crate::surrogate::Surrogate;
use crate::training::{check_nested, fit_problem, EmConfig, EmProblem, FitResult, TrainingDataset};

/// Two-phase medium and the correlation length of its Gaussian field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    pub phi_hi: f64,
    pub length_scale: f64,
}

impl Default for MediumConfig {
    fn default() -> Self {
        MediumConfig {
            lambda_hi: 10.0,
            lambda_lo: 1.0,
            phi_hi: 0.2,
            length_scale: 0.0781,
        }
    }
}

impl MediumConfig {
    pub fn medium(&self) -> Result<MediumSpec> {
        MediumSpec::new(self.lambda_hi, self.lambda_lo, self.phi_hi).map_err(config_error)
    }

    pub fn generator(&self, fine: &MeshSpec) -> Result<MicrostructureGenerator> {
        let grf = GrfSpec::new(fine.nel_x, fine.nel_y, self.length_scale).map_err(config_error)?;
        MicrostructureGenerator::new(grf, self.medium()?)
    }
}

/// Base seeds of the independent random stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub test: u64,
    pub reference: u64,
    pub predict: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            train: 1,
            test: 2,
            reference: 3,
            predict: 4,
        }
    }
}

/// Axes of an error sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub n_train: Vec<usize>,
    /// Square coarse meshes `d x d`.
    pub coarse_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub medium: MediumConfig,
    pub fine_mesh: MeshSpec,
    pub coarse_mesh: MeshSpec,
    #[serde(default)]
    pub problem: HeatProblem,
    pub n_train: usize,
    pub n_test: usize,
    /// Size of the output-variance reference set.
    #[serde(default = "default_n_reference")]
    pub n_reference: usize,
    /// Feature catalog JSON; relative paths resolve against the config file. `None` selects
    /// the default catalog.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_pred_samples")]
    pub n_pred_samples: usize,
    #[serde(default)]
    pub coverage: CoverageMode,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

fn default_n_reference() -> usize {
    256
}

fn default_pred_samples() -> usize {
    1000
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    }
}

impl ExperimentConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = io::read_json(path)?;
        if let Some(c) = config.catalog.as_mut() {
            if c.is_relative() {
                *c = path.parent().unwrap_or(Path::new(".")).join(&*c);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.medium.medium()?;
        if !(self.medium.length_scale > 0.0 && self.medium.length_scale.is_finite()) {
            return Err(Error::Config("length_scale must be positive".into()));
        }
        for m in [&self.fine_mesh, &self.coarse_mesh] {
            MeshSpec::new(m.nel_x, m.nel_y).map_err(config_error)?;
        }
        check_nested(&self.fine_mesh, &self.coarse_mesh)?;
        if self.n_train == 0 || self.n_test == 0 || self.n_reference == 0 || self.n_pred_samples == 0 {
            return Err(Error::Config("n_train, n_test, n_reference and n_pred_samples must be at least 1".into()));
        }
        if let Some(c) = &self.catalog {
            if !c.is_file() {
                return Err(Error::Config(format!("catalog file {} does not exist", c.display())));
            }
        }
        if let Some(s) = &self.sweep {
            if s.n_train.is_empty() || s.coarse_dims.is_empty() || s.n_train.contains(&0) {
                return Err(Error::Config("sweep grids must be non-empty with positive entries".into()));
            }
            for &d in &s.coarse_dims {
                check_nested(&self.fine_mesh, &MeshSpec::square(d).map_err(config_error)?)?;
            }
        }
        self.em.validate()
    }

    /// Replaces every seed by one derived from `base`.
    pub fn reseed(&mut self, base: u64) {
        self.seeds = Seeds {
            train: rng::derive_seed(&[base, 1]),
            test: rng::derive_seed(&[base, 2]),
            reference: rng::derive_seed(&[base, 3]),
            predict: rng::derive_seed(&[base, 4]),
        };
        self.em.seed = rng::derive_seed(&[base, 5]);
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
            Split::Reference => self.n_reference,
        }
    }

    pub fn split_seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.seeds.train,
            Split::Test => self.seeds.test,
            Split::Reference => self.seeds.reference,
        }
    }

    pub fn load_catalog(&self) -> Result<FeatureCatalog> {
        match &self.catalog {
            Some(path) => {
                let bytes = io::read_bytes(path)?;
                let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                FeatureCatalog::from_json(&text)
            }
            None => Ok(default_catalog()),
        }
    }
}

/// Trains on the first `n_train` pairs of the dataset in `data_dir` with the given coarse mesh,
/// reusing cached design matrices.
pub fn train(config: &ExperimentConfig, data_dir: &Path, coarse_mesh: MeshSpec, n_train: usize) -> Result<FitResult> {
    let (data, manifest) = load_dataset(data_dir)?;
    fit_subset(config, data_dir, &data, &manifest, coarse_mesh, n_train)
}

pub(crate) fn fit_subset(
    config: &ExperimentConfig,
    data_dir: &Path,
    data: &TrainingDataset,
    manifest: &DatasetManifest,
    coarse_mesh: MeshSpec,
    n_train: usize,
) -> Result<FitResult> {
    if data.fine_mesh != config.fine_mesh {
        return Err(Error::Config("dataset fine mesh differs from the configuration".into()));
    }
    if n_train > data.len() {
        return Err(Error::Config(format!("{n_train} training pairs requested, dataset has {}", data.len())));
    }
    let catalog = config.load_catalog()?;
    let data = data.head(n_train)?;
    let raw = design_matrices(data_dir, manifest, &data, &catalog, &coarse_mesh)?;
    let problem = EmProblem::from_raw(&data, &catalog, coarse_mesh, config.problem, raw)?;
    fit_problem(problem, &config.em)
}

/// Writes `model.json`, `training_log.csv` and, when cross-validation ran, `cv.csv`.
pub fn write_fit(fit: &FitResult, out_dir: &Path) -> Result<()> {
    fit.params.save(&out_dir.join("model.json"))?;
    io::write_atomic(
        &out_dir.join("training_log.csv"),
        crate::training::training_log_csv(&fit.state.log)?.as_bytes(),
    )?;
    if let Some(cv) = &fit.cv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["gamma", "mean_score", "se", "selected"]).map_err(csv_error)?;
        for g in 0..cv.grid.len() {
            w.write_record([
                cv.grid[g].to_string(),
                cv.mean_score[g].to_string(),
                cv.se[g].to_string(),
                (g == cv.selected_index).to_string(),
            ])
            .map_err(csv_error)?;
        }
        io::write_atomic(&out_dir.join("cv.csv"), &w.into_inner().map_err(|e| csv_error(e.into_error()))?)?;
    }
    Ok(())
}

pub(crate) fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub index: usize,
    pub mean: String,
    pub variance: String,
    pub mean_sha256: String,
    pub variance_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub model_sha256: String,
    pub n_samples: usize,
    pub seed: u64,
    pub entries: Vec<PredictionEntry>,
}

/// Writes predictive mean and variance arrays for every sample in `data` plus `predictions.json`.
pub fn predict_dataset(model: &Surrogate, data: &Path, n: usize, seed: u64, out: &Path) -> Result<PredictionManifest> {
    let (dataset, _) = load_dataset(data)?;
    let mut entries = Vec::new();
    for (i, pair) in dataset.pairs.iter().enumerate() {
        let ens = model.predict(&pair.micro, n, rng::derive_seed(&[seed, i as u64]), false)?;
        let (mean, variance) = (format!("sample_{i:05}.mean.f64"), format!("sample_{i:05}.var.f64"));
        let (mb, vb) = (io::f64s_to_bytes(&ens.mean), io::f64s_to_bytes(&ens.variance));
        io::write_atomic(&out.join(&mean), &mb)?;
        io::write_atomic(&out.join(&variance), &vb)?;
        entries.push(PredictionEntry {
            index: i,
            mean,
            variance,
            mean_sha256: io::sha256_hex(&mb),
            variance_sha256: io::sha256_hex(&vb),
        });
    }
    let model_sha256 = io::sha256_hex(&serde_json::to_vec(&model.params).expect("model serializes"));
    let manifest = PredictionManifest {
        model_sha256,
        n_samples: n,
        seed,
        entries,
    };
    io::write_json(&out.join("predictions.json"), &manifest)?;
    Ok(manifest)
}
