use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coarsegrain::experiment::{self, ExperimentConfig, Split, SweepGrid};
use coarsegrain::surrogate::{ModelParams, Surrogate};
use coarsegrain::{io, rng, Error, Result};

#[derive(Parser)]
#[command(name = "coarsegrain", version, about = "Coarse-grained probabilistic surrogates for random heat conductors")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Reference,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Sample microstructures and fine solutions into <out>/data/<split>.
    Generate {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Fit a model; writes model.json, training_log.csv and cv.csv.
    Train {
        /// Training dataset (default <out>/data/train).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predictive mean and variance for every sample of a dataset.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Error and coverage metrics on a test set.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output-variance reference set (default <out>/data/reference).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Relative error over training-set sizes and coarse meshes; writes sweep.csv.
    Sweep {
        /// Comma-separated training-set sizes (overrides the configuration).
        #[arg(long, value_delimiter = ',')]
        n_train: Option<Vec<usize>>,
        /// Comma-separated square coarse mesh sizes.
        #[arg(long, value_delimiter = ',')]
        coarse: Option<Vec<usize>>,
        /// Directory holding train/, test/ and reference/ (default <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    Ok(Some(config))
}

fn require(config: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    config.ok_or_else(|| Error::Config("this command needs --config".into()))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let config = load_config(cli)?;
    let out = &cli.out;
    let data_dir = |given: &Option<PathBuf>, split: &str| given.clone().unwrap_or_else(|| out.join("data").join(split));
    let model_path = |given: &Option<PathBuf>| given.clone().unwrap_or_else(|| out.join("model.json"));
    match &cli.command {
        Command::Generate { split } => {
            let config = require(config)?;
            let splits = match split {
                SplitArg::Train => vec![Split::Train],
                SplitArg::Test => vec![Split::Test],
                SplitArg::Reference => vec![Split::Reference],
                SplitArg::All => vec![Split::Train, Split::Test, Split::Reference],
            };
            for s in splits {
                let dir = out.join("data").join(s.name());
                let m = experiment::generate_data(&config, s, &dir)?;
                log::info!("{}: {} samples, {} failures -> {}", s.name(), m.samples.len(), m.failures.len(), dir.display());
            }
            io::write_json(&out.join("config.json"), &config)
        }
        Command::Train { data } => {
            let config = require(config)?;
            let fit = experiment::train(&config, &data_dir(data, "train"), config.coarse_mesh, config.n_train)?;
            experiment::write_fit(&fit, out)?;
            log::info!(
                "trained on {} pairs: {} iterations, {} nonzero weights",
                fit.problem.n(),
                fit.state.iteration,
                fit.params.nnz_theta()
            );
            Ok(())
        }
        Command::Predict { model, data, samples } => {
            let model = Surrogate::new(ModelParams::load(&model_path(model))?)?;
            let (n, seed) = prediction_settings(cli, config.as_ref(), *samples);
            experiment::predict_dataset(&model, &data_dir(data, "test"), n, seed, &out.join("predictions")).map(|_| ())
        }
        Command::Evaluate {
            model,
            data,
            reference,
            samples,
        } => {
            let model = Surrogate::new(ModelParams::load(&model_path(model))?)?;
            let (n, seed) = prediction_settings(cli, config.as_ref(), *samples);
            let mode = config.as_ref().map(|c| c.coverage).unwrap_or_default();
            let (test, _) = experiment::load_dataset(&data_dir(data, "test"))?;
            let (refs, _) = experiment::load_dataset(&data_dir(reference, "reference"))?;
            let refs: Vec<Vec<f64>> = refs.pairs.into_iter().map(|p| p.u_f).collect();
            let report = experiment::evaluate(&model, &test.pairs, &refs, n, seed, mode)?;
            io::write_json(&out.join("metrics.json"), &report)?;
            io::write_atomic(&out.join("metrics.csv"), report.summary_csv()?.as_bytes())?;
            io::write_atomic(&out.join("metrics_per_sample.csv"), report.per_sample_csv()?.as_bytes())?;
            log::info!(
                "relative error {:.4}, coverage 1/2/3 sigma {:.3}/{:.3}/{:.3}",
                report.relative_error,
                report.coverage_1,
                report.coverage_2,
                report.coverage_3
            );
            Ok(())
        }
        Command::Sweep { n_train, coarse, data } => {
            let config = require(config)?;
            let base = config.sweep.clone().unwrap_or(SweepGrid {
                n_train: vec![config.n_train],
                coarse_dims: vec![config.coarse_mesh.nel_x],
            });
            let grid = SweepGrid {
                n_train: n_train.clone().unwrap_or(base.n_train),
                coarse_dims: coarse.clone().unwrap_or(base.coarse_dims),
            };
            let config = ExperimentConfig {
                sweep: Some(grid.clone()),
                ..config
            };
            config.validate()?;
            let root = data.clone().unwrap_or_else(|| out.join("data"));
            let rows = experiment::sweep(&config, &grid, &root.join("train"), &root.join("test"), &root.join("reference"))?;
            io::write_atomic(&out.join("sweep.csv"), experiment::sweep_csv(&rows)?.as_bytes())
        }
    }
}

fn prediction_settings(cli: &Cli, config: Option<&ExperimentConfig>, samples: Option<usize>) -> (usize, u64) {
    let n = samples.or(config.map(|c| c.n_pred_samples)).unwrap_or(1000);
    let seed = match (config, cli.seed) {
        (Some(c), _) => c.seeds.predict,
        (None, Some(s)) => rng::derive_seed(&[s, 4]),
        (None, None) => 4,
    };
    (n, seed)
}
