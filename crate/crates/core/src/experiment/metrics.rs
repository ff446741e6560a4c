//! Prediction error and band coverage of a surrogate on a test set.

use serde::{Deserialize, Serialize};

use super::csv_error;
use crate::error::{Error, Result};
use crate::microstructure::normal_cdf;
use crate::rng;
use crate::surrogate::{PredictiveEnsemble, Surrogate};
use crate::training::TrainingPair;

/// Band half-widths, in predictive standard deviations.
pub const COVERAGE_K: [f64; 3] = [1.0, 2.0, 3.0];

/// How the `+-k sigma` band is formed at each node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// `mean +- k sd` from the ensemble moments.
    #[default]
    Gaussian,
    /// Ensemble quantiles at `Phi(-k)` and `Phi(k)`.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    /// Mean squared deviation of the predictive mean over nodes.
    pub d2: f64,
    pub coverage_1: f64,
    pub coverage_2: f64,
    pub coverage_3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_test: usize,
    pub n_reference: usize,
    pub n_pred_samples: usize,
    pub d2: f64,
    pub var_uf: f64,
    pub relative_error: f64,
    pub coverage_1: f64,
    pub coverage_2: f64,
    pub coverage_3: f64,
    pub coverage_mode: CoverageMode,
    pub per_sample: Vec<SampleMetrics>,
}

/// Node-averaged population variance of the reference outputs.
pub fn reference_variance(reference: &[Vec<f64>]) -> Result<f64> {
    let n = reference.len();
    if n < 2 {
        return Err(Error::Config("the output-variance reference set needs at least 2 samples".into()));
    }
    let n_f = reference[0].len();
    if reference.iter().any(|u| u.len() != n_f) {
        return Err(Error::Config("reference solutions differ in length".into()));
    }
    let mut total = 0.0;
    for j in 0..n_f {
        let mean = reference.iter().map(|u| u[j]).sum::<f64>() / n as f64;
        total += reference.iter().map(|u| (u[j] - mean) * (u[j] - mean)).sum::<f64>() / n as f64;
    }
    Ok(total / n_f as f64)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_metrics(index: usize, truth: &[f64], ens: &PredictiveEnsemble, mode: CoverageMode) -> Result<SampleMetrics> {
    let n_f = truth.len();
    if ens.mean.len() != n_f {
        return Err(Error::Config(format!("prediction has {} nodes, truth has {n_f}", ens.mean.len())));
    }
    let d2 = truth.iter().zip(&ens.mean).map(|(u, m)| (u - m) * (u - m)).sum::<f64>() / n_f as f64;
    let mut hits = [0usize; 3];
    match mode {
        CoverageMode::Gaussian => {
            for j in 0..n_f {
                let dev = (truth[j] - ens.mean[j]).abs();
                let sd = ens.variance[j].sqrt();
                for (h, k) in hits.iter_mut().zip(COVERAGE_K) {
                    *h += (dev <= k * sd) as usize;
                }
            }
        }
        CoverageMode::Empirical => {
            let draws = ens
                .samples
                .as_ref()
                .ok_or_else(|| Error::Config("empirical coverage needs retained samples".into()))?;
            let mut column = vec![0.0; draws.len()];
            for j in 0..n_f {
                column.iter_mut().zip(draws).for_each(|(c, d)| *c = d[j]);
                column.sort_by(f64::total_cmp);
                for (h, k) in hits.iter_mut().zip(COVERAGE_K) {
                    let (lo, hi) = (quantile(&column, normal_cdf(-k)), quantile(&column, normal_cdf(k)));
                    *h += (lo <= truth[j] && truth[j] <= hi) as usize;
                }
            }
        }
    }
    let frac = |h: usize| h as f64 / n_f as f64;
    Ok(SampleMetrics {
        index,
        d2,
        coverage_1: frac(hits[0]),
        coverage_2: frac(hits[1]),
        coverage_3: frac(hits[2]),
    })
}

/// Metrics from precomputed ensembles, one per test output.
pub fn evaluate_predictions(
    truth: &[Vec<f64>],
    ensembles: &[PredictiveEnsemble],
    var_uf: f64,
    n_reference: usize,
    mode: CoverageMode,
) -> Result<MetricsReport> {
    if truth.is_empty() || truth.len() != ensembles.len() {
        return Err(Error::Config("need one ensemble per test output and at least one test output".into()));
    }
    let per_sample = truth
        .iter()
        .zip(ensembles)
        .enumerate()
        .map(|(i, (u, e))| sample_metrics(i, u, e, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_sample, var_uf, n_reference, ensembles[0].n_samples, mode))
}

fn summarize(per_sample: Vec<SampleMetrics>, var_uf: f64, n_reference: usize, n_pred: usize, mode: CoverageMode) -> MetricsReport {
    let n = per_sample.len() as f64;
    let avg = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let d2 = avg(|s| s.d2);
    MetricsReport {
        n_test: per_sample.len(),
        n_reference,
        n_pred_samples: n_pred,
        d2,
        var_uf,
        relative_error: d2 / var_uf,
        coverage_1: avg(|s| s.coverage_1),
        coverage_2: avg(|s| s.coverage_2),
        coverage_3: avg(|s| s.coverage_3),
        coverage_mode: mode,
        per_sample,
    }
}

/// Predicts every test pair with `n_pred_samples` draws (stream `seed`, test index) and scores
/// the ensembles against the truth; `reference` supplies the output variance.
pub fn evaluate(
    model: &Surrogate,
    test: &[TrainingPair],
    reference: &[Vec<f64>],
    n_pred_samples: usize,
    seed: u64,
    mode: CoverageMode,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let var_uf = reference_variance(reference)?;
    let keep = mode == CoverageMode::Empirical;
    let per_sample = test
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let ens = model.predict(&pair.micro, n_pred_samples, rng::derive_seed(&[seed, i as u64]), keep)?;
            sample_metrics(i, &pair.u_f, &ens, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_sample, var_uf, reference.len(), n_pred_samples, mode))
}

impl MetricsReport {
    /// One row: `n_test,d2,var_uf,relative_error,coverage_1,coverage_2,coverage_3`.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n_test", "d2", "var_uf", "relative_error", "coverage_1", "coverage_2", "coverage_3"])
            .map_err(csv_error)?;
        w.write_record([
            self.n_test.to_string(),
            self.d2.to_string(),
            self.var_uf.to_string(),
            self.relative_error.to_string(),
            self.coverage_1.to_string(),
            self.coverage_2.to_string(),
            self.coverage_3.to_string(),
        ])
        .map_err(csv_error)?;
        finish(w)
    }

    /// `index,d2,coverage_1,coverage_2,coverage_3` per test sample.
    pub fn per_sample_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.per_sample {
            w.serialize(s).map_err(csv_error)?;
        }
        if self.per_sample.is_empty() {
            w.write_record(["index", "d2", "coverage_1", "coverage_2", "coverage_3"]).map_err(csv_error)?;
        }
        finish(w)
    }
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| csv_error(e.error()))?;
    String::from_utf8(bytes).map_err(csv_error)
}
