//! Seeded Monte Carlo experiments and theory-vs-empirics comparison.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::asymptotics::AsymptoticReport;
use crate::engine::{run, RecordStride, RunConfig, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, DenseVector};

/// Below this Frobenius norm a covariance counts as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;
const MAX_BINS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Freedman–Diaconis binning. The last bin is closed on the right.
    pub fn freedman_diaconis(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                edges: vec![0.0, 1.0],
                counts: vec![0],
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let range = hi - lo;
        if range == 0.0 {
            return Self {
                edges: vec![lo - 0.5, lo + 0.5],
                counts: vec![samples.len() as u64],
            };
        }
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
        let bins = if width > 0.0 {
            ((range / width).ceil() as usize).clamp(1, MAX_BINS)
        } else {
            1
        };
        let step = range / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|k| lo + k as f64 * step).collect();
        edges.push(hi);
        let mut counts = vec![0u64; bins];
        for &x in samples {
            let k = (((x - lo) / step) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub n_runs: usize,
    pub n_iterations: u64,
    pub seed: u64,
    pub theta_star: Vec<f64>,
    /// `γ_n` at the final iteration.
    pub gamma_final: f64,
    /// Per-run `⟨θ_n⟩` at the final iteration.
    pub final_averages: Vec<Vec<f64>>,
    /// Per-run `(⟨θ_n⟩ − θ★) / √γ_n`.
    pub normalized_errors: Vec<Vec<f64>>,
    /// Per-run `s_n` at the final iteration.
    pub final_disagreement: Vec<f64>,
    pub empirical_mean: Vec<f64>,
    pub empirical_covariance: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theoretical_v: Option<Vec<Vec<f64>>>,
    /// One histogram per coordinate.
    pub histograms: Vec<Histogram>,
}

impl MonteCarloResult {
    /// Builds moments and histograms from per-run values.
    pub fn from_runs(
        seed: u64,
        n_iterations: u64,
        gamma_final: f64,
        theta_star: &DenseVector,
        final_averages: Vec<Vec<f64>>,
        final_disagreement: Vec<f64>,
    ) -> Self {
        let scale = 1.0 / gamma_final.sqrt();
        let normalized_errors: Vec<Vec<f64>> = final_averages
            .iter()
            .map(|avg| avg.iter().zip(theta_star.iter()).map(|(a, t)| (a - t) * scale).collect())
            .collect();
        let (mean, cov) = sample_moments(&normalized_errors, theta_star.len());
        let histograms = (0..theta_star.len())
            .map(|k| Histogram::freedman_diaconis(&column(&normalized_errors, k)))
            .collect();
        Self {
            n_runs: final_averages.len(),
            n_iterations,
            seed,
            theta_star: theta_star.as_slice().to_vec(),
            gamma_final,
            final_averages,
            normalized_errors,
            final_disagreement,
            empirical_mean: mean,
            empirical_covariance: cov.to_rows(),
            theoretical_v: None,
            histograms,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn covariance_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_rows(&self.empirical_covariance).expect("finite covariance")
    }
}

fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

/// Sample mean and unbiased covariance; a single sample has zero covariance.
pub fn sample_moments(samples: &[Vec<f64>], dim: usize) -> (Vec<f64>, DenseMatrix) {
    let n = samples.len();
    let mut mean = vec![0.0; dim];
    if n == 0 {
        return (mean, DenseMatrix::zeros(dim, dim));
    }
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DenseMatrix::zeros(dim, dim);
    if n > 1 {
        for s in samples {
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        cov = cov.scale(1.0 / (n - 1) as f64);
    }
    (mean, cov)
}

/// Standardised third and fourth central moments; `None` for constant data.
pub fn standardized_moments(samples: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (None, None);
    }
    let mean = samples.iter().sum::<f64>() / n;
    let central = |p: i32| samples.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let m2 = central(2);
    if !(m2 > 0.0) {
        return (None, None);
    }
    (Some(central(3) / m2.powf(1.5)), Some(central(4) / (m2 * m2)))
}

/// Runs `n_runs` trajectories on ChaCha streams `0..n_runs` of the master
/// seed and collects final-iteration statistics.
pub fn monte_carlo(config: &RunConfig, n_runs: usize, theta_star: &DenseVector, workers: usize) -> Result<MonteCarloResult> {
    config.validate()?;
    if n_runs == 0 {
        return Err(Error::InvalidParameter("n_runs must be at least 1".into()));
    }
    if config.n_iterations == 0 {
        return Err(Error::InvalidParameter("Monte Carlo needs at least one iteration".into()));
    }
    if theta_star.len() != config.dim() {
        return Err(Error::DimensionMismatch {
            context: "theta_star",
            expected: config.dim(),
            found: theta_star.len(),
        });
    }
    let gamma_final = config.schedule.gamma(config.n_iterations)?;
    let one = |index: usize| -> Result<(Vec<f64>, f64)> {
        let mut cfg = config.clone();
        cfg.stream = index as u64;
        cfg.stride = RecordStride::Every(config.n_iterations);
        let record = run(&cfg).map_err(|e| Error::Run {
            run: index,
            source: Box::new(e),
        })?;
        let last = record.last().expect("final sample is always recorded");
        Ok((last.average.clone(), last.disagreement))
    };
    let outcomes = execute(n_runs, workers, one)?;
    let mut averages = Vec::with_capacity(n_runs);
    let mut disagreements = Vec::with_capacity(n_runs);
    for outcome in outcomes {
        let (avg, s) = outcome?;
        averages.push(avg);
        disagreements.push(s);
    }
    Ok(MonteCarloResult::from_runs(
        config.seed,
        config.n_iterations,
        gamma_final,
        theta_star,
        averages,
        disagreements,
    ))
}

/// Results come back indexed by run, whatever the completion order.
#[cfg(feature = "parallel")]
fn execute<T: Send>(n: usize, workers: usize, job: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    if workers <= 1 {
        return Ok((0..n).map(job).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Numerical(format!("worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(job).collect()))
}

#[cfg(not(feature = "parallel"))]
fn execute<T: Send>(n: usize, _workers: usize, job: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    Ok((0..n).map(job).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub empirical_cov: Vec<Vec<f64>>,
    #[serde(rename = "theoretical_V")]
    pub theoretical_v: Vec<Vec<f64>>,
    /// `‖Ĉ − V‖_F / ‖V‖_F`, zero when both norms are below `DEGENERATE_NORM`.
    pub rel_error: f64,
    /// Per coordinate.
    pub skewness: Vec<Option<f64>>,
    pub kurtosis: Vec<Option<f64>>,
    /// `N(0, V_kk)` density at the bin centres of each coordinate histogram.
    pub density_at_centers: Vec<Vec<f64>>,
}

pub fn covariance_relative_error(empirical: &DenseMatrix, theory: &DenseMatrix) -> f64 {
    let num = empirical.sub(theory).frobenius();
    let den = theory.frobenius();
    if den < DEGENERATE_NORM && empirical.frobenius() < DEGENERATE_NORM {
        0.0
    } else {
        num / den
    }
}

pub fn gaussian_density(x: f64, variance: f64) -> f64 {
    if variance > 0.0 {
        (-0.5 * x * x / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
    } else {
        0.0
    }
}

pub fn compare_to_theory(mc: &MonteCarloResult, report: &AsymptoticReport) -> Result<Comparison> {
    compare_to_covariance(mc, &report.variance_matrix())
}

pub fn compare_to_covariance(mc: &MonteCarloResult, v: &DenseMatrix) -> Result<Comparison> {
    let d = mc.dim();
    if v.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            context: "theoretical covariance",
            expected: d,
            found: v.rows(),
        });
    }
    let emp = mc.covariance_matrix();
    let (skewness, kurtosis) = (0..d)
        .map(|k| standardized_moments(&column(&mc.normalized_errors, k)))
        .unzip();
    let density_at_centers = mc
        .histograms
        .iter()
        .enumerate()
        .map(|(k, h)| h.centers().into_iter().map(|c| gaussian_density(c, v[(k, k)])).collect())
        .collect();
    Ok(Comparison {
        empirical_cov: mc.empirical_covariance.clone(),
        theoretical_v: v.to_rows(),
        rel_error: covariance_relative_error(&emp, v),
        skewness,
        kurtosis,
        density_at_centers,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn numbered(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (1..=d).map(move |k| format!("{prefix}_{k}"))
}

/// `n, avg_1..d, agent1_1..d, disagreement_s, disagreement_scaled`
pub fn write_trajectory_csv(record: &TrajectoryRecord, path: &Path) -> Result<()> {
    let d = record.dim;
    let header = std::iter::once("n".to_string())
        .chain(numbered("avg", d))
        .chain(numbered("agent1", d))
        .chain(["disagreement_s".to_string(), "disagreement_scaled".to_string()])
        .collect();
    let rows = record.samples.iter().map(|s| {
        std::iter::once(s.n.to_string())
            .chain(s.average.iter().map(|x| fmt(*x)))
            .chain(s.agent1.iter().map(|x| fmt(*x)))
            .chain([fmt(s.disagreement), fmt(s.scaled_disagreement)])
            .collect()
    });
    write_rows(path, header, rows)
}

/// `run_index, final_normalized_error_1..d, final_disagreement`
pub fn write_montecarlo_csv(mc: &MonteCarloResult, path: &Path) -> Result<()> {
    let header = std::iter::once("run_index".to_string())
        .chain(numbered("final_normalized_error", mc.dim()))
        .chain(["final_disagreement".to_string()])
        .collect();
    let rows = mc
        .normalized_errors
        .iter()
        .zip(&mc.final_disagreement)
        .enumerate()
        .map(|(i, (e, s))| {
            std::iter::once(i.to_string())
                .chain(e.iter().map(|x| fmt(*x)))
                .chain([fmt(*s)])
                .collect()
        });
    write_rows(path, header, rows)
}

/// `bin_left, bin_right, count, theoretical_density_at_center`
pub fn write_histogram_csv(hist: &Histogram, density: &[f64], path: &Path) -> Result<()> {
    if density.len() != hist.counts.len() {
        return Err(Error::DimensionMismatch {
            context: "histogram density",
            expected: hist.counts.len(),
            found: density.len(),
        });
    }
    let header = ["bin_left", "bin_right", "count", "theoretical_density_at_center"]
        .map(String::from)
        .to_vec();
    let rows = hist
        .edges
        .windows(2)
        .zip(&hist.counts)
        .zip(density)
        .map(|((e, c), p)| vec![fmt(e[0]), fmt(e[1]), c.to_string(), fmt(*p)]);
    write_rows(path, header, rows)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
