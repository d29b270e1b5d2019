//! Raw versus kernel-smoothed estimates of the adapted Wasserstein distance
//! between independent samples of the degenerate-reveal law.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::causal::{adapted_wasserstein, MAX_ATOMS_CAUSAL};
use crate::datasets::{sample_paths, DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::path::{cost_matrix, DiscretePathMeasure};
use crate::smoothing::{admissible_bandwidth_family, smooth_measure, Kernel, SmoothingMode, SmoothingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Raw,
    Smoothed,
}

impl EstimatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMode::Raw => "raw",
            EstimatorMode::Smoothed => "smoothed",
        }
    }
}

impl std::str::FromStr for EstimatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EstimatorMode::Raw),
            "smoothed" => Ok(EstimatorMode::Smoothed),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}` (expected raw | smoothed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub m_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub modes: Vec<EstimatorMode>,
    /// `h_m = c m^-beta`.
    pub bandwidth_c: f64,
    pub bandwidth_beta: f64,
    pub kernel: Kernel,
    pub samples_per_atom: usize,
    /// Defaults to `10 * max(m_grid)`.
    pub grid_size: Option<usize>,
    pub threads: usize,
    pub config_hash: String,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            m_grid: vec![4, 8, 16],
            seeds: (0..20).collect(),
            modes: vec![EstimatorMode::Raw, EstimatorMode::Smoothed],
            bandwidth_c: 1.0,
            bandwidth_beta: 0.5,
            kernel: Kernel::Gaussian,
            samples_per_atom: 1,
            grid_size: None,
            threads: 1,
            config_hash: String::new(),
        }
    }
}

impl ConvergenceConfig {
    pub fn bandwidth(&self, m: usize) -> f64 {
        self.bandwidth_c * (m as f64).powf(-self.bandwidth_beta)
    }

    pub fn grid(&self) -> usize {
        self.grid_size
            .unwrap_or_else(|| 10 * self.m_grid.iter().copied().max().unwrap_or(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_grid.is_empty() || self.seeds.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidArgument("experiment needs sizes, seeds and modes".into()));
        }
        let cap = MAX_ATOMS_CAUSAL / self.samples_per_atom.max(1);
        if let Some(&m) = self.m_grid.iter().find(|&&m| m == 0 || m > cap) {
            return Err(Error::InvalidArgument(format!(
                "sample size {m} outside 1..={cap} supported by the exact oracle"
            )));
        }
        if !admissible_bandwidth_family(self.bandwidth_beta, self.bandwidth_c)? {
            return Err(Error::InvalidArgument(format!(
                "bandwidth exponent {} is not admissible (need 0 < beta < 1)",
                self.bandwidth_beta
            )));
        }
        if self.threads == 0 {
            return Err(Error::InvalidArgument("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub seed: u64,
    pub mode: EstimatorMode,
    pub bandwidth: f64,
    pub aw: f64,
    pub status: &'static str,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub m: usize,
    pub mode: EstimatorMode,
    pub count: usize,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ConvergenceRow>,
    pub summaries: Vec<ConvergenceSummary>,
}

impl ExperimentReport {
    pub fn summary(&self, m: usize, mode: EstimatorMode) -> Option<&ConvergenceSummary> {
        self.summaries.iter().find(|s| s.m == m && s.mode == mode)
    }

    pub fn values(&self, m: usize, mode: EstimatorMode) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.m == m && r.mode == mode)
            .map(|r| r.aw)
            .collect()
    }
}

fn sample_seed(seed: u64, m: usize, side: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((m as u64) << 32) ^ side
}

/// The empirical measure of `m` degenerate-reveal paths drawn from `sample_seed`.
pub fn degenerate_sample(m: usize, grid_size: usize, sample_seed: u64) -> Result<DiscretePathMeasure> {
    let mut spec = DatasetSpec::new(DatasetKind::DegenerateReveal, m, 2, sample_seed);
    spec.grid_size = grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    Ok(DiscretePathMeasure::uniform(sample_paths(&spec, m, &mut rng)?))
}

fn shares_atom(a: &DiscretePathMeasure, b: &DiscretePathMeasure) -> bool {
    a.atoms()
        .iter()
        .any(|x| b.atoms().iter().any(|y| x.as_slice() == y.as_slice()))
}

/// Two samples for `(m, seed)`; the second is redrawn until it shares no atom
/// with the first.
fn sample_pair(m: usize, seed: u64, grid: usize) -> Result<(DiscretePathMeasure, DiscretePathMeasure)> {
    let first = degenerate_sample(m, grid, sample_seed(seed, m, 0))?;
    for side in 1..10_000 {
        let second = degenerate_sample(m, grid, sample_seed(seed, m, side))?;
        if !shares_atom(&first, &second) {
            return Ok((first, second));
        }
    }
    Err(Error::InvalidArgument(format!("grid of {grid} points too small for disjoint samples of {m}")))
}

/// Exact adapted Wasserstein distance between `mu` and `nu`, each smoothed with
/// its own generator seeded from `smooth_seeds` when `bandwidth` is given.
pub fn aw_estimate(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    smoothing: Option<&SmoothingSpec>,
    smooth_seeds: (u64, u64),
) -> Result<(f64, &'static str)> {
    let (mu, nu) = match smoothing {
        Some(spec) => (
            smooth_measure(mu, spec, &mut ChaCha8Rng::seed_from_u64(smooth_seeds.0))?,
            smooth_measure(nu, spec, &mut ChaCha8Rng::seed_from_u64(smooth_seeds.1))?,
        ),
        None => (mu.clone(), nu.clone()),
    };
    let cost = cost_matrix(mu.atoms(), nu.atoms())?;
    let res = adapted_wasserstein(&mu, &nu, &cost)?;
    Ok((res.value, res.solver_status.as_str()))
}

fn run_job(cfg: &ConvergenceConfig, m: usize, seed: u64) -> Result<Vec<ConvergenceRow>> {
    let (mu, nu) = sample_pair(m, seed, cfg.grid())?;
    let h = cfg.bandwidth(m);
    let spec = SmoothingSpec {
        mode: SmoothingMode::Additive,
        kernel: cfg.kernel,
        bandwidth: h,
        samples_per_atom: cfg.samples_per_atom,
        ..SmoothingSpec::default()
    };
    let smooth_seeds = (sample_seed(seed, m, 1 << 20), sample_seed(seed, m, 1 << 21));
    cfg.modes
        .iter()
        .map(|&mode| {
            let (aw, status) = match mode {
                EstimatorMode::Raw => aw_estimate(&mu, &nu, None, smooth_seeds)?,
                EstimatorMode::Smoothed => aw_estimate(&mu, &nu, Some(&spec), smooth_seeds)?,
            };
            Ok(ConvergenceRow {
                m,
                seed,
                mode,
                bandwidth: if mode == EstimatorMode::Raw { 0.0 } else { h },
                aw,
                status,
                config_hash: cfg.config_hash.clone(),
            })
        })
        .collect()
}

fn summarize(rows: &[ConvergenceRow]) -> Vec<ConvergenceSummary> {
    let mut keys: Vec<(usize, EstimatorMode)> = rows.iter().map(|r| (r.m, r.mode)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(m, mode)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.m == m && r.mode == mode)
                .map(|r| r.aw)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std_err = if v.len() > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            ConvergenceSummary {
                m,
                mode,
                count: v.len(),
                mean,
                std_err,
            }
        })
        .collect()
}

/// Runs every `(m, seed)` job, fanned out over `cfg.threads` workers, and
/// sorts the rows by `(m, seed, mode)`.
pub fn convergence_experiment(cfg: &ConvergenceConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = cfg
        .m_grid
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let workers = cfg.threads.min(jobs.len()).max(1);
    let results: Vec<Result<Vec<ConvergenceRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    jobs.iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|&(m, s)| run_job(cfg, m, s))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(jobs.len() * cfg.modes.len());
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| (a.m, a.seed, a.mode).cmp(&(b.m, b.seed, b.mode)));
    let summaries = summarize(&rows);
    Ok(ExperimentReport { rows, summaries })
}

/// Per-run rows: `m,seed,mode,bandwidth,aw,status,config_hash`.
pub fn write_rows_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "seed", "mode", "bandwidth", "aw", "status", "config_hash"])?;
    for r in &report.rows {
        w.write_record([
            r.m.to_string(),
            r.seed.to_string(),
            r.mode.as_str().to_string(),
            r.bandwidth.to_string(),
            r.aw.to_string(),
            r.status.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-configuration means: `m,mode,count,mean,std_err`.
pub fn write_summary_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "mode", "count", "mean", "std_err"])?;
    for s in &report.summaries {
        w.write_record([
            s.m.to_string(),
            s.mode.as_str().to_string(),
            s.count.to_string(),
            s.mean.to_string(),
            s.std_err.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
