//! Synthetic path datasets.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::path::{DiscretePathMeasure, Path, PathBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// `x_{t+1} = a x_t + sigma xi_t`, started from the stationary law.
    Ar1,
    /// `x_t = A sin(omega t + phi) + noise` with random amplitude, phase and frequency.
    SineMixture,
    /// Two steps, `X1` uniform on a grid in `[0, 1]` and `X2 = X1`.
    DegenerateReveal,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Ar1 => "ar1",
            DatasetKind::SineMixture => "sine_mixture",
            DatasetKind::DegenerateReveal => "degenerate_reveal",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar1" => Ok(DatasetKind::Ar1),
            "sine_mixture" => Ok(DatasetKind::SineMixture),
            "degenerate_reveal" => Ok(DatasetKind::DegenerateReveal),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset kind `{other}` (expected ar1 | sine_mixture | degenerate_reveal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Number of paths.
    pub n: usize,
    pub steps: usize,
    pub dim: usize,
    pub seed: u64,
    pub ar_coef: f64,
    pub ar_sigma: f64,
    pub sine_frequencies: Vec<f64>,
    pub sine_noise: f64,
    /// Grid size of the first coordinate for [`DatasetKind::DegenerateReveal`].
    pub grid_size: usize,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n: usize, steps: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            steps,
            dim: 1,
            seed,
            ar_coef: 0.8,
            ar_sigma: 0.5,
            sine_frequencies: vec![0.25, 0.5, 1.0],
            sine_noise: 0.1,
            grid_size: 160,
        }
    }

    pub fn ar1(a: f64, sigma: f64, n: usize, steps: usize, seed: u64) -> Self {
        Self {
            ar_coef: a,
            ar_sigma: sigma,
            ..Self::new(DatasetKind::Ar1, n, steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("dataset needs n, steps and dim >= 1".into()));
        }
        match self.kind {
            DatasetKind::Ar1 => {
                if !(self.ar_coef.abs() < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ar1 coefficient must satisfy |a| < 1, got {}",
                        self.ar_coef
                    )));
                }
                if !(self.ar_sigma >= 0.0 && self.ar_sigma.is_finite()) {
                    return Err(Error::InvalidArgument(format!("ar1 noise must be >= 0, got {}", self.ar_sigma)));
                }
            }
            DatasetKind::SineMixture => {
                if self.sine_frequencies.is_empty() || self.sine_frequencies.iter().any(|f| !f.is_finite()) {
                    return Err(Error::InvalidArgument("sine_mixture needs finite frequencies".into()));
                }
                if !(self.sine_noise >= 0.0) {
                    return Err(Error::InvalidArgument("sine noise must be >= 0".into()));
                }
            }
            DatasetKind::DegenerateReveal => {
                if self.steps != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "degenerate_reveal has exactly 2 steps, got {}",
                        self.steps
                    )));
                }
                if self.grid_size < 2 {
                    return Err(Error::InvalidArgument("degenerate_reveal grid needs >= 2 points".into()));
                }
            }
        }
        Ok(())
    }

    /// Stationary variance `sigma^2 / (1 - a^2)` of the AR(1) law.
    pub fn ar1_stationary_variance(&self) -> f64 {
        self.ar_sigma * self.ar_sigma / (1.0 - self.ar_coef * self.ar_coef)
    }
}

fn grid_point(i: usize, grid: usize) -> f64 {
    i as f64 / (grid - 1) as f64
}

fn sample_path<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Vec<f64> {
    let (steps, d) = (spec.steps, spec.dim);
    let mut v = vec![0.0; steps * d];
    match spec.kind {
        DatasetKind::Ar1 => {
            let sd0 = spec.ar1_stationary_variance().sqrt();
            for k in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                v[k] = sd0 * z;
            }
            for t in 1..steps {
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    v[t * d + k] = spec.ar_coef * v[(t - 1) * d + k] + spec.ar_sigma * z;
                }
            }
        }
        DatasetKind::SineMixture => {
            let noise = Normal::new(0.0, spec.sine_noise).expect("validated");
            for k in 0..d {
                let omega = spec.sine_frequencies[rng.random_range(0..spec.sine_frequencies.len())];
                let amp = rng.random_range(0.5..1.5);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for t in 0..steps {
                    v[t * d + k] = amp * (omega * (t + 1) as f64 + phase).sin() + noise.sample(rng);
                }
            }
        }
        DatasetKind::DegenerateReveal => {
            for k in 0..d {
                let x = grid_point(rng.random_range(0..spec.grid_size), spec.grid_size);
                v[k] = x;
                v[d + k] = x;
            }
        }
    }
    v
}

/// Draws `spec.n` paths with a generator seeded from `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<PathBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_paths(spec, spec.n, &mut rng)
}

/// Draws `count` paths from the law described by `spec` using `rng`.
pub fn sample_paths<R: Rng + ?Sized>(spec: &DatasetSpec, count: usize, rng: &mut R) -> Result<PathBatch> {
    spec.validate()?;
    let paths = (0..count)
        .map(|_| Path::from_vec(spec.steps, spec.dim, sample_path(spec, rng)))
        .collect::<Result<Vec<_>>>()?;
    PathBatch::new(paths)
}

/// `E[x_{k+j} | x_{1:k}] = a^j x_k` for the AR(1) law.
pub fn ar1_conditional_mean(a: f64, last: f64, ahead: usize) -> f64 {
    a.powi(ahead as i32) * last
}

/// Two independent uniform empirical measures of `m` atoms each from the
/// degenerate-reveal law, redrawn until no first coordinate is shared
/// between them.
pub fn degenerate_reveal_pair<R: Rng + ?Sized>(
    m: usize,
    grid_size: usize,
    rng: &mut R,
) -> Result<(DiscretePathMeasure, DiscretePathMeasure)> {
    let mut spec = DatasetSpec::new(DatasetKind::DegenerateReveal, m, 2, 0);
    spec.grid_size = grid_size;
    spec.validate()?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one atom".into()));
    }
    let first = sample_paths(&spec, m, rng)?;
    let taken: std::collections::HashSet<u64> = first.iter().map(|p| p.as_slice()[0].to_bits()).collect();
    if taken.len() == grid_size {
        return Err(Error::InvalidArgument("grid too small for disjoint samples".into()));
    }
    let mut second = Vec::with_capacity(m);
    while second.len() < m {
        let v = sample_path(&spec, rng);
        if !taken.contains(&v[0].to_bits()) {
            second.push(Path::from_vec(2, 1, v)?);
        }
    }
    Ok((
        DiscretePathMeasure::uniform(first),
        DiscretePathMeasure::uniform(PathBatch::new(second)?),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_ar1_decays_geometrically() {
        let mut spec = DatasetSpec::ar1(0.8, 0.0, 5, 6, 3);
        spec.dim = 2;
        let batch = generate_dataset(&spec).unwrap();
        for p in batch.iter() {
            for t in 0..6 {
                for k in 0..2 {
                    let expected = 0.8f64.powi(t as i32) * p.values()[[0, k]];
                    assert!((p.values()[[t, k]] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ar1_moments_match_closed_form() {
        let spec = DatasetSpec::ar1(0.8, 0.5, 100_000, 3, 11);
        let batch = generate_dataset(&spec).unwrap();
        let v = spec.ar1_stationary_variance();
        let n = batch.len() as f64;
        let (mut s1, mut s2, mut c) = (0.0, 0.0, 0.0);
        for p in batch.iter() {
            let x = p.as_slice();
            s1 += x[1];
            s2 += x[1] * x[1];
            c += x[1] * x[2];
        }
        let mean = s1 / n;
        let var = s2 / n - mean * mean;
        let cov = c / n;
        assert!((var - v).abs() / v < 0.02, "{var} vs {v}");
        assert!((cov - 0.8 * v).abs() / (0.8 * v) < 0.02, "{cov} vs {}", 0.8 * v);
    }

    #[test]
    fn degenerate_reveal_repeats_first_step() {
        let spec = DatasetSpec::new(DatasetKind::DegenerateReveal, 50, 2, 1);
        let batch = generate_dataset(&spec).unwrap();
        for p in batch.iter() {
            let x = p.as_slice();
            assert_eq!(x[0].to_bits(), x[1].to_bits());
            assert!((0.0..=1.0).contains(&x[0]));
        }
        let bad = DatasetSpec::new(DatasetKind::DegenerateReveal, 5, 3, 1);
        assert!(generate_dataset(&bad).is_err());
    }

    #[test]
    fn disjoint_pairs_share_no_first_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (a, b) = degenerate_reveal_pair(16, 20, &mut rng).unwrap();
            for p in a.atoms().iter() {
                for q in b.atoms().iter() {
                    assert_ne!(p.as_slice()[0], q.as_slice()[0]);
                }
            }
        }
    }

    #[test]
    fn sine_mixture_is_bounded_and_seeded() {
        let spec = DatasetSpec::new(DatasetKind::SineMixture, 20, 12, 4);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert!(a.to_flat().iter().all(|v| v.abs() < 3.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_dataset(&DatasetSpec::ar1(1.0, 0.5, 3, 3, 0)).is_err());
        assert!("video".parse::<DatasetKind>().is_err());
        assert_eq!("ar1".parse::<DatasetKind>().unwrap(), DatasetKind::Ar1);
    }
}
