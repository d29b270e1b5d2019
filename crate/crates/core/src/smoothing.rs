//! Kernel smoothing of empirical path measures and bandwidth schedules.

use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::path::{DiscretePathMeasure, Path, PathBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Gaussian,
    UniformCompact,
}

impl Kernel {
    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Gaussian => "gaussian",
            Kernel::UniformCompact => "uniform_compact",
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Kernel::Gaussian),
            "uniform_compact" => Ok(Kernel::UniformCompact),
            other => Err(Error::InvalidArgument(format!("unknown kernel `{other}`"))),
        }
    }
}

/// How a measure is smoothed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothingMode {
    /// Each atom is replaced by `samples_per_atom` kernel-perturbed copies.
    #[default]
    Additive,
    /// Each path is filtered along time with a normalized truncated Gaussian.
    TemporalBlur,
    Off,
}

impl SmoothingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SmoothingMode::Additive => "additive",
            SmoothingMode::TemporalBlur => "temporal_blur",
            SmoothingMode::Off => "off",
        }
    }
}

impl FromStr for SmoothingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(SmoothingMode::Additive),
            "temporal_blur" => Ok(SmoothingMode::TemporalBlur),
            "off" => Ok(SmoothingMode::Off),
            other => Err(Error::InvalidArgument(format!("unknown smoothing mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSpec {
    pub mode: SmoothingMode,
    pub kernel: Kernel,
    pub bandwidth: f64,
    pub samples_per_atom: usize,
    /// Support clamp of the Gaussian kernel, in bandwidths.
    pub truncation: f64,
    /// Also blur across feature columns in [`SmoothingMode::TemporalBlur`].
    pub blur_features: bool,
    pub seed: u64,
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        Self {
            mode: SmoothingMode::Additive,
            kernel: Kernel::Gaussian,
            bandwidth: 1.5,
            samples_per_atom: 1,
            truncation: 8.0,
            blur_features: false,
            seed: 0,
        }
    }
}

impl SmoothingSpec {
    pub fn new(kernel: Kernel, bandwidth: f64, samples_per_atom: usize) -> Result<Self> {
        let spec = Self {
            kernel,
            bandwidth,
            samples_per_atom,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_mode(mut self, mode: SmoothingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if self.samples_per_atom == 0 {
            return Err(Error::InvalidArgument("samples_per_atom must be at least 1".into()));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation must be positive, got {}",
                self.truncation
            )));
        }
        Ok(())
    }
}

/// One kernel draw scaled by the bandwidth.
pub fn kernel_draw<R: Rng + ?Sized>(spec: &SmoothingSpec, rng: &mut R) -> f64 {
    let h = spec.bandwidth;
    match spec.kernel {
        Kernel::Gaussian => loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= spec.truncation {
                break h * z;
            }
        },
        Kernel::UniformCompact => rng.random_range(-h..=h),
    }
}

/// A `steps x dim` array of i.i.d. kernel draws.
pub fn kernel_sample<R: Rng + ?Sized>(
    spec: &SmoothingSpec,
    steps: usize,
    dim: usize,
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((steps, dim), || kernel_draw(spec, rng))
}

/// Normalized truncated Gaussian taps `exp(-k^2 / 2h^2)` for `|k| <= radius`.
fn gaussian_taps(bandwidth: f64, truncation: f64, len: usize) -> Vec<f64> {
    let radius = ((truncation * bandwidth).floor() as usize).min(len.saturating_sub(1));
    (0..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * bandwidth * bandwidth)).exp())
        .collect()
}

/// `len x len` filter matrix `F` such that `F v` blurs `v`; rows are
/// renormalized where the window overhangs the ends.
pub fn blur_matrix(len: usize, bandwidth: f64, truncation: f64) -> Array2<f64> {
    let taps = gaussian_taps(bandwidth, truncation, len);
    let radius = taps.len() - 1;
    let mut f = Array2::zeros((len, len));
    for i in 0..len {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(len - 1);
        let total: f64 = (lo..=hi).map(|j| taps[i.abs_diff(j)]).sum();
        for j in lo..=hi {
            f[[i, j]] = taps[i.abs_diff(j)] / total;
        }
    }
    f
}

/// Linear map on row-major flattened `steps x dim` paths: `flat_out = flat_in . B`.
pub fn temporal_blur_operator(steps: usize, dim: usize, spec: &SmoothingSpec) -> Array2<f64> {
    let ft = blur_matrix(steps, spec.bandwidth, spec.truncation);
    let fd = if spec.blur_features {
        blur_matrix(dim, spec.bandwidth, spec.truncation)
    } else {
        Array2::eye(dim)
    };
    let n = steps * dim;
    // out[t, k] = sum_{s, l} ft[t, s] fd[k, l] in[s, l]
    Array2::from_shape_fn((n, n), |(src, dst)| {
        let (s, l) = (src / dim, src % dim);
        let (t, k) = (dst / dim, dst % dim);
        ft[[t, s]] * fd[[k, l]]
    })
}

/// Applies the temporal (and optionally feature) blur to one path.
pub fn temporal_blur(path: &Path, spec: &SmoothingSpec) -> Path {
    let ft = blur_matrix(path.steps(), spec.bandwidth, spec.truncation);
    let mut out = ft.dot(&path.values());
    if spec.blur_features {
        let fd = blur_matrix(path.dim(), spec.bandwidth, spec.truncation);
        out = out.dot(&fd.t());
    }
    Path::new(out).expect("convex combination of finite values")
}

/// Smooths `raw` according to `spec.mode`. Total mass is preserved.
pub fn smooth_measure<R: Rng + ?Sized>(
    raw: &DiscretePathMeasure,
    spec: &SmoothingSpec,
    rng: &mut R,
) -> Result<DiscretePathMeasure> {
    spec.validate()?;
    match spec.mode {
        SmoothingMode::Off => Ok(raw.clone()),
        SmoothingMode::TemporalBlur => {
            let atoms = raw.atoms().iter().map(|p| temporal_blur(p, spec)).collect();
            DiscretePathMeasure::new(PathBatch::new(atoms)?, raw.weights().to_vec())
        }
        SmoothingMode::Additive => {
            let s = spec.samples_per_atom;
            let (steps, dim) = (raw.steps(), raw.dim());
            let mut atoms = Vec::with_capacity(raw.len() * s);
            let mut weights = Vec::with_capacity(raw.len() * s);
            for (x, &w) in raw.atoms().iter().zip(raw.weights()) {
                for _ in 0..s {
                    let noise = kernel_sample(spec, steps, dim, rng);
                    atoms.push(Path::new(&x.values() + &noise)?);
                    weights.push(w / s as f64);
                }
            }
            DiscretePathMeasure::new(PathBatch::new(atoms)?, weights)
        }
    }
}

/// [`smooth_measure`] driven by a generator seeded from `spec.seed`.
pub fn smooth_measure_seeded(raw: &DiscretePathMeasure, spec: &SmoothingSpec) -> Result<DiscretePathMeasure> {
    smooth_measure(raw, spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// `h(step) = max(h_floor, h_init * decay_rate^(step / decay_every))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthSchedule {
    pub h_init: f64,
    pub h_floor: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
}

impl Default for BandwidthSchedule {
    fn default() -> Self {
        Self {
            h_init: 1.5,
            h_floor: 0.1,
            decay_rate: 0.985,
            decay_every: 10_000,
        }
    }
}

impl BandwidthSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_floor > 0.0 && self.h_init >= self.h_floor) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth schedule needs h_init >= h_floor > 0, got {} and {}",
                self.h_init, self.h_floor
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay_rate must lie in (0, 1), got {}",
                self.decay_rate
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every must be positive".into()));
        }
        Ok(())
    }

    pub fn bandwidth_at(&self, step: u64) -> f64 {
        let exponent = step as f64 / self.decay_every as f64;
        (self.h_init * self.decay_rate.powf(exponent)).max(self.h_floor)
    }
}

/// Which sample-size conditions the family `h_m = c m^-beta` satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandwidthConditions {
    /// `h_m -> 0`
    pub vanishes: bool,
    /// `m h_m / |log h_m| -> inf`
    pub mass_over_log_diverges: bool,
    /// `|log h_m| / log log m -> inf`
    pub log_over_loglog_diverges: bool,
    /// `m h_m -> inf`
    pub mass_diverges: bool,
}

impl BandwidthConditions {
    pub fn all(&self) -> bool {
        self.vanishes && self.mass_over_log_diverges && self.log_over_loglog_diverges && self.mass_diverges
    }
}

/// Evaluates each limit for `h_m = c m^-beta`.
pub fn bandwidth_conditions(beta: f64, c: f64) -> Result<BandwidthConditions> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale c must be positive, got {c}")));
    }
    if !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be finite, got {beta}")));
    }
    Ok(BandwidthConditions {
        vanishes: beta > 0.0,
        // m^(1-beta) against |beta| log m, or against the constant |log c| when beta = 0
        mass_over_log_diverges: beta < 1.0,
        log_over_loglog_diverges: beta != 0.0,
        mass_diverges: beta < 1.0,
    })
}

/// True iff `h_m = c m^-beta` satisfies every sample-size condition, i.e. `0 < beta < 1`.
pub fn admissible_bandwidth_family(beta: f64, c: f64) -> Result<bool> {
    Ok(bandwidth_conditions(beta, c)?.all())
}
