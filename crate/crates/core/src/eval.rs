//! Evaluation of conditional sequence predictors on held-out paths.

use ndarray::{Array2, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::datasets::{ar1_conditional_mean, DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::nets::EncoderDecoderGenerator;
use crate::path::{DiscretePathMeasure, Path, PathBatch};
use crate::sinkhorn::{sinkhorn_divergence, DivergenceMode, SinkhornConfig, SquaredEuclidean};

pub const EVAL_SCHEMA: &str = "cotkit.eval.v1";

/// Anything that can continue a `k x d` context to a full `steps`-step path.
pub trait ConditionalSampler {
    fn dim(&self) -> usize;

    /// `[context][sample]` continuations of shape `(steps - k) x d`.
    fn sample_continuations(
        &self,
        contexts: &[ArrayView2<f64>],
        samples: usize,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Array2<f64>>>>;
}

impl ConditionalSampler for EncoderDecoderGenerator {
    fn dim(&self) -> usize {
        self.shape().dim
    }

    fn sample_continuations(
        &self,
        contexts: &[ArrayView2<f64>],
        samples: usize,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Array2<f64>>>> {
        EncoderDecoderGenerator::sample_continuations(self, contexts, samples, steps, rng)
    }
}

/// Exact sampler of the AR(1) law `x_{t+1} = a x_t + sigma xi_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Sampler {
    pub a: f64,
    pub sigma: f64,
    pub dim: usize,
}

impl ConditionalSampler for Ar1Sampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_continuations(
        &self,
        contexts: &[ArrayView2<f64>],
        samples: usize,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Array2<f64>>>> {
        let mut out = Vec::with_capacity(contexts.len());
        for ctx in contexts {
            let k = ctx.nrows();
            if k == 0 || k >= steps || ctx.ncols() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "context of shape {k}x{} does not fit {steps} steps of dim {}",
                    ctx.ncols(),
                    self.dim
                )));
            }
            let mut per = Vec::with_capacity(samples);
            for _ in 0..samples {
                let mut fut = Array2::zeros((steps - k, self.dim));
                for j in 0..self.dim {
                    let mut x = ctx[[k - 1, j]];
                    for t in 0..steps - k {
                        let xi: f64 = StandardNormal.sample(rng);
                        x = self.a * x + self.sigma * xi;
                        fut[[t, j]] = x;
                    }
                }
                per.push(fut);
            }
            out.push(per);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub context_length: usize,
    pub samples_per_context: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_length: 1,
            samples_per_context: 256,
            epsilon: 0.8,
            sinkhorn_iters: 100,
            seed: 0,
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMoments {
    /// 1-based time index.
    pub step: usize,
    pub pred_mean: f64,
    pub pred_var: f64,
    pub true_mean: f64,
    pub true_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub context_length: usize,
    pub contexts: usize,
    pub samples_per_context: usize,
    /// Present only when the data law has a closed-form conditional mean.
    pub cond_mean_rmse: Option<f64>,
    pub marginals: Vec<StepMoments>,
    pub sinkhorn_divergence: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Closed-form conditional mean of step `k + ahead` given the context, when
/// the law has one.
fn analytic_mean(spec: &DatasetSpec, last: f64, ahead: usize) -> Option<f64> {
    match spec.kind {
        DatasetKind::Ar1 => Some(ar1_conditional_mean(spec.ar_coef, last, ahead)),
        _ => None,
    }
}

/// Evaluates `sampler` on the held-out paths. Every path contributes its
/// first `k` steps as a context; `samples_per_context` continuations are drawn
/// for each. The divergence compares the real futures (steps `k+1..T`) with
/// the first sampled continuation of each context.
pub fn evaluate_predictor<S: ConditionalSampler + ?Sized>(
    sampler: &S,
    held_out: &PathBatch,
    spec: &DatasetSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (steps, dim, k) = (held_out.steps(), held_out.dim(), cfg.context_length);
    if sampler.dim() != dim {
        return Err(Error::dims(format!("predictor of dim {dim}"), sampler.dim()));
    }
    if k == 0 || k >= steps {
        return Err(Error::InvalidArgument(format!(
            "context_length must lie in 1..{steps}, got {k}"
        )));
    }
    if cfg.samples_per_context == 0 || held_out.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs contexts and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let contexts: Vec<ArrayView2<f64>> = held_out.iter().map(|p| p.prefix(k)).collect();
    let draws = sampler.sample_continuations(&contexts, cfg.samples_per_context, steps, &mut rng)?;

    let mut sq_err = 0.0;
    let mut analytic = true;
    for (path, samples) in held_out.iter().zip(&draws) {
        for t in 0..steps - k {
            for j in 0..dim {
                let mean = samples.iter().map(|s| s[[t, j]]).sum::<f64>() / samples.len() as f64;
                match analytic_mean(spec, path.values()[[k - 1, j]], t + 1) {
                    Some(truth) => sq_err += (mean - truth) * (mean - truth),
                    None => analytic = false,
                }
            }
        }
    }
    let cells = (held_out.len() * (steps - k) * dim) as f64;
    let cond_mean_rmse = analytic.then(|| (sq_err / cells).sqrt());

    let mut marginals = Vec::with_capacity((steps - k) * dim);
    for t in 0..steps - k {
        for j in 0..dim {
            let preds: Vec<f64> = draws.iter().flat_map(|s| s.iter().map(move |x| x[[t, j]])).collect();
            let truth: Vec<f64> = held_out.iter().map(|p| p.values()[[k + t, j]]).collect();
            let (pred_mean, pred_var) = mean_var(&preds);
            let (true_mean, true_var) = mean_var(&truth);
            marginals.push(StepMoments {
                step: k + t + 1,
                pred_mean,
                pred_var,
                true_mean,
                true_var,
            });
        }
    }

    let real = held_out
        .iter()
        .map(|p| Path::new(p.values().slice(ndarray::s![k.., ..]).to_owned()))
        .collect::<Result<Vec<Path>>>()?;
    let predicted = draws
        .iter()
        .map(|s| Path::new(s[0].clone()))
        .collect::<Result<Vec<Path>>>()?;
    let real = DiscretePathMeasure::uniform(PathBatch::new(real)?);
    let fake = DiscretePathMeasure::uniform(PathBatch::new(predicted)?);
    let sk = SinkhornConfig::new(cfg.epsilon, cfg.sinkhorn_iters)?;
    let divergence = sinkhorn_divergence(&real, &fake, &SquaredEuclidean, &sk, DivergenceMode::Debiased)?;

    Ok(EvalReport {
        schema: EVAL_SCHEMA,
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        context_length: k,
        contexts: held_out.len(),
        samples_per_context: cfg.samples_per_context,
        cond_mean_rmse,
        marginals,
        sinkhorn_divergence: divergence,
    })
}
