//! Adversarial training of the conditional sequence generator against a
//! learned causal cost.
//!
//! Each step samples a real batch and runs two phases on it. The
//! discriminator phase ascends `divergence - lambda * penalty` in the summary
//! net parameters; the generator phase, with fresh noise and smoothing draws,
//! descends the divergence alone in the generator parameters.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{
    flat_matrix, standard_normal, time_slices, CausalSummaryNet, EncoderDecoderGenerator, GeneratorShape, ModelBundle,
    ParamVector,
};
use crate::path::{DiscretePathMeasure, Path, PathBatch};
use crate::sinkhorn::{DivergenceMode, SinkhornConfig};
use crate::smoothing::{kernel_sample, temporal_blur_operator, BandwidthSchedule, Kernel, SmoothingMode, SmoothingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}` (expected sgd | adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub learning_rate: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_every: u64,
    pub bandwidth: BandwidthSchedule,
    pub context_length: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub eta: f64,
    pub divergence_mode: DivergenceMode,
    pub smoothing_mode: SmoothingMode,
    pub kernel: Kernel,
    pub samples_per_atom: usize,
    pub truncation: f64,
    pub blur_features: bool,
    pub optimizer: OptimizerKind,
    /// When false the summary nets keep their initial parameters.
    pub train_discriminator: bool,
    pub hidden: usize,
    pub test_functions: usize,
    pub output_bound: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub noise_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epsilon: 0.8,
            lambda: 1.0,
            sinkhorn_iters: 100,
            learning_rate: 5e-4,
            lr_decay_rate: 0.985,
            lr_decay_every: 10_000,
            bandwidth: BandwidthSchedule::default(),
            context_length: 1,
            total_steps: 0,
            seed: 0,
            eta: 1e-6,
            divergence_mode: DivergenceMode::Debiased,
            smoothing_mode: SmoothingMode::Additive,
            kernel: Kernel::Gaussian,
            samples_per_atom: 1,
            truncation: 8.0,
            blur_features: false,
            optimizer: OptimizerKind::Sgd,
            train_discriminator: true,
            hidden: 32,
            test_functions: 4,
            output_bound: 1.0,
            encoder_layers: 1,
            decoder_layers: 2,
            noise_dim: 4,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against paths of `steps` steps.
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.context_length == 0 || self.context_length >= steps {
            return bad(format!(
                "context_length must lie in 1..={} for {steps}-step paths, got {}",
                steps.saturating_sub(1),
                self.context_length
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("learning_rate", self.learning_rate),
            ("eta", self.eta),
            ("output_bound", self.output_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) || self.lr_decay_every == 0 {
            return bad("learning-rate decay needs rate in (0, 1] and a positive period".into());
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be positive".into());
        }
        self.bandwidth.validate()?;
        self.smoothing_spec(self.bandwidth.h_init).validate()?;
        self.generator_shape(1).validate()?;
        if self.hidden == 0 || self.test_functions == 0 {
            return bad("hidden and test_functions must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_decay_rate.powf(step as f64 / self.lr_decay_every as f64)
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            iterations: self.sinkhorn_iters,
            ..SinkhornConfig::default()
        }
    }

    pub fn smoothing_spec(&self, bandwidth: f64) -> SmoothingSpec {
        SmoothingSpec {
            mode: self.smoothing_mode,
            kernel: self.kernel,
            bandwidth,
            samples_per_atom: self.samples_per_atom,
            truncation: self.truncation,
            blur_features: self.blur_features,
            seed: self.seed,
        }
    }

    pub fn generator_shape(&self, dim: usize) -> GeneratorShape {
        GeneratorShape {
            dim,
            hidden: self.hidden,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            noise_dim: self.noise_dim,
        }
    }

    /// Fresh networks for `dim`-dimensional paths.
    pub fn init_model<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<ModelBundle> {
        Ok(ModelBundle {
            generator: EncoderDecoderGenerator::new(self.generator_shape(dim), rng)?,
            h_net: CausalSummaryNet::new(dim, self.hidden, self.test_functions, self.output_bound, rng)?,
            m_net: CausalSummaryNet::new(dim, self.hidden, self.test_functions, self.output_bound, rng)?,
        })
    }
}

/// Plain SGD or Adam over one [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    count: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            kind,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Moves the parameters along `sign * grad` (`+1` ascends, `-1` descends).
    pub fn apply(&mut self, params: &mut ParamVector, lr: f64, sign: f64) {
        self.count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let grad = params.grad().to_vec();
                for (x, g) in params.data_mut().iter_mut().zip(grad) {
                    *x += sign * lr * g;
                }
            }
            OptimizerKind::Adam => {
                let grad = params.grad().to_vec();
                let c1 = 1.0 - ADAM_BETA1.powf(self.count as f64);
                let c2 = 1.0 - ADAM_BETA2.powf(self.count as f64);
                for (i, (x, g)) in params.data_mut().iter_mut().zip(grad).enumerate() {
                    self.first[i] = ADAM_BETA1 * self.first[i] + (1.0 - ADAM_BETA1) * g;
                    self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * g * g;
                    let step = (self.first[i] / c1) / ((self.second[i] / c2).sqrt() + ADAM_EPS);
                    *x += sign * lr * step;
                }
            }
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub divergence: f64,
    pub penalty: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub bandwidth: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelBundle,
    pub opt_theta: Optimizer,
    pub opt_h: Optimizer,
    pub opt_m: Optimizer,
    pub step: u64,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    pub fn new(model: ModelBundle, kind: OptimizerKind) -> Self {
        Self {
            opt_theta: Optimizer::new(kind, model.generator.params().len()),
            opt_h: Optimizer::new(kind, model.h_net.params().len()),
            opt_m: Optimizer::new(kind, model.m_net.params().len()),
            model,
            step: 0,
            history: Vec::new(),
        }
    }
}

/// Per-side quantities of a measure entering the learned cost.
struct Side {
    flat: Var,
    weights: Vec<f64>,
    /// `M` outputs per step (`n x J` each).
    m_out: Vec<Var>,
    /// `[M_{t+1} - M_t]_t` concatenated, `n x J(T-1)`.
    m_inc: Option<Var>,
    /// `[h_t]_{t < T}` concatenated, `n x J(T-1)`.
    h_cat: Option<Var>,
}

struct Nets<'a> {
    h_net: &'a CausalSummaryNet,
    m_net: &'a CausalSummaryNet,
    hv: Vec<Var>,
    mv: Vec<Var>,
}

fn step_columns(tape: &Tape, flat: Var, steps: usize, dim: usize, upto: usize) -> Vec<Var> {
    let _ = steps;
    (0..upto).map(|t| tape.slice_cols(flat, t * dim, (t + 1) * dim)).collect()
}

fn side(tape: &Tape, nets: &Nets, flat: Var, weights: Vec<f64>, steps: usize, dim: usize) -> Side {
    let inputs = step_columns(tape, flat, steps, dim, steps);
    let m_out = nets.m_net.forward(tape, &nets.mv, &inputs);
    let (m_inc, h_cat) = if steps > 1 {
        let incs: Vec<Var> = (0..steps - 1).map(|t| tape.sub(m_out[t + 1], m_out[t])).collect();
        let h_out = nets.h_net.forward(tape, &nets.hv, &inputs[..steps - 1]);
        (Some(tape.concat_cols(&incs)), Some(tape.concat_cols(&h_out)))
    } else {
        (None, None)
    };
    Side {
        flat,
        weights,
        m_out,
        m_inc,
        h_cat,
    }
}

/// `c(x, y) + sum_j sum_t h^j_t(y) (M^j_{t+1} - M^j_t)(x)` for all pairs.
fn learned_cost(tape: &Tape, x: &Side, y: &Side) -> Var {
    let base = tape.pairwise_sq_dist(x.flat, y.flat);
    match (x.m_inc, y.h_cat) {
        (Some(inc), Some(h)) => tape.add(base, tape.matmul_t(inc, h)),
        _ => base,
    }
}

fn penalty(tape: &Tape, m_out: &[Var], weights: &[f64], eta: f64) -> Var {
    let n = weights.len() as f64;
    let steps = m_out.len() as f64;
    let w = tape.leaf(Array2::from_shape_vec((1, weights.len()), weights.to_vec()).expect("row"));
    let mut mean = tape.matmul(w, m_out[0]);
    for &m in &m_out[1..] {
        mean = tape.add(mean, tape.matmul(w, m));
    }
    let mean = tape.scale(mean, 1.0 / steps);
    let neg_mean = tape.scale(mean, -1.0);
    let mut var = None;
    for &m in m_out {
        let c = tape.add_row(m, neg_mean);
        let term = tape.matmul(w, tape.mul(c, c));
        var = Some(match var {
            Some(v) => tape.add(v, term),
            None => term,
        });
    }
    let var = tape.scale(var.expect("at least one step"), 1.0 / steps);
    let inv = tape.recip(tape.shift(tape.sqrt(var), eta));
    let mut total = tape.scalar(0.0);
    for t in 0..m_out.len() - 1 {
        let inc = tape.scale(tape.matmul(w, tape.sub(m_out[t + 1], m_out[t])), n);
        total = tape.add(total, tape.sum_all(tape.abs(tape.mul(inc, inv))));
    }
    tape.scale(total, 1.0 / (n * steps))
}

/// Divergence under the learned cost and the martingale penalty of `real`.
fn objective_terms(tape: &Tape, real: &Side, fake: &Side, cfg: &TrainConfig) -> Result<(Var, Var)> {
    let sk = cfg.sinkhorn();
    let cross = tape.sinkhorn_cost(learned_cost(tape, real, fake), &real.weights, &fake.weights, &sk)?;
    let self_real = tape.sinkhorn_cost(learned_cost(tape, real, real), &real.weights, &real.weights, &sk)?;
    let self_fake = tape.sinkhorn_cost(learned_cost(tape, fake, fake), &fake.weights, &fake.weights, &sk)?;
    let div = tape.sub(
        tape.sub(tape.scale(cross, cfg.divergence_mode.cross_weight()), self_real),
        self_fake,
    );
    let pen = penalty(tape, &real.m_out, &real.weights, cfg.eta);
    Ok((div, pen))
}

/// `W_{c^K, eps}(mu_f, nu_cf) - lambda * p_M(mu_f)` for already smoothed measures.
pub fn kccot_objective(
    mu_f: &DiscretePathMeasure,
    nu_cf: &DiscretePathMeasure,
    h_net: &CausalSummaryNet,
    m_net: &CausalSummaryNet,
    cfg: &TrainConfig,
) -> Result<f64> {
    mu_f.atoms().check_compatible(nu_cf.atoms())?;
    let (steps, dim) = (mu_f.steps(), mu_f.dim());
    let tape = Tape::new();
    let nets = Nets {
        h_net,
        m_net,
        hv: h_net.params().bind(&tape),
        mv: m_net.params().bind(&tape),
    };
    let real_flat = tape.leaf(flat_matrix(mu_f.atoms()));
    let fake_flat = tape.leaf(flat_matrix(nu_cf.atoms()));
    let real = side(&tape, &nets, real_flat, mu_f.weights().to_vec(), steps, dim);
    let fake = side(&tape, &nets, fake_flat, nu_cf.weights().to_vec(), steps, dim);
    let (div, pen) = objective_terms(&tape, &real, &fake, cfg)?;
    tape.check()?;
    Ok(tape.scalar_value(div) - cfg.lambda * tape.scalar_value(pen))
}

/// Smooths the rows of `flat` on the tape; returns the smoothed rows and their weights.
fn smooth_rows<R: Rng + ?Sized>(
    tape: &Tape,
    flat: Var,
    steps: usize,
    dim: usize,
    spec: &SmoothingSpec,
    rng: &mut R,
) -> (Var, Vec<f64>) {
    let n = tape.shape(flat).0;
    match spec.mode {
        SmoothingMode::Off => (flat, vec![1.0 / n as f64; n]),
        SmoothingMode::TemporalBlur => {
            let op = tape.leaf(temporal_blur_operator(steps, dim, spec));
            (tape.matmul(flat, op), vec![1.0 / n as f64; n])
        }
        SmoothingMode::Additive => {
            let s = spec.samples_per_atom;
            let rows = if s == 1 {
                flat
            } else {
                let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, s)).collect();
                tape.select_rows(flat, &idx)
            };
            let mut noise = Array2::zeros((n * s, steps * dim));
            for r in 0..n * s {
                let draw = kernel_sample(spec, steps, dim, rng);
                noise.row_mut(r).assign(&ndarray::Array1::from_iter(draw.iter().copied()));
            }
            (tape.add(rows, tape.leaf(noise)), vec![1.0 / (n * s) as f64; n * s])
        }
    }
}

/// Real and generated (context + teacher-forced prediction) batches on a tape.
struct Batches {
    real: Var,
    fake: Var,
}

fn build_batches<R: Rng + ?Sized>(
    tape: &Tape,
    generator: &EncoderDecoderGenerator,
    gv: &[Var],
    batch: &PathBatch,
    k: usize,
    rng: &mut R,
) -> Result<Batches> {
    let (m, steps) = (batch.len(), batch.steps());
    let xs: Vec<Var> = time_slices(batch).into_iter().map(|x| tape.leaf(x)).collect();
    let feats = generator.encode(tape, gv, &xs[..steps - 1]);
    let unused = tape.leaf(Array2::zeros((m, generator.shape().noise_dim)));
    let zs: Vec<Var> = (0..steps - 1)
        .map(|t| {
            if t + 1 < k {
                unused
            } else {
                tape.leaf(standard_normal(m, generator.shape().noise_dim, rng))
            }
        })
        .collect();
    let preds = generator.decode_teacher_forced(tape, gv, &feats, &xs, &zs, k, steps)?;
    let mut parts: Vec<Var> = xs[..k].to_vec();
    parts.extend(preds);
    Ok(Batches {
        real: tape.concat_cols(&xs),
        fake: tape.concat_cols(&parts),
    })
}

/// The generated measure before smoothing: real contexts followed by
/// teacher-forced predictions.
pub fn teacher_forced_batch<R: Rng + ?Sized>(
    generator: &EncoderDecoderGenerator,
    batch: &PathBatch,
    k: usize,
    rng: &mut R,
) -> Result<PathBatch> {
    let tape = Tape::new();
    let gv = generator.params().bind(&tape);
    let b = build_batches(&tape, generator, &gv, batch, k, rng)?;
    tape.check()?;
    PathBatch::from_flat(batch.len(), batch.steps(), batch.dim(), tape.value(b.fake).as_slice().expect("standard"))
}

/// Values and parameter gradients of `divergence - lambda * penalty`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub divergence: f64,
    pub penalty: f64,
    pub objective: f64,
    pub grad_theta: Vec<f64>,
    pub grad_h: Vec<f64>,
    pub grad_m: Vec<f64>,
}

fn flat_grads(params: &ParamVector, grads: &crate::autodiff::Gradients, vars: &[Var]) -> Vec<f64> {
    let mut p = ParamVector::new();
    for (i, s) in params.slices().iter().enumerate() {
        p.push(s.name.clone(), params.view(i).to_owned());
    }
    p.accumulate(grads, vars);
    p.grad().to_vec()
}

/// Runs the generator on `batch`, smooths both sides at `bandwidth` and
/// differentiates `divergence - lambda * penalty` in all parameters. All
/// randomness (noise, smoothing) is drawn from `rng`.
pub fn evaluate_objective<R: Rng + ?Sized>(
    model: &ModelBundle,
    batch: &PathBatch,
    cfg: &TrainConfig,
    bandwidth: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<ObjectiveEval> {
    let (steps, dim) = (batch.steps(), batch.dim());
    cfg.validate(steps)?;
    let tape = Tape::new();
    let gv = model.generator.params().bind(&tape);
    let nets = Nets {
        h_net: &model.h_net,
        m_net: &model.m_net,
        hv: model.h_net.params().bind(&tape),
        mv: model.m_net.params().bind(&tape),
    };
    let b = build_batches(&tape, &model.generator, &gv, batch, cfg.context_length, rng)?;
    let spec = cfg.smoothing_spec(bandwidth);
    let (real_s, wr) = smooth_rows(&tape, b.real, steps, dim, &spec, rng);
    let (fake_s, wf) = smooth_rows(&tape, b.fake, steps, dim, &spec, rng);
    let real = side(&tape, &nets, real_s, wr, steps, dim);
    let fake = side(&tape, &nets, fake_s, wf, steps, dim);
    let (div, pen) = objective_terms(&tape, &real, &fake, cfg)?;
    let out = if lambda == 0.0 {
        div
    } else {
        tape.sub(div, tape.scale(pen, lambda))
    };
    tape.check()?;
    let grads = tape.backward(out);
    tape.check()?;
    Ok(ObjectiveEval {
        divergence: tape.scalar_value(div),
        penalty: tape.scalar_value(pen),
        objective: tape.scalar_value(out),
        grad_theta: flat_grads(model.generator.params(), &grads, &gv),
        grad_h: flat_grads(model.h_net.params(), &grads, &nets.hv),
        grad_m: flat_grads(model.m_net.params(), &grads, &nets.mv),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

fn abort(step: u64, term: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { primitive } => Error::TrainingAborted {
            step: step as usize,
            term: format!("{term} (at `{primitive}`)"),
        },
        other => other,
    }
}

fn ensure_finite(step: u64, term: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingAborted {
            step: step as usize,
            term: term.to_string(),
        })
    }
}

/// One discriminator ascent and one generator descent on `batch`.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &PathBatch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    let step = state.step;
    if batch.len() != cfg.batch_size {
        return Err(Error::dims(format!("batch of {}", cfg.batch_size), batch.len()));
    }
    let bandwidth = cfg.bandwidth.bandwidth_at(step);
    let lr = cfg.lr_at(step);

    let disc = evaluate_objective(&state.model, batch, cfg, bandwidth, cfg.lambda, rng)
        .map_err(abort(step, "discriminator objective"))?;
    ensure_finite(step, "discriminator objective", &[disc.objective])?;
    ensure_finite(step, "discriminator gradient", &disc.grad_h)?;
    ensure_finite(step, "discriminator gradient", &disc.grad_m)?;
    if cfg.train_discriminator {
        let model = &mut state.model;
        model.h_net.params_mut().grad_mut().copy_from_slice(&disc.grad_h);
        model.m_net.params_mut().grad_mut().copy_from_slice(&disc.grad_m);
        state.opt_h.apply(model.h_net.params_mut(), lr, 1.0);
        state.opt_m.apply(model.m_net.params_mut(), lr, 1.0);
        ensure_finite(step, "discriminator parameters", model.h_net.params().data())?;
        ensure_finite(step, "discriminator parameters", model.m_net.params().data())?;
    }

    let gen = evaluate_objective(&state.model, batch, cfg, bandwidth, 0.0, rng)
        .map_err(abort(step, "generator loss"))?;
    ensure_finite(step, "generator loss", &[gen.divergence])?;
    ensure_finite(step, "generator gradient", &gen.grad_theta)?;
    let params = state.model.generator.params_mut();
    params.grad_mut().copy_from_slice(&gen.grad_theta);
    state.opt_theta.apply(params, lr, -1.0);
    ensure_finite(step, "generator parameters", state.model.generator.params().data())?;

    let metrics = StepMetrics {
        step,
        divergence: disc.divergence,
        penalty: disc.penalty,
        grad_norm_theta: norm(&gen.grad_theta),
        grad_norm_phi: (norm(&disc.grad_h).powi(2) + norm(&disc.grad_m).powi(2)).sqrt(),
        bandwidth,
        lr,
    };
    state.step += 1;
    state.history.push(metrics);
    Ok(metrics)
}

/// Draws a batch of `m` distinct paths.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &PathBatch, m: usize, rng: &mut R) -> Result<PathBatch> {
    if dataset.len() < m {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} paths, batch needs {m}",
            dataset.len()
        )));
    }
    let idx = rand::seq::index::sample(rng, dataset.len(), m).into_vec();
    dataset.select(&idx)
}

/// Initial state for `cfg` on `dim`-dimensional data, and the generator
/// driving the rest of the run.
pub fn init_training(cfg: &TrainConfig, dim: usize) -> Result<(TrainState, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = cfg.init_model(dim, &mut rng)?;
    Ok((TrainState::new(model, cfg.optimizer), rng))
}

/// Runs `cfg.total_steps` steps, calling `on_step` after each.
pub fn train_with<F>(dataset: &PathBatch, cfg: &TrainConfig, mut on_step: F) -> Result<TrainState>
where
    F: FnMut(&TrainState, &StepMetrics) -> Result<()>,
{
    cfg.validate(dataset.steps())?;
    let (mut state, mut rng) = init_training(cfg, dataset.dim())?;
    for _ in 0..cfg.total_steps {
        let batch = sample_batch(dataset, cfg.batch_size, &mut rng)?;
        let metrics = train_step(&mut state, &batch, cfg, &mut rng)?;
        on_step(&state, &metrics)?;
    }
    Ok(state)
}

pub fn train(dataset: &PathBatch, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, cfg, |_, _| Ok(()))
}

/// Provenance lines written at the top of every metrics log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunHeader {
    pub config_hash: String,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

pub const METRICS_COLUMNS: [&str; 7] = [
    "step",
    "divergence",
    "penalty",
    "grad_norm_theta",
    "grad_norm_phi",
    "bandwidth",
    "lr",
];

/// Writes `# key=value` provenance lines and the CSV header.
pub fn write_metrics_header<W: Write>(out: &mut W, header: &RunHeader) -> Result<()> {
    writeln!(out, "# config_hash={}", header.config_hash)?;
    writeln!(out, "# seed={}", header.seed)?;
    writeln!(out, "# optimizer={}", header.optimizer.as_str())?;
    writeln!(out, "{}", METRICS_COLUMNS.join(","))?;
    Ok(())
}

pub fn write_metrics_row<W: Write>(out: &mut W, m: &StepMetrics) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{}",
        m.step, m.divergence, m.penalty, m.grad_norm_theta, m.grad_norm_phi, m.bandwidth, m.lr
    )?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(mut out: W, header: &RunHeader, rows: &[StepMetrics]) -> Result<()> {
    write_metrics_header(&mut out, header)?;
    for r in rows {
        write_metrics_row(&mut out, r)?;
    }
    out.flush()?;
    Ok(())
}

/// One line of the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub step: u64,
    pub file: String,
    pub config_hash: String,
    pub seed: u64,
    pub timestamp: u64,
}

/// Saves a checkpoint as `dir/ckpt_<step>.cotp` and appends to `dir/manifest.jsonl`.
pub fn write_checkpoint_with_manifest(
    dir: &std::path::Path,
    model: &ModelBundle,
    step: u64,
    config_hash: &str,
    seed: u64,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let file = format!("ckpt_{step:08}.cotp");
    let path = dir.join(&file);
    model.save(&path)?;
    let entry = ManifestEntry {
        step,
        file,
        config_hash: config_hash.to_string(),
        seed,
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let mut manifest = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("manifest.jsonl"))?;
    writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
    Ok(path)
}

/// Paths from a flat row-major matrix.
pub fn paths_from_matrix(values: &Array2<f64>, steps: usize, dim: usize) -> Result<PathBatch> {
    let paths = values
        .rows()
        .into_iter()
        .map(|r| Path::from_vec(steps, dim, r.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    PathBatch::new(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::{martingale_penalty, CausalCost};
    use crate::datasets::{generate_dataset, DatasetSpec};
    use crate::nets::Discriminator;
    use crate::sinkhorn::sinkhorn_divergence;
    use crate::smoothing::smooth_measure;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 6,
            test_functions: 2,
            noise_dim: 2,
            context_length: 2,
            sinkhorn_iters: 20,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn batch(n: usize, steps: usize, seed: u64) -> PathBatch {
        generate_dataset(&DatasetSpec::ar1(0.8, 0.5, n, steps, seed)).unwrap()
    }

    fn measure(b: &PathBatch) -> DiscretePathMeasure {
        DiscretePathMeasure::uniform(b.clone())
    }

    #[test]
    fn zero_discriminator_on_identical_measures_gives_zero() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = cfg.init_model(1, &mut rng).unwrap();
        for net in [&mut model.h_net, &mut model.m_net] {
            let z = Array2::zeros((cfg.hidden, cfg.test_functions));
            net.params_mut().set("readout", z.view()).unwrap();
        }
        let mu = measure(&batch(5, 4, 2));
        let v = kccot_objective(&mu, &mu, &model.h_net, &model.m_net, &cfg).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn objective_matches_composed_pipeline() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let model = cfg.init_model(1, &mut rng).unwrap();
            let mu = measure(&batch(5, 4, rng.random()));
            let nu = measure(&batch(6, 4, rng.random()));
            let got = kccot_objective(&mu, &nu, &model.h_net, &model.m_net, &cfg).unwrap();
            let disc = Discriminator {
                h: &model.h_net,
                m: &model.m_net,
            };
            let cost = CausalCost { functions: &disc };
            let div = sinkhorn_divergence(&mu, &nu, &cost, &cfg.sinkhorn(), cfg.divergence_mode).unwrap();
            let pen = martingale_penalty(&mu, &disc, cfg.eta).unwrap();
            assert!((got - (div - cfg.lambda * pen)).abs() < 1e-12, "{got} vs {}", div - cfg.lambda * pen);

            let no_pen = TrainConfig { lambda: 0.0, ..cfg.clone() };
            let plain = kccot_objective(&mu, &nu, &model.h_net, &model.m_net, &no_pen).unwrap();
            assert!((plain - div).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_batch_keeps_real_context() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = cfg.init_model(1, &mut rng).unwrap();
        let b = batch(4, 5, 9);
        let fake = teacher_forced_batch(&model.generator, &b, 3, &mut rng).unwrap();
        for (x, y) in b.iter().zip(fake.iter()) {
            assert_eq!(x.as_slice()[..3], y.as_slice()[..3]);
            assert_ne!(x.as_slice()[3..], y.as_slice()[3..]);
        }
    }

    #[test]
    fn additive_tape_smoothing_matches_measure_smoothing() {
        let b = batch(3, 4, 5);
        let spec = SmoothingSpec {
            samples_per_atom: 2,
            bandwidth: 0.3,
            ..SmoothingSpec::default()
        };
        let tape = Tape::new();
        let flat = tape.leaf(flat_matrix(&b));
        let (rows, w) = smooth_rows(&tape, flat, 4, 1, &spec, &mut ChaCha8Rng::seed_from_u64(8));
        let direct = smooth_measure(&measure(&b), &spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(tape.value(rows).as_slice().unwrap(), direct.atoms().to_flat().as_slice());
        for (a, b) in w.iter().zip(direct.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn penalty_does_not_reach_generator_gradient() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = cfg.init_model(1, &mut rng).unwrap();
        let b = batch(4, 5, 7);
        let with = evaluate_objective(&model, &b, &cfg, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let without = evaluate_objective(&model, &b, &cfg, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(with.penalty > 0.0);
        assert_eq!(with.grad_theta, without.grad_theta);
        assert_ne!(with.grad_m, without.grad_m);
    }

    #[test]
    fn frozen_zero_discriminator_reduces_to_divergence_descent() {
        let cfg = TrainConfig {
            smoothing_mode: SmoothingMode::Off,
            lambda: 0.0,
            train_discriminator: false,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = cfg.init_model(1, &mut rng).unwrap();
        for net in [&mut model.h_net, &mut model.m_net] {
            let z = Array2::zeros((cfg.hidden, cfg.test_functions));
            net.params_mut().set("readout", z.view()).unwrap();
        }
        let b = batch(4, 5, 11);
        let mut state = TrainState::new(model.clone(), OptimizerKind::Sgd);

        // same draws as train_step: discriminator phase, then generator phase
        let mut probe = ChaCha8Rng::seed_from_u64(12);
        let _ = teacher_forced_batch(&model.generator, &b, cfg.context_length, &mut probe).unwrap();
        let tape = Tape::new();
        let gv = model.generator.params().bind(&tape);
        let bt = build_batches(&tape, &model.generator, &gv, &b, cfg.context_length, &mut probe).unwrap();
        let w = vec![0.25; 4];
        let sk = cfg.sinkhorn();
        let cross = tape.sinkhorn_cost(tape.pairwise_sq_dist(bt.real, bt.fake), &w, &w, &sk).unwrap();
        let rr = tape.sinkhorn_cost(tape.pairwise_sq_dist(bt.real, bt.real), &w, &w, &sk).unwrap();
        let ff = tape.sinkhorn_cost(tape.pairwise_sq_dist(bt.fake, bt.fake), &w, &w, &sk).unwrap();
        let div = tape.sub(tape.sub(tape.scale(cross, 2.0), rr), ff);
        let grads = tape.backward(div);
        let expected_grad = flat_grads(model.generator.params(), &grads, &gv);

        train_step(&mut state, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let lr = cfg.lr_at(0);
        for ((after, before), g) in state
            .model
            .generator
            .params()
            .data()
            .iter()
            .zip(model.generator.params().data())
            .zip(&expected_grad)
        {
            assert!((after - (before - lr * g)).abs() < 1e-15);
        }
        assert_eq!(state.model.h_net, model.h_net);
    }

    #[test]
    fn one_step_is_reproducible_and_steps_are_logged() {
        let cfg = TrainConfig {
            total_steps: 3,
            ..small_cfg()
        };
        let data = batch(20, 5, 13);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a, b);
        let zero = TrainConfig { total_steps: 0, ..cfg.clone() };
        let z = train(&data, &zero).unwrap();
        let (init, _) = init_training(&zero, 1).unwrap();
        assert_eq!(z, init);
    }

    #[test]
    fn adam_and_temporal_blur_train() {
        let cfg = TrainConfig {
            total_steps: 3,
            optimizer: OptimizerKind::Adam,
            smoothing_mode: SmoothingMode::TemporalBlur,
            divergence_mode: DivergenceMode::SingleCross,
            ..small_cfg()
        };
        let s = train(&batch(20, 5, 14), &cfg).unwrap();
        assert!(s.history.iter().all(|m| m.divergence.is_finite()));
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = cfg.init_model(1, &mut rng).unwrap();
        let b = batch(4, 4, 22);
        let eval = |m: &ModelBundle| evaluate_objective(m, &b, &cfg, 0.4, 0.7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let base = eval(&model);
        let h = 1e-6;
        let mut checked = 0;
        for which in 0..3 {
            let len = match which {
                0 => model.generator.params().len(),
                1 => model.h_net.params().len(),
                _ => model.m_net.params().len(),
            };
            for idx in (0..len).step_by(len / 7 + 1) {
                let bumped = |delta: f64| {
                    let mut m = model.clone();
                    let p = match which {
                        0 => m.generator.params_mut(),
                        1 => m.h_net.params_mut(),
                        _ => m.m_net.params_mut(),
                    };
                    p.data_mut()[idx] += delta;
                    eval(&m).objective
                };
                let fd = (bumped(h) - bumped(-h)) / (2.0 * h);
                let an = match which {
                    0 => base.grad_theta[idx],
                    1 => base.grad_h[idx],
                    _ => base.grad_m[idx],
                };
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() <= 1e-4 * scale, "part {which} idx {idx}: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked > 15);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert!((cfg.lr_at(10_000) - 5e-4 * 0.985).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let cfg = small_cfg();
        assert!(cfg.validate(5).is_ok());
        assert!(TrainConfig { context_length: 5, ..cfg.clone() }.validate(5).is_err());
        assert!(TrainConfig { context_length: 0, ..cfg.clone() }.validate(5).is_err());
        assert!(TrainConfig { epsilon: 0.0, ..cfg.clone() }.validate(5).is_err());
        assert!(TrainConfig { decoder_layers: 1, ..cfg }.validate(5).is_err());
    }

    #[test]
    fn non_finite_data_aborts_with_step() {
        let cfg = small_cfg();
        let (mut state, mut rng) = init_training(&cfg, 1).unwrap();
        let huge = PathBatch::new(
            (0..4)
                .map(|i| Path::scalar(&[1e200 * i as f64, 0.0, 1.0, 2.0, 3.0]).unwrap())
                .collect(),
        )
        .unwrap();
        let err = train_step(&mut state, &huge, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::TrainingAborted { step: 0, .. }), "{err}");
    }

    #[test]
    fn metrics_csv_layout() {
        let header = RunHeader {
            config_hash: "abc".into(),
            seed: 7,
            optimizer: OptimizerKind::Sgd,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &header, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# config_hash=abc\n# seed=7\n# optimizer=sgd\nstep,divergence,penalty,grad_norm_theta,grad_norm_phi,bandwidth,lr\n"
        );
    }
}
