//! Causal recurrent networks on the autodiff tape: the summary nets used as
//! discriminator test functions, and the encoder-decoder sequence generator.
//!
//! Batches enter the networks time step by time step, one `m x d` matrix per
//! step, and every cell reads only the current input and its own previous
//! state.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::causal::CausalTestFunctions;
use crate::error::{Error, Result};
use crate::path::{Path, PathBatch};

/// Named matrix slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage with named matrix slices and a matching gradient buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    grad: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice; returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        let (rows, cols) = value.dim();
        self.slices.push(ParamSlice {
            name: name.into(),
            offset: self.data.len(),
            rows,
            cols,
        });
        self.data.extend(value.iter());
        self.grad.resize(self.data.len(), 0.0);
        self.slices.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn view(&self, index: usize) -> ArrayView2<'_, f64> {
        let s = &self.slices[index];
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.offset..s.offset + s.len()])
            .expect("slice shape")
    }

    pub fn get(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.index_of(name).map(|i| self.view(i))
    }

    /// Overwrites a slice in place.
    pub fn set(&mut self, name: &str, value: ArrayView2<f64>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter slice `{name}`")))?;
        let s = self.slices[i].clone();
        if value.dim() != (s.rows, s.cols) {
            return Err(Error::dims(format!("{}x{}", s.rows, s.cols), format!("{:?}", value.dim())));
        }
        for (dst, src) in self.data[s.offset..s.offset + s.len()].iter_mut().zip(value.iter()) {
            *dst = *src;
        }
        Ok(())
    }

    /// Records every slice as a leaf on `tape`, in slice order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        (0..self.slices.len()).map(|i| tape.leaf(self.view(i).to_owned())).collect()
    }

    /// Adds the adjoints of `vars` (as returned by [`Self::bind`]) into the gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) {
        for (s, v) in self.slices.iter().zip(vars) {
            let g = grads.wrt(*v);
            for (dst, src) in self.grad[s.offset..s.offset + s.len()].iter_mut().zip(g.iter()) {
                *dst += *src;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for s in &self.slices {
            let window = &self.data[s.offset..s.offset + s.len()];
            if window.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("parameter slice `{}` is not finite", s.name)));
            }
        }
        Ok(())
    }

    fn named(&self, prefix: &str) -> impl Iterator<Item = (String, Array2<f64>)> + '_ {
        let prefix = prefix.to_string();
        (0..self.slices.len()).map(move |i| (format!("{prefix}{}", self.slices[i].name), self.view(i).to_owned()))
    }
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

/// `tanh(input . w_in + state . w_rec + b)`; a missing state counts as zero.
fn cell(tape: &Tape, input: Var, state: Option<Var>, w_in: Var, w_rec: Var, b: Var) -> Var {
    let mut pre = tape.matmul(input, w_in);
    if let Some(s) = state {
        pre = tape.add(pre, tape.matmul(s, w_rec));
    }
    tape.tanh(tape.add_row(pre, b))
}

/// Splits a batch into per-step `m x d` matrices.
pub fn time_slices(batch: &PathBatch) -> Vec<Array2<f64>> {
    let (m, d) = (batch.len(), batch.dim());
    (0..batch.steps())
        .map(|t| Array2::from_shape_fn((m, d), |(i, k)| batch.get(i).values()[[t, k]]))
        .collect()
}

/// `m x (T d)` matrix whose rows are the row-major flattened paths.
pub fn flat_matrix(batch: &PathBatch) -> Array2<f64> {
    Array2::from_shape_vec((batch.len(), batch.steps() * batch.dim()), batch.to_flat()).expect("flat size")
}

/// Recurrent tanh cell with a bounded affine readout `B tanh((s . R + c) / B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSummaryNet {
    input_dim: usize,
    hidden: usize,
    outputs: usize,
    bound: f64,
    params: ParamVector,
}

impl CausalSummaryNet {
    pub const W_IN: usize = 0;
    pub const W_REC: usize = 1;
    pub const B: usize = 2;
    pub const READOUT: usize = 3;
    pub const READOUT_BIAS: usize = 4;

    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, outputs: usize, bound: f64, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || outputs == 0 {
            return Err(Error::InvalidArgument("network sizes must be positive".into()));
        }
        if !(bound > 0.0) {
            return Err(Error::InvalidArgument(format!("output bound must be positive, got {bound}")));
        }
        let mut params = ParamVector::new();
        params.push("w_in", xavier(input_dim, hidden, rng));
        params.push("w_rec", xavier(hidden, hidden, rng));
        params.push("b", Array2::zeros((1, hidden)));
        params.push("readout", xavier(hidden, outputs, rng) * 0.1);
        params.push("readout_b", Array2::zeros((1, outputs)));
        Ok(Self {
            input_dim,
            hidden,
            outputs,
            bound,
            params,
        })
    }

    /// Rebuilds a net from its slices; sizes are read from the shapes.
    pub fn from_params(params: ParamVector, bound: f64) -> Result<Self> {
        let names = ["w_in", "w_rec", "b", "readout", "readout_b"];
        for (i, n) in names.iter().enumerate() {
            if params.slices().get(i).map(|s| s.name.as_str()) != Some(n) {
                return Err(Error::Format(format!("summary net slice {i} should be `{n}`")));
            }
        }
        let (input_dim, hidden) = params.view(Self::W_IN).dim();
        let outputs = params.view(Self::READOUT).ncols();
        let expect = [(input_dim, hidden), (hidden, hidden), (1, hidden), (hidden, outputs), (1, outputs)];
        for (i, shape) in expect.iter().enumerate() {
            if params.view(i).dim() != *shape {
                return Err(Error::Format(format!("summary net slice `{}` has shape {:?}", names[i], params.view(i).dim())));
            }
        }
        Ok(Self {
            input_dim,
            hidden,
            outputs,
            bound,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Per-step outputs (`m x J` each) for per-step inputs (`m x d` each),
    /// using the leaves `vars` from [`ParamVector::bind`].
    pub fn forward(&self, tape: &Tape, vars: &[Var], inputs: &[Var]) -> Vec<Var> {
        let mut state = None;
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let s = cell(tape, x, state, vars[Self::W_IN], vars[Self::W_REC], vars[Self::B]);
            state = Some(s);
            let z = tape.add_row(tape.matmul(s, vars[Self::READOUT]), vars[Self::READOUT_BIAS]);
            out.push(tape.scale(tape.tanh(tape.scale(z, 1.0 / self.bound)), self.bound));
        }
        out
    }

    /// `T x J` outputs for a single path.
    pub fn evaluate(&self, path: ArrayView2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let inputs: Vec<Var> = path.rows().into_iter().map(|r| tape.leaf(r.to_owned().insert_axis(ndarray::Axis(0)))).collect();
        let outs = self.forward(&tape, &vars, &inputs);
        let mut table = Array2::zeros((inputs.len(), self.outputs));
        for (t, o) in outs.iter().enumerate() {
            table.row_mut(t).assign(&tape.value(*o).row(0));
        }
        table
    }
}

/// The pair `(h, M)` of summary nets viewed as causal test functions.
pub struct Discriminator<'a> {
    pub h: &'a CausalSummaryNet,
    pub m: &'a CausalSummaryNet,
}

impl CausalTestFunctions for Discriminator<'_> {
    fn count(&self) -> usize {
        self.h.outputs()
    }

    fn h(&self, j: usize, prefix: ArrayView2<f64>) -> f64 {
        self.h.evaluate(prefix)[[prefix.nrows() - 1, j]]
    }

    fn m(&self, j: usize, prefix: ArrayView2<f64>) -> f64 {
        self.m.evaluate(prefix)[[prefix.nrows() - 1, j]]
    }
}

/// `h^j_t(y_{1:t})` as a `J x (T-1)` table and `M^j_t(x_{1:t})` as `J x T`.
pub fn discriminator_forward(
    h_net: &CausalSummaryNet,
    m_net: &CausalSummaryNet,
    x: &Path,
    y: &Path,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if h_net.outputs() != m_net.outputs() {
        return Err(Error::dims(
            format!("{} test functions", h_net.outputs()),
            format!("{}", m_net.outputs()),
        ));
    }
    if (x.steps(), x.dim()) != (y.steps(), y.dim()) || x.dim() != h_net.input_dim() || x.dim() != m_net.input_dim() {
        return Err(Error::dims(
            format!("paths of width {}", h_net.input_dim()),
            format!("{}x{} and {}x{}", x.steps(), x.dim(), y.steps(), y.dim()),
        ));
    }
    let steps = x.steps();
    let h = h_net.evaluate(y.prefix(steps.saturating_sub(1)));
    let m = m_net.evaluate(x.values());
    Ok((h.t().to_owned(), m.t().to_owned()))
}

/// Layer sizes of an [`EncoderDecoderGenerator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorShape {
    pub dim: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub noise_dim: usize,
}

impl GeneratorShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.noise_dim == 0 || self.encoder_layers == 0 {
            return Err(Error::InvalidArgument("generator sizes must be positive".into()));
        }
        if self.decoder_layers < self.encoder_layers + 1 {
            return Err(Error::InvalidArgument(format!(
                "decoder needs at least {} layers, got {}",
                self.encoder_layers + 1,
                self.decoder_layers
            )));
        }
        Ok(())
    }

    /// Input width of decoder layer `r` (0-based).
    fn decoder_input(&self, r: usize) -> usize {
        match r {
            0 => self.hidden + self.dim + self.noise_dim,
            r if r < self.encoder_layers => 2 * self.hidden,
            _ => self.hidden,
        }
    }
}

/// Hierarchical recurrent encoder and a decoder that predicts the next
/// observation from features, the current observation and noise.
///
/// Encoder layer `i` reads layer `i-1` (the data for `i = 0`). Decoder layer 0
/// reads the top encoder features with the observation and noise; layer `r`
/// for `1 <= r < n` also reads encoder layer `n-1-r`, so the decoder consumes
/// the feature hierarchy from the top down. The prediction is an affine map of
/// the current observation concatenated with the last decoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderGenerator {
    shape: GeneratorShape,
    params: ParamVector,
}

/// Decoder recurrent states carried across steps.
type DecoderState = Vec<Option<Var>>;

impl EncoderDecoderGenerator {
    pub fn new<R: Rng + ?Sized>(shape: GeneratorShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let h = shape.hidden;
        let mut params = ParamVector::new();
        for i in 0..shape.encoder_layers {
            let input = if i == 0 { shape.dim } else { h };
            params.push(format!("enc.{i}.w_in"), xavier(input, h, rng));
            params.push(format!("enc.{i}.w_rec"), xavier(h, h, rng));
            params.push(format!("enc.{i}.b"), Array2::zeros((1, h)));
        }
        for r in 0..shape.decoder_layers {
            params.push(format!("dec.{r}.w_in"), xavier(shape.decoder_input(r), h, rng));
            params.push(format!("dec.{r}.w_rec"), xavier(h, h, rng));
            params.push(format!("dec.{r}.b"), Array2::zeros((1, h)));
        }
        params.push("out.w", xavier(shape.dim + h, shape.dim, rng) * 0.1);
        params.push("out.b", Array2::zeros((1, shape.dim)));
        Ok(Self { shape, params })
    }

    /// Rebuilds a generator from slices named as by [`Self::new`], inferring sizes.
    pub fn from_params(params: ParamVector) -> Result<Self> {
        let missing = |n: &str| Error::Format(format!("generator slice `{n}` missing"));
        let w0 = params.get("enc.0.w_in").ok_or_else(|| missing("enc.0.w_in"))?;
        let (dim, hidden) = w0.dim();
        let encoder_layers = (0..).take_while(|i| params.index_of(&format!("enc.{i}.w_in")).is_some()).count();
        let decoder_layers = (0..).take_while(|r| params.index_of(&format!("dec.{r}.w_in")).is_some()).count();
        let d0 = params.get("dec.0.w_in").ok_or_else(|| missing("dec.0.w_in"))?;
        let noise_dim = d0
            .nrows()
            .checked_sub(hidden + dim)
            .ok_or_else(|| Error::Format("decoder input narrower than features plus data".into()))?;
        let shape = GeneratorShape {
            dim,
            hidden,
            encoder_layers,
            decoder_layers,
            noise_dim,
        };
        shape.validate().map_err(|e| Error::Format(e.to_string()))?;
        let reference = Self::new(shape, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if reference.params.slices().len() != params.slices().len() {
            return Err(Error::Format("unexpected generator slice count".into()));
        }
        for (a, b) in reference.params.slices().iter().zip(params.slices()) {
            if (a.name.as_str(), a.rows, a.cols) != (b.name.as_str(), b.rows, b.cols) {
                return Err(Error::Format(format!("generator slice `{}` does not match `{}`", b.name, a.name)));
            }
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> GeneratorShape {
        self.shape
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn enc(&self, i: usize) -> usize {
        3 * i
    }

    fn dec(&self, r: usize) -> usize {
        3 * (self.shape.encoder_layers + r)
    }

    fn out(&self) -> usize {
        3 * (self.shape.encoder_layers + self.shape.decoder_layers)
    }

    /// Advances every encoder layer by one step.
    fn encode_step(&self, tape: &Tape, vars: &[Var], x: Var, state: &mut [Option<Var>]) {
        let mut input = x;
        for i in 0..self.shape.encoder_layers {
            let p = self.enc(i);
            let s = cell(tape, input, state[i], vars[p], vars[p + 1], vars[p + 2]);
            state[i] = Some(s);
            input = s;
        }
    }

    /// Hierarchical features `[layer][t]`, each `m x H`.
    pub fn encode(&self, tape: &Tape, vars: &[Var], xs: &[Var]) -> Vec<Vec<Var>> {
        let mut state = vec![None; self.shape.encoder_layers];
        let mut feats = vec![Vec::with_capacity(xs.len()); self.shape.encoder_layers];
        for &x in xs {
            self.encode_step(tape, vars, x, &mut state);
            for (layer, s) in feats.iter_mut().zip(&state) {
                layer.push(s.expect("encoded"));
            }
        }
        feats
    }

    /// One decoder step: prediction of the next observation.
    fn decode_step(&self, tape: &Tape, vars: &[Var], feats: &[Var], x: Var, z: Var, state: &mut DecoderState) -> Var {
        let n = self.shape.encoder_layers;
        let mut below = None;
        for r in 0..self.shape.decoder_layers {
            let input = match (r, below) {
                (0, _) => tape.concat_cols(&[feats[n - 1], x, z]),
                (r, Some(b)) if r < n => tape.concat_cols(&[b, feats[n - 1 - r]]),
                (_, Some(b)) => b,
                _ => unreachable!(),
            };
            let p = self.dec(r);
            let s = cell(tape, input, state[r], vars[p], vars[p + 1], vars[p + 2]);
            state[r] = Some(s);
            below = Some(s);
        }
        let o = self.out();
        let joined = tape.concat_cols(&[x, below.expect("at least one decoder layer")]);
        tape.add_row(tape.matmul(joined, vars[o]), vars[o + 1])
    }

    /// Teacher-forced predictions of steps `k+1..=T` (1-based) from the real
    /// observations `xs` (all `T` steps, or at least `T-1`) and per-step noise
    /// `zs` with `zs[t]` used at 0-based step `t` for `t = k-1..T-2`.
    pub fn decode_teacher_forced(
        &self,
        tape: &Tape,
        vars: &[Var],
        feats: &[Vec<Var>],
        xs: &[Var],
        zs: &[Var],
        k: usize,
        steps: usize,
    ) -> Result<Vec<Var>> {
        if k == 0 || k >= steps || xs.len() < steps - 1 || feats[0].len() < steps - 1 || zs.len() < steps - 1 {
            return Err(Error::InvalidArgument(format!(
                "teacher forcing needs 1 <= k < T and inputs up to T-1 (k = {k}, T = {steps})"
            )));
        }
        let mut state = vec![None; self.shape.decoder_layers];
        let mut preds = Vec::with_capacity(steps - k);
        for t in (k - 1)..(steps - 1) {
            let f: Vec<Var> = feats.iter().map(|layer| layer[t]).collect();
            preds.push(self.decode_step(tape, vars, &f, xs[t], zs[t], &mut state));
        }
        Ok(preds)
    }

    /// Autoregressive predictions of steps `k+1..=T` given the context `xs`
    /// (exactly `k` steps). The encoder is rolled forward on the predictions.
    pub fn decode_autoregressive(
        &self,
        tape: &Tape,
        vars: &[Var],
        context: &[Var],
        zs: &[Var],
        steps: usize,
    ) -> Result<Vec<Var>> {
        let k = context.len();
        if k == 0 || k >= steps || zs.len() < steps - 1 {
            return Err(Error::InvalidArgument(format!(
                "autoregressive decoding needs 1 <= k < T and noise up to T-1 (k = {k}, T = {steps})"
            )));
        }
        let mut enc = vec![None; self.shape.encoder_layers];
        for &x in context {
            self.encode_step(tape, vars, x, &mut enc);
        }
        let mut dec = vec![None; self.shape.decoder_layers];
        let mut current = context[k - 1];
        let mut preds = Vec::with_capacity(steps - k);
        for t in (k - 1)..(steps - 1) {
            if t > k - 1 {
                self.encode_step(tape, vars, current, &mut enc);
            }
            let f: Vec<Var> = enc.iter().map(|s| s.expect("encoded")).collect();
            let next = self.decode_step(tape, vars, &f, current, zs[t], &mut dec);
            preds.push(next);
            current = next;
        }
        Ok(preds)
    }

    /// Samples continuations: for each context (a `k x d` array) draws
    /// `samples` predictions of the remaining `steps - k` steps with standard
    /// normal noise. Returns `[context][sample]` arrays of shape `(T-k) x d`.
    pub fn sample_continuations<R: Rng + ?Sized>(
        &self,
        contexts: &[ArrayView2<f64>],
        samples: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Array2<f64>>>> {
        let d = self.shape.dim;
        let mut out = Vec::with_capacity(contexts.len());
        for ctx in contexts {
            let k = ctx.nrows();
            if ctx.ncols() != d {
                return Err(Error::dims(format!("context width {d}"), ctx.ncols()));
            }
            let tape = Tape::new();
            let vars = self.params.bind(&tape);
            let xs: Vec<Var> = (0..k)
                .map(|t| tape.leaf(Array2::from_shape_fn((samples, d), |(_, j)| ctx[[t, j]])))
                .collect();
            let zs: Vec<Var> = (0..steps.saturating_sub(1))
                .map(|_| tape.leaf(standard_normal(samples, self.shape.noise_dim, rng)))
                .collect();
            let preds = self.decode_autoregressive(&tape, &vars, &xs, &zs, steps)?;
            tape.check()?;
            let values: Vec<Array2<f64>> = preds.iter().map(|p| tape.value(*p)).collect();
            out.push(
                (0..samples)
                    .map(|s| Array2::from_shape_fn((steps - k, d), |(t, j)| values[t][[s, j]]))
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// `rows x cols` standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"COTP1";

/// Writes named matrices in the `COTP1` layout: magic, slice count, then per
/// slice the name length, UTF-8 name, rows, cols and row-major data, all
/// integers `u64` and floats `f64`, little-endian.
pub fn write_checkpoint<W: Write>(mut out: W, slices: &[(String, Array2<f64>)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(slices.len() as u64).to_le_bytes())?;
    for (name, value) in slices {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(value.nrows() as u64).to_le_bytes())?;
        out.write_all(&(value.ncols() as u64).to_le_bytes())?;
        for v in value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a `COTP1` stream.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Array2<f64>)>> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a COTP1 checkpoint".into()));
    }
    let count = read_u64(&mut input)?;
    let mut slices = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut input)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("slice name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("slice name is not UTF-8".into()))?;
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        let size = rows
            .checked_mul(cols)
            .filter(|s| *s <= 1 << 28)
            .ok_or_else(|| Error::Format(format!("slice `{name}` is {rows}x{cols}")))?;
        let mut data = Vec::with_capacity(size);
        let mut buf = [0u8; 8];
        for _ in 0..size {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        slices.push((name, Array2::from_shape_vec((rows, cols), data).expect("size checked")));
    }
    Ok(slices)
}

/// Generator and discriminator parameters as one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub generator: EncoderDecoderGenerator,
    pub h_net: CausalSummaryNet,
    pub m_net: CausalSummaryNet,
}

impl ModelBundle {
    pub fn to_slices(&self) -> Vec<(String, Array2<f64>)> {
        let mut out: Vec<_> = self.generator.params().named("gen/").collect();
        out.extend(self.h_net.params().named("h/"));
        out.extend(self.m_net.params().named("m/"));
        out.push(("h/bound".into(), Array2::from_elem((1, 1), self.h_net.bound())));
        out.push(("m/bound".into(), Array2::from_elem((1, 1), self.m_net.bound())));
        out
    }

    pub fn from_slices(slices: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut groups: BTreeMap<&str, ParamVector> = BTreeMap::new();
        let mut bounds: BTreeMap<&str, f64> = BTreeMap::new();
        for (name, value) in slices {
            let (group, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("slice `{name}` has no group prefix")))?;
            let group = match group {
                "gen" => "gen",
                "h" => "h",
                "m" => "m",
                other => return Err(Error::Format(format!("unknown slice group `{other}`"))),
            };
            if rest == "bound" {
                bounds.insert(group, value[[0, 0]]);
            } else {
                groups.entry(group).or_default().push(rest.to_string(), value);
            }
        }
        let mut take = |g: &str| {
            groups
                .remove(g)
                .ok_or_else(|| Error::Format(format!("checkpoint has no `{g}` parameters")))
        };
        let generator = EncoderDecoderGenerator::from_params(take("gen")?)?;
        let bound = |g: &str| bounds.get(g).copied().ok_or_else(|| Error::Format(format!("checkpoint has no `{g}/bound`")));
        let h_net = CausalSummaryNet::from_params(take("h")?, bound("h")?)?;
        let m_net = CausalSummaryNet::from_params(take("m")?, bound("m")?)?;
        Ok(Self { generator, h_net, m_net })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &self.to_slices())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_slices(read_checkpoint(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::forward_backward;
    use crate::causal::causal_cost;
    use crate::path::ground_cost;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> GeneratorShape {
        GeneratorShape {
            dim: 2,
            hidden: 5,
            encoder_layers: 2,
            decoder_layers: 3,
            noise_dim: 2,
        }
    }

    fn leaves(tape: &Tape, values: &[Array2<f64>]) -> Vec<Var> {
        values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    fn random_steps(rng: &mut ChaCha8Rng, steps: usize, m: usize, d: usize) -> Vec<Array2<f64>> {
        (0..steps).map(|_| standard_normal(m, d, rng)).collect()
    }

    #[test]
    fn param_vector_roundtrip() {
        let mut p = ParamVector::new();
        p.push("a", ndarray::array![[1.0, 2.0]]);
        p.push("b", ndarray::array![[3.0], [4.0]]);
        assert_eq!(p.len(), 4);
        assert_eq!(p.grad().len(), 4);
        assert_eq!(p.get("b").unwrap(), ndarray::array![[3.0], [4.0]]);
        p.set("a", ndarray::array![[5.0, 6.0]].view()).unwrap();
        assert_eq!(p.data(), &[5.0, 6.0, 3.0, 4.0]);
        assert!(p.set("a", ndarray::array![[1.0]].view()).is_err());
        p.data_mut()[0] = f64::NAN;
        assert!(p.check_finite().is_err());
    }

    #[test]
    fn zero_readout_gives_ground_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = CausalSummaryNet::new(1, 8, 3, 2.0, &mut rng).unwrap();
        let mut m = CausalSummaryNet::new(1, 8, 3, 2.0, &mut rng).unwrap();
        for net in [&mut h, &mut m] {
            let z = Array2::zeros((8, 3));
            net.params_mut().set("readout", z.view()).unwrap();
        }
        let x = Path::scalar(&[0.1, 0.5, -0.2]).unwrap();
        let y = Path::scalar(&[1.0, -0.4, 0.3]).unwrap();
        let (hv, mv) = discriminator_forward(&h, &m, &x, &y).unwrap();
        assert_eq!(hv.dim(), (3, 2));
        assert_eq!(mv.dim(), (3, 3));
        assert!(hv.iter().chain(mv.iter()).all(|v| *v == 0.0));
        let d = Discriminator { h: &h, m: &m };
        assert_eq!(causal_cost(&x, &y, &d).unwrap(), ground_cost(&x, &y).unwrap());
    }

    #[test]
    fn summary_outputs_respect_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = CausalSummaryNet::new(2, 6, 4, 0.5, &mut rng).unwrap();
        // push the readout far into saturation
        let big = net.params().view(CausalSummaryNet::READOUT).mapv(|v| v * 1e3);
        net.params_mut().set("readout", big.view()).unwrap();
        let x = standard_normal(7, 2, &mut rng) * 5.0;
        let out = net.evaluate(x.view());
        assert!(out.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn causality_under_future_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let net = CausalSummaryNet::new(2, 4, 3, 1.0, &mut rng).unwrap();
            let gen = EncoderDecoderGenerator::new(shape(), &mut rng).unwrap();
            let steps = 6;
            let xs = random_steps(&mut rng, steps, 3, 2);
            let zs = random_steps(&mut rng, steps, 3, 2);
            let s = rng.random_range(1..steps);
            let mut perturbed = xs.clone();
            perturbed[s] = &perturbed[s] + 0.7;

            let run = |xs: &[Array2<f64>]| {
                let tape = Tape::new();
                let nv = net.params().bind(&tape);
                let gv = gen.params().bind(&tape);
                let x = leaves(&tape, xs);
                let z = leaves(&tape, &zs);
                let summary: Vec<_> = net.forward(&tape, &nv, &x).iter().map(|v| tape.value(*v)).collect();
                let feats = gen.encode(&tape, &gv, &x);
                let feats_v: Vec<Vec<_>> = feats.iter().map(|l| l.iter().map(|v| tape.value(*v)).collect()).collect();
                let preds = gen.decode_teacher_forced(&tape, &gv, &feats, &x, &z, 1, steps).unwrap();
                let preds_v: Vec<_> = preds.iter().map(|v| tape.value(*v)).collect();
                (summary, feats_v, preds_v)
            };
            let (s0, f0, p0) = run(&xs);
            let (s1, f1, p1) = run(&perturbed);
            for t in 0..s {
                assert_eq!(s0[t], s1[t]);
                for l in 0..2 {
                    assert_eq!(f0[l][t], f1[l][t]);
                }
                // p[t] predicts 0-based step t+1 from steps 0..=t
                assert_eq!(p0[t], p1[t]);
            }
        }
    }

    #[test]
    fn encoder_feature_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = EncoderDecoderGenerator::new(shape(), &mut rng).unwrap();
        let tape = Tape::new();
        let vars = gen.params().bind(&tape);
        let xs = leaves(&tape, &vec![Array2::zeros((4, 2)); 7]);
        let feats = gen.encode(&tape, &vars, &xs);
        assert_eq!(feats.len(), 2);
        for layer in &feats {
            assert_eq!(layer.len(), 7);
            for v in layer {
                assert_eq!(tape.shape(*v), (4, 5));
                assert!(tape.value(*v).iter().all(|e| *e == 0.0));
            }
        }
    }

    #[test]
    fn last_step_prediction_and_zero_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = EncoderDecoderGenerator::new(shape(), &mut rng).unwrap();
        let steps = 5;
        let xs = random_steps(&mut rng, steps, 3, 2);
        let zs = random_steps(&mut rng, steps, 3, 2);
        let tape = Tape::new();
        let vars = gen.params().bind(&tape);
        let x = leaves(&tape, &xs);
        let z = leaves(&tape, &zs);
        let feats = gen.encode(&tape, &vars, &x);
        let preds = gen.decode_teacher_forced(&tape, &vars, &feats, &x, &z, steps - 1, steps).unwrap();
        assert_eq!(preds.len(), 1);
        assert!(gen.decode_teacher_forced(&tape, &vars, &feats, &x, &z, steps, steps).is_err());

        let bias = ndarray::array![[0.3, -1.1]];
        gen.params_mut().set("out.w", Array2::zeros((7, 2)).view()).unwrap();
        gen.params_mut().set("out.b", bias.view()).unwrap();
        let tape = Tape::new();
        let vars = gen.params().bind(&tape);
        let x = leaves(&tape, &xs);
        let z = leaves(&tape, &zs);
        let feats = gen.encode(&tape, &vars, &x);
        for p in gen.decode_teacher_forced(&tape, &vars, &feats, &x, &z, 2, steps).unwrap() {
            for row in tape.value(p).rows() {
                assert_eq!(row, bias.row(0));
            }
        }
    }

    #[test]
    fn teacher_forced_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = EncoderDecoderGenerator::new(shape(), &mut rng).unwrap();
        let steps = 4;
        let xs = random_steps(&mut rng, steps, 3, 2);
        let zs = random_steps(&mut rng, steps, 3, 2);
        let loss = |tape: &Tape, vars: &[Var]| {
            let x = leaves(tape, &xs);
            let z = leaves(tape, &zs);
            let feats = gen.encode(tape, vars, &x);
            let preds = gen.decode_teacher_forced(tape, vars, &feats, &x, &z, 2, steps).unwrap();
            let mut total = tape.scalar(0.0);
            for (i, p) in preds.iter().enumerate() {
                let err = tape.sub(*p, x[2 + i]);
                total = tape.add(total, tape.sum_all(tape.mul(err, err)));
            }
            total
        };
        let inputs: Vec<Array2<f64>> = (0..gen.params().slices().len()).map(|i| gen.params().view(i).to_owned()).collect();
        let (_, grads) = forward_backward(&inputs, |t, v| Ok(loss(t, v))).unwrap();
        let eval = |inputs: &[Array2<f64>]| {
            let t = Tape::new();
            let v = leaves(&t, inputs);
            t.scalar_value(loss(&t, &v))
        };
        let h = 1e-5;
        for _ in 0..50 {
            let s = rng.random_range(0..inputs.len());
            let (r, c) = (rng.random_range(0..inputs[s].nrows()), rng.random_range(0..inputs[s].ncols()));
            let mut up = inputs.clone();
            up[s][[r, c]] += h;
            let mut down = inputs.clone();
            down[s][[r, c]] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            let analytic = grads[s][[r, c]];
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!((analytic - numeric).abs() <= 1e-4 * scale, "{analytic} vs {numeric}");
        }
    }

    /// Hand-unrolled three-step autoregressive decode with explicit cells.
    #[test]
    fn autoregressive_matches_manual_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sh = GeneratorShape {
            dim: 1,
            hidden: 3,
            encoder_layers: 1,
            decoder_layers: 2,
            noise_dim: 1,
        };
        let gen = EncoderDecoderGenerator::new(sh, &mut rng).unwrap();
        let steps = 5;
        let context = [0.4, -0.2];
        let noise = [0.0, 0.3, -0.5, 1.2];
        let p = |name: &str| gen.params().get(name).unwrap().to_owned();
        let cell = |input: &Array2<f64>, state: &Array2<f64>, l: &str| {
            (input.dot(&p(&format!("{l}.w_in"))) + state.dot(&p(&format!("{l}.w_rec"))) + p(&format!("{l}.b"))).mapv(f64::tanh)
        };
        let cat = |parts: &[&Array2<f64>]| {
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            ndarray::concatenate(ndarray::Axis(1), &views).unwrap()
        };
        let scalar = |v: f64| Array2::from_elem((1, 1), v);
        let mut e = Array2::zeros((1, 3));
        for &c in &context {
            e = cell(&scalar(c), &e, "enc.0");
        }
        let (mut d0, mut d1) = (Array2::zeros((1, 3)), Array2::zeros((1, 3)));
        let mut current = scalar(context[1]);
        let mut manual = Vec::new();
        for t in 1..4 {
            if t > 1 {
                e = cell(&current, &e, "enc.0");
            }
            d0 = cell(&cat(&[&e, &current, &scalar(noise[t])]), &d0, "dec.0");
            d1 = cell(&d0, &d1, "dec.1");
            let next = cat(&[&current, &d1]).dot(&p("out.w")) + p("out.b");
            manual.push(next[[0, 0]]);
            current = next;
        }

        let tape = Tape::new();
        let vars = gen.params().bind(&tape);
        let ctx: Vec<Var> = context.iter().map(|&c| tape.leaf(scalar(c))).collect();
        let zs: Vec<Var> = noise.iter().map(|&z| tape.leaf(scalar(z))).collect();
        let preds = gen.decode_autoregressive(&tape, &vars, &ctx, &zs, steps).unwrap();
        for (a, b) in preds.iter().zip(&manual) {
            assert!((tape.scalar_value(*a) - b).abs() < 1e-14);
        }
    }

    #[test]
    fn first_autoregressive_step_equals_teacher_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = EncoderDecoderGenerator::new(shape(), &mut rng).unwrap();
        let steps = 6;
        let k = 3;
        let xs = random_steps(&mut rng, steps, 2, 2);
        let zs = random_steps(&mut rng, steps, 2, 2);
        let tape = Tape::new();
        let vars = gen.params().bind(&tape);
        let x = leaves(&tape, &xs);
        let z = leaves(&tape, &zs);
        let feats = gen.encode(&tape, &vars, &x);
        let tf = gen.decode_teacher_forced(&tape, &vars, &feats, &x, &z, k, steps).unwrap();
        let ar = gen.decode_autoregressive(&tape, &vars, &x[..k], &z, steps).unwrap();
        assert_eq!(tape.value(tf[0]), tape.value(ar[0]));
        assert_eq!(ar.len(), steps - k);
    }

    #[test]
    fn deterministic_generator_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut gen = EncoderDecoderGenerator::new(shape(), &mut rng).unwrap();
        let w = gen.params().get("dec.0.w_in").unwrap().to_owned();
        let mut zeroed = w.clone();
        zeroed.slice_mut(ndarray::s![5 + 2.., ..]).fill(0.0);
        gen.params_mut().set("dec.0.w_in", zeroed.view()).unwrap();
        let ctx = standard_normal(3, 2, &mut rng);
        let a = gen.sample_continuations(&[ctx.view()], 4, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gen.sample_continuations(&[ctx.view()], 4, 7, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0][0].dim(), (4, 2));
    }

    #[test]
    fn checkpoint_roundtrip_infers_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bundle = ModelBundle {
            generator: EncoderDecoderGenerator::new(shape(), &mut rng).unwrap(),
            h_net: CausalSummaryNet::new(2, 4, 3, 1.5, &mut rng).unwrap(),
            m_net: CausalSummaryNet::new(2, 4, 3, 1.5, &mut rng).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &bundle.to_slices()).unwrap();
        assert_eq!(&buf[..5], b"COTP1");
        let back = ModelBundle::from_slices(read_checkpoint(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.generator.shape(), shape());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
