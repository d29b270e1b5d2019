//! Causal costs, the martingale penalty, the causality residual, and exact
//! linear-programming oracles for classical, causal and bicausal (adapted)
//! transport between small discrete path measures.
//!
//! Time indices in this module are prefix lengths: `t = 1` is the first step,
//! and a function "at time t" reads the rows `x_{1:t}`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::lp::{self, LinearProgram, LpStatus};
use crate::path::{ground_cost, CostId, CostMatrix, DiscretePathMeasure, Path, PathBatch};
use crate::plan::TransportPlan;
use crate::sinkhorn::PathCost;

/// Atom-count limit for [`exact_ot_lp`].
pub const MAX_ATOMS_CLASSICAL: usize = 64;
/// Atom-count limit for the causal and bicausal oracles.
pub const MAX_ATOMS_CAUSAL: usize = 16;
/// Path-length limit for the causal and bicausal oracles.
pub const MAX_STEPS_CAUSAL: usize = 4;

/// A truncated family `(h^j, M^j)_{j=1..J}` of test functions. `h(j, y_{1:t})`
/// is defined for `t = 1..T-1` and `m(j, x_{1:t})` for `t = 1..T`; both only
/// ever receive the prefix, so causality holds by construction.
pub trait CausalTestFunctions {
    fn count(&self) -> usize;
    fn h(&self, j: usize, prefix: ArrayView2<f64>) -> f64;
    fn m(&self, j: usize, prefix: ArrayView2<f64>) -> f64;
}

type PrefixFn = dyn Fn(usize, ArrayView2<f64>) -> f64 + Send + Sync;

/// Test functions assembled from closures, with outputs clamped to `[-clamp, clamp]`.
#[derive(Clone)]
pub struct FnTestFunctions {
    count: usize,
    clamp: f64,
    h: Arc<PrefixFn>,
    m: Arc<PrefixFn>,
}

impl FnTestFunctions {
    pub fn new(
        count: usize,
        clamp: f64,
        h: impl Fn(usize, ArrayView2<f64>) -> f64 + Send + Sync + 'static,
        m: impl Fn(usize, ArrayView2<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            count,
            clamp,
            h: Arc::new(h),
            m: Arc::new(m),
        }
    }

    /// `h ≡ 0`, `M ≡ 0`.
    pub fn zero(count: usize) -> Self {
        Self::new(count, f64::INFINITY, |_, _| 0.0, |_, _| 0.0)
    }
}

impl CausalTestFunctions for FnTestFunctions {
    fn count(&self) -> usize {
        self.count
    }
    fn h(&self, j: usize, prefix: ArrayView2<f64>) -> f64 {
        (self.h)(j, prefix).clamp(-self.clamp, self.clamp)
    }
    fn m(&self, j: usize, prefix: ArrayView2<f64>) -> f64 {
        (self.m)(j, prefix).clamp(-self.clamp, self.clamp)
    }
}

/// `M^j_{t+1}(x_{1:t+1}) - M^j_t(x_{1:t})` for `1 <= t <= T-1`.
pub fn delta_m(tf: &dyn CausalTestFunctions, x: &Path, j: usize, t: usize) -> Result<f64> {
    if t == 0 || t >= x.steps() {
        return Err(Error::InvalidArgument(format!(
            "increment time {t} outside 1..={}",
            x.steps().saturating_sub(1)
        )));
    }
    Ok(tf.m(j, x.prefix(t + 1)) - tf.m(j, x.prefix(t)))
}

/// `c(x, y) + sum_j sum_{t=1}^{T-1} h^j_t(y_{1:t}) (M^j_{t+1} - M^j_t)(x)`.
pub fn causal_cost(x: &Path, y: &Path, tf: &dyn CausalTestFunctions) -> Result<f64> {
    let base = ground_cost(x, y)?;
    let mut extra = 0.0;
    for j in 0..tf.count() {
        for t in 1..x.steps() {
            extra += tf.h(j, y.prefix(t)) * delta_m(tf, x, j, t)?;
        }
    }
    Ok(base + extra)
}

/// The causal cost as a [`PathCost`].
pub struct CausalCost<'a> {
    pub functions: &'a dyn CausalTestFunctions,
}

impl PathCost for CausalCost<'_> {
    fn cost(&self, x: &Path, y: &Path) -> Result<f64> {
        causal_cost(x, y, self.functions)
    }

    fn matrix(&self, xs: &PathBatch, ys: &PathBatch) -> Result<CostMatrix> {
        let mut entries = Array2::zeros((xs.len(), ys.len()));
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                entries[[i, j]] = causal_cost(x, y, self.functions)?;
            }
        }
        Ok(CostMatrix::new(entries, CostId::Causal))
    }
}

/// Martingale penalty of `M` under `mu`:
///
/// ```text
/// 1/(mT) sum_j sum_{t=1}^{T-1} | sum_i m w_i (M^j_{t+1} - M^j_t)(x^i) / (sqrt(Var[M^j]) + eta) |
/// ```
///
/// with `Var[M^j]` the weighted variance of `M^j_t(x^i)` pooled over time and batch.
pub fn martingale_penalty(
    mu: &DiscretePathMeasure,
    tf: &dyn CausalTestFunctions,
    eta: f64,
) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let m = mu.len();
    let steps = mu.steps();
    let w = mu.weights();
    let mut total = 0.0;
    for j in 0..tf.count() {
        let values: Vec<Vec<f64>> = mu
            .atoms()
            .iter()
            .map(|x| (1..=steps).map(|t| tf.m(j, x.prefix(t))).collect())
            .collect();
        let mut mean = 0.0;
        for (row, &wi) in values.iter().zip(w) {
            for v in row {
                mean += wi * v / steps as f64;
            }
        }
        let mut var = 0.0;
        for (row, &wi) in values.iter().zip(w) {
            for v in row {
                var += wi * (v - mean).powi(2) / steps as f64;
            }
        }
        let scale = var.sqrt() + eta;
        for t in 0..steps - 1 {
            let inc: f64 = values
                .iter()
                .zip(w)
                .map(|(row, &wi)| m as f64 * wi * (row[t + 1] - row[t]))
                .sum();
            total += (inc / scale).abs();
        }
    }
    Ok(total / (m * steps) as f64)
}

/// `|E^pi[ sum_j sum_t h^j_t(y) Delta_{t+1} M^j(x) ]|`. Meaningful when each
/// `M^j` is a martingale under the plan's first marginal; then it vanishes for
/// every causal plan.
pub fn causality_residual(
    plan: &TransportPlan,
    xs: &PathBatch,
    ys: &PathBatch,
    tf: &dyn CausalTestFunctions,
) -> Result<f64> {
    if plan.shape() != (xs.len(), ys.len()) {
        return Err(Error::dims(
            format!("{}x{} plan", xs.len(), ys.len()),
            format!("{:?}", plan.shape()),
        ));
    }
    if (xs.steps(), xs.dim()) != (ys.steps(), ys.dim()) {
        return Err(Error::dims(
            format!("{}x{}", xs.steps(), xs.dim()),
            format!("{}x{}", ys.steps(), ys.dim()),
        ));
    }
    let steps = xs.steps();
    let mut expectation = 0.0;
    for j in 0..tf.count() {
        let inc: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| (1..steps).map(|t| delta_m(tf, x, j, t)).collect())
            .collect::<Result<_>>()?;
        let hv: Vec<Vec<f64>> = ys
            .iter()
            .map(|y| (1..steps).map(|t| tf.h(j, y.prefix(t))).collect())
            .collect();
        for (a, inc_a) in inc.iter().enumerate() {
            for (b, h_b) in hv.iter().enumerate() {
                let p = plan.table()[[a, b]];
                if p != 0.0 {
                    let s: f64 = inc_a.iter().zip(h_b).map(|(d, h)| d * h).sum();
                    expectation += p * s;
                }
            }
        }
    }
    Ok(expectation.abs())
}

/// Groups atoms by exactly equal prefixes of length `len`; classes are listed
/// in order of first appearance. `-0.0` and `0.0` are identified.
pub fn prefix_classes(batch: &PathBatch, len: usize) -> Vec<Vec<usize>> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (i, p) in batch.iter().enumerate() {
        let key: Vec<u64> = p.prefix(len).iter().map(|v| (v + 0.0).to_bits()).collect();
        match index.get(&key) {
            Some(&c) => classes[c].push(i),
            None => {
                index.insert(key, classes.len());
                classes.push(vec![i]);
            }
        }
    }
    classes
}

/// Linear causality constraints on a plan `pi` over `src x dst` (flattened
/// row-major, index `i * n + j`): for every `t = 1..T-1`, destination prefix
/// class `B` at `t`, source prefix class `P` at `t` with at least two atoms,
/// and source atom `x in P`,
///
/// ```text
/// pi(x, B) * mu(P) - pi(P, B) * mu(x) = 0.
/// ```
///
/// The last atom of each `P` and the last class `B` are implied by the others
/// together with the marginal constraints and are omitted. When `transpose` is
/// set the roles of the two sides are exchanged, giving the reverse-direction
/// constraints on the same variables.
fn causal_constraints(
    src: &DiscretePathMeasure,
    dst: &DiscretePathMeasure,
    transpose: bool,
) -> Vec<Vec<(usize, f64)>> {
    let n_dst = dst.len();
    let n_cols = if transpose { src.len() } else { n_dst };
    let var = |s: usize, d: usize| if transpose { d * n_cols + s } else { s * n_cols + d };
    let w = src.weights();
    let mut rows = Vec::new();
    for t in 1..src.steps() {
        let src_classes = prefix_classes(src.atoms(), t);
        let dst_classes = prefix_classes(dst.atoms(), t);
        if dst_classes.len() < 2 {
            continue;
        }
        for class in src_classes.iter().filter(|c| c.len() >= 2) {
            let class_mass: f64 = class.iter().map(|&i| w[i]).sum();
            for &x in &class[..class.len() - 1] {
                for b in &dst_classes[..dst_classes.len() - 1] {
                    let mut row = Vec::with_capacity(b.len() * (class.len() + 1));
                    for &y in b {
                        row.push((var(x, y), class_mass));
                        for &i in class {
                            row.push((var(i, y), -w[x]));
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    rows
}

/// Which constraint family an exact oracle imposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Causality {
    None,
    Causal,
    Bicausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

impl SolverStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::NumericalFailure => "numerical_failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExactOTResult {
    pub value: f64,
    /// Present when the solver reached optimality.
    pub plan: Option<TransportPlan>,
    pub constraint_count: usize,
    pub solver_status: SolverStatus,
}

impl ExactOTResult {
    pub fn is_optimal(&self) -> bool {
        self.solver_status == SolverStatus::Optimal
    }
}

fn check_oracle_inputs(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost: &CostMatrix,
    kind: Causality,
) -> Result<()> {
    if cost.shape() != (mu.len(), nu.len()) {
        return Err(Error::dims(
            format!("{}x{} cost", mu.len(), nu.len()),
            format!("{:?}", cost.shape()),
        ));
    }
    if cost.entries.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("cost entries must be finite".into()));
    }
    let (limit, steps) = match kind {
        Causality::None => (MAX_ATOMS_CLASSICAL, usize::MAX),
        _ => (MAX_ATOMS_CAUSAL, MAX_STEPS_CAUSAL),
    };
    if mu.len() > limit || nu.len() > limit {
        return Err(Error::InvalidArgument(format!(
            "oracle supports at most {limit} atoms per side, got {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    if kind != Causality::None {
        if (mu.steps(), mu.dim()) != (nu.steps(), nu.dim()) {
            return Err(Error::dims(
                format!("{}x{}", mu.steps(), mu.dim()),
                format!("{}x{}", nu.steps(), nu.dim()),
            ));
        }
        if mu.steps() > steps {
            return Err(Error::InvalidArgument(format!(
                "causal oracles support at most {steps} steps, got {}",
                mu.steps()
            )));
        }
    }
    Ok(())
}

/// Builds the constraint rows for `kind` over an `m x n` plan.
pub fn transport_constraints(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    kind: Causality,
) -> Vec<(Vec<(usize, f64)>, f64)> {
    let (m, n) = (mu.len(), nu.len());
    let mut rows = Vec::new();
    for i in 0..m {
        rows.push(((0..n).map(|j| (i * n + j, 1.0)).collect(), mu.weights()[i]));
    }
    // the last column sum follows from the others
    for j in 0..n.saturating_sub(1) {
        rows.push(((0..m).map(|i| (i * n + j, 1.0)).collect(), nu.weights()[j]));
    }
    if matches!(kind, Causality::Causal | Causality::Bicausal) {
        rows.extend(causal_constraints(mu, nu, false).into_iter().map(|r| (r, 0.0)));
    }
    if kind == Causality::Bicausal {
        rows.extend(causal_constraints(nu, mu, true).into_iter().map(|r| (r, 0.0)));
    }
    rows
}

fn solve_transport(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost: &CostMatrix,
    kind: Causality,
) -> Result<ExactOTResult> {
    check_oracle_inputs(mu, nu, cost, kind)?;
    let (m, n) = (mu.len(), nu.len());
    let mut program = LinearProgram::new(cost.entries.iter().copied().collect());
    let rows = transport_constraints(mu, nu, kind);
    let constraint_count = rows.len();
    for (row, rhs) in rows {
        program.add_equality(row, rhs)?;
    }
    let sol = lp::solve(&program);
    let solver_status = match sol.status {
        LpStatus::Optimal => SolverStatus::Optimal,
        LpStatus::Infeasible => SolverStatus::Infeasible,
        LpStatus::Unbounded | LpStatus::NumericalFailure => SolverStatus::NumericalFailure,
    };
    if solver_status != SolverStatus::Optimal {
        return Ok(ExactOTResult {
            value: f64::NAN,
            plan: None,
            constraint_count,
            solver_status,
        });
    }
    let table = Array2::from_shape_vec((m, n), sol.x).expect("m*n variables");
    let plan = TransportPlan::from_table(table)?;
    Ok(ExactOTResult {
        value: plan.expected_cost(&cost.entries),
        plan: Some(plan),
        constraint_count,
        solver_status,
    })
}

/// Classical optimal transport by linear programming.
pub fn exact_ot_lp(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost: &CostMatrix,
) -> Result<ExactOTResult> {
    solve_transport(mu, nu, cost, Causality::None)
}

/// Causal optimal transport (plans causal from `mu` to `nu`).
pub fn exact_causal_ot(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost: &CostMatrix,
) -> Result<ExactOTResult> {
    solve_transport(mu, nu, cost, Causality::Causal)
}

/// Adapted Wasserstein value: transport over plans causal in both directions.
pub fn adapted_wasserstein(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost: &CostMatrix,
) -> Result<ExactOTResult> {
    solve_transport(mu, nu, cost, Causality::Bicausal)
}

/// Largest violation of the causality constraints of `kind` by `plan`.
pub fn causality_violation(
    plan: &TransportPlan,
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    kind: Causality,
) -> f64 {
    let flat: Vec<f64> = plan.table().iter().copied().collect();
    let mut rows = Vec::new();
    if matches!(kind, Causality::Causal | Causality::Bicausal) {
        rows.extend(causal_constraints(mu, nu, false));
    }
    if kind == Causality::Bicausal {
        rows.extend(causal_constraints(nu, mu, true));
    }
    rows.iter()
        .map(|row| row.iter().map(|&(v, c)| c * flat[v]).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

impl TransportPlan {
    /// Whether the plan is causal from `mu` to `nu` within `tol`.
    pub fn is_causal(&self, mu: &DiscretePathMeasure, nu: &DiscretePathMeasure, tol: f64) -> bool {
        causality_violation(self, mu, nu, Causality::Causal) <= tol
    }

    /// Whether the plan is causal in both directions within `tol`.
    pub fn is_bicausal(&self, mu: &DiscretePathMeasure, nu: &DiscretePathMeasure, tol: f64) -> bool {
        causality_violation(self, mu, nu, Causality::Bicausal) <= tol
    }
}

/// One row of an oracle comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub instance_id: usize,
    pub w: f64,
    pub wk: f64,
    pub aw: f64,
    pub status: SolverStatus,
}

/// Writes `instance_id,w,wk,aw,status`.
pub fn write_oracle_csv<W: Write>(rows: &[OracleRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instance_id", "w", "wk", "aw", "status"])?;
    for r in rows {
        w.write_record([
            r.instance_id.to_string(),
            r.w.to_string(),
            r.wk.to_string(),
            r.aw.to_string(),
            r.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs all three exact oracles for one instance under the squared ground cost.
pub fn oracle_row(instance_id: usize, mu: &DiscretePathMeasure, nu: &DiscretePathMeasure) -> Result<OracleRow> {
    let c = crate::path::cost_matrix(mu.atoms(), nu.atoms())?;
    let w = exact_ot_lp(mu, nu, &c)?;
    let wk = exact_causal_ot(mu, nu, &c)?;
    let aw = adapted_wasserstein(mu, nu, &c)?;
    let status = [w.solver_status, wk.solver_status, aw.solver_status]
        .into_iter()
        .find(|s| *s != SolverStatus::Optimal)
        .unwrap_or(SolverStatus::Optimal);
    Ok(OracleRow {
        instance_id,
        w: w.value,
        wk: wk.value,
        aw: aw.value,
        status,
    })
}

/// Random tiny measure whose atoms share prefixes by construction: each new
/// atom copies the prefix of an earlier atom up to a random branching time.
pub fn random_tree_measure<R: Rng + ?Sized>(
    rng: &mut R,
    atoms: usize,
    steps: usize,
    dim: usize,
) -> DiscretePathMeasure {
    let mut paths: Vec<Vec<f64>> = Vec::with_capacity(atoms);
    for a in 0..atoms {
        let mut v: Vec<f64> = (0..steps * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if a > 0 && rng.random_bool(0.7) {
            let parent = rng.random_range(0..a);
            let branch = rng.random_range(1..steps.max(2));
            v[..branch * dim].copy_from_slice(&paths[parent][..branch * dim]);
        }
        paths.push(v);
    }
    let batch = PathBatch::new(
        paths
            .into_iter()
            .map(|v| Path::from_vec(steps, dim, v).expect("finite"))
            .collect(),
    )
    .expect("homogeneous");
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    DiscretePathMeasure::new(batch, raw.into_iter().map(|w| w / total).collect()).expect("normalized")
}

/// Samples `count` test-function pairs `(h^j, M^j)` where every `M^j` is a
/// martingale under `mu`.
///
/// `h^j_t` and the raw generator `g^j_t` of `M^j` are random affine functions
/// of the last value and running mean of the prefix, clamped to `[-10, 10]`.
/// `M^j_1 = g^j_1` and `M^j_{t+1} = M^j_t + g^j_{t+1} - E_mu[g^j_{t+1} | x_{1:t}]`,
/// the conditional mean being taken over the atoms of `mu` sharing the prefix
/// (zero increment off the support).
pub fn sample_admissible<R: Rng + ?Sized>(
    mu: &DiscretePathMeasure,
    count: usize,
    rng: &mut R,
) -> FnTestFunctions {
    const CLAMP: f64 = 10.0;
    let steps = mu.steps();
    let dim = mu.dim();
    let coeffs = |rng: &mut R| -> Vec<Vec<f64>> {
        (0..count * (steps + 1))
            .map(|_| (0..2 * dim + 1).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    };
    let h_coef = Arc::new(coeffs(rng));
    let g_coef = Arc::new(coeffs(rng));

    fn summary(coef: &[f64], prefix: ArrayView2<f64>) -> f64 {
        let t = prefix.nrows();
        let d = prefix.ncols();
        let mut v = coef[2 * d];
        for k in 0..d {
            let col = prefix.column(k);
            let mean = col.sum() / t as f64;
            v += coef[k] * col[t - 1] + coef[d + k] * mean;
        }
        v.clamp(-CLAMP, CLAMP)
    }

    let atoms: Arc<Vec<(Array2<f64>, f64)>> = Arc::new(
        mu.atoms()
            .iter()
            .zip(mu.weights())
            .map(|(p, &w)| (p.values().to_owned(), w))
            .collect(),
    );
    let h = {
        let h_coef = Arc::clone(&h_coef);
        move |j: usize, prefix: ArrayView2<f64>| summary(&h_coef[j * (steps + 1) + prefix.nrows()], prefix)
    };
    let m = move |j: usize, prefix: ArrayView2<f64>| {
        let g = |len: usize, p: ArrayView2<f64>| summary(&g_coef[j * (steps + 1) + len], p);
        let mut value = g(1, prefix.slice(ndarray::s![..1, ..]));
        for len in 1..prefix.nrows() {
            let head = prefix.slice(ndarray::s![..len, ..]);
            let (mut mass, mut acc) = (0.0, 0.0);
            for (atom, w) in atoms.iter() {
                if atom.slice(ndarray::s![..len, ..]) == head {
                    mass += w;
                    acc += w * g(len + 1, atom.slice(ndarray::s![..len + 1, ..]));
                }
            }
            if mass > 0.0 {
                value += g(len + 1, prefix.slice(ndarray::s![..len + 1, ..])) - acc / mass;
            }
        }
        value
    };
    FnTestFunctions::new(count, f64::INFINITY, h, m)
}
