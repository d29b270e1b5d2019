//! Entropic optimal transport with log-domain Sinkhorn iterations, and the
//! mini-batch Sinkhorn divergences built from it.
//!
//! The solver runs a fixed number `L` of alternating dual updates
//!
//! ```text
//! f_i = eps * ln a_i - eps * LSE_j((g_j - C_ij) / eps)
//! g_j = eps * ln b_j - eps * LSE_i((f_i - C_ij) / eps)
//! ```
//!
//! and returns the plan `pi_ij = exp((f_i + g_j - C_ij) / eps)` together with
//! its transport cost `sum_ij pi_ij C_ij`. The same arithmetic is replayed on
//! the autodiff tape by [`crate::autodiff::sinkhorn_cost`].

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::path::{CostMatrix, DiscretePathMeasure, Path, PathBatch};
use crate::plan::TransportPlan;

/// Settings for [`sinkhorn_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization strength, `> 0`.
    pub epsilon: f64,
    /// Number of dual update sweeps (each sweep updates `f` then `g`).
    pub iterations: usize,
    /// Plan entries whose log value falls below `-underflow_guard` are flushed to zero.
    pub underflow_guard: f64,
    /// When set, stop early once the marginal L1 error drops below this value.
    pub tolerance: Option<f64>,
    /// Record `(iter, objective, marginal_err)` after every sweep.
    pub trace: bool,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64, iterations: usize) -> Result<Self> {
        let cfg = Self {
            epsilon,
            iterations,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.8,
            iterations: 100,
            underflow_guard: 700.0,
            tolerance: None,
            trace: false,
        }
    }
}

/// One row of the per-iteration diagnostic trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Entropic objective `<pi, C> - eps * H(pi)` of the current plan.
    pub objective: f64,
    pub marginal_err: f64,
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub potentials_f: Vec<f64>,
    pub potentials_g: Vec<f64>,
    pub plan: TransportPlan,
    /// `sum_ij pi_ij C_ij` for the returned plan.
    pub transport_cost: f64,
    pub iterations_run: usize,
    pub trace: Vec<TraceRow>,
}

/// Writes a trace as CSV with header `iter,objective,marginal_err`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "objective", "marginal_err"])?;
    for row in trace {
        w.write_record([
            row.iter.to_string(),
            row.objective.to_string(),
            row.marginal_err.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shannon entropy `-sum pi_ij ln pi_ij` with `0 ln 0 = 0`.
pub fn shannon_entropy(plan: &TransportPlan) -> Result<f64> {
    entropy_of(plan.table())
}

fn entropy_of(table: &Array2<f64>) -> Result<f64> {
    let mut h = 0.0;
    for &p in table {
        if p < 0.0 {
            return Err(Error::Domain(format!("negative plan entry {p}")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Numerically stable `ln sum exp`.
#[inline]
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-domain Sinkhorn on raw weights and a dense cost table.
pub fn sinkhorn_weights(
    a: &[f64],
    b: &[f64],
    cost: &Array2<f64>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    let (m, n) = cost.dim();
    if a.len() != m || b.len() != n {
        return Err(Error::dims(
            format!("{}x{} cost for {} x {} atoms", a.len(), b.len(), a.len(), b.len()),
            format!("{m}x{n}"),
        ));
    }
    if cost.iter().any(|c| c.is_nan()) {
        return Err(Error::Domain("cost matrix contains NaN".into()));
    }
    if a.iter().chain(b).any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument(
            "weights must be strictly positive; drop null atoms first".into(),
        ));
    }

    let eps = cfg.epsilon;
    let inv_eps = 1.0 / eps;
    let eps_log_a: Vec<f64> = a.iter().map(|w| eps * w.ln()).collect();
    let eps_log_b: Vec<f64> = b.iter().map(|w| eps * w.ln()).collect();
    let neg_cost = cost.mapv(|c| -c);

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations_run = 0;

    for it in 1..=cfg.iterations {
        for i in 0..m {
            let row = neg_cost.row(i);
            let lse = log_sum_exp((0..n).map(|j| (row[j] + g[j]) * inv_eps));
            f[i] = eps_log_a[i] + -eps * lse;
        }
        for j in 0..n {
            let col = neg_cost.column(j);
            let lse = log_sum_exp((0..m).map(|i| (col[i] + f[i]) * inv_eps));
            g[j] = eps_log_b[j] + -eps * lse;
        }
        iterations_run = it;
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: it,
                detail: "dual potential is not finite".into(),
            });
        }
        if cfg.trace || cfg.tolerance.is_some() {
            let table = plan_table(&neg_cost, &f, &g, inv_eps, cfg.underflow_guard);
            let plan = TransportPlan::from_table(table)?;
            let err = plan.marginal_error(a, b);
            if cfg.trace {
                let objective = plan.expected_cost(cost) - eps * entropy_of(plan.table())?;
                trace.push(TraceRow {
                    iter: it,
                    objective,
                    marginal_err: err,
                });
            }
            if cfg.tolerance.is_some_and(|tol| err < tol) {
                break;
            }
        }
    }

    let table = plan_table(&neg_cost, &f, &g, inv_eps, cfg.underflow_guard);
    let plan = TransportPlan::from_table(table)?;
    let transport_cost = plan.expected_cost(cost);
    Ok(SinkhornSolution {
        potentials_f: f,
        potentials_g: g,
        plan,
        transport_cost,
        iterations_run,
        trace,
    })
}

fn plan_table(neg_cost: &Array2<f64>, f: &[f64], g: &[f64], inv_eps: f64, guard: f64) -> Array2<f64> {
    Array2::from_shape_fn(neg_cost.dim(), |(i, j)| {
        let logit = (neg_cost[[i, j]] + f[i] + g[j]) * inv_eps;
        if logit < -guard {
            0.0
        } else {
            logit.exp()
        }
    })
}

/// Entropic transport between two discrete path measures for a precomputed cost.
pub fn sinkhorn_solve(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    sinkhorn_weights(mu.weights(), nu.weights(), &cost.entries, cfg)
}

/// A transport cost on paths.
pub trait PathCost {
    fn cost(&self, x: &Path, y: &Path) -> Result<f64>;

    fn matrix(&self, xs: &PathBatch, ys: &PathBatch) -> Result<CostMatrix> {
        let mut entries = Array2::zeros((xs.len(), ys.len()));
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                entries[[i, j]] = self.cost(x, y)?;
            }
        }
        Ok(CostMatrix::new(entries, crate::path::CostId::Custom("path-cost".into())))
    }
}

/// The squared Euclidean ground cost summed over time.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredEuclidean;

impl PathCost for SquaredEuclidean {
    fn cost(&self, x: &Path, y: &Path) -> Result<f64> {
        crate::path::ground_cost(x, y)
    }

    fn matrix(&self, xs: &PathBatch, ys: &PathBatch) -> Result<CostMatrix> {
        crate::path::cost_matrix(xs, ys)
    }
}

/// The value `W_{c,eps}(mu, nu)`: transport cost of the entropic optimizer.
pub fn entropic_cost(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost_fn: &dyn PathCost,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    let c = cost_fn.matrix(mu.atoms(), nu.atoms())?;
    Ok(sinkhorn_solve(mu, nu, &c, cfg)?.transport_cost)
}

/// Which debiasing of the single-pair Sinkhorn divergence to use.
///
/// The two conventions differ only in the weight on the cross term; both are
/// in use in the literature and neither is preferred here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceMode {
    /// `2 W(mu, nu) - W(mu, mu) - W(nu, nu)`.
    #[default]
    Debiased,
    /// `W(mu, nu) - W(mu, mu) - W(nu, nu)`.
    SingleCross,
}

impl DivergenceMode {
    pub fn cross_weight(self) -> f64 {
        match self {
            DivergenceMode::Debiased => 2.0,
            DivergenceMode::SingleCross => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceMode::Debiased => "debiased",
            DivergenceMode::SingleCross => "single_cross",
        }
    }
}

impl std::str::FromStr for DivergenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "debiased" => Ok(DivergenceMode::Debiased),
            "single_cross" => Ok(DivergenceMode::SingleCross),
            other => Err(Error::InvalidArgument(format!(
                "unknown divergence mode `{other}` (expected debiased | single_cross)"
            ))),
        }
    }
}

/// Sinkhorn divergence between two measures. When `mu` and `nu` are the same
/// object in [`DivergenceMode::Debiased`] mode the result is exactly zero
/// without running the solver.
pub fn sinkhorn_divergence(
    mu: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    cost_fn: &dyn PathCost,
    cfg: &SinkhornConfig,
    mode: DivergenceMode,
) -> Result<f64> {
    cfg.validate()?;
    if std::ptr::eq(mu, nu) && mode == DivergenceMode::Debiased {
        return Ok(0.0);
    }
    let cross = entropic_cost(mu, nu, cost_fn, cfg)?;
    let self_mu = entropic_cost(mu, mu, cost_fn, cfg)?;
    let self_nu = entropic_cost(nu, nu, cost_fn, cfg)?;
    Ok(mode.cross_weight() * cross - self_mu - self_nu)
}

/// Mixed divergence over two real batches and two generated batches:
/// `W(mu,nu) + W(mu',nu') - W(mu,mu') - W(nu,nu')`.
pub fn mixed_sinkhorn_divergence(
    mu: &DiscretePathMeasure,
    mu_prime: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    nu_prime: &DiscretePathMeasure,
    cost_fn: &dyn PathCost,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    let w = |a, b| entropic_cost(a, b, cost_fn, cfg);
    Ok(w(mu, nu)? + w(mu_prime, nu_prime)? - w(mu, mu_prime)? - w(nu, nu_prime)?)
}

/// Six-term divergence:
/// `W(mu,nu) + W(mu',nu) + W(mu,nu') + W(mu',nu') - 2 W(mu,mu') - 2 W(nu,nu')`.
pub fn sinkhorn_divergence_w6(
    mu: &DiscretePathMeasure,
    mu_prime: &DiscretePathMeasure,
    nu: &DiscretePathMeasure,
    nu_prime: &DiscretePathMeasure,
    cost_fn: &dyn PathCost,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    let w = |a, b| entropic_cost(a, b, cost_fn, cfg);
    Ok(w(mu, nu)? + w(mu_prime, nu)? + w(mu, nu_prime)? + w(mu_prime, nu_prime)?
        - 2.0 * w(mu, mu_prime)?
        - 2.0 * w(nu, nu_prime)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::cost_matrix;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_measure(points: &[f64], weights: &[f64]) -> DiscretePathMeasure {
        let batch = PathBatch::new(points.iter().map(|&p| Path::scalar(&[p]).unwrap()).collect())
            .unwrap();
        DiscretePathMeasure::new(batch, weights.to_vec()).unwrap()
    }

    pub(crate) fn random_measure(rng: &mut ChaCha8Rng, m: usize, t: usize, d: usize) -> DiscretePathMeasure {
        let paths = (0..m)
            .map(|_| Path::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        DiscretePathMeasure::new(PathBatch::new(paths).unwrap(), raw.iter().map(|w| w / total).collect())
            .unwrap()
    }

    #[test]
    fn entropy_examples() {
        let point = TransportPlan::from_table(array![[0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(shannon_entropy(&point).unwrap(), 0.0);
        let uniform = TransportPlan::from_table(Array2::from_elem((2, 2), 0.25)).unwrap();
        assert!((shannon_entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..1.0));
        let table = &raw / raw.sum();
        let mut naive = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let p: f64 = table[[i, j]];
                naive += -p * p.ln();
            }
        }
        let plan = TransportPlan::from_table(table).unwrap();
        assert!((shannon_entropy(&plan).unwrap() - naive).abs() < 1e-14);
    }

    #[test]
    fn entropy_rejects_negative_entries() {
        assert!(matches!(entropy_of(&array![[1.5, -0.5]]), Err(Error::Domain(_))));
    }

    #[test]
    fn single_atom_transport() {
        let mu = scalar_measure(&[1.0], &[1.0]);
        let c = cost_matrix(mu.atoms(), mu.atoms()).unwrap();
        let sol = sinkhorn_solve(&mu, &mu, &c, &SinkhornConfig::default()).unwrap();
        assert!((sol.plan.table()[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(sol.transport_cost, 0.0);
    }

    /// Minimizes `<pi, C> - eps H(pi)` over the symmetric family
    /// `[[p, 1/2-p], [1/2-p, p]]` by bisection on the derivative in `p`.
    fn symmetric_two_point_oracle(off_diag: f64, eps: f64) -> f64 {
        let slope = |p: f64| -2.0 * off_diag + 2.0 * eps * (p.ln() - (0.5 - p).ln());
        let (mut lo, mut hi) = (0.0_f64, 0.5_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        2.0 * (0.5 - p) * off_diag
    }

    #[test]
    fn two_point_symmetric_matches_scan_oracle() {
        let mu = scalar_measure(&[0.0, 2.0], &[0.5, 0.5]);
        let c = cost_matrix(mu.atoms(), mu.atoms()).unwrap();
        assert_eq!(c.entries, array![[0.0, 4.0], [4.0, 0.0]]);
        let cfg = SinkhornConfig::new(1.0, 1000).unwrap();
        let sol = sinkhorn_solve(&mu, &mu, &c, &cfg).unwrap();
        let expected = symmetric_two_point_oracle(4.0, 1.0);
        assert!(
            (sol.transport_cost - expected).abs() < 1e-9,
            "{} vs {}",
            sol.transport_cost,
            expected
        );
    }

    #[test]
    fn large_epsilon_gives_product_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu = random_measure(&mut rng, 4, 3, 2);
        let nu = random_measure(&mut rng, 5, 3, 2);
        let c = cost_matrix(mu.atoms(), nu.atoms()).unwrap();
        let sol = sinkhorn_solve(&mu, &nu, &c, &SinkhornConfig::new(1e4, 50).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let prod = mu.weights()[i] * nu.weights()[j];
                assert!((sol.plan.table()[[i, j]] - prod).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mu = scalar_measure(&[0.0, 1.0], &[0.5, 0.5]);
        let c = cost_matrix(mu.atoms(), mu.atoms()).unwrap();
        assert!(SinkhornConfig::new(0.0, 10).is_err());
        assert!(SinkhornConfig::new(1.0, 0).is_err());
        let bad = SinkhornConfig { epsilon: -1.0, ..Default::default() };
        assert!(sinkhorn_solve(&mu, &mu, &c, &bad).is_err());
        let mut nan = c.clone();
        nan.entries[[0, 1]] = f64::NAN;
        assert!(matches!(
            sinkhorn_solve(&mu, &mu, &nan, &SinkhornConfig::default()),
            Err(Error::Domain(_))
        ));
        let zero = scalar_measure(&[0.0, 1.0], &[1.0, 0.0]);
        assert!(sinkhorn_solve(&zero, &mu, &c, &SinkhornConfig::default()).is_err());
        assert_eq!(zero.without_null_atoms().len(), 1);
    }

    #[test]
    fn overflowing_potentials_report_the_iteration() {
        let mu = scalar_measure(&[0.0, 1.0], &[0.5, 0.5]);
        let c = CostMatrix::new(array![[0.0, f64::INFINITY], [f64::INFINITY, f64::INFINITY]], crate::path::CostId::SquaredEuclidean);
        let err = sinkhorn_solve(&mu, &mu, &c, &SinkhornConfig::new(1.0, 5).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn marginals_are_feasible_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let eps = rng.random_range(0.1..2.0);
            let mu = random_measure(&mut rng, 8, 3, 2);
            let nu = random_measure(&mut rng, 8, 3, 2);
            let c = cost_matrix(mu.atoms(), nu.atoms()).unwrap();
            let sol = sinkhorn_solve(&mu, &nu, &c, &SinkhornConfig::new(eps, 300).unwrap()).unwrap();
            assert!(sol.plan.marginal_error(mu.weights(), nu.weights()) < 1e-6);
            assert!(sol.plan.table().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn tolerance_mode_stops_early_and_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = random_measure(&mut rng, 6, 2, 1);
        let nu = random_measure(&mut rng, 6, 2, 1);
        let c = cost_matrix(mu.atoms(), nu.atoms()).unwrap();
        let cfg = SinkhornConfig::new(0.5, 10_000).unwrap().with_tolerance(1e-9).with_trace();
        let sol = sinkhorn_solve(&mu, &nu, &c, &cfg).unwrap();
        assert!(sol.iterations_run < 10_000);
        assert_eq!(sol.trace.len(), sol.iterations_run);
        assert!(sol.trace.last().unwrap().marginal_err < 1e-9);
        let mut buf = Vec::new();
        write_trace_csv(&sol.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,objective,marginal_err\n"));
        assert_eq!(text.lines().count(), sol.trace.len() + 1);
    }

    #[test]
    fn divergence_of_a_measure_with_itself_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = random_measure(&mut rng, 5, 3, 1);
        let d = sinkhorn_divergence(&mu, &mu, &SquaredEuclidean, &SinkhornConfig::default(), DivergenceMode::Debiased)
            .unwrap();
        assert_eq!(d, 0.0);
        let copy = mu.clone();
        let d = sinkhorn_divergence(&mu, &copy, &SquaredEuclidean, &SinkhornConfig::default(), DivergenceMode::Debiased)
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn divergence_between_point_masses() {
        let mu = scalar_measure(&[0.0], &[1.0]);
        let nu = scalar_measure(&[1.0], &[1.0]);
        let cfg = SinkhornConfig::new(0.1, 100).unwrap();
        let d = sinkhorn_divergence(&mu, &nu, &SquaredEuclidean, &cfg, DivergenceMode::Debiased).unwrap();
        assert!((d - 2.0).abs() < 1e-6);
        let single = sinkhorn_divergence(&mu, &nu, &SquaredEuclidean, &cfg, DivergenceMode::SingleCross).unwrap();
        assert!((single - 1.0).abs() < 1e-6);
    }

    #[test]
    fn divergence_matches_three_separate_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mu = random_measure(&mut rng, 4, 3, 2);
        let nu = random_measure(&mut rng, 4, 3, 2);
        let cfg = SinkhornConfig::new(0.8, 100).unwrap();
        let solve = |a: &DiscretePathMeasure, b: &DiscretePathMeasure| {
            let c = cost_matrix(a.atoms(), b.atoms()).unwrap();
            sinkhorn_solve(a, b, &c, &cfg).unwrap().transport_cost
        };
        let expected = 2.0 * solve(&mu, &nu) - solve(&mu, &mu) - solve(&nu, &nu);
        let got = sinkhorn_divergence(&mu, &nu, &SquaredEuclidean, &cfg, DivergenceMode::Debiased).unwrap();
        assert!((got - expected).abs() < 1e-6);
        assert!(got >= -1e-8);
    }

    #[test]
    fn mixed_and_six_term_cancellations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mu = random_measure(&mut rng, 4, 2, 1);
        let mu2 = random_measure(&mut rng, 4, 2, 1);
        let cfg = SinkhornConfig::new(0.8, 100).unwrap();
        let e = &SquaredEuclidean;
        assert_eq!(mixed_sinkhorn_divergence(&mu, &mu, &mu, &mu, e, &cfg).unwrap(), 0.0);
        assert_eq!(sinkhorn_divergence_w6(&mu, &mu, &mu, &mu, e, &cfg).unwrap(), 0.0);
        // generated batches both equal to the first real batch
        assert!(mixed_sinkhorn_divergence(&mu, &mu2, &mu, &mu, e, &cfg).unwrap().abs() < 1e-9);
        assert!(sinkhorn_divergence_w6(&mu, &mu2, &mu, &mu, e, &cfg).unwrap().abs() < 1e-9);
        // swapped generated batches
        assert!(mixed_sinkhorn_divergence(&mu, &mu2, &mu2, &mu, e, &cfg).unwrap().abs() < 1e-12);
        // nu = mu, nu' = mu' is *not* a cancellation: both variants equal minus
        // the debiased divergence between the two real batches
        let d = sinkhorn_divergence(&mu, &mu2, e, &cfg, DivergenceMode::Debiased).unwrap();
        let mixed = mixed_sinkhorn_divergence(&mu, &mu2, &mu, &mu2, e, &cfg).unwrap();
        let six = sinkhorn_divergence_w6(&mu, &mu2, &mu, &mu2, e, &cfg).unwrap();
        assert!((mixed + d).abs() < 1e-9, "{mixed} vs {d}");
        assert!((six + d).abs() < 1e-9);
    }
}
