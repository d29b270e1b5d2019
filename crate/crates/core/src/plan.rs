use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// A joint probability table over two atom sets. The stored marginals are the
/// table's own row and column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    table: Array2<f64>,
    marginal_mu: Vec<f64>,
    marginal_nu: Vec<f64>,
}

impl TransportPlan {
    pub fn from_table(table: Array2<f64>) -> Result<Self> {
        if table.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("plan entries must be finite and nonnegative".into()));
        }
        let marginal_mu = table.sum_axis(Axis(1)).to_vec();
        let marginal_nu = table.sum_axis(Axis(0)).to_vec();
        Ok(Self {
            table,
            marginal_mu,
            marginal_nu,
        })
    }

    /// The independent coupling `mu ⊗ nu`.
    pub fn product(mu: &[f64], nu: &[f64]) -> Self {
        let table = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| mu[i] * nu[j]);
        Self::from_table(table).expect("product of probability vectors")
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn marginal_mu(&self) -> &[f64] {
        &self.marginal_mu
    }

    pub fn marginal_nu(&self) -> &[f64] {
        &self.marginal_nu
    }

    pub fn shape(&self) -> (usize, usize) {
        self.table.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.table.sum()
    }

    /// `sum_ij pi_ij C_ij`.
    pub fn expected_cost(&self, cost: &Array2<f64>) -> f64 {
        self.table.iter().zip(cost.iter()).map(|(p, c)| p * c).sum()
    }

    /// L1 distance between the plan's marginals and the target weights.
    pub fn marginal_error(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let rows: f64 = self.marginal_mu.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum();
        let cols: f64 = self.marginal_nu.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum();
        rows + cols
    }
}
