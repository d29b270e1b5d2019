//! Paths, batches of paths, discrete path measures and the squared ground cost.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Absolute tolerance for measure weights summing to one after construction.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Weights within this distance of unit mass are renormalized; others are rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// A single `T x d` sequence, stored row-major as time by feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    values: Array2<f64>,
}

impl Path {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (t, d) = values.dim();
        if t == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "path must have at least one step and one feature, got {t}x{d}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("path entries must be finite".into()));
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(Self { values })
    }

    pub fn from_vec(steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((steps, dim), data)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(values)
    }

    /// One-dimensional path from a list of scalars.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// Row-major flat view (`steps * dim` entries).
    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("paths are kept in standard layout")
    }

    /// The first `len` steps, `x_{1:len}`.
    pub fn prefix(&self, len: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![..len, ..])
    }

    /// Steps `start..end` (zero-based, end exclusive).
    pub fn window(&self, start: usize, end: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![start..end, ..])
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// A non-empty list of paths sharing one `(T, d)` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    paths: Vec<Path>,
}

impl PathBatch {
    pub fn new(paths: Vec<Path>) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::InvalidArgument("a batch needs at least one path".into()))?;
        let shape = (first.steps(), first.dim());
        for (i, p) in paths.iter().enumerate() {
            if (p.steps(), p.dim()) != shape {
                return Err(Error::dims(
                    format!("{}x{} for every path", shape.0, shape.1),
                    format!("{}x{} at index {i}", p.steps(), p.dim()),
                ));
            }
        }
        Ok(Self { paths })
    }

    /// Builds a batch from a row-major `[m][T][d]` buffer.
    pub fn from_flat(count: usize, steps: usize, dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != count * steps * dim {
            return Err(Error::dims(count * steps * dim, data.len()));
        }
        let stride = steps * dim;
        let paths = (0..count)
            .map(|i| Path::from_vec(steps, dim, data[i * stride..(i + 1) * stride].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(paths)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.paths[0].steps()
    }

    pub fn dim(&self) -> usize {
        self.paths[0].dim()
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn get(&self, i: usize) -> &Path {
        &self.paths[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Path> {
        self.paths.iter()
    }

    pub fn into_paths(self) -> Vec<Path> {
        self.paths
    }

    /// All paths concatenated row-major into one buffer of `m * T * d` values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.paths
            .iter()
            .flat_map(|p| p.as_slice().iter().copied())
            .collect()
    }

    /// A new batch holding the listed members (indices may repeat).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let paths = indices
            .iter()
            .map(|&i| {
                self.paths
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(paths)
    }

    pub(crate) fn check_compatible(&self, other: &PathBatch) -> Result<()> {
        if (self.steps(), self.dim()) != (other.steps(), other.dim()) {
            return Err(Error::dims(
                format!("{}x{}", self.steps(), self.dim()),
                format!("{}x{}", other.steps(), other.dim()),
            ));
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a PathBatch {
    type Item = &'a Path;
    type IntoIter = std::slice::Iter<'a, Path>;
    fn into_iter(self) -> Self::IntoIter {
        self.paths.iter()
    }
}

/// A weighted finite set of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePathMeasure {
    atoms: PathBatch,
    weights: Vec<f64>,
}

impl DiscretePathMeasure {
    /// Weights must be nonnegative and sum to one within [`RENORMALIZE_TOL`];
    /// they are renormalized exactly on construction.
    pub fn new(atoms: PathBatch, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != atoms.len() {
            return Err(Error::dims(
                format!("{} weights", atoms.len()),
                weights.len(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOL {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { atoms, weights })
    }

    /// The empirical measure `1/m sum_i delta_{x^i}`.
    pub fn uniform(atoms: PathBatch) -> Self {
        let m = atoms.len();
        Self {
            atoms,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn atoms(&self) -> &PathBatch {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.atoms.steps()
    }

    pub fn dim(&self) -> usize {
        self.atoms.dim()
    }

    /// Drops zero-weight atoms (the entropic solver needs strictly positive mass).
    pub fn without_null_atoms(&self) -> Self {
        if self.weights.iter().all(|&w| w > 0.0) {
            return self.clone();
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        let atoms = self.atoms.select(&keep).expect("at least one atom carries mass");
        let weights = keep.iter().map(|&i| self.weights[i]).collect();
        Self { atoms, weights }
    }

    /// Weighted mean path.
    pub fn mean_path(&self) -> Array2<f64> {
        let mut acc = Array2::zeros((self.steps(), self.dim()));
        for (p, &w) in self.atoms.iter().zip(&self.weights) {
            acc.scaled_add(w, &p.values());
        }
        acc
    }
}

/// Identifies which cost produced a [`CostMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CostId {
    SquaredEuclidean,
    Causal,
    Custom(String),
}

/// Dense `m x m'` table of pairwise transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub entries: Array2<f64>,
    pub cost: CostId,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>, cost: CostId) -> Self {
        Self { entries, cost }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }
}

/// `sum_t sum_j (x_tj - y_tj)^2`.
pub fn ground_cost(x: &Path, y: &Path) -> Result<f64> {
    if (x.steps(), x.dim()) != (y.steps(), y.dim()) {
        return Err(Error::dims(
            format!("{}x{}", x.steps(), x.dim()),
            format!("{}x{}", y.steps(), y.dim()),
        ));
    }
    Ok(squared_distance(x.as_slice(), y.as_slice()))
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (u, v) in a.iter().zip(b) {
        let diff = u - v;
        acc += diff * diff;
    }
    acc
}

/// Tabulates [`ground_cost`] over all atom pairs.
pub fn cost_matrix(xs: &PathBatch, ys: &PathBatch) -> Result<CostMatrix> {
    xs.check_compatible(ys)?;
    let entries = Array2::from_shape_fn((xs.len(), ys.len()), |(i, j)| {
        squared_distance(xs.get(i).as_slice(), ys.get(j).as_slice())
    });
    Ok(CostMatrix::new(entries, CostId::SquaredEuclidean))
}

/// Reassembles a full path from a context `x_{1:k}` and a prediction `x_{k+1:T}`.
pub fn concat_condition(context: ArrayView2<f64>, prediction: ArrayView2<f64>) -> Result<Path> {
    let k = context.nrows();
    let horizon = prediction.nrows();
    if k == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(format!(
            "context length {k} must satisfy 1 <= k <= T-1 (prediction has {horizon} steps)"
        )));
    }
    if context.ncols() != prediction.ncols() {
        return Err(Error::dims(
            format!("{} features", context.ncols()),
            format!("{} features", prediction.ncols()),
        ));
    }
    let values = ndarray::concatenate(Axis(0), &[context, prediction])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Path::new(values)
}
