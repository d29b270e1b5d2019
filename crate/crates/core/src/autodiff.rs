//! Reverse-mode differentiation over dense matrices.
//!
//! Every value on a [`Tape`] is an `rows x cols` matrix; scalars are `1 x 1`.
//! Operations record their inputs and the tape is swept backwards once by
//! [`Tape::backward`]. The first primitive that produces a non-finite value,
//! forward or backward, is remembered and reported by [`Tape::check`].

use std::cell::RefCell;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::sinkhorn::SinkhornConfig;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct SinkhornCache {
    inv_eps: f64,
    neg_cost: Array2<f64>,
    plan: Array2<f64>,
    // f after sweep l, for l = 1..=L
    f_hist: Vec<Vec<f64>>,
    // g before sweep l, for l = 1..=L, then the final g
    g_hist: Vec<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Recip(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    LseRows(Var),
    LseCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
    Sinkhorn(Var, Box<SinkhornCache>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Recip(_) => "recip",
            Op::SumAll(_) => "sum_all",
            Op::RowSums(_) => "row_sums",
            Op::ColSums(_) => "col_sums",
            Op::LseRows(_) => "lse_rows",
            Op::LseCols(_) => "lse_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows(..) => "select_rows",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Sinkhorn(..) => "sinkhorn",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<&'static str>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn lse_axis(a: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let lanes = a.lanes(axis);
    let out: Vec<f64> = lanes
        .into_iter()
        .map(|lane| crate::sinkhorn::log_sum_exp(lane.iter().copied()))
        .collect();
    match axis {
        Axis(1) => Array2::from_shape_vec((a.nrows(), 1), out).expect("row count"),
        _ => Array2::from_shape_vec((1, a.ncols()), out).expect("col count"),
    }
}

fn pairwise_sq_dist(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        crate::path::squared_distance(
            x.row(i).as_slice().expect("standard layout"),
            y.row(j).as_slice().expect("standard layout"),
        )
    })
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let value = standard(value);
        if self.fault.borrow().is_none() && value.iter().any(|v| !v.is_finite()) {
            *self.fault.borrow_mut() = Some(op.name());
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Records an input. Gradients are available for every leaf.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Errors if any primitive so far produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match *self.fault.borrow() {
            Some(primitive) => Err(Error::NonFinite { primitive }),
            None => Ok(()),
        }
    }

    fn unary(&self, a: Var, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, op)
    }

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn shift(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    /// `a + row`, broadcasting a `1 x n` row over the rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row shape");
        self.binary(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// `a * row` elementwise, broadcasting a `1 x n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "mul_row shape");
        self.binary(a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dimension");
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    /// `a . b^T`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_t inner dimension");
        self.binary(a, b, |x, y| x.dot(&y.t()), Op::MatMulT(a, b))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())), Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::ln), Op::Ln(a))
    }

    /// Square root; its derivative at 0 is taken as 0.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::sqrt), Op::Sqrt(a))
    }

    /// Absolute value; its derivative at 0 is taken as 0.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::abs), Op::Abs(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| 1.0 / v), Op::Recip(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::SumAll(a))
    }

    /// `m x 1` sums across each row.
    pub fn row_sums(&self, a: Var) -> Var {
        self.unary(a, |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::RowSums(a))
    }

    /// `1 x n` sums down each column.
    pub fn col_sums(&self, a: Var) -> Var {
        self.unary(a, |x| x.sum_axis(Axis(0)).insert_axis(Axis(0)), Op::ColSums(a))
    }

    /// `m x 1` log-sum-exp across each row.
    pub fn lse_rows(&self, a: Var) -> Var {
        self.unary(a, |x| lse_axis(x, Axis(1)), Op::LseRows(a))
    }

    /// `1 x n` log-sum-exp down each column.
    pub fn lse_cols(&self, a: Var) -> Var {
        self.unary(a, |x| lse_axis(x, Axis(0)), Op::LseCols(a))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.shape(a).1, "slice_cols range");
        self.unary(
            a,
            |x| x.slice(ndarray::s![.., start..end]).to_owned(),
            Op::SliceCols(a, start),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Var {
        self.unary(a, |x| x.select(Axis(0), indices), Op::SelectRows(a, indices.to_vec()))
    }

    /// `out_ij = |x_i - y_j|^2` between the rows of `x` and `y`.
    pub fn pairwise_sq_dist(&self, x: Var, y: Var) -> Var {
        assert_eq!(self.shape(x).1, self.shape(y).1, "pairwise_sq_dist width");
        self.binary(x, y, pairwise_sq_dist, Op::PairwiseSqDist(x, y))
    }

    /// Transport cost `sum pi_ij C_ij` of `cfg.iterations` log-domain Sinkhorn
    /// sweeps on the cost `c`, as a `1 x 1` value. The forward arithmetic is
    /// identical to [`crate::sinkhorn::sinkhorn_weights`]; the adjoint is that
    /// of the unrolled sweeps. Weights are constants.
    pub fn sinkhorn_cost(&self, c: Var, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<Var> {
        cfg.validate()?;
        let cost = self.value(c);
        let (m, n) = cost.dim();
        if a.len() != m || b.len() != n {
            return Err(Error::dims(format!("{}x{}", a.len(), b.len()), format!("{m}x{n}")));
        }
        if a.iter().chain(b).any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be strictly positive".into()));
        }
        let eps = cfg.epsilon;
        let inv_eps = 1.0 / eps;
        let eps_log_a: Vec<f64> = a.iter().map(|w| eps * w.ln()).collect();
        let eps_log_b: Vec<f64> = b.iter().map(|w| eps * w.ln()).collect();
        let neg_cost = cost.mapv(|v| -v);
        let mut f = vec![0.0; m];
        let mut g = vec![0.0; n];
        let mut f_hist = Vec::with_capacity(cfg.iterations);
        let mut g_hist = Vec::with_capacity(cfg.iterations + 1);
        for _ in 0..cfg.iterations {
            g_hist.push(g.clone());
            for i in 0..m {
                let row = neg_cost.row(i);
                let lse = crate::sinkhorn::log_sum_exp((0..n).map(|j| (row[j] + g[j]) * inv_eps));
                f[i] = eps_log_a[i] + -eps * lse;
            }
            f_hist.push(f.clone());
            for j in 0..n {
                let col = neg_cost.column(j);
                let lse = crate::sinkhorn::log_sum_exp((0..m).map(|i| (col[i] + f[i]) * inv_eps));
                g[j] = eps_log_b[j] + -eps * lse;
            }
        }
        g_hist.push(g.clone());
        let guard = cfg.underflow_guard;
        let plan = Array2::from_shape_fn((m, n), |(i, j)| {
            let logit = (neg_cost[[i, j]] + f[i] + g[j]) * inv_eps;
            if logit < -guard {
                0.0
            } else {
                logit.exp()
            }
        });
        let value: f64 = plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
        let cache = SinkhornCache {
            inv_eps,
            neg_cost,
            plan,
            f_hist,
            g_hist,
        };
        Ok(self.push(Array2::from_elem((1, 1), value), Op::Sinkhorn(c, Box::new(cache))))
    }

    /// Adjoints of the scalar `out` with respect to every recorded value.
    pub fn backward(&self, out: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        let mut fault: Option<&'static str> = None;

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let node = &nodes[idx];
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            if fault.is_none() && g.iter().any(|v| !v.is_finite()) {
                fault = Some(node.op.name());
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::Shift(a) => acc(&mut grads, *a, g.clone()),
                Op::AddRow(a, r) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, r) => {
                    acc(&mut grads, *a, &g * val(*r));
                    let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Tanh(a) => acc(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t)),
                Op::Sigmoid(a) => acc(&mut grads, *a, &g * &y.mapv(|s| s * (1.0 - s))),
                Op::Exp(a) => acc(&mut grads, *a, &g * y),
                Op::Ln(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::Sqrt(a) => {
                    let d = y.mapv(|r| if r == 0.0 { 0.0 } else { 0.5 / r });
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Abs(a) => {
                    let d = val(*a).mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Recip(a) => acc(&mut grads, *a, -(&g * &y.mapv(|r| r * r))),
                Op::SumAll(a) => acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::RowSums(a) => {
                    let shape = val(*a).dim();
                    acc(&mut grads, *a, g.broadcast(shape).expect("column").to_owned());
                }
                Op::ColSums(a) => {
                    let shape = val(*a).dim();
                    acc(&mut grads, *a, g.broadcast(shape).expect("row").to_owned());
                }
                Op::LseRows(a) => {
                    let x = val(*a);
                    let d = Array2::from_shape_fn(x.dim(), |(i, j)| g[[i, 0]] * (x[[i, j]] - y[[i, 0]]).exp());
                    acc(&mut grads, *a, d);
                }
                Op::LseCols(a) => {
                    let x = val(*a);
                    let d = Array2::from_shape_fn(x.dim(), |(i, j)| g[[0, j]] * (x[[i, j]] - y[[0, j]]).exp());
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(ndarray::s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::SelectRows(a, indices) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (r, &src) in indices.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::PairwiseSqDist(x, yv) => {
                    let (xv, yy) = (val(*x), val(*yv));
                    let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let gx = (xv * &rs - g.dot(yy)) * 2.0;
                    let gy = (yy * &cs - g.t().dot(xv)) * 2.0;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *yv, gy);
                }
                Op::Sinkhorn(c, cache) => {
                    acc(&mut grads, *c, sinkhorn_adjoint(cache, g[[0, 0]]));
                }
            }
        }
        drop(nodes);
        if let Some(name) = fault {
            self.fault.borrow_mut().get_or_insert(name);
        }
        Gradients {
            grads,
            shapes: self.nodes.borrow().iter().map(|n| n.value.dim()).collect(),
        }
    }
}

/// Adjoint of the unrolled Sinkhorn transport cost with respect to the cost matrix.
fn sinkhorn_adjoint(cache: &SinkhornCache, seed: f64) -> Array2<f64> {
    let SinkhornCache {
        inv_eps,
        neg_cost,
        plan,
        f_hist,
        g_hist,
    } = cache;
    let inv_eps = *inv_eps;
    let (m, n) = neg_cost.dim();
    let cost = neg_cost.mapv(|v| -v);

    // value = sum pi C with pi = exp((-C + f + g) / eps)
    let weighted = plan * &cost;
    let mut gc = (plan - &weighted * inv_eps) * seed;
    let mut gf: Vec<f64> = weighted.sum_axis(Axis(1)).iter().map(|v| v * inv_eps * seed).collect();
    let mut gg: Vec<f64> = weighted.sum_axis(Axis(0)).iter().map(|v| v * inv_eps * seed).collect();

    let mut soft = Array2::<f64>::zeros((m, n));
    for l in (0..f_hist.len()).rev() {
        let f = &f_hist[l];
        let g_prev = &g_hist[l];
        // g_j = eps ln b_j - eps LSE_i((-C_ij + f_i) / eps)
        for j in 0..n {
            let logits: Vec<f64> = (0..m).map(|i| (neg_cost[[i, j]] + f[i]) * inv_eps).collect();
            let lse = crate::sinkhorn::log_sum_exp(logits.iter().copied());
            for i in 0..m {
                soft[[i, j]] = (logits[i] - lse).exp();
            }
        }
        for i in 0..m {
            for j in 0..n {
                let w = gg[j] * soft[[i, j]];
                gc[[i, j]] += w;
                gf[i] -= w;
            }
        }
        // f_i = eps ln a_i - eps LSE_j((-C_ij + g_j) / eps)
        for i in 0..m {
            let logits: Vec<f64> = (0..n).map(|j| (neg_cost[[i, j]] + g_prev[j]) * inv_eps).collect();
            let lse = crate::sinkhorn::log_sum_exp(logits.iter().copied());
            for j in 0..n {
                soft[[i, j]] = (logits[j] - lse).exp();
            }
        }
        gg.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            for j in 0..n {
                let w = gf[i] * soft[[i, j]];
                gc[[i, j]] += w;
                gg[j] -= w;
            }
        }
        gf.iter_mut().for_each(|v| *v = 0.0);
    }
    gc
}

/// Evaluates `build` on a fresh tape with `inputs` as leaves and returns the
/// scalar value and its gradient with respect to each input.
pub fn forward_backward<F>(inputs: &[Array2<f64>], build: F) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: FnOnce(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&tape, &vars)?;
    tape.check()?;
    let value = tape.scalar_value(out);
    let grads = tape.backward(out);
    tape.check()?;
    Ok((value, vars.iter().map(|v| grads.wrt(*v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinkhorn::sinkhorn_weights;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences of a scalar function of one matrix.
    fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut up = x.clone();
            up[[r, c]] += h;
            let mut down = x.clone();
            down[[r, c]] -= h;
            out[[r, c]] = (f(&up) - f(&down)) / (2.0 * h);
        }
        out
    }

    fn close(a: f64, b: f64, rtol: f64) -> bool {
        (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1e-3)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(lo..hi))
    }

    /// Checks one scalar-valued tape program of a single matrix input.
    fn check(build: &dyn Fn(&Tape, Var) -> Var, x: &Array2<f64>, rtol: f64) {
        let value_of = |x: &Array2<f64>| {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            let out = build(&t, v);
            t.scalar_value(out)
        };
        let (_, grads) = forward_backward(std::slice::from_ref(x), |t, v| Ok(build(t, v[0]))).unwrap();
        let numeric = numeric_grad(&value_of, x, 1e-5);
        for (a, b) in grads[0].iter().zip(numeric.iter()) {
            assert!(close(*a, *b, rtol), "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn square_at_three() {
        let (v, g) = forward_backward(&[array![[3.0]]], |t, x| Ok(t.mul(x[0], x[0]))).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0], array![[6.0]]);
    }

    #[test]
    fn linear_functions_have_constant_gradient() {
        let w = array![[1.0, -2.0], [0.5, 3.0]];
        let grad_at = |x: Array2<f64>| {
            forward_backward(&[x], |t, v| {
                let wv = t.leaf(w.clone());
                Ok(t.sum_all(t.mul(v[0], wv)))
            })
            .unwrap()
            .1[0]
                .clone()
        };
        assert_eq!(grad_at(array![[0.0, 0.0], [0.0, 0.0]]), w);
        assert_eq!(grad_at(array![[5.0, -1.0], [2.0, 9.0]]), w);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        type Prog = Box<dyn Fn(&Tape, Var) -> Var>;
        let programs: Vec<(&str, Prog)> = vec![
            ("tanh", Box::new(|t, x| t.sum_all(t.tanh(x)))),
            ("sigmoid", Box::new(|t, x| t.sum_all(t.mul(t.sigmoid(x), x)))),
            ("exp", Box::new(|t, x| t.sum_all(t.exp(t.scale(x, 0.5))))),
            ("ln", Box::new(|t, x| t.sum_all(t.ln(t.shift(t.mul(x, x), 1.0))))),
            ("sqrt", Box::new(|t, x| t.sum_all(t.sqrt(t.shift(t.mul(x, x), 0.5))))),
            ("abs", Box::new(|t, x| t.sum_all(t.mul(t.abs(x), x)))),
            ("recip", Box::new(|t, x| t.sum_all(t.recip(t.shift(t.mul(x, x), 1.0))))),
            ("lse_rows", Box::new(|t, x| t.sum_all(t.mul(t.lse_rows(x), t.lse_rows(x))))),
            ("lse_cols", Box::new(|t, x| t.sum_all(t.tanh(t.lse_cols(x))))),
            ("row_col_sums", Box::new(|t, x| {
                let r = t.row_sums(t.mul(x, x));
                let c = t.col_sums(t.tanh(x));
                t.add(t.sum_all(t.mul(r, r)), t.sum_all(t.mul(c, c)))
            })),
            ("matmul", Box::new(|t, x| {
                let xx = t.matmul(x, t.matmul_t(x, x));
                t.sum_all(t.tanh(xx))
            })),
            ("broadcast", Box::new(|t, x| {
                let row = t.slice_cols(t.select_rows(x, &[1]), 0, 3);
                let y = t.mul_row(t.add_row(x, row), row);
                t.sum_all(t.mul(y, y))
            })),
            ("gather_concat", Box::new(|t, x| {
                let a = t.select_rows(x, &[0, 0, 2, 1]);
                let b = t.slice_cols(a, 1, 3);
                let c = t.concat_cols(&[a, b, t.sub(b, b)]);
                t.sum_all(t.tanh(c))
            })),
            ("pairwise", Box::new(|t, x| {
                let y = t.select_rows(t.tanh(x), &[2, 0]);
                t.sum_all(t.sqrt(t.shift(t.pairwise_sq_dist(x, y), 1.0)))
            })),
        ];
        for (name, prog) in &programs {
            for _ in 0..50 {
                let x = random(&mut rng, 3, 3, -1.5, 1.5);
                let value_of = |x: &Array2<f64>| {
                    let t = Tape::new();
                    let v = t.leaf(x.clone());
                    t.scalar_value(prog(&t, v))
                };
                let (_, g) = forward_backward(std::slice::from_ref(&x), |t, v| Ok(prog(t, v[0]))).unwrap();
                let n = numeric_grad(&value_of, &x, 1e-5);
                for (a, b) in g[0].iter().zip(n.iter()) {
                    assert!(close(*a, *b, 1e-4), "{name}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn abs_and_sqrt_have_zero_derivative_at_zero() {
        let (_, g) = forward_backward(&[array![[0.0, 2.0]]], |t, x| Ok(t.sum_all(t.abs(x[0])))).unwrap();
        assert_eq!(g[0], array![[0.0, 1.0]]);
        let (_, g) = forward_backward(&[array![[0.0]]], |t, x| Ok(t.sum_all(t.sqrt(x[0])))).unwrap();
        assert_eq!(g[0], array![[0.0]]);
    }

    #[test]
    fn non_finite_values_name_the_primitive() {
        let err = forward_backward(&[array![[0.0]]], |t, x| Ok(t.sum_all(t.ln(x[0])))).unwrap_err();
        assert!(matches!(err, Error::NonFinite { primitive: "ln" }));
        let err = forward_backward(&[array![[0.0]]], |t, x| Ok(t.sum_all(t.recip(x[0])))).unwrap_err();
        assert!(matches!(err, Error::NonFinite { primitive: "recip" }));
    }

    #[test]
    fn sinkhorn_forward_matches_solver_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let c = random(&mut rng, 4, 5, 0.0, 3.0);
            let a = vec![0.25; 4];
            let b = vec![0.2; 5];
            let cfg = SinkhornConfig::new(0.3, 50).unwrap();
            let t = Tape::new();
            let cv = t.leaf(c.clone());
            let out = t.sinkhorn_cost(cv, &a, &b, &cfg).unwrap();
            let reference = sinkhorn_weights(&a, &b, &c, &cfg).unwrap().transport_cost;
            assert_eq!(t.scalar_value(out), reference);
        }
    }

    /// The same sweeps written with tape primitives only.
    fn unrolled_sinkhorn(t: &Tape, c: Var, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Var {
        let (m, n) = t.shape(c);
        let eps = cfg.epsilon;
        let inv = 1.0 / eps;
        let eps_log_a = t.leaf(Array2::from_shape_fn((m, 1), |(i, _)| eps * a[i].ln()));
        let eps_log_b = t.leaf(Array2::from_shape_fn((1, n), |(_, j)| eps * b[j].ln()));
        let neg = t.scale(c, -1.0);
        let ones_m = t.leaf(Array2::ones((m, 1)));
        let ones_n = t.leaf(Array2::ones((1, n)));
        let mut g = t.leaf(Array2::zeros((1, n)));
        let mut f = t.leaf(Array2::zeros((m, 1)));
        for _ in 0..cfg.iterations {
            let gb = t.matmul(ones_m, g);
            let lse = t.lse_rows(t.scale(t.add(neg, gb), inv));
            f = t.add(eps_log_a, t.scale(lse, -eps));
            let fb = t.matmul(f, ones_n);
            let lse = t.lse_cols(t.scale(t.add(neg, fb), inv));
            g = t.add(eps_log_b, t.scale(lse, -eps));
        }
        let logits = t.scale(t.add(t.add(neg, t.matmul(f, ones_n)), t.matmul(ones_m, g)), inv);
        t.sum_all(t.mul(t.exp(logits), c))
    }

    #[test]
    fn fused_sinkhorn_adjoint_matches_unrolled_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let c = random(&mut rng, 3, 4, 0.0, 2.0);
            let a = [0.2, 0.3, 0.5];
            let b = [0.1, 0.2, 0.3, 0.4];
            let cfg = SinkhornConfig::new(0.5, 30).unwrap();
            let (v1, g1) = forward_backward(std::slice::from_ref(&c), |t, x| t.sinkhorn_cost(x[0], &a, &b, &cfg)).unwrap();
            let (v2, g2) = forward_backward(std::slice::from_ref(&c), |t, x| Ok(unrolled_sinkhorn(t, x[0], &a, &b, &cfg))).unwrap();
            assert!((v1 - v2).abs() < 1e-12);
            for (x, y) in g1[0].iter().zip(g2[0].iter()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn sinkhorn_cost_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SinkhornConfig::new(0.8, 100).unwrap();
        for _ in 0..20 {
            let c = random(&mut rng, 4, 4, 0.0, 4.0);
            check(&|t, x| t.sinkhorn_cost(x, &[0.25; 4], &[0.25; 4], &cfg).unwrap(), &c, 1e-4);
        }
    }

    #[test]
    fn divergence_gradient_in_one_coordinate() {
        // two 2-atom measures of scalar paths of length 2; differentiate in x[0][1]
        let cfg = SinkhornConfig::new(0.8, 100).unwrap();
        let y = array![[0.5, -0.3], [1.2, 0.8]];
        let w = [0.5, 0.5];
        let divergence = |t: &Tape, x: Var| {
            let yv = t.leaf(y.clone());
            let cxy = t.pairwise_sq_dist(x, yv);
            let cxx = t.pairwise_sq_dist(x, x);
            let cyy = t.pairwise_sq_dist(yv, yv);
            let wxy = t.sinkhorn_cost(cxy, &w, &w, &cfg).unwrap();
            let wxx = t.sinkhorn_cost(cxx, &w, &w, &cfg).unwrap();
            let wyy = t.sinkhorn_cost(cyy, &w, &w, &cfg).unwrap();
            t.sub(t.sub(t.scale(wxy, 2.0), wxx), wyy)
        };
        let x = array![[0.1, 0.4], [-0.7, 1.0]];
        let (v, g) = forward_backward(std::slice::from_ref(&x), |t, xs| Ok(divergence(t, xs[0]))).unwrap();
        let at = |s: f64| {
            let mut xx = x.clone();
            xx[[0, 1]] = s;
            let t = Tape::new();
            let xv = t.leaf(xx);
            t.scalar_value(divergence(&t, xv))
        };
        let h = 1e-5;
        let numeric = (at(0.4 + h) - at(0.4 - h)) / (2.0 * h);
        assert!((v - at(0.4)).abs() < 1e-15);
        assert!(close(g[0][[0, 1]], numeric, 1e-4), "{} vs {numeric}", g[0][[0, 1]]);
    }
}
