//! Eagerly recorded reverse-mode tape.
//!
//! Every op evaluates immediately and appends a node; nodes are stored in
//! creation order, which is already a topological order, so `backward` is a
//! single reverse sweep. Node values are held in f64 while parameters and all
//! persisted tensors stay f32: rounding in the loss would otherwise swamp
//! central differences at `h = 1e-3`.

use std::collections::HashMap;

use crate::autodiff::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[m x n] + [n]`
    AddRow(Var, Var),
    /// `[m x n] * [n]`
    MulRow(Var, Var),
    /// `[m x n] * [m]`
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    MeanRows(Var),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Pick { x: Var, at: Vec<(usize, usize)> },
    LogSumExp { x: Var, subsets: Vec<(usize, Vec<usize>)> },
    CrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `var` into `tensor.grad`; zeros if `var`
    /// was not reached.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) {
        if !tensor.requires_grad() {
            return;
        }
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn to_f64(data: &[f32]) -> Vec<f64> {
    data.iter().map(|x| f64::from(*x)).collect()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Splits a shape into (outer, len, inner) around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(
            node.shape.clone(),
            node.value.iter().map(|x| *x as f32).collect(),
        )
        .expect("node shape consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), to_f64(t.data()), Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Dimension {
                op: "constant",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Leaf tracking `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), to_f64(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Binds a stored parameter; repeated binds return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.input(store.get(id));
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.values(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = matmul_kernel(self.values(a), self.values(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let value = transpose_kernel(self.values(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], value, Op::Transpose(a), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_with(Op::Div(a, b), a, b, |x, y| x / y))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        per_row: bool,
    ) -> Result<(usize, usize)> {
        let (m, n) = dims2(self.shape(a), name)?;
        let want = if per_row { m } else { n };
        if self.shape(b) != [want] {
            return Err(Error::Dimension {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row of `[m x n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", a, bias, false)?;
        let (av, bv) = (self.values(a), self.values(bias));
        let value = (0..m * n).map(|i| av[i] + bv[i % n]).collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(vec![m, n], value, Op::AddRow(a, bias), rg))
    }

    /// Channel-wise product: scales column `j` of `[m x n]` by `s[j]`.
    pub fn mul_row(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_row", a, s, false)?;
        let (av, sv) = (self.values(a), self.values(s));
        let value = (0..m * n).map(|i| av[i] * sv[i % n]).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(vec![m, n], value, Op::MulRow(a, s), rg))
    }

    /// Scales row `i` of `[m x n]` by `s[i]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_col", a, s, true)?;
        let (av, sv) = (self.values(a), self.values(s));
        let value = (0..m * n).map(|i| av[i] * sv[i / n]).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(vec![m, n], value, Op::MulCol(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::Offset(a), a, |x| x + c)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(Op::Gelu(a), a, gelu)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let xv = self.values(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::contract("log_softmax of a scalar"))?;
        if n == 0 {
            return Err(Error::contract("log_softmax over an empty axis"));
        }
        let xv = self.values(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_softmax"));
        }
        let mut out = vec![0.0; xv.len()];
        for (row, dst) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let lse = log_sum_exp(row.iter().copied());
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LogSoftmax(x), rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        if d == 0 {
            return Err(Error::contract("layer_norm over an empty axis"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.values(x);
        let (gv, bv) = (self.values(gamma), self.values(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row (or the whole vector, for 1-D input) to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("normalize a scalar"))?;
        let xv = self.values(x);
        let mut norms = Vec::with_capacity(xv.len() / d.max(1));
        let mut out = vec![0.0; xv.len()];
        for (row, dst) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateVector("l2_normalize_rows"));
            }
            norms.push(norm);
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::L2NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.values(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Sums out the last axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::contract("sum_last_axis of a scalar"))?;
        let value = if n == 0 {
            vec![0.0; shape[..shape.len() - 1].iter().product()]
        } else {
            self.values(x).chunks(n).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(x);
        Ok(self.push(shape[..shape.len() - 1].to_vec(), value, Op::SumLastAxis(x), rg))
    }

    /// Mean over rows of `[m x n]`, giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "mean_rows")?;
        if m == 0 {
            return Err(Error::contract("mean_rows over zero rows"));
        }
        let xv = self.values(x);
        let mut out = vec![0.0; n];
        for row in xv.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n], out, Op::MeanRows(x), rg))
    }

    /// Selects rows of a 2-D tensor; `None` yields a zero row.
    pub fn gather_rows_padded(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "gather_rows")?;
        let xv = self.values(x);
        let mut out = vec![0.0; index.len() * n];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                if *s >= m {
                    return Err(Error::contract(format!(
                        "gather_rows index {s} out of range for {m} rows"
                    )));
                }
                out[r * n..(r + 1) * n].copy_from_slice(&xv[s * n..(s + 1) * n]);
            }
        }
        let rg = self.rg(x);
        let rows = index.len();
        Ok(self.push(vec![rows, n], out, Op::GatherRows { x, index }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.gather_rows_padded(x, index.iter().map(|i| Some(*i)).collect())
    }

    /// Stacks 2-D blocks with equal column counts; 1-D inputs count as one row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = *self.shape(*first).last().unwrap_or(&1);
        let mut rows = 0;
        let mut value = Vec::new();
        for p in parts {
            let shape = self.shape(*p);
            let (r, c) = match shape {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                _ => (0, usize::MAX),
            };
            if c != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            rows += r;
            value.extend_from_slice(self.values(*p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(vec![rows, n], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = self.values(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Picks `x[row, col]` for each pair, giving a vector.
    pub fn pick(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "pick")?;
        let xv = self.values(x);
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= m || c >= n {
                return Err(Error::contract(format!("pick ({r},{c}) outside [{m}x{n}]")));
            }
            out.push(xv[r * n + c]);
        }
        let rg = self.rg(x);
        let len = at.len();
        Ok(self.push(vec![len], out, Op::Pick { x, at }, rg))
    }

    /// Log-sum-exp of `x[row, cols]` for each `(row, cols)` subset.
    pub fn log_sum_exp_subsets(&mut self, x: Var, subsets: Vec<(usize, Vec<usize>)>) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "log_sum_exp_subsets")?;
        let xv = self.values(x);
        let mut out = Vec::with_capacity(subsets.len());
        for (r, cols) in &subsets {
            if *r >= m || cols.is_empty() || cols.iter().any(|c| *c >= n) {
                return Err(Error::contract("log_sum_exp subset out of range or empty"));
            }
            out.push(log_sum_exp(cols.iter().map(|c| xv[r * n + c])));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_sum_exp_subsets"));
        }
        let rg = self.rg(x);
        let len = subsets.len();
        Ok(self.push(vec![len], out, Op::LogSumExp { x, subsets }, rg))
    }

    /// Mean over rows of `-Σ_c q_c log softmax(logits)_c` with target rows `q`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (m, n) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.shape() != [m, n] {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: targets.shape().to_vec(),
            });
        }
        if m == 0 {
            return Err(Error::contract("cross_entropy over an empty batch"));
        }
        let q = to_f64(targets.data());
        for (r, row) in q.chunks(n).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < 0.0) {
                return Err(Error::contract(format!(
                    "cross_entropy target row {r} is not a distribution (sum {s})"
                )));
            }
        }
        let lv = self.values(logits);
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cross_entropy"));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for r in 0..m {
            let row = &lv[r * n..(r + 1) * n];
            let lse = log_sum_exp(row.iter().copied());
            for c in 0..n {
                let logp = row[c] - lse;
                probs[r * n + c] = logp.exp();
                let qc = q[r * n + c];
                if qc != 0.0 {
                    total -= qc * logp;
                }
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![total / m as f64],
            Op::CrossEntropy {
                logits,
                targets: q,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads)?;
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep that accumulates into every bound parameter that
    /// requires grad. Bound parameters the loss does not reach get zeros.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (id, var) in &self.params {
            grads.accumulate_into(*var, store.get_mut(*id));
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a), "matmul")?;
                let n = self.shape(*b)[1];
                let (av, bv) = (self.values(*a), self.values(*b));
                acc(*a, &|g| {
                    let bt = transpose_kernel(bv, k, n);
                    let d = matmul_kernel(dy, &bt, m, n, k);
                    add_into(g, &d);
                });
                acc(*b, &|g| {
                    let at = transpose_kernel(av, m, k);
                    let d = matmul_kernel(&at, dy, k, m, n);
                    add_into(g, &d);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a), "transpose")?;
                acc(*a, &|g| add_into(g, &transpose_kernel(dy, n, m)));
            }
            Op::Add(a, b) => {
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / bv[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.shape(*b)[0];
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::MulRow(a, s) => {
                let n = self.shape(*s)[0];
                let (av, sv) = (self.values(*a), self.values(*s));
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sv[i % n];
                    }
                });
                acc(*s, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d * av[i];
                    }
                });
            }
            Op::MulCol(a, s) => {
                let n = self.shape(*a)[1];
                let (av, sv) = (self.values(*a), self.values(*s));
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sv[i / n];
                    }
                });
                acc(*s, &|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / n] += d * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &|g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += c * d;
                    }
                });
            }
            Op::Offset(a) => acc(*a, &|g| add_into(g, dy)),
            Op::Gelu(a) => {
                let av = self.values(*a);
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                acc(*x, &|g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                g[at(k)] += y[at(k)] * (dy[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &|g| {
                    for r in 0..y.len() / n {
                        let s: f64 = dy[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            g[i] += dy[i] - y[i].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = self.values(*gamma);
                acc(*gamma, &|g| {
                    for i in 0..dy.len() {
                        g[i % d] += dy[i] * xhat[i];
                    }
                });
                acc(*beta, &|g| {
                    for i in 0..dy.len() {
                        g[i % d] += dy[i];
                    }
                });
                acc(*x, &|g| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rstd.len() {
                        let base = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = dy[base + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[base + j];
                        }
                        for j in 0..d {
                            g[base + j] += rstd[r] / d as f64
                                * (d as f64 * dxhat[j] - s1 - xhat[base + j] * s2);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &|g| {
                    for (r, norm) in norms.iter().enumerate() {
                        let base = r * d;
                        let dot: f64 = (0..d).map(|j| y[base + j] * dy[base + j]).sum();
                        for j in 0..d {
                            g[base + j] += (dy[base + j] - y[base + j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Mean(x) => {
                let n = self.values(*x).len() as f64;
                acc(*x, &|g| g.iter_mut().for_each(|v| *v += dy[0] / n));
            }
            Op::SumLastAxis(x) => {
                let n = *self.shape(*x).last().unwrap();
                acc(*x, &|g| {
                    for (i, v) in g.iter_mut().enumerate() {
                        *v += dy[i / n];
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2(self.shape(*x), "mean_rows")?;
                acc(*x, &|g| {
                    for (i, v) in g.iter_mut().enumerate() {
                        *v += dy[i % n] / m as f64;
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let n = self.shape(*x)[1];
                acc(*x, &|g| {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            for j in 0..n {
                                g[s * n + j] += dy[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.values(*p).len();
                    let slice = &dy[offset..offset + len];
                    acc(*p, &|g| add_into(g, slice));
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &|g| add_into(g, dy)),
            Op::Pick { x, at } => {
                let n = self.shape(*x)[1];
                acc(*x, &|g| {
                    for (k, (r, c)) in at.iter().enumerate() {
                        g[r * n + c] += dy[k];
                    }
                });
            }
            Op::LogSumExp { x, subsets } => {
                let n = self.shape(*x)[1];
                let xv = self.values(*x);
                acc(*x, &|g| {
                    for (k, (r, cols)) in subsets.iter().enumerate() {
                        let lse = node.value[k];
                        for c in cols {
                            let i = r * n + c;
                            g[i] += dy[k] * (xv[i] - lse).exp();
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = dims2(self.shape(*logits), "cross_entropy")?;
                acc(*logits, &|g| {
                    for r in 0..m {
                        let qsum: f64 = targets[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            g[i] += dy[0] * (probs[i] * qsum - targets[i]) / m as f64;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (gi, di) in g.iter_mut().zip(d) {
        *gi += di;
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
