//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough saved state to run the chain rule backwards. Scalars are 1×1
//! matrices. Nodes that do not depend on any gradient-requiring leaf are never
//! visited during the backward pass, so frozen sub-networks cost only their
//! forward evaluation.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    QuickGelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        cols: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    TileRows {
        x: Var,
        times: usize,
    },
    Reshape(Var),
    MulCol(Var, Var),
    SumRowGroups {
        x: Var,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<usize>,
        heads: usize,
        probs: Vec<Matrix>,
    },
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_sums(m: &Matrix) -> Matrix {
    m.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf sharing storage with the caller (parameters are bound this way).
    pub fn shared_leaf(&mut self, value: Arc<Matrix>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the layout used by every linear layer (weights are `out × in`).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(v, Op::AddRow(x, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Multiplies every entry of `x` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(x) * sv;
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::MulScalar(x, s), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::ln);
        let rg = self.rg(x);
        self.push(v, Op::Log(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// `x · σ(1.702 x)`, the GELU approximation used by CLIP transformers.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| t * sigmoid(1.702 * t));
        let rg = self.rg(x);
        self.push(v, Op::QuickGelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * r;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::LogSoftmaxRows(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Picks `x[i, cols[i]]` for every row, producing an `n × 1` column.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), cols.len(), "gather: one column index per row");
        let v = Array2::from_shape_fn((cols.len(), 1), |(i, _)| xv[[i, cols[i]]]);
        let rg = self.rg(x);
        self.push(
            v,
            Op::Gather {
                x,
                cols: cols.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let mut v = xv.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|t| t / n);
        }
        let rg = self.rg(x);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let views: Vec<_> = (0..times).map(|_| xv.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("tile_rows: times must be positive");
        let rg = self.rg(x);
        self.push(v, Op::TileRows { x, times }, rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape: element count differs");
        let data: Vec<f64> = xv.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("reshape");
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Scales row `i` of `x` by `c[i, 0]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        assert_eq!(self.shape(c), (self.shape(x).0, 1), "mul_col: c must be n × 1");
        let v = self.value(x) * self.value(c);
        let rg = self.rg(x) || self.rg(c);
        self.push(v, Op::MulCol(x, c), rg)
    }

    /// Sums consecutive groups of `group` rows: `n × d` → `n/group × d`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        assert!(group > 0 && n % group == 0, "sum_row_groups: rows not divisible by group");
        let v = xv
            .to_shape((n / group, group, d))
            .expect("sum_row_groups")
            .sum_axis(Axis(1));
        let rg = self.rg(x);
        self.push(v, Op::SumRowGroups { x, group }, rg)
    }

    /// Multi-head scaled dot-product attention. Rows are grouped into
    /// consecutive `segments` that attend only within themselves; columns are
    /// split evenly into `heads`. With `causal`, row `i` of a segment sees
    /// rows `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[usize], heads: usize, causal: bool) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d), "attention: k shape");
        assert_eq!(self.shape(v), (n, d), "attention: v shape");
        assert_eq!(segments.iter().sum::<usize>(), n, "attention: segments must cover all rows");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut r0 = 0;
        for &len in segments {
            for h in 0..heads {
                let cols = s![r0..r0 + len, h * dh..(h + 1) * dh];
                let mut scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
                if causal {
                    for i in 0..len {
                        for j in i + 1..len {
                            scores[[i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                let p = softmax_rows(&scores);
                out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
                probs.push(p);
            }
            r0 += len;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// `x · Wᵀ + b` with `W: out × in` and optional `b: 1 × out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let y = self.matmul_bt(x, weight);
        match bias {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        self.backward_seeded(&[(loss, Array2::ones((1, 1)))])
    }

    /// Backpropagates from arbitrary seed gradients (vector-Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "backward: seed shape mismatch");
            if self.rg(*v) {
                accumulate(&mut grads, v.0, g.clone());
                start = start.max(v.0 + 1);
            }
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn push_grad(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if self.rg(v) {
            accumulate(grads, v.0, g);
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.push_grad(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.push_grad(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    self.push_grad(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.push_grad(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.push_grad(grads, *b, g.clone());
                }
                self.push_grad(grads, *a, g);
            }
            Op::AddRow(x, row) => {
                if self.rg(*row) {
                    self.push_grad(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.push_grad(grads, *x, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.push_grad(grads, *b, -&g);
                }
                self.push_grad(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.push_grad(grads, *a, &g * self.value(*b));
                }
                if self.rg(*b) {
                    self.push_grad(grads, *b, &g * self.value(*a));
                }
            }
            Op::Scale(x, c) => self.push_grad(grads, *x, g * *c),
            Op::MulScalar(x, s) => {
                if self.rg(*s) {
                    let gs = (&g * self.value(*x)).sum();
                    self.push_grad(grads, *s, Array2::from_elem((1, 1), gs));
                }
                if self.rg(*x) {
                    self.push_grad(grads, *x, g * self.scalar(*s));
                }
            }
            Op::Exp(x) => self.push_grad(grads, *x, g * out),
            Op::Log(x) => self.push_grad(grads, *x, g / self.value(*x)),
            Op::Tanh(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(out).for_each(|gv, &y| *gv *= 1.0 - y * y);
                self.push_grad(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(out).for_each(|gv, &y| *gv *= y * (1.0 - y));
                self.push_grad(grads, *x, gx);
            }
            Op::QuickGelu(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &t| {
                    let sg = sigmoid(1.702 * t);
                    *gv *= sg + 1.702 * t * sg * (1.0 - sg);
                });
                self.push_grad(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.rg(*gamma) {
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.push_grad(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    self.push_grad(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gxhat = &g * self.value(*gamma);
                    let d = gxhat.ncols() as f64;
                    let mut gx = Array2::zeros(gxhat.dim());
                    for i in 0..gxhat.nrows() {
                        let gr = gxhat.row(i);
                        let xr = xhat.row(i);
                        let m1 = gr.sum() / d;
                        let m2 = gr.dot(&xr) / d;
                        for j in 0..gxhat.ncols() {
                            gx[[i, j]] = rstd[i] * (gr[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.push_grad(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(x) => {
                let gy = &g * out;
                let gx = &gy - &(out * &row_sums(&gy));
                self.push_grad(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let sm = out.mapv(f64::exp);
                let gx = &g - &(sm * &row_sums(&g));
                self.push_grad(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let mut gx = Array2::zeros(self.shape(*x));
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.push_grad(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        self.push_grad(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.rg(*p) {
                        self.push_grad(grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::SelectRows { x, rows } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = gx.row_mut(r);
                    dst += &g.row(k);
                }
                self.push_grad(grads, *x, gx);
            }
            Op::Gather { x, cols } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (i, &c) in cols.iter().enumerate() {
                    gx[[i, c]] += g[[i, 0]];
                }
                self.push_grad(grads, *x, gx);
            }
            Op::Transpose(x) => self.push_grad(grads, *x, g.t().to_owned()),
            Op::Sum(x) => {
                let gx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                self.push_grad(grads, *x, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let dots = row_sums(&(&g * out));
                let mut gx = &g - &(out * &dots);
                for (mut row, n) in gx.rows_mut().into_iter().zip(norms) {
                    row.mapv_inplace(|t| t / n);
                }
                self.push_grad(grads, *x, gx);
            }
            Op::TileRows { x, times } => {
                let (r, c) = self.shape(*x);
                let gx = g.to_shape((*times, r, c)).expect("tile_rows grad").sum_axis(Axis(0));
                self.push_grad(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                let data: Vec<f64> = g.iter().copied().collect();
                self.push_grad(grads, *x, Array2::from_shape_vec((r, c), data).expect("reshape grad"));
            }
            Op::MulCol(x, c) => {
                if self.rg(*c) {
                    self.push_grad(grads, *c, row_sums(&(&g * self.value(*x))));
                }
                if self.rg(*x) {
                    self.push_grad(grads, *x, g * self.value(*c));
                }
            }
            Op::SumRowGroups { x, group } => {
                let (n, d) = self.shape(*x);
                let mut gx = Array2::zeros((n, d));
                for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                    row.assign(&g.row(i / group));
                }
                self.push_grad(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (n, d) = self.shape(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = Array2::zeros((n, d));
                let mut gk = Array2::zeros((n, d));
                let mut gv = Array2::zeros((n, d));
                let mut r0 = 0;
                let mut idx = 0;
                for &len in segments {
                    for h in 0..*heads {
                        let cols = s![r0..r0 + len, h * dh..(h + 1) * dh];
                        let p = &probs[idx];
                        idx += 1;
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let gp = go.dot(&vv.slice(cols).t());
                        let gs = (&gp - &row_sums(&(&gp * p))) * p * scale;
                        gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                    }
                    r0 += len;
                }
                self.push_grad(grads, *q, gq);
                self.push_grad(grads, *k, gk);
                self.push_grad(grads, *v, gv);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` at every entry of `x0`.
    fn numeric_grad(x0: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (i, j) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[i, j]] += h;
            let mut xm = x0.clone();
            xm[[i, j]] -= h;
            out[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(x0: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |x: &Matrix| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.leaf(x0.clone(), true);
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x0, &eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(sample(), |g, x| {
            let t = g.tanh(x);
            let s = g.sigmoid(t);
            let q = g.quick_gelu(s);
            let e = g.exp(q);
            let m = g.mul(e, x);
            g.sum(m)
        });
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let w = array![[0.2, -0.4], [0.1, 0.3], [-0.7, 0.5]];
        check(sample(), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let yt = g.transpose(y);
            let z = g.matmul_bt(yt, yt);
            let t = g_sq_plus_one(g, z);
            let l = g.log(t);
            g.sum(l)
        });
    }

    fn g_sq_plus_one(g: &mut Graph, z: Var) -> Var {
        let sq = g.mul(z, z);
        let one = g.constant(Array2::ones(g.shape(z)));
        g.add(sq, one)
    }

    #[test]
    fn layer_norm_grads() {
        let gamma = array![[1.5, -0.5, 0.8]];
        let beta = array![[0.1, 0.2, -0.3]];
        let wts = array![[0.3, 1.0, -2.0], [0.5, -0.1, 0.9]];
        check(sample(), move |g, x| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            let y = g.layer_norm(x, gm, bt);
            let w = g.constant(wts.clone());
            let z = g.mul(y, w);
            g.sum(z)
        });
    }

    #[test]
    fn softmax_family_grads() {
        let wts = array![[0.3, 1.0, -2.0], [0.5, -0.1, 0.9]];
        check(sample(), move |g, x| {
            let s = g.softmax_rows(x);
            let l = g.log_softmax_rows(x);
            let w = g.constant(wts.clone());
            let a = g.mul(s, w);
            let b = g.add(a, l);
            let p = g.gather(b, &[2, 0]);
            g.sum(p)
        });
    }

    #[test]
    fn structural_ops_grads() {
        let wts = array![[0.3, 1.0, -2.0, 0.4, 0.1], [0.5, -0.1, 0.9, 0.2, 0.3], [1.0, 2.0, 3.0, 4.0, 5.0]];
        check(sample(), move |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let b = g.concat_cols(&[x, a]);
            let r = g.select_rows(b, &[1, 1, 0]);
            let n = g.l2_normalize_rows(r);
            let w = g.constant(wts.clone());
            let c = g.concat_rows(&[n, w]);
            let d = g.mul(c, c);
            let m = g.mean(d);
            let k = g.scalar_constant(2.0);
            let k2 = g.mul_scalar(m, k);
            g.scale(k2, 0.5)
        });
    }

    #[test]
    fn attention_grads() {
        let x0 = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let w = |seed: f64| Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64 * seed).cos() * 0.5);
        for causal in [false, true] {
            let (wq, wk, wv) = (w(0.11), w(0.23), w(0.31));
            let out_w = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.2);
            check(x0.clone(), move |g, x| {
                let (a, b, c) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
                let q = g.matmul_bt(x, a);
                let k = g.matmul_bt(x, b);
                let v = g.matmul_bt(x, c);
                let o = g.attention(q, k, v, &[2, 3], 2, causal);
                let m = g.constant(out_w.clone());
                let z = g.mul(o, m);
                g.sum(z)
            });
        }
    }

    #[test]
    fn grouping_ops_grads() {
        let wts = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 + 1.0) * (j as f64 - 1.5));
        check(sample(), move |g, x| {
            let t = g.tile_rows(x, 2);
            let r = g.reshape(t, 3, 4);
            let c = g.slice_cols(r, 0, 1);
            let m = g.mul_col(r, c);
            let w = g.constant(wts.clone());
            let z = g.mul(m, w);
            let s = g.sum_row_groups(z, 3);
            let q = g.mul(s, s);
            g.sum(q)
        });
    }

    #[test]
    fn attention_respects_segments_and_causality() {
        let mut g = Graph::new();
        let x = g.leaf(Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64), false);
        let o = g.attention(x, x, x, &[1, 2], 1, true);
        let out = g.value(o).clone();
        assert_eq!(out.row(0), g.value(x).row(0));
        assert_eq!(out.row(1), g.value(x).row(1));
    }

    #[test]
    fn scalar_multiplier_receives_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(sample(), false);
        let s = g.leaf(array![[2.0]], true);
        let y = g.mul_scalar(x, s);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!((grads.get(s).unwrap()[[0, 0]] - sample().sum()).abs() < 1e-12);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn frozen_subgraph_is_skipped() {
        let mut g = Graph::new();
        let frozen = g.leaf(sample(), false);
        let t = g.tanh(frozen);
        assert!(!g.requires_grad(t));
        let p = g.leaf(array![[1.0, 1.0, 1.0]], true);
        let y = g.add_row(t, p);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(p).unwrap(), &array![[2.0, 2.0, 2.0]]);
        assert!(grads.get(t).is_none());
    }
}
