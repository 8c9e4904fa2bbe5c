//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Every forward pass builds a fresh `Tape`; parameters are registered as
//! borrowed leaves so no weight data is copied per example. `backward`
//! returns one gradient buffer per node; `param_grads` collects the leaf
//! gradients in registration order, which callers keep aligned with the
//! parameter listing order.

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Matrix),
    Param(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Param(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// a[m,n] + r[1,n] broadcast over rows
    AddRow(usize, usize),
    /// a[m,n] - c[m,1] broadcast over cols
    SubCol(usize, usize),
    /// a[m,n] * r[1,n] broadcast over rows
    MulRow(usize, usize),
    /// a[m,n] / c[m,1]; rows whose divisor is below eps become uniform 1/n
    /// and propagate no gradient (fallback for empty visibility).
    DivColGuarded(usize, usize),
    /// a * s where s is a [1,1] var
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddScalarC(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    SinOp(usize),
    CosOp(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    SumRows(usize),
    SumAll(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    StackRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    RowOf(usize, usize),
    GatherRows(usize, Vec<usize>),
    /// out[0, map[j]] += a[0, j]; output width fixed
    ScatterAddCols(usize, Vec<usize>, usize),
    CumSumCols(usize),
    /// interleave columns of a and b: out[:, 2k] = a[:, k], out[:, 2k+1] = b[:, k]
    InterleaveCols(usize, usize),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<usize>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
/// Divisor floor for guarded renormalization; a visibility row with total
/// mass below this falls back to uniform.
pub const RENORM_EPS: f64 = 1e-12;

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, m: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Param(m),
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.params.push(id);
        Var(id)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "add shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x + y).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "sub shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x - y).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "mul shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(r));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] += mr.data[j];
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(v, Op::AddRow(a.0, r.0), rg)
    }

    pub fn sub_col(&mut self, a: Var, c: Var) -> Var {
        let (ma, mc) = (self.value(a), self.value(c));
        assert_eq!(mc.cols, 1);
        assert_eq!(ma.rows, mc.rows);
        let mut v = ma.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] -= mc.data[i];
            }
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(v, Op::SubCol(a.0, c.0), rg)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(r));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] *= mr.data[j];
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(v, Op::MulRow(a.0, r.0), rg)
    }

    pub fn div_col_guarded(&mut self, a: Var, c: Var) -> Var {
        let (ma, mc) = (self.value(a), self.value(c));
        assert_eq!(mc.cols, 1);
        assert_eq!(ma.rows, mc.rows);
        let mut v = ma.clone();
        for i in 0..v.rows {
            let d = mc.data[i];
            if d.abs() < RENORM_EPS {
                let u = 1.0 / v.cols as f64;
                for j in 0..v.cols {
                    v.data[i * v.cols + j] = u;
                }
            } else {
                for j in 0..v.cols {
                    v.data[i * v.cols + j] /= d;
                }
            }
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(v, Op::DivColGuarded(a.0, c.0), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let (ma, ms) = (self.value(a), self.value(s));
        assert_eq!(ms.shape(), (1, 1));
        let k = ms.data[0];
        let data = ma.data.iter().map(|x| x * k).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::MulScalar(a.0, s.0), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ma = self.value(a);
        let data = ma.data.iter().map(|x| x * k).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a.0, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let ma = self.value(a);
        let data = ma.data.iter().map(|x| x + k).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a);
        self.push(v, Op::AddScalarC(a.0, k), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ma = self.value(a);
        let data = ma.data.iter().map(|&x| f(x)).collect();
        let v = Matrix::from_vec(ma.rows, ma.cols, data);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::SinOp(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::CosOp(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a.0),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = Matrix::zeros(ma.rows, ma.cols);
        for i in 0..ma.rows {
            let row = ma.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..ma.cols {
                let e = (row[j] - max).exp();
                v.data[i * ma.cols + j] = e;
                sum += e;
            }
            for j in 0..ma.cols {
                v.data[i * ma.cols + j] /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a.0), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let data = (0..ma.rows).map(|i| ma.row(i).iter().sum()).collect();
        let v = Matrix::col_vec(data);
        let rg = self.rg(a);
        self.push(v, Op::SumRows(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let v = Matrix::scalar(ma.data.iter().sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a.0), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows, mb.rows);
        let mut v = Matrix::zeros(ma.rows, ma.cols + mb.cols);
        for i in 0..ma.rows {
            let dst = &mut v.data[i * v.cols..(i + 1) * v.cols];
            dst[..ma.cols].copy_from_slice(ma.row(i));
            dst[ma.cols..].copy_from_slice(mb.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a.0, b.0), rg)
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let cols = self.value(rows[0]).cols;
        let mut v = Matrix::zeros(rows.len(), cols);
        let mut rg = false;
        for (i, &r) in rows.iter().enumerate() {
            let mr = self.value(r);
            assert_eq!(mr.shape(), (1, cols), "stack_rows expects row vectors");
            v.data[i * cols..(i + 1) * cols].copy_from_slice(&mr.data);
            rg |= self.rg(r);
        }
        self.push(v, Op::StackRows(rows.iter().map(|r| r.0).collect()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let ma = self.value(a);
        assert!(lo < hi && hi <= ma.cols);
        let mut v = Matrix::zeros(ma.rows, hi - lo);
        for i in 0..ma.rows {
            v.data[i * v.cols..(i + 1) * v.cols].copy_from_slice(&ma.row(i)[lo..hi]);
        }
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a.0, lo, hi), rg)
    }

    pub fn row_of(&mut self, a: Var, i: usize) -> Var {
        let ma = self.value(a);
        assert!(i < ma.rows);
        let v = Matrix::row_vec(ma.row(i).to_vec());
        let rg = self.rg(a);
        self.push(v, Op::RowOf(a.0, i), rg)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let mt = self.value(table);
        let mut v = Matrix::zeros(ids.len(), mt.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < mt.rows, "gather index out of range");
            v.data[i * mt.cols..(i + 1) * mt.cols].copy_from_slice(mt.row(id));
        }
        let rg = self.rg(table);
        self.push(v, Op::GatherRows(table.0, ids.to_vec()), rg)
    }

    pub fn scatter_add_cols(&mut self, a: Var, map: &[usize], width: usize) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.rows, 1);
        assert_eq!(ma.cols, map.len());
        let mut v = Matrix::zeros(1, width);
        for (j, &m) in map.iter().enumerate() {
            assert!(m < width, "scatter index out of range");
            v.data[m] += ma.data[j];
        }
        let rg = self.rg(a);
        self.push(v, Op::ScatterAddCols(a.0, map.to_vec(), width), rg)
    }

    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.rows, 1);
        let mut acc = 0.0;
        let data = ma
            .data
            .iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect();
        let v = Matrix::row_vec(data);
        let rg = self.rg(a);
        self.push(v, Op::CumSumCols(a.0), rg)
    }

    pub fn interleave_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape());
        let mut v = Matrix::zeros(ma.rows, 2 * ma.cols);
        for i in 0..ma.rows {
            for j in 0..ma.cols {
                v.data[i * v.cols + 2 * j] = ma.get(i, j);
                v.data[i * v.cols + 2 * j + 1] = mb.get(i, j);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::InterleaveCols(a.0, b.0), rg)
    }

    /// Reverse pass from a [1,1] loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Vec<Option<Matrix>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.accumulate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        grads
    }

    fn acc(&self, grads: &mut Vec<Option<Matrix>>, node: usize, add: impl FnOnce(&mut Matrix)) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let shape = self.nodes[node].value.get().shape();
        let g = grads[node].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        add(g);
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, go: &Matrix, grads: &mut Vec<Option<Matrix>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (self.nodes[*a].value.get(), self.nodes[*b].value.get());
                if self.nodes[*a].requires_grad {
                    let ga = go.matmul(&mb.transpose());
                    self.acc(grads, *a, |g| g.add_assign(&ga));
                }
                if self.nodes[*b].requires_grad {
                    let gb = ma.transpose().matmul(go);
                    self.acc(grads, *b, |g| g.add_assign(&gb));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| g.add_assign(go));
                self.acc(grads, *b, |g| g.add_assign(go));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| g.add_assign(go));
                self.acc(grads, *b, |g| {
                    for (x, y) in g.data.iter_mut().zip(&go.data) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (self.nodes[*a].value.get(), self.nodes[*b].value.get());
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] += go.data[k] * mb.data[k];
                    }
                });
                self.acc(grads, *b, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] += go.data[k] * ma.data[k];
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |g| g.add_assign(go));
                self.acc(grads, *r, |g| {
                    for i2 in 0..go.rows {
                        for j in 0..go.cols {
                            g.data[j] += go.get(i2, j);
                        }
                    }
                });
            }
            Op::SubCol(a, c) => {
                self.acc(grads, *a, |g| g.add_assign(go));
                self.acc(grads, *c, |g| {
                    for i2 in 0..go.rows {
                        let s: f64 = go.row(i2).iter().sum();
                        g.data[i2] -= s;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ma, mr) = (self.nodes[*a].value.get(), self.nodes[*r].value.get());
                self.acc(grads, *a, |g| {
                    for i2 in 0..g.rows {
                        for j in 0..g.cols {
                            g.data[i2 * g.cols + j] += go.get(i2, j) * mr.data[j];
                        }
                    }
                });
                self.acc(grads, *r, |g| {
                    for i2 in 0..ma.rows {
                        for j in 0..ma.cols {
                            g.data[j] += go.get(i2, j) * ma.get(i2, j);
                        }
                    }
                });
            }
            Op::DivColGuarded(a, c) => {
                let (ma, mc) = (self.nodes[*a].value.get(), self.nodes[*c].value.get());
                let out = self.nodes[i].value.get();
                self.acc(grads, *a, |g| {
                    for i2 in 0..g.rows {
                        let d = mc.data[i2];
                        if d.abs() < RENORM_EPS {
                            continue;
                        }
                        for j in 0..g.cols {
                            g.data[i2 * g.cols + j] += go.get(i2, j) / d;
                        }
                    }
                });
                self.acc(grads, *c, |g| {
                    for i2 in 0..ma.rows {
                        let d = mc.data[i2];
                        if d.abs() < RENORM_EPS {
                            continue;
                        }
                        let mut s = 0.0;
                        for j in 0..ma.cols {
                            s += go.get(i2, j) * out.get(i2, j);
                        }
                        g.data[i2] -= s / d;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let (ma, ms) = (self.nodes[*a].value.get(), self.nodes[*s].value.get());
                let k = ms.data[0];
                self.acc(grads, *a, |g| {
                    for (x, y) in g.data.iter_mut().zip(&go.data) {
                        *x += y * k;
                    }
                });
                self.acc(grads, *s, |g| {
                    let mut s2 = 0.0;
                    for (x, y) in go.data.iter().zip(&ma.data) {
                        s2 += x * y;
                    }
                    g.data[0] += s2;
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(grads, *a, |g| {
                    for (x, y) in g.data.iter_mut().zip(&go.data) {
                        *x += y * k;
                    }
                });
            }
            Op::AddScalarC(a, _) => {
                self.acc(grads, *a, |g| g.add_assign(go));
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        let y = out.data[k];
                        g.data[k] += go.data[k] * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        let y = out.data[k];
                        g.data[k] += go.data[k] * (1.0 - y * y);
                    }
                });
            }
            Op::SinOp(a) => {
                let ma = self.nodes[*a].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] += go.data[k] * ma.data[k].cos();
                    }
                });
            }
            Op::CosOp(a) => {
                let ma = self.nodes[*a].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] -= go.data[k] * ma.data[k].sin();
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.nodes[i].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] += go.data[k] * out.data[k];
                    }
                });
            }
            Op::Ln(a) => {
                let ma = self.nodes[*a].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] += go.data[k] / ma.data[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = self.nodes[i].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        g.data[k] += go.data[k] / (2.0 * out.data[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let ma = self.nodes[*a].value.get();
                self.acc(grads, *a, |g| {
                    for k in 0..g.data.len() {
                        let x = ma.data[k];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        g.data[k] += go.data[k] * d;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let out = self.nodes[i].value.get();
                self.acc(grads, *a, |g| {
                    for i2 in 0..out.rows {
                        let y = out.row(i2);
                        let gr = go.row(i2);
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a2, b2)| a2 * b2).sum();
                        for j in 0..out.cols {
                            g.data[i2 * out.cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SumRows(a) => {
                let ma = self.nodes[*a].value.get();
                self.acc(grads, *a, |g| {
                    for i2 in 0..ma.rows {
                        let gv = go.data[i2];
                        for j in 0..ma.cols {
                            g.data[i2 * ma.cols + j] += gv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = go.data[0];
                self.acc(grads, *a, |g| {
                    for x in g.data.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = go.transpose();
                self.acc(grads, *a, |g| g.add_assign(&gt));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.get().cols;
                self.acc(grads, *a, |g| {
                    for i2 in 0..g.rows {
                        for j in 0..ca {
                            g.data[i2 * ca + j] += go.get(i2, j);
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    let cb = g.cols;
                    for i2 in 0..g.rows {
                        for j in 0..cb {
                            g.data[i2 * cb + j] += go.get(i2, ca + j);
                        }
                    }
                });
            }
            Op::StackRows(rows) => {
                for (i2, &r) in rows.iter().enumerate() {
                    self.acc(grads, r, |g| {
                        for j in 0..go.cols {
                            g.data[j] += go.get(i2, j);
                        }
                    });
                }
            }
            Op::SliceCols(a, lo, _hi) => {
                let lo = *lo;
                self.acc(grads, *a, |g| {
                    for i2 in 0..go.rows {
                        for j in 0..go.cols {
                            g.data[i2 * g.cols + lo + j] += go.get(i2, j);
                        }
                    }
                });
            }
            Op::RowOf(a, r) => {
                let r = *r;
                self.acc(grads, *a, |g| {
                    for j in 0..go.cols {
                        g.data[r * g.cols + j] += go.data[j];
                    }
                });
            }
            Op::GatherRows(t, ids) => {
                self.acc(grads, *t, |g| {
                    for (i2, &id) in ids.iter().enumerate() {
                        for j in 0..go.cols {
                            g.data[id * g.cols + j] += go.get(i2, j);
                        }
                    }
                });
            }
            Op::ScatterAddCols(a, map, _w) => {
                self.acc(grads, *a, |g| {
                    for (j, &m) in map.iter().enumerate() {
                        g.data[j] += go.data[m];
                    }
                });
            }
            Op::CumSumCols(a) => {
                self.acc(grads, *a, |g| {
                    let mut acc = 0.0;
                    for j in (0..go.cols).rev() {
                        acc += go.data[j];
                        g.data[j] += acc;
                    }
                });
            }
            Op::InterleaveCols(a, b) => {
                self.acc(grads, *a, |g| {
                    for i2 in 0..g.rows {
                        for j in 0..g.cols {
                            g.data[i2 * g.cols + j] += go.get(i2, 2 * j);
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    for i2 in 0..g.rows {
                        for j in 0..g.cols {
                            g.data[i2 * g.cols + j] += go.get(i2, 2 * j + 1);
                        }
                    }
                });
            }
        }
    }

    /// Gradients of the registered parameters in registration order.
    /// Parameters untouched by the loss get zero matrices of their shape.
    pub fn param_grads(&self, grads: &mut [Option<Matrix>]) -> Vec<Matrix> {
        self.params
            .iter()
            .map(|&id| {
                grads[id].take().unwrap_or_else(|| {
                    let (r, c) = self.nodes[id].value.get().shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued tape function with
    /// respect to every entry of every input matrix.
    fn check_grads(
        inputs: &[Matrix],
        f: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let eps = 1e-6;
        let analytic: Vec<Matrix> = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m)).collect();
            let loss = f(&mut tape, &vars);
            let mut grads = tape.backward(loss);
            tape.param_grads(&mut grads)
        };
        for (pi, input) in inputs.iter().enumerate() {
            for k in 0..input.data.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data[k] += eps;
                let mut minus = inputs.to_vec();
                minus[pi].data[k] -= eps;
                let eval = |ms: &[Matrix]| -> f64 {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = ms.iter().map(|m| tape.param(m)).collect();
                    let loss = f(&mut tape, &vars);
                    tape.value(loss).data[0]
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = analytic[pi].data[k];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {pi} entry {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn randm(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_and_elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randm(3, 4, &mut rng);
        let b = randm(4, 2, &mut rng);
        let c = randm(3, 2, &mut rng);
        check_grads(&[a, b, c], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.add(m, v[2]);
            let s = t.mul(s, v[2]);
            let s = t.sub(s, v[2]);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randm(3, 4, &mut rng);
        let r = randm(1, 4, &mut rng);
        let c = randm(3, 1, &mut rng);
        check_grads(&[a, r, c], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let x = t.mul_row(x, v[1]);
            let x = t.sub_col(x, v[2]);
            t.sum_all(x)
        }, 1e-6);
    }

    #[test]
    fn div_col_guarded_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randm(3, 4, &mut rng);
        let mut d = randm(3, 1, &mut rng);
        for x in d.data.iter_mut() {
            *x = x.abs() + 0.5;
        }
        check_grads(&[a, d], |t, v| {
            let x = t.div_col_guarded(v[0], v[1]);
            let x = t.mul(x, x);
            t.sum_all(x)
        }, 1e-6);
    }

    #[test]
    fn div_col_guarded_fallback_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::row_vec(vec![0.0, 0.0, 0.0]));
        let d = tape.constant(Matrix::scalar(0.0));
        let out = tape.div_col_guarded(a, d);
        assert_eq!(tape.value(out).data, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn nonlinearity_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randm(2, 5, &mut rng);
        check_grads(&[a], |t, v| {
            let s = t.sigmoid(v[0]);
            let s2 = t.tanh(v[0]);
            let s3 = t.gelu(v[0]);
            let s4 = t.sin(v[0]);
            let s5 = t.cos(v[0]);
            let x = t.add(s, s2);
            let x = t.add(x, s3);
            let x = t.add(x, s4);
            let x = t.add(x, s5);
            t.sum_all(x)
        }, 1e-6);
    }

    #[test]
    fn log_exp_sqrt_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = randm(2, 3, &mut rng);
        for x in a.data.iter_mut() {
            *x = x.abs() + 0.3;
        }
        check_grads(&[a], |t, v| {
            let l = t.ln(v[0]);
            let e = t.exp(l);
            let s = t.sqrt(e);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randm(3, 5, &mut rng);
        let w = randm(3, 5, &mut rng);
        check_grads(&[a, w], |t, v| {
            let s = t.softmax_rows(v[0]);
            let s = t.mul(s, v[1]);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randm(2, 4, &mut rng);
        let b = randm(2, 3, &mut rng);
        check_grads(&[a, b], |t, v| {
            let c = t.concat_cols(v[0], v[1]);
            let s = t.slice_cols(c, 1, 6);
            let tr = t.transpose(s);
            let r = t.row_of(tr, 2);
            let sr = t.sum_rows(tr);
            let q = t.sum_all(sr);
            let q2 = t.sum_all(r);
            let both = t.add(q, q2);
            t.sum_all(both)
        }, 1e-6);
    }

    #[test]
    fn gather_scatter_cumsum_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = randm(5, 3, &mut rng);
        let row = randm(1, 4, &mut rng);
        check_grads(&[table, row], |t, v| {
            let g = t.gather_rows(v[0], &[0, 2, 2, 4]);
            let gs = t.sum_all(g);
            let sc = t.scatter_add_cols(v[1], &[1, 0, 1, 3], 5);
            let cs = t.cumsum_cols(sc);
            let cs2 = t.mul(cs, cs);
            let s2 = t.sum_all(cs2);
            let tot = t.add(gs, s2);
            t.sum_all(tot)
        }, 1e-6);
    }

    #[test]
    fn interleave_and_stack_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randm(1, 3, &mut rng);
        let b = randm(1, 3, &mut rng);
        check_grads(&[a, b], |t, v| {
            let i = t.interleave_cols(v[0], v[1]);
            let st = t.stack_rows(&[v[0], v[1], v[0]]);
            let s1 = t.sum_all(i);
            let s2 = t.sum_all(st);
            let tot = t.add(s1, s2);
            t.sum_all(tot)
        }, 1e-6);
    }

    #[test]
    fn scalar_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = randm(2, 3, &mut rng);
        let s = randm(1, 1, &mut rng);
        check_grads(&[a, s], |t, v| {
            let x = t.mul_scalar(v[0], v[1]);
            let x = t.scale(x, 0.7);
            let x = t.add_scalar(x, 0.1);
            t.sum_all(x)
        }, 1e-6);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let p = Matrix::row_vec(vec![1.0, 2.0]);
        let a = tape.param(&p);
        let c = tape.constant(Matrix::row_vec(vec![3.0, 4.0]));
        let x = tape.mul(a, c);
        let loss = tape.sum_all(x);
        let mut grads = tape.backward(loss);
        let pg = tape.param_grads(&mut grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].data, vec![3.0, 4.0]);
    }
}
