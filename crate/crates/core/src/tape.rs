//! A small reverse-mode automatic differentiation tape over dense 2-D `f64`
//! arrays. Every operation appends a node; `backward` walks the nodes in
//! reverse and accumulates gradients.
//!
//! Binary element-wise operations broadcast a `(1, n)` row or an `(m, 1)`
//! column operand against an `(m, n)` operand.

use ndarray::{concatenate, s, Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumCols(Var),
    SumRows(Var),
    SumAll(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Map(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn unary(a: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    a.mapv(f)
}

/// Sums `grad` down to `shape`, undoing row/column broadcasting.
fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (gr, gc) = grad.dim();
    let mut g = grad;
    if shape.0 == 1 && gr != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && gc != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let pick = |x: usize, y: usize| {
        assert!(x == y || x == 1 || y == 1, "incompatible shapes {a:?} and {b:?}");
        x.max(y)
    };
    (pick(a.0, b.0), pick(a.1, b.1))
}

fn zip_broadcast(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcastable");
    let bv = b.broadcast(shape).expect("broadcastable");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar");
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = if self.shape(a) == self.shape(b) {
            self.value(a) + self.value(b)
        } else {
            zip_broadcast(self.value(a), self.value(b), |x, y| x + y)
        };
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = if self.shape(a) == self.shape(b) {
            self.value(a) - self.value(b)
        } else {
            zip_broadcast(self.value(a), self.value(b), |x, y| x - y)
        };
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = if self.shape(a) == self.shape(b) {
            self.value(a) * self.value(b)
        } else {
            zip_broadcast(self.value(a), self.value(b), |x, y| x * y)
        };
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Shift(a))
    }

    /// `k - a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, k)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = unary(self.value(a), |x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Element-wise `f`, where `f` returns the value and its derivative.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros(src.dim());
        let mut d = Array2::zeros(src.dim());
        Zip::from(&mut v).and(&mut d).and(src).for_each(|v, d, &x| {
            let (fx, dfx) = f(x);
            *v = fx;
            *d = dfx;
        });
        self.push(v, Op::Map(a, d))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("equal row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row sums, shape `(m, 1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Column sums, shape `(1, n)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Repeats each row `times` times consecutively: row `i * times + k` of
    /// the result is row `i` of `a`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let src = self.value(a);
        let (m, n) = src.dim();
        let mut v = Array2::zeros((m * times, n));
        for i in 0..m {
            for k in 0..times {
                v.row_mut(i * times + k).assign(&src.row(i));
            }
        }
        self.push(v, Op::RepeatRows(a, times))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        self.push(v, Op::Reshape(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    /// Row-wise log-sum-exp, shape `(m, 1)`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Array2::from_shape_fn((src.nrows(), 1), |(i, _)| {
            let row = src.row(i);
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            if m == f64::NEG_INFINITY {
                m
            } else {
                m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            }
        });
        self.push(v, Op::LogSumExp(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            let mut acc = |v: Var, delta: Array2<f64>| {
                let slot = &mut grads[v.0];
                match slot {
                    Some(existing) => *existing += &delta,
                    None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(*a, g.dot(&bv.t()));
                    acc(*b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to(g.clone(), self.shape(*a)));
                    acc(*b, reduce_to(g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(g.clone(), self.shape(*a)));
                    acc(*b, reduce_to(-g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let ga = zip_broadcast(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_broadcast(&g, self.value(*a), |x, y| x * y);
                    acc(*a, reduce_to(ga, self.shape(*a)));
                    acc(*b, reduce_to(gb, self.shape(*b)));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = zip_broadcast(&g, bv, |x, y| x / y);
                    let gb_full = zip_broadcast(&(&g * out), bv, |x, y| -x / y);
                    acc(*a, reduce_to(ga, self.shape(*a)));
                    acc(*b, reduce_to(gb_full, self.shape(*b)));
                }
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::Shift(a) => acc(*a, g),
                Op::Sigmoid(a) => acc(*a, Zip::from(&g).and(out).map_collect(|&g, &y| g * y * (1.0 - y))),
                Op::Tanh(a) => acc(*a, Zip::from(&g).and(out).map_collect(|&g, &y| g * (1.0 - y * y))),
                Op::Exp(a) => acc(*a, g * out),
                Op::Ln(a) => acc(*a, Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g / x)),
                Op::Sin(a) => acc(*a, Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g * x.cos())),
                Op::Cos(a) => acc(*a, Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| -g * x.sin())),
                Op::Square(a) => acc(*a, Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| 2.0 * g * x)),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    full.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, full);
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    acc(*a, g.broadcast(shape).expect("column").to_owned());
                }
                Op::SumRows(a) => {
                    let shape = self.shape(*a);
                    acc(*a, g.broadcast(shape).expect("row").to_owned());
                }
                Op::SumAll(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::RepeatRows(a, times) => {
                    let (m, n) = self.shape(*a);
                    let grouped = g
                        .into_shape_with_order((m, times * n))
                        .expect("contiguous gradient");
                    let mut ga = Array2::zeros((m, n));
                    for k in 0..*times {
                        ga += &grouped.slice(s![.., k * n..(k + 1) * n]);
                    }
                    acc(*a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(shape, flat).expect("same size"));
                }
                Op::LogSoftmax(a) => {
                    // d x_j = g_j - softmax_j * sum_k g_k
                    let mut ga = g.clone();
                    for (mut row, out_row) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let total: f64 = row.sum();
                        Zip::from(&mut row).and(&out_row).for_each(|r, &y| *r -= y.exp() * total);
                    }
                    acc(*a, ga);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let mut ga = x.clone();
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let lse = out[[i, 0]];
                        let gi = g[[i, 0]];
                        if lse == f64::NEG_INFINITY {
                            row.fill(0.0);
                        } else {
                            row.mapv_inplace(|v| gi * (v - lse).exp());
                        }
                    }
                    acc(*a, ga);
                }
                Op::Map(a, d) => acc(*a, g * d),
            }
        }
        Gradients { grads }
    }
}

/// Convenience for building `(m, 1)` columns.
pub fn column(values: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

pub type Matrix = Array2<f64>;
