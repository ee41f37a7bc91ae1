//! Parameter storage, recurrent cells, and the optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tape::{Gradients, Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable matrices. Insertion order is stable and defines the
/// layout used by the optimizer and the checkpoint.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Tape variables for one forward pass, indexed like the store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zeros where the loss does not depend
    /// on it.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect()
    }
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform_init(input, output, bound, rng));
        let b = store.add(format!("{name}.bias"), uniform_init(1, output, bound, rng));
        Linear { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let m = tape.matmul(x, p.var(self.w));
        tape.add(m, p.var(self.b))
    }

    pub fn num_params(input: usize, output: usize) -> usize {
        input * output + output
    }
}

/// LSTM cell with fused gates in the order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), uniform_init(input, 4 * hidden, bound, rng));
        let w_hh = store.add(format!("{name}.w_hh"), uniform_init(hidden, 4 * hidden, bound, rng));
        let mut bias = uniform_init(1, 4 * hidden, bound, rng);
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let b = store.add(format!("{name}.bias"), bias);
        LstmCell { w_ih, w_hh, b, input, hidden }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden;
        let xi = tape.matmul(x, p.var(self.w_ih));
        let hh = tape.matmul(h, p.var(self.w_hh));
        let pre = tape.add(xi, hh);
        let pre = tape.add(pre, p.var(self.b));
        let i = tape.slice_cols(pre, 0, n);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(pre, n, n);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(pre, 2 * n, n);
        let g = tape.tanh(g);
        let o = tape.slice_cols(pre, 3 * n, n);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (h_new, c_new)
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }
}

/// GRU cell with gates in the order reset, update, candidate and separate
/// input and recurrent biases.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), uniform_init(input, 3 * hidden, bound, rng));
        let w_hh = store.add(format!("{name}.w_hh"), uniform_init(hidden, 3 * hidden, bound, rng));
        let b_ih = store.add(format!("{name}.b_ih"), uniform_init(1, 3 * hidden, bound, rng));
        let b_hh = store.add(format!("{name}.b_hh"), uniform_init(1, 3 * hidden, bound, rng));
        GruCell { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        let gi = self.project(tape, p, x);
        self.step_projected(tape, p, gi, h)
    }

    /// Input projection `x W_ih + b_ih`, reusable across steps when the
    /// input does not change.
    pub fn project(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let gi = tape.matmul(x, p.var(self.w_ih));
        tape.add(gi, p.var(self.b_ih))
    }

    pub fn step_projected(&self, tape: &mut Tape, p: &Bound, gi: Var, h: Var) -> Var {
        let n = self.hidden;
        let gh = tape.matmul(h, p.var(self.w_hh));
        let gh = tape.add(gh, p.var(self.b_hh));
        let ir = tape.slice_cols(gi, 0, 2 * n);
        let hr = tape.slice_cols(gh, 0, 2 * n);
        let rz = tape.add(ir, hr);
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, n);
        let z = tape.slice_cols(rz, n, n);
        let i_n = tape.slice_cols(gi, 2 * n, n);
        let h_n = tape.slice_cols(gh, 2 * n, n);
        let rh = tape.mul(r, h_n);
        let cand = tape.add(i_n, rh);
        let cand = tape.tanh(cand);
        // h' = cand + z (h - cand)
        let diff = tape.sub(h, cand);
        let zd = tape.mul(z, diff);
        tape.add(cand, zd)
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        3 * hidden * (input + hidden + 2)
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = store.values.iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.values.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for ((p, g), (m, v)) in store.values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}
