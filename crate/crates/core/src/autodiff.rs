//! Minimal reverse-mode tape over [`Mat`] values.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints.

use crate::error::Result;
use crate::fem_read::{backward_two_gate, two_gate_read, FemGates, FemReadout};
use crate::mat::Mat;
use crate::priors::{rope, PriorMatrix, ENVELOPE_EXP_CLAMP};
use crate::tdc::{self, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Softplus,
    Silu,
    Relu,
    Tanh,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => tdc::sigmoid(x),
            Unary::Softplus => tdc::softplus(x),
            Unary::Silu => tdc::silu(x),
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => tdc::sigmoid(x),
            Unary::Silu => {
                let s = tdc::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Map(Var, Unary),
    RmsNorm(Var),
    LayerNorm(Var),
    UnitNorm(Var),
    DecayScan(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Rope(Var),
    CausalSoftmax(Var),
    DecayKernel(Var),
    RowNormalize(Var),
    Clamp01(Var),
    Cumsum(Var),
    FemRead { p: Var, v: Var, lambda: Var, g: Var, beta: Var, readout: Box<FemReadout>, prior: Box<PriorMatrix> },
    Sum(Var),
    Mse(Var, Mat),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Adjoint of `var`; zeros of the right shape when nothing flowed into it.
    pub fn get(&self, tape: &Tape, var: Var) -> Mat {
        self.grads[var.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(var).shape();
            Mat::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    /// `a bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul_nt(self.value(b));
        self.push(y, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let bias = self.value(row).row(0).to_vec();
        let mut y = self.value(a).clone();
        for r in 0..y.rows() {
            for (x, b) in y.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(y, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).scale(s);
        self.push(y, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|x| x + s);
        self.push(y, Op::AddScalar(a))
    }

    pub fn map(&mut self, a: Var, f: Unary) -> Var {
        let y = self.value(a).map(|x| f.apply(x));
        self.push(y, Op::Map(a, f))
    }

    /// Row RMS normalization without gain.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        for r in 0..x.rows() {
            let inv = 1.0 / rms(x.row(r));
            y.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        self.push(y, Op::RmsNorm(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let y = tdc::layer_norm(self.value(a));
        self.push(y, Op::LayerNorm(a))
    }

    pub fn unit_norm(&mut self, a: Var) -> Var {
        let y = tdc::unit_norm(self.value(a));
        self.push(y, Op::UnitNorm(a))
    }

    /// `h_t = e^{-s_t} h_{t-1} + u_t`.
    pub fn decay_scan(&mut self, s: Var, u: Var) -> Var {
        let y = tdc::decay_scan(self.value(s), self.value(u));
        self.push(y, Op::DecayScan(s, u))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.value(a).slice_cols(start, len);
        self.push(y, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Mat::zeros(rows, width);
        let mut at = 0;
        for &p in parts {
            y.write_cols(at, self.value(p));
            at += self.value(p).cols();
        }
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    pub fn rope(&mut self, a: Var) -> Var {
        let y = rope::apply_rope(self.value(a), rope::ROPE_BASE);
        self.push(y, Op::Rope(a))
    }

    /// Row softmax over `i <= t`; zeros above the diagonal.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows();
        let mut y = Mat::zeros(n, n);
        for t in 0..n {
            let row = &x.row(t)[..=t];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (i, v) in row.iter().enumerate() {
                y.set(t, i, (v - m).exp() / z);
            }
        }
        self.push(y, Op::CausalSoftmax(a))
    }

    /// `K_{t,i} = exp(clamp(L_t - L_i))` for `i <= t`, from a T×1 log-envelope.
    pub fn decay_kernel(&mut self, log_env: Var) -> Var {
        let l = self.value(log_env).col(0);
        let n = l.len();
        let y = Mat::from_fn(n, n, |t, i| {
            if i <= t {
                (l[t] - l[i]).clamp(-ENVELOPE_EXP_CLAMP, ENVELOPE_EXP_CLAMP).exp()
            } else {
                0.0
            }
        });
        self.push(y, Op::DecayKernel(log_env))
    }

    /// Divides each row by its sum over `i <= t`.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows();
        let mut y = Mat::zeros(n, x.cols());
        for t in 0..n {
            let z: f64 = x.row(t)[..=t].iter().sum();
            for i in 0..=t {
                y.set(t, i, x.get(t, i) / z);
            }
        }
        self.push(y, Op::RowNormalize(a))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.push(y, Op::Clamp01(a))
    }

    /// Column-wise prefix sum over rows.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for t in 1..y.rows() {
            for c in 0..y.cols() {
                let prev = y.get(t - 1, c);
                y.add_at(t, c, prev);
            }
        }
        self.push(y, Op::Cumsum(a))
    }

    /// Two-gate free-energy read; `beta` is 1×d.
    pub fn fem_read(&mut self, p: Var, v: Var, lambda: Var, g: Var, beta: Var) -> Result<Var> {
        let prior = PriorMatrix::from_weights(self.value(p).clone())?;
        let gates = FemGates::new(self.value(lambda).clone(), self.value(g).clone(), self.value(beta).row(0).to_vec())?;
        let readout = two_gate_read(&prior, self.value(v), &gates)?;
        let y = readout.o.clone();
        Ok(self.push(y, Op::FemRead { p, v, lambda, g, beta, readout: Box::new(readout), prior: Box::new(prior) }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Mat::filled(1, 1, self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Mat) -> Var {
        let x = self.value(a);
        let err = x.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        self.push(Mat::filled(1, 1, err), Op::Mse(a, target.clone()))
    }

    /// Reverse pass from `out` with adjoint `seed`.
    pub fn backward(&self, out: Var, seed: Mat) -> Result<Grads> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, g: Mat| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, gy.matmul_nt(self.value(*b)));
                    acc(*b, self.value(*a).matmul_tn(&gy));
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, gy.matmul(self.value(*b)));
                    acc(*b, gy.matmul_tn(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gb = Mat::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (s, g) in gb.row_mut(0).iter_mut().zip(gy.row(r)) {
                            *s += g;
                        }
                    }
                    acc(*row, gb);
                    acc(*a, gy.clone());
                }
                Op::Mul(a, b) => {
                    acc(*a, gy.zip_map(self.value(*b), |g, y| g * y));
                    acc(*b, gy.zip_map(self.value(*a), |g, x| g * x));
                }
                Op::Scale(a, s) => acc(*a, gy.scale(*s)),
                Op::AddScalar(a) => acc(*a, gy.clone()),
                Op::Map(a, f) => {
                    let x = self.value(*a);
                    let mut g = gy.clone();
                    for ((gv, &xv), &yv) in g.as_mut_slice().iter_mut().zip(x.as_slice()).zip(node.value.as_slice()) {
                        *gv *= f.deriv(xv, yv);
                    }
                    acc(*a, g);
                }
                Op::RmsNorm(a) => {
                    let x = self.value(*a);
                    let mut g = Mat::zeros(x.rows(), x.cols());
                    let n = x.cols() as f64;
                    for r in 0..x.rows() {
                        let (xr, gr) = (x.row(r), gy.row(r));
                        let rr = rms(xr);
                        let dotp: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o = gr[k] / rr - xr[k] * dotp / (n * rr.powi(3));
                        }
                    }
                    acc(*a, g);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.cols() as f64;
                    let mut g = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + NORM_EPS).sqrt();
                        let (yr, gr) = (y.row(r), gy.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (k, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o = inv * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                    acc(*a, g);
                }
                Op::UnitNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut g = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (y.row(r), gy.row(r));
                        if norm < 1e-12 {
                            g.row_mut(r).iter_mut().zip(gr).for_each(|(o, gv)| *o = gv / 1e-12);
                            continue;
                        }
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[k] - yr[k] * proj) / norm;
                        }
                    }
                    acc(*a, g);
                }
                Op::DecayScan(s, u) => {
                    let (sv, h) = (self.value(*s), &node.value);
                    let (n, w) = h.shape();
                    let mut delta = gy.clone();
                    for t in (0..n.saturating_sub(1)).rev() {
                        for j in 0..w {
                            let carry = (-sv.get(t + 1, j)).exp() * delta.get(t + 1, j);
                            delta.add_at(t, j, carry);
                        }
                    }
                    let gs = Mat::from_fn(n, w, |t, j| {
                        if t == 0 {
                            0.0
                        } else {
                            -(-sv.get(t, j)).exp() * h.get(t - 1, j) * delta.get(t, j)
                        }
                    });
                    acc(*s, gs);
                    acc(*u, delta);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut g = Mat::zeros(r, c);
                    g.write_cols(*start, &gy);
                    acc(*a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, gy.slice_cols(at, w));
                        at += w;
                    }
                }
                Op::Rope(a) => acc(*a, rope::apply_rope_transpose(&gy, rope::ROPE_BASE)),
                Op::CausalSoftmax(a) => {
                    let p = &node.value;
                    let n = p.rows();
                    let mut g = Mat::zeros(n, n);
                    for t in 0..n {
                        let inner: f64 = (0..=t).map(|i| p.get(t, i) * gy.get(t, i)).sum();
                        for i in 0..=t {
                            g.set(t, i, p.get(t, i) * (gy.get(t, i) - inner));
                        }
                    }
                    acc(*a, g);
                }
                Op::DecayKernel(l) => {
                    let lv = self.value(*l).col(0);
                    let k = &node.value;
                    let n = k.rows();
                    let mut g = Mat::zeros(n, 1);
                    for t in 0..n {
                        for i in 0..t {
                            if (lv[t] - lv[i]).abs() >= ENVELOPE_EXP_CLAMP {
                                continue;
                            }
                            let w = gy.get(t, i) * k.get(t, i);
                            g.add_at(t, 0, w);
                            g.add_at(i, 0, -w);
                        }
                    }
                    acc(*l, g);
                }
                Op::RowNormalize(a) => {
                    let (x, p) = (self.value(*a), &node.value);
                    let n = p.rows();
                    let mut g = Mat::zeros(n, x.cols());
                    for t in 0..n {
                        let z: f64 = x.row(t)[..=t].iter().sum();
                        let inner: f64 = (0..=t).map(|i| gy.get(t, i) * p.get(t, i)).sum();
                        for i in 0..=t {
                            g.set(t, i, (gy.get(t, i) - inner) / z);
                        }
                    }
                    acc(*a, g);
                }
                Op::Clamp01(a) => {
                    let x = self.value(*a);
                    acc(*a, gy.zip_map(x, |g, x| if x > 0.0 && x < 1.0 { g } else { 0.0 }));
                }
                Op::Cumsum(a) => {
                    let mut g = gy.clone();
                    for t in (0..g.rows().saturating_sub(1)).rev() {
                        for c in 0..g.cols() {
                            let next = g.get(t + 1, c);
                            g.add_at(t, c, next);
                        }
                    }
                    acc(*a, g);
                }
                Op::FemRead { p, v, lambda, g, beta, readout, prior } => {
                    let gates = FemGates {
                        lambda: self.value(*lambda).clone(),
                        g: self.value(*g).clone(),
                        beta_max: self.value(*beta).row(0).to_vec(),
                    };
                    let gr = backward_two_gate(readout, &gy, prior, self.value(*v), &gates)?;
                    acc(*p, gr.dp);
                    acc(*v, gr.dv);
                    acc(*lambda, gr.dlambda);
                    acc(*g, gr.dg);
                    acc(*beta, Mat::from_vec(1, gr.dbeta_max.len(), gr.dbeta_max));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Mat::filled(r, c, gy.get(0, 0)));
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let k = 2.0 * gy.get(0, 0) / x.len() as f64;
                    acc(*a, x.zip_map(target, |x, t| k * (x - t)));
                }
            }
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + NORM_EPS).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(Σ w ⊙ f(x))/dx against central differences.
    fn check_op(x: Mat, f: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&mut tape, xv);
        let w = Mat::randn(tape.value(y).rows(), tape.value(y).cols(), 1.0, &mut rng);
        let grads = tape.backward(y, w.clone()).unwrap();
        let analytic = grads.get(&tape, xv);
        let eval = |m: &Mat| {
            let mut t = Tape::new();
            let v = t.leaf(m.clone());
            let y = f(&mut t, v);
            t.value(y).as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        let mut numeric = Mat::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.as_mut_slice()[k] += h;
            b.as_mut_slice()[k] -= h;
            numeric.as_mut_slice()[k] = (eval(&a) - eval(&b)) / (2.0 * h);
        }
        let err = analytic.max_abs_diff(&numeric) / numeric.max_abs().max(1e-12);
        assert!(err <= tol, "rel err {err}");
    }

    fn x(rows: usize, cols: usize, seed: u64) -> Mat {
        Mat::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn unary_and_norm_ops() {
        for f in [Unary::Sigmoid, Unary::Softplus, Unary::Silu, Unary::Tanh, Unary::Exp] {
            check_op(x(3, 4, 1), move |t, v| t.map(v, f), 1e-7);
        }
        check_op(x(3, 4, 2), |t, v| t.rms_norm(v), 1e-7);
        check_op(x(3, 4, 3), |t, v| t.layer_norm(v), 1e-7);
        check_op(x(3, 4, 4), |t, v| t.unit_norm(v), 1e-7);
        check_op(x(5, 4, 5), |t, v| t.rope(v), 1e-7);
        check_op(x(5, 3, 6), |t, v| t.cumsum(v), 1e-7);
    }

    #[test]
    fn matrix_and_structure_ops() {
        let b = x(4, 3, 10);
        check_op(x(2, 4, 11), move |t, v| {
            let bv = t.leaf(b.clone());
            t.matmul(v, bv)
        }, 1e-7);
        let c = x(5, 4, 12);
        check_op(x(5, 4, 13), move |t, v| {
            let cv = t.leaf(c.clone());
            let s = t.matmul_nt(v, cv);
            t.causal_softmax(s)
        }, 1e-7);
        check_op(x(4, 6, 14), |t, v| {
            let a = t.slice_cols(v, 1, 3);
            let b = t.slice_cols(v, 0, 2);
            let m = t.concat_cols(&[b, a]);
            t.mul(m, m)
        }, 1e-7);
        check_op(x(6, 1, 15), |t, v| {
            let sp = t.map(v, Unary::Softplus);
            let g = t.scale(sp, -1.0);
            let l = t.cumsum(g);
            let k = t.decay_kernel(l);
            let s = t.add_scalar(k, 0.5);
            t.row_normalize(s)
        }, 1e-7);
        let u = x(6, 3, 16);
        check_op(x(6, 3, 17), move |t, v| {
            let uv = t.leaf(u.clone());
            let s = t.map(v, Unary::Softplus);
            t.decay_scan(s, uv)
        }, 1e-7);
        let base = x(3, 2, 18);
        check_op(x(1, 2, 19), move |t, v| {
            let b = t.leaf(base.clone());
            t.add_row(b, v)
        }, 1e-7);
    }

    #[test]
    fn fem_read_op_gradients() {
        let (n, d) = (4, 2);
        let v0 = x(n, d, 20);
        check_op(x(n, n, 21), move |t, s| {
            let p = t.causal_softmax(s);
            let v = t.leaf(v0.clone());
            let l = t.leaf(Mat::filled(n, d, 0.6));
            let g = t.leaf(Mat::filled(n, d, 1.2));
            let b = t.leaf(Mat::from_rows(&[vec![1.5, 4.0]]));
            t.fem_read(p, v, l, g, b).unwrap()
        }, 1e-6);
    }

    #[test]
    fn mse_and_sum() {
        let target = x(2, 3, 30);
        check_op(x(2, 3, 31), move |t, v| t.mse(v, &target), 1e-7);
        check_op(x(2, 3, 32), |t, v| t.sum(v), 1e-7);
    }
}
