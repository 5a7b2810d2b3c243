//! Brute-force reference implementations. Scalar loops and compensated
//! sums only; nothing here calls into `fem_read`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FemError, Result};
use crate::fem_read::{FemGates, FemReadout};
use crate::mat::Mat;
use crate::priors::PriorMatrix;

/// Kahan-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(self) -> f64 {
        self.sum
    }
}

pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut k = Kahan::default();
    for x in xs {
        k.add(x);
    }
    k.value()
}

/// `(1/β) log Σ_i p_i e^{β v_i}` over `p_i > 0`, shifted by the max.
pub fn lse_read(p: &[f64], v: &[f64], beta: f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for i in 0..p.len() {
        if p[i] > 0.0 && beta * v[i] > m {
            m = beta * v[i];
        }
    }
    let mut s = Kahan::default();
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s.add(p[i] * (beta * v[i] - m).exp());
        }
    }
    (m + s.value().ln()) / beta
}

/// Independent evaluation of the two-gate read.
pub fn brute_force_read(p: &PriorMatrix, v: &Mat, gates: &FemGates) -> Result<FemReadout> {
    let (n, d) = v.shape();
    if p.len() != n || gates.lambda.shape() != (n, d) || gates.g.shape() != (n, d) || gates.beta_max.len() != d {
        return Err(shape_err("brute_force_read: inconsistent shapes"));
    }
    let mut mu = Mat::zeros(n, d);
    let mut f_max = Mat::zeros(n, d);
    let mut f_tilde = Mat::zeros(n, d);
    let mut o = Mat::zeros(n, d);
    let mut pr = vec![0.0; n];
    let mut col = vec![0.0; n];
    for t in 0..n {
        for i in 0..=t {
            pr[i] = p.weight(t, i);
        }
        for c in 0..d {
            for i in 0..=t {
                col[i] = v.get(i, c);
            }
            let mut m = Kahan::default();
            for i in 0..=t {
                m.add(pr[i] * col[i]);
            }
            let mean = m.value();
            let f = lse_read(&pr[..=t], &col[..=t], gates.beta_max[c]);
            let lam = gates.lambda.get(t, c);
            let mixed = (1.0 - lam) * mean + lam * f;
            mu.set(t, c, mean);
            f_max.set(t, c, f);
            f_tilde.set(t, c, mixed);
            o.set(t, c, gates.g.get(t, c) * mixed);
        }
    }
    Ok(FemReadout { o, mu, f_max, f_tilde, posterior_cache: None })
}

/// Posterior `q_i ∝ p_i e^{β v_i}` by direct normalization.
pub fn brute_posterior(p: &[f64], v: &[f64], beta: f64) -> Vec<f64> {
    let f = lse_read(p, v, beta);
    p.iter().zip(v).map(|(&w, &x)| if w > 0.0 { w * (beta * (x - f)).exp() } else { 0.0 }).collect()
}

/// `KL(p ‖ q) = Σ p log(p/q)` with `0 log 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err("kl: vectors differ in length"));
    }
    let mut s = Kahan::default();
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Err(FemError::AbsoluteContinuity { index: i });
        }
        s.add(a * (a / b).ln());
    }
    Ok(s.value().max(0.0))
}

/// Central differences, one coordinate at a time.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|k| {
            x[k] = point[k] + h;
            let up = f(&x);
            x[k] = point[k] - h;
            let down = f(&x);
            x[k] = point[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Richardson-refined central differences, `(4 D(h/2) - D(h)) / 3`.
pub fn finite_diff_richardson(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let coarse = finite_diff(&f, point, h);
    let fine = finite_diff(&f, point, h / 2.0);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

/// Second-order central differences for the Hessian.
pub fn finite_diff_hessian(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Mat {
    let n = point.len();
    let mut x = point.to_vec();
    let mut eval = |a: usize, da: f64, b: usize, db: f64| {
        x[a] += da;
        x[b] += db;
        let y = f(&x);
        x.copy_from_slice(point);
        y
    };
    let mut hess = Mat::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let val = (eval(a, h, b, h) - eval(a, h, b, -h) - eval(a, -h, b, h) + eval(a, -h, b, -h)) / (4.0 * h * h);
            hess.set(a, b, val);
            hess.set(b, a, val);
        }
    }
    hess
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub op: String,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when the absolute error is within `tolerance`.
    pub fn absolute(op: &str, seed: u64, shape: Vec<usize>, max_abs_err: f64, max_rel_err: f64, tolerance: f64) -> Self {
        Self { op: op.into(), seed, shape, max_abs_err, max_rel_err, tolerance, pass: max_abs_err <= tolerance }
    }

    /// Passes when the relative error is within `tolerance`.
    pub fn relative(op: &str, seed: u64, shape: Vec<usize>, max_abs_err: f64, max_rel_err: f64, tolerance: f64) -> Self {
        Self { op: op.into(), seed, shape, max_abs_err, max_rel_err, tolerance, pass: max_rel_err <= tolerance }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Max absolute and norm-wise relative difference.
pub fn compare(a: &[f64], b: &[f64]) -> (f64, f64) {
    let abs = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max);
    (abs, if scale > 0.0 { abs / scale } else { abs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap_err(), FemError::AbsoluteContinuity { index: 1 });
    }

    #[test]
    fn finite_diff_square() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_richardson(|x| x[0].sin(), &[0.4], 1e-3);
        assert!((g[0] - 0.4f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn hessian_of_quadratic() {
        let h = finite_diff_hessian(|x| x[0] * x[0] * 2.0 + x[0] * x[1], &[0.5, -1.0], 1e-4);
        assert!((h.get(0, 0) - 4.0).abs() < 1e-6);
        assert!((h.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(h.get(1, 1).abs() < 1e-6);
    }

    #[test]
    fn brute_read_closed_forms() {
        let p = PriorMatrix::uniform(3);
        let v = Mat::filled(3, 2, 1.5);
        let gates = FemGates::new(Mat::filled(3, 2, 0.7), Mat::filled(3, 2, 2.0), vec![3.0, 0.1]).unwrap();
        let out = brute_force_read(&p, &v, &gates).unwrap();
        assert!(out.o.as_slice().iter().all(|&x| (x - 3.0).abs() < 1e-14));
    }

    #[test]
    fn report_json_line() {
        let r = OracleReport::absolute("mean_read", 3, vec![5, 3], 1e-16, 1e-16, 1e-12);
        assert!(r.pass);
        let back: OracleReport = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }
}
