//! Time-decay conditioner: a low-rank causal convolution whose kernel is
//! `K_{t,i} = exp(-Σ_{τ=i+1}^t s_τ)`, rank one in time per channel.

use rand::Rng;

use crate::error::{shape_err, FemError, Result};
use crate::fem_read::FemGates;
use crate::mat::Mat;

pub const NORM_EPS: f64 = 1e-6;
const UNIT_NORM_FLOOR: f64 = 1e-12;
/// `η_g = ETA_G_BOUND · tanh(·)`; keeps `1 + η_g >= 1e-6` after `tanh` saturates.
pub const ETA_G_BOUND: f64 = 1.0 - 1e-6;

/// `max(4, d / 16)`. With one or two hidden channels `LN(h̃)` is constant
/// or a sign pattern and the conditioner carries no gradient.
pub fn default_hidden(d: usize) -> usize {
    (d / 16).max(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdcParams {
    pub w_f: Mat,
    pub w_x: Mat,
    pub w_s: Mat,
    pub w_c: Mat,
}

impl TdcParams {
    pub fn new(w_f: Mat, w_x: Mat, w_s: Mat, w_c: Mat) -> Result<Self> {
        let p = Self { w_f, w_x, w_s, w_c };
        p.validate()?;
        Ok(p)
    }

    pub fn init<R: Rng + ?Sized>(model: usize, hidden: usize, out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_f: Mat::randn(model, hidden, std, rng),
            w_x: Mat::randn(model, hidden, std, rng),
            w_s: Mat::randn(model, hidden, std, rng),
            w_c: Mat::randn(hidden, out, std, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (dm, hc) = self.w_f.shape();
        if hc == 0 || self.w_x.shape() != (dm, hc) || self.w_s.shape() != (dm, hc) || self.w_c.rows() != hc {
            return Err(shape_err("tdc params: W_f, W_x, W_s must be D×H_c and W_c H_c×D_c with H_c >= 1"));
        }
        if ![&self.w_f, &self.w_x, &self.w_s, &self.w_c].iter().all(|m| m.all_finite()) {
            return Err(FemError::NonFinite("tdc params".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdcTrace {
    /// Decay rates, `softplus(LN(x) W_f)`.
    pub s: Mat,
    /// `log f_t = -Σ_{τ<=t} s_τ`.
    pub log_f: Mat,
    pub f: Mat,
    pub u: Mat,
    pub a: Mat,
    pub h_tilde: Mat,
    pub c: Mat,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Per-row layer norm without affine parameters.
pub fn layer_norm(x: &Mat) -> Mat {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Rescales each row to unit ℓ2 norm.
pub fn unit_norm(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(UNIT_NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// `h̃_t = e^{-s_t} h̃_{t-1} + u_t`, the stable form of `f_t ⊙ Σ_{i<=t} u_i ⊘ f_i`.
pub fn decay_scan(s: &Mat, u: &Mat) -> Mat {
    let mut h = u.clone();
    for t in 1..u.rows() {
        for j in 0..u.cols() {
            let prev = h.get(t - 1, j);
            h.add_at(t, j, (-s.get(t, j)).exp() * prev);
        }
    }
    h
}

pub fn tdc_forward(x: &Mat, params: &TdcParams) -> Result<TdcTrace> {
    params.validate()?;
    if x.cols() != params.w_f.rows() {
        return Err(shape_err(format!("tdc input width {} vs {}", x.cols(), params.w_f.rows())));
    }
    let xn = layer_norm(x);
    let s = xn.matmul(&params.w_f).map(softplus);
    let u = xn.matmul(&params.w_x);
    let a = xn.matmul(&params.w_s).map(softplus);
    let mut log_f = Mat::zeros(s.rows(), s.cols());
    for t in 0..s.rows() {
        for j in 0..s.cols() {
            let prev = if t == 0 { 0.0 } else { log_f.get(t - 1, j) };
            log_f.set(t, j, prev - s.get(t, j));
        }
    }
    let f = log_f.map(f64::exp);
    let h_tilde = decay_scan(&s, &u);
    let local = unit_norm(&a).map(silu).zip_map(&layer_norm(&h_tilde), |x, y| x * y);
    let c = local.matmul(&params.w_c);
    Ok(TdcTrace { s, log_f, f, u, a, h_tilde, c })
}

/// Zero-initialized linear heads reading four equal slices of `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingHeads {
    pub w_prior: Mat,
    pub w_value: Mat,
    pub w_gate: Mat,
    pub w_lambda: Mat,
}

impl CouplingHeads {
    pub fn zeros(cond_width: usize, prior_width: usize, d: usize) -> Result<Self> {
        if cond_width == 0 || cond_width % 4 != 0 {
            return Err(FemError::InvalidConfig(format!("conditioning width {cond_width} must be a positive multiple of 4")));
        }
        let q = cond_width / 4;
        Ok(Self {
            w_prior: Mat::zeros(q, prior_width),
            w_value: Mat::zeros(q, d),
            w_gate: Mat::zeros(q, d),
            w_lambda: Mat::zeros(q, d),
        })
    }

    pub fn slice_width(&self) -> usize {
        self.w_prior.rows()
    }
}

/// Additive prior shift and multiplicative value/gate modulations.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub prior_shift: Mat,
    pub eta_v: Mat,
    /// Bounded to `(-1, 1)` so the modulated outer gate stays positive.
    pub eta_g: Mat,
    pub eta_lambda: Mat,
}

pub fn modulation(c: &Mat, heads: &CouplingHeads) -> Result<Modulation> {
    let q = heads.slice_width();
    if c.cols() != 4 * q {
        return Err(shape_err(format!("conditioning width {} vs 4×{q}", c.cols())));
    }
    Ok(Modulation {
        prior_shift: c.slice_cols(0, q).matmul(&heads.w_prior),
        eta_v: c.slice_cols(q, q).matmul(&heads.w_value),
        eta_g: c.slice_cols(2 * q, q).matmul(&heads.w_gate).map(|x| ETA_G_BOUND * x.tanh()),
        eta_lambda: c.slice_cols(3 * q, q).matmul(&heads.w_lambda),
    })
}

/// Applies a modulation: `θ̃ = θ + G_p`, `ṽ = v ⊙ (1 + η_v)`,
/// `g̃ = g ⊙ (1 + η_g)`, `λ̃ = clamp(λ ⊙ (1 + η_λ), 0, 1)`.
pub fn tdc_couple(theta: &Mat, v: &Mat, gates: &FemGates, m: &Modulation) -> Result<(Mat, Mat, FemGates)> {
    if m.prior_shift.shape() != theta.shape()
        || m.eta_v.shape() != v.shape()
        || m.eta_g.shape() != gates.g.shape()
        || m.eta_lambda.shape() != gates.lambda.shape()
    {
        return Err(shape_err("tdc_couple: modulation shapes differ from targets"));
    }
    let mut theta_t = theta.clone();
    theta_t.add_assign(&m.prior_shift);
    let v_t = v.zip_map(&m.eta_v, |x, e| x * (1.0 + e));
    let g_t = gates.g.zip_map(&m.eta_g, |x, e| x * (1.0 + e));
    let lambda_t = gates.lambda.zip_map(&m.eta_lambda, |x, e| (x * (1.0 + e)).clamp(0.0, 1.0));
    let gates_t = FemGates::new(lambda_t, g_t, gates.beta_max.clone())?;
    Ok((theta_t, v_t, gates_t))
}
