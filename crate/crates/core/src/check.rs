//! Property and oracle suites, each producing one [`OracleReport`].
//!
//! Library results are compared against the brute-force routines in
//! [`crate::oracle`] (finite differences, Kahan sums, naive log-sum-exp).
//! [`Fault::GradientSign`] negates the library gradients before comparison,
//! which every gradient suite must catch.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::block::{block_forward, block_forward_with, init_params, param_budget_check, param_budget_check_ratio, BlockConfig, Toggles};
use crate::error::{FemError, Result};
use crate::fem_read::{
    backward_two_gate, budget_dual_solve, hessian_free_energy_v, hidden_temperature, hull_membership_2pt, kernel,
    ltl_read, min_truncation_degree, posterior, two_gate_read, FemGates,
};
use crate::mat::Mat;
use crate::oracle::{self, kahan_sum, OracleReport};
use crate::priors::{
    aft_prior, decay_prior, gla_prior, normalize_scores, softmax_prior, ssm_prior, stream_fem_read,
    AftScan, ConvScan, DecayScan, DiagonalSsm, GlaParams, GlaScan, LinearScan, Mask, PriorFamily, PriorMatrix,
    RawScores, SsmImpulse, SsmScan,
};
use crate::tasks::{gen_argmax_sample, index_accuracy, ArgmaxSample, ArgmaxTaskConfig, Split};
use crate::tdc::{modulation, tdc_couple, tdc_forward, CouplingHeads, TdcParams};
use crate::trainer::{ToyModel, ToyModelKind};

/// Fault injected into the library side of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    GradientSign,
}

impl std::str::FromStr for Fault {
    type Err = FemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "grad-sign" => Ok(Fault::GradientSign),
            other => Err(FemError::InvalidArgument(format!("unknown fault '{other}' (none | grad-sign)"))),
        }
    }
}

impl Fault {
    fn grad_sign(self) -> f64 {
        match self {
            Fault::None => 1.0,
            Fault::GradientSign => -1.0,
        }
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    instances: usize,
    fault: Fault,
}

type SuiteFn = fn(&mut Ctx) -> Result<Outcome>;

#[derive(Clone, Copy)]
pub struct Suite {
    pub name: &'static str,
    pub default_instances: usize,
    run: SuiteFn,
}

impl std::fmt::Debug for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Suite").field("name", &self.name).field("default_instances", &self.default_instances).finish()
    }
}

impl Suite {
    pub fn module(&self) -> &'static str {
        self.name.split('.').next().unwrap_or(self.name)
    }

    pub fn matches(&self, filter: &str) -> bool {
        filter.is_empty() || filter == "all" || self.module() == filter || self.name.contains(filter)
    }

    /// Runs the suite; library errors become failing reports.
    pub fn run(&self, seed: u64, instances: Option<usize>, fault: Fault) -> OracleReport {
        let n = instances.unwrap_or(self.default_instances).max(1);
        let mut ctx = Ctx { rng: ChaCha8Rng::seed_from_u64(seed ^ fnv(self.name)), instances: n, fault };
        match (self.run)(&mut ctx) {
            Ok(out) => out.report(self.name, seed, n),
            Err(e) => OracleReport {
                op: format!("{} ({e})", self.name),
                seed,
                shape: vec![n],
                max_abs_err: f64::NAN,
                max_rel_err: f64::NAN,
                tolerance: f64::NAN,
                pass: false,
            },
        }
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Worst errors over all instances plus a count of failed boolean checks.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    abs: f64,
    rel: f64,
    relative: bool,
    tolerance: f64,
    violations: usize,
}

impl Outcome {
    fn abs(tolerance: f64) -> Self {
        Self { abs: 0.0, rel: 0.0, relative: false, tolerance, violations: 0 }
    }

    fn rel(tolerance: f64) -> Self {
        Self { relative: true, ..Self::abs(tolerance) }
    }

    fn see(&mut self, abs: f64, rel: f64) {
        // NaN must register as a failure.
        self.abs = if abs.is_nan() { f64::NAN } else { self.abs.max(abs) };
        self.rel = if rel.is_nan() { f64::NAN } else { self.rel.max(rel) };
    }

    fn see_pair(&mut self, a: &[f64], b: &[f64]) {
        let (abs, rel) = oracle::compare(a, b);
        self.see(abs, rel);
    }

    /// Norm-wise relative error with the denominator floored at `floor`, for
    /// finite-difference gradients whose entries can vanish exactly.
    fn see_grad(&mut self, a: &[f64], b: &[f64], floor: f64) {
        let (abs, _) = oracle::compare(a, b);
        let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(floor);
        self.see(abs, abs / scale);
    }

    fn require(&mut self, ok: bool) {
        if !ok {
            self.violations += 1;
        }
    }

    fn report(self, op: &str, seed: u64, n: usize) -> OracleReport {
        let mut r = if self.relative {
            OracleReport::relative(op, seed, vec![n], self.abs, self.rel, self.tolerance)
        } else {
            OracleReport::absolute(op, seed, vec![n], self.abs, self.rel, self.tolerance)
        };
        r.pass = r.pass && self.violations == 0;
        r
    }
}

pub fn registry() -> Vec<Suite> {
    let s = |name, default_instances, run: SuiteFn| Suite { name, default_instances, run };
    vec![
        s("fem_read.decomposition", 1000, decomposition),
        s("fem_read.grad_v", 1000, grad_v),
        s("fem_read.hessian", 1000, hessian),
        s("fem_read.dbeta", 1000, dbeta),
        s("fem_read.shift_scale", 1000, shift_scale),
        s("fem_read.hidden_temperature", 1000, hidden_temperature_suite),
        s("fem_read.bounds", 1000, bounds),
        s("fem_read.monotonicity", 1000, monotonicity),
        s("fem_read.small_beta", 200, small_beta),
        s("fem_read.oracle_agreement", 1000, oracle_agreement),
        s("fem_read.two_gate_backward", 200, two_gate_backward),
        s("fem_read.prior_logit", 500, prior_logit),
        s("fem_read.capacity", 100, capacity),
        s("fem_read.budget_duality", 100, budget_duality),
        s("fem_read.hull", 1000, hull),
        s("fem_read.truncation_degrees", 1, truncation_degrees),
        s("fem_read.multihead_partition", 200, multihead_partition),
        s("priors.invariants", 500, prior_invariants),
        s("priors.streaming", 200, streaming),
        s("priors.score_scaling", 500, score_scaling),
        s("priors.hard_mask", 300, hard_mask),
        s("priors.uniform_limits", 64, uniform_limits),
        s("tdc.streaming", 100, tdc_streaming),
        s("tdc.coupling_gates", 200, coupling_gates),
        s("block.param_budget", 1, param_budget),
        s("block.frozen_gate", 20, frozen_gate),
        s("block.zero_lambda", 20, zero_lambda),
        s("tasks.winner_is_max", 1000, winner_is_max),
        s("tasks.random_guess", 200, random_guess),
    ]
}

pub fn select(filter: &str) -> Vec<Suite> {
    registry().into_iter().filter(|s| s.matches(filter)).collect()
}

pub fn find(name: &str) -> Option<Suite> {
    registry().into_iter().find(|s| s.name == name)
}

// ---------------------------------------------------------------- sampling

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..=hi.ln()).exp()
}

/// Probability row of length `n`; with `sparse`, some entries are zero but
/// at least `min(n, 2)` stay positive.
fn simplex(rng: &mut ChaCha8Rng, n: usize, sparse: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..1.0)).collect();
    if sparse && n > 2 {
        let keep = [rng.gen_range(0..n), rng.gen_range(0..n)];
        for (i, x) in w.iter_mut().enumerate() {
            if !keep.contains(&i) && rng.gen_bool(0.3) {
                *x = 0.0;
            }
        }
        if w.iter().filter(|&&x| x > 0.0).count() < 2 {
            let free = (0..n).find(|i| w[*i] == 0.0).expect("some zero");
            w[free] = 0.5;
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Prior matrix whose last row is `p`; earlier rows uniform.
fn last_row_prior(p: &[f64]) -> Result<PriorMatrix> {
    let n = p.len();
    let mut w = Mat::zeros(n, n);
    for t in 0..n - 1 {
        w.row_mut(t)[..=t].iter_mut().for_each(|x| *x = 1.0 / (t + 1) as f64);
    }
    w.row_mut(n - 1).copy_from_slice(p);
    PriorMatrix::from_weights(w)
}

fn random_gla(rng: &mut ChaCha8Rng, n: usize) -> Result<GlaParams> {
    let q = Mat::randn(n, 4, 1.0, rng);
    let k = Mat::randn(n, 4, 1.0, rng);
    let gates = (0..n).map(|_| -rng.gen_range(0.0..0.5)).collect();
    GlaParams::from_raw(&q, &k, gates)
}

fn random_ssm(rng: &mut ChaCha8Rng) -> Result<DiagonalSsm> {
    let a = (0..2).map(|_| rng.gen_range(0.0..0.95)).collect();
    let b = (0..2).map(|_| rng.gen_range(0.1..1.0)).collect();
    let c = (0..2).map(|_| rng.gen_range(0.1..1.0)).collect();
    DiagonalSsm::new(a, b, c, rng.gen_range(0.1..1.0))
}

fn random_prior(rng: &mut ChaCha8Rng, family: PriorFamily, n: usize) -> Result<PriorMatrix> {
    match family {
        PriorFamily::Softmax => {
            let logits = Mat::randn(n, n, 1.5, rng);
            let mask = if rng.gen_bool(0.5) { Mask::causal(n) } else { Mask::window(n, rng.gen_range(1..=n)) };
            softmax_prior(&logits, &mask)
        }
        PriorFamily::Gla => Ok(gla_prior(&random_gla(rng, n)?)?.0),
        PriorFamily::Aft => aft_prior(&normals(rng, n, 1.0)),
        PriorFamily::Decay => decay_prior(&(0..n).map(|_| -rng.gen_range(0.0..1.0)).collect::<Vec<_>>()),
        PriorFamily::Ssm => ssm_prior(&random_ssm(rng)?.impulse(n), n),
    }
}

fn random_family(rng: &mut ChaCha8Rng) -> PriorFamily {
    PriorFamily::ALL[rng.gen_range(0..PriorFamily::ALL.len())]
}

fn column(v: &Mat, t: usize, c: usize) -> Vec<f64> {
    (0..=t).map(|i| v.get(i, c)).collect()
}

/// Brute-force `F` with the `β = 0` extension.
fn oracle_f(p: &[f64], v: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        kahan_sum(p.iter().zip(v).map(|(a, b)| a * b))
    } else {
        oracle::lse_read(p, v, beta)
    }
}

// ---------------------------------------------------------------- fem_read

fn decomposition(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-10);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=16);
        let p = simplex(&mut ctx.rng, n, true);
        let scale = ctx.rng.gen_range(0.5..2.0);
        let v = normals(&mut ctx.rng, n, scale);
        let beta = log_uniform(&mut ctx.rng, 1e-3, 30.0);
        let f = kernel::free_energy(&p, &v, beta);
        let mu = kahan_sum(p.iter().zip(&v).map(|(a, b)| a * b));
        let q = kernel::posterior(&p, &v, beta);
        let kl = oracle::kl(&p, &q)?;
        let err = (f - mu - kl / beta).abs();
        out.see(err, err / f.abs().max(1.0));
    }
    Ok(out)
}

fn grad_v(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::rel(1e-6);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=8);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta = log_uniform(&mut ctx.rng, 0.05, 10.0);
        let analytic: Vec<f64> = kernel::posterior(&p, &v, beta).iter().map(|q| q * ctx.fault.grad_sign()).collect();
        let h = 1e-3 / beta.max(1.0);
        let numeric = oracle::finite_diff_richardson(|x| oracle::lse_read(&p, x, beta), &v, h);
        out.see_pair(&analytic, &numeric);
    }
    Ok(out)
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a.get(i, j).powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

fn hessian(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-5);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=6);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta = log_uniform(&mut ctx.rng, 0.05, 5.0);
        let prior = last_row_prior(&p)?;
        let vm = Mat::from_vec(n, 1, v.clone());
        let analytic = hessian_free_energy_v(&prior, &vm, &[beta], n - 1, 0)?.scale(ctx.fault.grad_sign());
        let support: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
        let point: Vec<f64> = support.iter().map(|&i| v[i]).collect();
        let f = |x: &[f64]| {
            let mut full = v.clone();
            for (k, &i) in support.iter().enumerate() {
                full[i] = x[k];
            }
            oracle::lse_read(&p, &full, beta)
        };
        let numeric = oracle::finite_diff_hessian(f, &point, 1e-4 / beta.max(1.0));
        out.see_pair(analytic.as_slice(), numeric.as_slice());
        let eig = symmetric_eigenvalues(&analytic);
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().map(|e| e.abs()).fold(0.0, f64::max);
        out.require(lo >= -1e-12 * beta.max(1.0));
        out.require(hi <= beta / 2.0 + 1e-12);
    }
    Ok(out)
}

fn dbeta(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::rel(1e-6);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=10);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta = log_uniform(&mut ctx.rng, 0.05, 20.0);
        let analytic = kernel::dfree_energy_dbeta(&p, &v, beta) * ctx.fault.grad_sign();
        let numeric = oracle::finite_diff_richardson(|b| oracle::lse_read(&p, &v, b[0]), &[beta], 1e-3 * beta)[0];
        let abs = (analytic - numeric).abs();
        out.see(abs, abs / numeric.abs().max(1e-9));
    }
    Ok(out)
}

fn shift_scale(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-12);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=16);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta = log_uniform(&mut ctx.rng, 1e-3, 20.0);
        let c = ctx.rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let e1 = (kernel::free_energy(&p, &shifted, beta) - c - kernel::free_energy(&p, &v, beta)).abs();
        let a = if ctx.rng.gen_bool(0.5) { 0.5 } else { 2.0 };
        let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
        let e2 = (kernel::free_energy(&p, &scaled, beta) - a * kernel::free_energy(&p, &v, a * beta)).abs();
        out.see(e1.max(e2), e1.max(e2));
    }
    Ok(out)
}

fn hidden_temperature_suite(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-9);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=12);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta_max = log_uniform(&mut ctx.rng, 0.1, 30.0);
        let prior = last_row_prior(&p)?;
        let vm = Mat::from_vec(n, 1, v.clone());
        let mut prev = 0.0;
        for k in 0..=10 {
            let lambda = k as f64 / 10.0;
            let (f_tilde, _, _) = ltl_read(&prior, &vm, &[beta_max], &Mat::filled(n, 1, lambda))?;
            let target = f_tilde.get(n - 1, 0);
            let beta_star = hidden_temperature(&prior, &vm, beta_max, lambda, n - 1, 0)?;
            let err = (oracle_f(&p, &v, beta_star) - target).abs();
            out.see(err, err / target.abs().max(1.0));
            out.require((0.0..=beta_max).contains(&beta_star) && beta_star >= prev);
            prev = beta_star;
        }
    }
    Ok(out)
}

/// Top value, its index and the gap to the runner-up over the support.
fn top_two(p: &[f64], v: &[f64]) -> (usize, f64, f64) {
    let mut best = usize::MAX;
    for i in 0..p.len() {
        if p[i] > 0.0 && (best == usize::MAX || v[i] > v[best]) {
            best = i;
        }
    }
    let second = (0..p.len()).filter(|&i| p[i] > 0.0 && i != best).map(|i| v[i]).fold(f64::NEG_INFINITY, f64::max);
    (best, v[best], v[best] - second)
}

fn bounds(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-12);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=16);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta = log_uniform(&mut ctx.rng, 1e-3, 50.0);
        let f = kernel::free_energy(&p, &v, beta);
        let mu = kahan_sum(p.iter().zip(&v).map(|(a, b)| a * b));
        let (star, vmax, gap) = top_two(&p, &v);
        let tol = 1e-12 * vmax.abs().max(1.0);
        let mut violation: f64 = 0.0;
        violation = violation.max(mu - f - tol).max(f - vmax - tol);
        violation = violation.max(vmax + p[star].ln() / beta - f - tol);
        if gap.is_finite() && gap > 0.0 {
            let q = kernel::posterior(&p, &v, beta);
            let bound = (1.0 - p[star]) / p[star] * (-beta * gap).exp();
            violation = violation.max(1.0 - q[star] - bound - 1e-12);
        }
        out.see(violation.max(0.0), violation.max(0.0));
    }
    Ok(out)
}

fn monotonicity(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-12);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=16);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let b1 = log_uniform(&mut ctx.rng, 1e-3, 50.0);
        let b2 = log_uniform(&mut ctx.rng, 1e-3, 50.0);
        let (lo, hi) = (b1.min(b2), b1.max(b2));
        let drop = kernel::free_energy(&p, &v, lo) - kernel::free_energy(&p, &v, hi);
        out.see(drop.max(0.0), drop.max(0.0));
    }
    Ok(out)
}

fn small_beta(ctx: &mut Ctx) -> Result<Outcome> {
    // max over instances of remainder(β)/β² ÷ the same ratio at β = 1e-2
    let mut out = Outcome::rel(10.0);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=16);
        let p = simplex(&mut ctx.rng, n, false);
        let v = normals(&mut ctx.rng, n, 1.0);
        let mu = kahan_sum(p.iter().zip(&v).map(|(a, b)| a * b));
        let var = kahan_sum(p.iter().zip(&v).map(|(a, b)| a * (b - mu).powi(2)));
        let ratio = |beta: f64| (kernel::free_energy(&p, &v, beta) - mu - beta / 2.0 * var).abs() / (beta * beta);
        let reference = ratio(1e-2);
        for beta in [1e-3, 1e-4] {
            let r = ratio(beta) / reference;
            out.see(ratio(beta), r);
        }
    }
    Ok(out)
}

fn random_gates(rng: &mut ChaCha8Rng, n: usize, d: usize, beta_lo: f64, beta_hi: f64) -> Result<FemGates> {
    let lambda = Mat::uniform(n, d, 0.0, 1.0, rng);
    let g = Mat::uniform(n, d, 0.1, 3.0, rng);
    let beta = (0..d).map(|_| log_uniform(rng, beta_lo, beta_hi)).collect();
    FemGates::new(lambda, g, beta)
}

fn oracle_agreement(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-10);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=64);
        let d = ctx.rng.gen_range(1..=32);
        let family = random_family(&mut ctx.rng);
        let p = random_prior(&mut ctx.rng, family, n)?;
        let v = Mat::randn(n, d, 1.0, &mut ctx.rng);
        let gates = random_gates(&mut ctx.rng, n, d, 1e-3, 100.0)?;
        let lib = two_gate_read(&p, &v, &gates)?;
        let brute = oracle::brute_force_read(&p, &v, &gates)?;
        for (a, b) in [(&lib.o, &brute.o), (&lib.mu, &brute.mu), (&lib.f_max, &brute.f_max), (&lib.f_tilde, &brute.f_tilde)] {
            out.see_pair(a.as_slice(), b.as_slice());
        }
    }
    Ok(out)
}

/// `⟨U, o⟩` for the two-gate read with raw (unconstrained) prior weights.
fn oracle_two_gate_objective(w: &Mat, v: &Mat, lambda: &Mat, g: &Mat, beta: &[f64], up: &Mat) -> f64 {
    let (n, d) = v.shape();
    let mut terms = Vec::with_capacity(n * d);
    for t in 0..n {
        let p = &w.row(t)[..=t];
        for c in 0..d {
            let col = column(v, t, c);
            let mu = kahan_sum(p.iter().zip(&col).map(|(a, b)| a * b));
            let f = oracle::lse_read(p, &col, beta[c]);
            let l = lambda.get(t, c);
            terms.push(up.get(t, c) * g.get(t, c) * ((1.0 - l) * mu + l * f));
        }
    }
    kahan_sum(terms)
}

/// Gradient magnitude below which finite differences of an O(1) objective
/// carry no relative accuracy.
const FD_FLOOR: f64 = 1e-4;

fn two_gate_backward(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::rel(1e-6);
    let sign = ctx.fault.grad_sign();
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=6);
        let d = ctx.rng.gen_range(1..=3);
        let family = random_family(&mut ctx.rng);
        let p = random_prior(&mut ctx.rng, family, n)?;
        let v = Mat::randn(n, d, 1.0, &mut ctx.rng);
        let mut gates = random_gates(&mut ctx.rng, n, d, 0.1, 5.0)?;
        gates.lambda = Mat::uniform(n, d, 0.1, 0.9, &mut ctx.rng);
        let up = Mat::randn(n, d, 1.0, &mut ctx.rng);
        let readout = two_gate_read(&p, &v, &gates)?;
        let grads = backward_two_gate(&readout, &up, &p, &v, &gates)?;
        let w = p.weights().clone();
        let obj = |w: &Mat, v: &Mat, l: &Mat, g: &Mat, b: &[f64]| oracle_two_gate_objective(w, v, l, g, b, &up);
        let h = 1e-4;

        let fd_mat = |m: &Mat, eval: &dyn Fn(&Mat) -> f64| -> Vec<f64> {
            oracle::finite_diff_richardson(|x| eval(&Mat::from_vec(m.rows(), m.cols(), x.to_vec())), m.as_slice(), h)
        };
        let dv = fd_mat(&v, &|x| obj(&w, x, &gates.lambda, &gates.g, &gates.beta_max));
        out.see_grad(&grads.dv.scale(sign).into_vec(), &dv, FD_FLOOR);
        let dl = fd_mat(&gates.lambda, &|x| obj(&w, &v, x, &gates.g, &gates.beta_max));
        out.see_grad(grads.dlambda.as_slice(), &dl, FD_FLOOR);
        let dg = fd_mat(&gates.g, &|x| obj(&w, &v, &gates.lambda, x, &gates.beta_max));
        out.see_grad(grads.dg.as_slice(), &dg, FD_FLOOR);
        let db = oracle::finite_diff_richardson(|b| obj(&w, &v, &gates.lambda, &gates.g, b), &gates.beta_max, h);
        out.see_grad(&grads.dbeta_max, &db, FD_FLOOR);

        let support: Vec<(usize, usize)> =
            (0..n).flat_map(|t| (0..=t).map(move |i| (t, i))).filter(|&(t, i)| p.in_support(t, i)).collect();
        // differentiate in log p so tiny weights keep their sign under the step
        let point: Vec<f64> = support.iter().map(|&(t, i)| w.get(t, i).ln()).collect();
        let dp_num = oracle::finite_diff_richardson(
            |x| {
                let mut ww = w.clone();
                for (k, &(t, i)) in support.iter().enumerate() {
                    ww.set(t, i, x[k].exp());
                }
                obj(&ww, &v, &gates.lambda, &gates.g, &gates.beta_max)
            },
            &point,
            1e-4,
        );
        let dp: Vec<f64> = support.iter().map(|&(t, i)| grads.dp.get(t, i) * w.get(t, i)).collect();
        out.see_grad(&dp, &dp_num, FD_FLOOR);
    }
    Ok(out)
}

fn oracle_softmax(b: &[f64]) -> Vec<f64> {
    let m = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = b.iter().map(|x| (x - m).exp()).collect();
    let z = kahan_sum(e.iter().copied());
    e.into_iter().map(|x| x / z).collect()
}

fn prior_logit(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-7);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=8);
        let b = normals(&mut ctx.rng, n, 1.0);
        let v = normals(&mut ctx.rng, n, 1.0);
        let beta = log_uniform(&mut ctx.rng, 0.1, 10.0);
        let logits = Mat::from_fn(n, n, |t, i| if t == n - 1 { b[i] } else { 0.0 });
        let prior = softmax_prior(&logits, &Mask::causal(n))?;
        let p = prior.row(n - 1);
        let q = kernel::posterior(p, &v, beta);
        let analytic: Vec<f64> = q.iter().zip(p).map(|(q, p)| ctx.fault.grad_sign() * (q - p) / beta).collect();
        let numeric = oracle::finite_diff_richardson(|x| oracle::lse_read(&oracle_softmax(x), &v, beta), &b, 1e-3);
        out.see_pair(&analytic, &numeric);
    }
    Ok(out)
}

fn capacity(ctx: &mut Ctx) -> Result<Outcome> {
    // abs error = fraction of (t, channel) cells whose posterior argmax misses
    let mut out = Outcome::abs(0.0);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=32);
        let d = ctx.rng.gen_range(1..=16);
        let family = random_family(&mut ctx.rng);
        let p = random_prior(&mut ctx.rng, family, n)?;
        let v = Mat::randn(n, d, 1.0, &mut ctx.rng);
        let mut delta_min = f64::INFINITY;
        for t in 0..n {
            for c in 0..d {
                let (_, _, gap) = top_two(p.row(t), &column(&v, t, c));
                if gap.is_finite() {
                    delta_min = delta_min.min(gap);
                }
            }
        }
        if !delta_min.is_finite() || delta_min == 0.0 {
            delta_min = 1.0;
        }
        let beta = vec![200.0 / delta_min; d];
        let gates = FemGates::new(Mat::filled(n, d, 1.0), Mat::filled(n, d, 1.0), beta.clone())?;
        let _ = two_gate_read(&p, &v, &gates)?;
        let post = posterior(&p, &v, &beta)?;
        let mut misses = 0usize;
        for t in 0..n {
            for c in 0..d {
                let q = post.slice(t, c);
                let arg_q = (0..=t).fold(0, |b, i| if q[i] > q[b] { i } else { b });
                let (arg_v, _, _) = top_two(p.row(t), &column(&v, t, c));
                if arg_q != arg_v {
                    misses += 1;
                }
            }
        }
        let frac = misses as f64 / (n * d) as f64;
        out.see(frac, frac);
    }
    Ok(out)
}

fn budget_duality(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-8);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=16);
        let p = simplex(&mut ctx.rng, n, true);
        let v = normals(&mut ctx.rng, n, 1.0);
        let (star, _, _) = top_two(&p, &v);
        let kl_limit = -p[star].ln();
        let budget = ctx.rng.gen_range(0.05..0.9) * kl_limit;
        let sol = budget_dual_solve(&p, &v, budget, 1e6)?;
        let q = oracle::brute_posterior(&p, &v, sol.beta);
        let err = (oracle::kl(&q, &p)? - budget).abs();
        out.see(err, err / budget);
        out.require(!sol.saturated);
        let mut prev = 0.0;
        for k in 1..=10 {
            let b = kl_limit * 0.9 * k as f64 / 10.0;
            let beta = budget_dual_solve(&p, &v, b, 1e6)?.beta;
            out.require(beta >= prev);
            prev = beta;
        }
    }
    Ok(out)
}

fn hull(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(0.0);
    out.require(!hull_membership_2pt(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0])?);
    for _ in 0..ctx.instances {
        let d = ctx.rng.gen_range(2..=8);
        let v1 = normals(&mut ctx.rng, d, 1.0);
        let mut v2 = normals(&mut ctx.rng, d, 1.0);
        // force differing coordinate-wise argmaxes
        let (j, k) = (0, 1);
        v2[j] = v1[j] - ctx.rng.gen_range(0.1..1.0);
        v2[k] = v1[k] + ctx.rng.gen_range(0.1..1.0);
        let target: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a.max(*b)).collect();
        out.require(!hull_membership_2pt(&v1, &v2, &target)?);
        let a = ctx.rng.gen_range(0.0..=1.0);
        let inside: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        out.require(hull_membership_2pt(&v1, &v2, &inside)?);
    }
    Ok(out)
}

fn truncation_degrees(_: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(0.0);
    let start = Instant::now();
    for (r, expected) in [(5.0, [19, 22, 25]), (10.0, [33, 36, 40])] {
        for (eps, want) in [1e-4, 1e-6, 1e-8].into_iter().zip(expected) {
            let got = min_truncation_degree(r, eps)?;
            let err = (got as f64 - want as f64).abs();
            out.see(err, err);
        }
    }
    out.require(start.elapsed().as_secs_f64() < 1.0);
    Ok(out)
}

fn multihead_partition(ctx: &mut Ctx) -> Result<Outcome> {
    // per-head reads stacked in time equal one read under the block-diagonal prior
    let mut out = Outcome::abs(1e-12);
    for _ in 0..ctx.instances {
        let heads = ctx.rng.gen_range(1..=4);
        let n = ctx.rng.gen_range(1..=12);
        let dh = ctx.rng.gen_range(1..=4);
        let mut big_w = Mat::zeros(heads * n, heads * n);
        let mut big_v = Mat::zeros(heads * n, dh);
        let mut big_l = Mat::zeros(heads * n, dh);
        let mut big_g = Mat::zeros(heads * n, dh);
        let beta: Vec<f64> = (0..dh).map(|_| log_uniform(&mut ctx.rng, 0.1, 10.0)).collect();
        let mut stacked = Vec::new();
        for h in 0..heads {
            let family = random_family(&mut ctx.rng);
            let p = random_prior(&mut ctx.rng, family, n)?;
            let v = Mat::randn(n, dh, 1.0, &mut ctx.rng);
            let lambda = Mat::uniform(n, dh, 0.0, 1.0, &mut ctx.rng);
            let g = Mat::uniform(n, dh, 0.1, 2.0, &mut ctx.rng);
            for t in 0..n {
                for i in 0..=t {
                    big_w.set(h * n + t, h * n + i, p.weight(t, i));
                }
                big_v.row_mut(h * n + t).copy_from_slice(v.row(t));
                big_l.row_mut(h * n + t).copy_from_slice(lambda.row(t));
                big_g.row_mut(h * n + t).copy_from_slice(g.row(t));
            }
            let gates = FemGates::new(lambda, g, beta.clone())?;
            stacked.extend(two_gate_read(&p, &v, &gates)?.o.into_vec());
        }
        let big = PriorMatrix::from_weights(big_w)?;
        let single = two_gate_read(&big, &big_v, &FemGates::new(big_l, big_g, beta)?)?;
        out.see_pair(single.o.as_slice(), &stacked);
    }
    Ok(out)
}

// ---------------------------------------------------------------- priors

fn prior_invariants(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-12);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=32);
        let family = random_family(&mut ctx.rng);
        let p = random_prior(&mut ctx.rng, family, n)?;
        for t in 0..n {
            let row = p.weights().row(t);
            let sum = kahan_sum(row.iter().copied());
            out.see((sum - 1.0).abs(), (sum - 1.0).abs());
            out.require(row.iter().all(|&w| w >= 0.0));
            out.require(row[t + 1..].iter().all(|&w| w == 0.0));
            out.require((0..=t).all(|i| p.in_support(t, i) == (row[i] > 0.0)));
        }
    }
    Ok(out)
}

fn check_stream<S: LinearScan>(out: &mut Outcome, scan: &mut S, p: &PriorMatrix, v: &Mat, beta: &[f64]) -> Result<()> {
    let streamed = stream_fem_read(scan, v, Some(beta))?;
    let mu = crate::fem_read::mean_read(p, v)?;
    let f = crate::fem_read::free_energy(p, v, beta)?;
    out.see_pair(streamed.mu.as_slice(), mu.as_slice());
    let f_stream = streamed.f_max.ok_or_else(|| FemError::InvalidArgument("missing log-sum-exp branch".into()))?;
    out.see_pair(f_stream.as_slice(), f.as_slice());
    Ok(())
}

fn streaming(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::rel(1e-10);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=64);
        let d = ctx.rng.gen_range(1..=8);
        let v = Mat::randn(n, d, 1.0, &mut ctx.rng);
        let beta: Vec<f64> = (0..d).map(|_| log_uniform(&mut ctx.rng, 1e-2, 20.0)).collect();

        let gates: Vec<f64> = (0..n).map(|_| -ctx.rng.gen_range(0.0..1.0)).collect();
        check_stream(&mut out, &mut DecayScan::new(&gates), &decay_prior(&gates)?, &v, &beta)?;

        let logits = normals(&mut ctx.rng, n, 1.0);
        check_stream(&mut out, &mut AftScan::new(&logits), &aft_prior(&logits)?, &v, &beta)?;

        let gla = random_gla(&mut ctx.rng, n)?;
        check_stream(&mut out, &mut GlaScan::new(&gla), &gla_prior(&gla)?.0, &v, &beta)?;

        let ssm = random_ssm(&mut ctx.rng)?;
        let impulse = ssm.impulse(n);
        let dense = ssm_prior(&impulse, n)?;
        check_stream(&mut out, &mut SsmScan::new(&ssm, n), &dense, &v, &beta)?;
        check_stream(&mut out, &mut ConvScan::new(&impulse, n), &dense, &v, &beta)?;
    }
    Ok(out)
}

fn score_scaling(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-14);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=16);
        let family = [PriorFamily::Gla, PriorFamily::Aft, PriorFamily::Decay, PriorFamily::Ssm][ctx.rng.gen_range(0..4)];
        let scores = Mat::from_fn(n, n, |t, i| if i <= t { ctx.rng.gen_range(0.01..3.0) } else { 0.0 });
        let base = normalize_scores(&RawScores::new(scores.clone(), family)?)?;
        let mut scaled = scores;
        let row = ctx.rng.gen_range(0..n);
        let c = log_uniform(&mut ctx.rng, 1e-3, 1e3);
        scaled.row_mut(row).iter_mut().for_each(|x| *x *= c);
        let other = normalize_scores(&RawScores::new(scaled, family)?)?;
        out.see_pair(other.weights().as_slice(), base.weights().as_slice());
    }
    Ok(out)
}

fn hard_mask(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(0.0);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(2..=12);
        let mut scores = Mat::from_fn(n, n, |t, i| if i <= t { ctx.rng.gen_range(0.01..3.0) } else { 0.0 });
        let t = ctx.rng.gen_range(1..n);
        let i = ctx.rng.gen_range(0..=t);
        scores.set(t, i, 0.0);
        let p = normalize_scores(&RawScores::new(scores, PriorFamily::Gla)?)?;
        out.require(!p.in_support(t, i) && p.weight(t, i) == 0.0);
        let v = Mat::randn(n, 2, 3.0, &mut ctx.rng);
        let beta = [log_uniform(&mut ctx.rng, 0.1, 100.0), log_uniform(&mut ctx.rng, 0.1, 100.0)];
        let q = posterior(&p, &v, &beta)?;
        out.require(q.slice(t, 0)[i] == 0.0 && q.slice(t, 1)[i] == 0.0);
    }
    Ok(out)
}

fn uniform_limits(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-14);
    for n in 1..=ctx.instances {
        let uniform = PriorMatrix::uniform(n);
        let decay = decay_prior(&vec![0.0; n])?;
        let ssm = ssm_prior(&SsmImpulse::new(vec![1.0; n])?, n)?;
        out.see_pair(decay.weights().as_slice(), uniform.weights().as_slice());
        out.see_pair(ssm.weights().as_slice(), uniform.weights().as_slice());
    }
    Ok(out)
}

// ---------------------------------------------------------------- tdc

fn tdc_streaming(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::rel(1e-10);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=48);
        let model = ctx.rng.gen_range(2..=10);
        let hidden = ctx.rng.gen_range(1..=6);
        let params = TdcParams::init(model, hidden, 4, 0.3, &mut ctx.rng);
        let x = Mat::randn(n, model, 1.0, &mut ctx.rng);
        let trace = tdc_forward(&x, &params)?;
        let mut log_space = Mat::zeros(n, hidden);
        let mut ratio = Mat::zeros(n, hidden);
        for t in 0..n {
            for j in 0..hidden {
                let mut a = Vec::with_capacity(t + 1);
                let mut b = Vec::with_capacity(t + 1);
                for i in 0..=t {
                    let u = trace.u.get(i, j);
                    a.push((trace.log_f.get(t, j) - trace.log_f.get(i, j)).exp() * u);
                    b.push(trace.f.get(t, j) / trace.f.get(i, j) * u);
                }
                log_space.set(t, j, kahan_sum(a));
                ratio.set(t, j, kahan_sum(b));
            }
        }
        out.see_pair(trace.h_tilde.as_slice(), log_space.as_slice());
        out.see_pair(trace.h_tilde.as_slice(), ratio.as_slice());
    }
    Ok(out)
}

fn coupling_gates(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(0.0);
    for _ in 0..ctx.instances {
        let n = ctx.rng.gen_range(1..=8);
        let d = ctx.rng.gen_range(1..=6);
        let q = ctx.rng.gen_range(1..=3);
        let mut heads = CouplingHeads::zeros(4 * q, 3, d)?;
        let scale = log_uniform(&mut ctx.rng, 0.1, 100.0);
        for m in [&mut heads.w_prior, &mut heads.w_value, &mut heads.w_gate, &mut heads.w_lambda] {
            *m = Mat::randn(m.rows(), m.cols(), scale, &mut ctx.rng);
        }
        let c = Mat::randn(n, 4 * q, 1.0, &mut ctx.rng);
        let m = modulation(&c, &heads)?;
        let gates = random_gates(&mut ctx.rng, n, d, 0.1, 10.0)?;
        let theta = Mat::randn(n, 3, 1.0, &mut ctx.rng);
        let v = Mat::randn(n, d, 1.0, &mut ctx.rng);
        let (_, _, g) = tdc_couple(&theta, &v, &gates, &m)?;
        out.require(g.lambda.as_slice().iter().all(|l| (0.0..=1.0).contains(l)));
        out.require(g.g.as_slice().iter().all(|&x| x > 0.0));
    }
    Ok(out)
}

// ---------------------------------------------------------------- block

fn param_budget(_: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(0.0);
    for d_model in [48usize, 64, 96] {
        for (num, den, r) in [(d_model, 2, 4), (2 * d_model, 3, 2)] {
            if num % den == 0 {
                let (count, ok) = param_budget_check(d_model, num / den, r);
                out.require(ok && count == 4 * d_model * d_model);
            }
            out.require(param_budget_check_ratio(d_model, num, den, r));
        }
        let fem = ToyModel::new(ToyModelKind::Fem, d_model, 4, 0)?;
        let base = ToyModel::new(ToyModelKind::Softmax, d_model, 4, 0)?;
        out.require(fem.total_param_count() == base.total_param_count());
        out.require(fem.linear_param_count() == base.linear_param_count());
    }
    Ok(out)
}

fn block_case(rng: &mut ChaCha8Rng) -> (BlockConfig, Mat) {
    let family = if rng.gen_bool(0.5) { PriorFamily::Softmax } else { PriorFamily::Gla };
    let config = BlockConfig { d_model: 12, d: 8, r: 4, heads: 2, family, toggles: Toggles::ALL };
    let n = rng.gen_range(1..=10);
    (config, Mat::randn(n, 12, 1.0, rng))
}

fn frozen_gate(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(1e-12);
    for k in 0..ctx.instances {
        let (config, x) = block_case(&mut ctx.rng);
        let params = init_params(&config, k as u64)?;
        let (frozen, _) = block_forward_with(&x, &params, &config, true)?;
        let off = BlockConfig { toggles: Toggles { gate: false, ..config.toggles }, ..config };
        let (plain, _) = block_forward(&x, &params, &off)?;
        out.see_pair(frozen.as_slice(), plain.as_slice());
    }
    Ok(out)
}

fn zero_lambda(ctx: &mut Ctx) -> Result<Outcome> {
    let mut out = Outcome::abs(0.0);
    for k in 0..ctx.instances {
        let (config, x) = block_case(&mut ctx.rng);
        let mut params = init_params(&config, k as u64)?;
        params.b_lambda = Mat::filled(1, config.d, -800.0);
        let (full, _) = block_forward(&x, &params, &config)?;
        let plain = BlockConfig { toggles: Toggles { lse: false, temp: false, ..config.toggles }, ..config };
        let (mean_only, _) = block_forward(&x, &params, &plain)?;
        out.see_pair(full.as_slice(), mean_only.as_slice());
    }
    Ok(out)
}

// ---------------------------------------------------------------- tasks

fn winner_is_max(ctx: &mut Ctx) -> Result<Outcome> {
    // abs error = fraction of channels whose winner is not the channel max
    let mut out = Outcome::abs(1e-3);
    let cfg = ArgmaxTaskConfig { seed: ctx.rng.gen(), ..Default::default() };
    let mut misses = 0usize;
    for k in 0..ctx.instances {
        let s = gen_argmax_sample(&cfg, Split::Train, k as u64);
        let target = s.target();
        misses += s.winners.iter().enumerate().filter(|&(j, &a)| s.v.get(a, j) != target[j]).count();
    }
    let frac = misses as f64 / (ctx.instances * cfg.d) as f64;
    out.see(frac, frac);
    Ok(out)
}

fn random_guess(ctx: &mut Ctx) -> Result<Outcome> {
    // predictions copy a uniformly drawn row per channel; |accuracy - 1/T|
    // against five binomial standard deviations
    let cfg = ArgmaxTaskConfig { t: 32, d: 64, seed: ctx.rng.gen(), ..Default::default() };
    let samples: Vec<ArgmaxSample> = (0..ctx.instances).map(|k| gen_argmax_sample(&cfg, Split::Val, k as u64)).collect();
    let y = Mat::from_fn(samples.len(), cfg.d, |b, j| samples[b].v.get(ctx.rng.gen_range(0..cfg.t), j));
    let acc = index_accuracy(&y, &samples)?;
    let chance = 1.0 / cfg.t as f64;
    let cells = (samples.len() * cfg.d) as f64;
    let mut out = Outcome::abs(5.0 * (chance * (1.0 - chance) / cells).sqrt());
    out.see((acc - chance).abs(), (acc - chance).abs() / chance);
    Ok(out)
}
