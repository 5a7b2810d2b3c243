//! O(T) streaming reads for the associative prior families.
//!
//! Each family is a [`LinearScan`]: a linear operator over an input stream
//! `u_t` with O(1) state per step. The FEM read pushes the augmented stream
//! `[v_t, exp(β (v_t - m)), 1]` through one scan, so the numerator of the
//! mean, the log-sum-exp branch and the normalizer come out of the same pass.
//! `m` is a per-channel running max; when it grows, the log-sum-exp columns
//! of the state are rescaled, which is valid because the state is linear in `u`.
//!
//! States carry the decay envelope multiplied in (`e^{g_t} S_{t-1} + …`)
//! rather than the raw `Σ D_r^{-1}(…)` accumulators, which overflow for long
//! sequences. The two are equal up to the factor `D_t`.

use super::{cumsum, DiagonalSsm, GlaParams, SsmImpulse};
use crate::error::{shape_err, FemError, Result};
use crate::mat::{dot, Mat};

/// Linear causal operator with O(1) state per step.
pub trait LinearScan {
    /// Sequence length the operator is defined for.
    fn len(&self) -> usize;

    /// Number of state rows; every input channel gets one column.
    fn state_rows(&self) -> usize;

    /// Consumes `u_t` and writes the operator output `y_t` (one entry per channel).
    fn step(&mut self, state: &mut Mat, t: usize, u: &[f64], out: &mut [f64]);
}

/// Decayed sum `y_t = Σ_{i<=t} exp(Σ_{τ=i+1}^t g_τ) u_i`.
pub struct DecayScan<'a> {
    gates: &'a [f64],
}

impl<'a> DecayScan<'a> {
    pub fn new(gates: &'a [f64]) -> Self {
        Self { gates }
    }
}

impl LinearScan for DecayScan<'_> {
    fn len(&self) -> usize {
        self.gates.len()
    }

    fn state_rows(&self) -> usize {
        1
    }

    fn step(&mut self, state: &mut Mat, t: usize, u: &[f64], out: &mut [f64]) {
        let decay = self.gates[t].exp();
        for ((s, &x), o) in state.row_mut(0).iter_mut().zip(u).zip(out.iter_mut()) {
            *s = decay * *s + x;
            *o = *s;
        }
    }
}

/// `y_t = Σ_{i<=t} exp(k_i - m_t) u_i` with `m_t` the running max of the logits.
/// The common factor `exp(-m_t)` cancels in every ratio read off the scan.
pub struct AftScan<'a> {
    logits: &'a [f64],
    running_max: f64,
}

impl<'a> AftScan<'a> {
    pub fn new(logits: &'a [f64]) -> Self {
        Self { logits, running_max: f64::NEG_INFINITY }
    }
}

impl LinearScan for AftScan<'_> {
    fn len(&self) -> usize {
        self.logits.len()
    }

    fn state_rows(&self) -> usize {
        1
    }

    fn step(&mut self, state: &mut Mat, t: usize, u: &[f64], out: &mut [f64]) {
        let k = self.logits[t];
        if k > self.running_max {
            let shrink = (self.running_max - k).exp();
            for s in state.row_mut(0) {
                *s *= shrink;
            }
            self.running_max = k;
        }
        let w = (k - self.running_max).exp();
        for ((s, &x), o) in state.row_mut(0).iter_mut().zip(u).zip(out.iter_mut()) {
            *s += w * x;
            *o = *s;
        }
    }
}

/// Gated linear attention: `S_t = e^{g_t} S_{t-1} + k̃_t ⊗ u_t`, `y_t = q̃_tᵀ S_t`.
pub struct GlaScan<'a> {
    params: &'a GlaParams,
}

impl<'a> GlaScan<'a> {
    pub fn new(params: &'a GlaParams) -> Self {
        Self { params }
    }
}

impl LinearScan for GlaScan<'_> {
    fn len(&self) -> usize {
        self.params.len()
    }

    fn state_rows(&self) -> usize {
        self.params.q.cols()
    }

    fn step(&mut self, state: &mut Mat, t: usize, u: &[f64], out: &mut [f64]) {
        let decay = self.params.gates[t].exp();
        let key = self.params.k.row(t);
        let query = self.params.q.row(t);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, (&kj, &qj)) in key.iter().zip(query).enumerate() {
            for ((s, &x), o) in state.row_mut(j).iter_mut().zip(u).zip(out.iter_mut()) {
                *s = decay * *s + kj * x;
                *o += qj * *s;
            }
        }
    }
}

/// Diagonal SSM: `y_t = d u_t + Σ_n c_n x_{n,t-1}`, `x_{n,t} = a_n x_{n,t-1} + b_n u_t`.
pub struct SsmScan<'a> {
    ssm: &'a DiagonalSsm,
    len: usize,
}

impl<'a> SsmScan<'a> {
    pub fn new(ssm: &'a DiagonalSsm, len: usize) -> Self {
        Self { ssm, len }
    }
}

impl LinearScan for SsmScan<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn state_rows(&self) -> usize {
        self.ssm.a.len()
    }

    fn step(&mut self, state: &mut Mat, _t: usize, u: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(u) {
            *o = self.ssm.d * x;
        }
        for n in 0..self.ssm.a.len() {
            let (a, b, c) = (self.ssm.a[n], self.ssm.b[n], self.ssm.c[n]);
            for ((s, &x), o) in state.row_mut(n).iter_mut().zip(u).zip(out.iter_mut()) {
                *o += c * *s;
                *s = a * *s + b * x;
            }
        }
    }
}

/// Direct causal convolution with a finite impulse (O(L) per step). Used for
/// impulses that are not given in state-space form.
pub struct ConvScan<'a> {
    impulse: &'a SsmImpulse,
    len: usize,
}

impl<'a> ConvScan<'a> {
    pub fn new(impulse: &'a SsmImpulse, len: usize) -> Self {
        Self { impulse, len }
    }
}

impl LinearScan for ConvScan<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn state_rows(&self) -> usize {
        self.impulse.taps().len()
    }

    fn step(&mut self, state: &mut Mat, t: usize, u: &[f64], out: &mut [f64]) {
        // Ring buffer: row (t mod L) holds u_t.
        let taps = self.impulse.taps();
        let lags = taps.len();
        state.row_mut(t % lags).copy_from_slice(u);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (lag, &h) in taps.iter().enumerate().take(t + 1) {
            if h == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(state.row((t - lag) % lags)) {
                *o += h * x;
            }
        }
    }
}

/// Output of a streaming read.
#[derive(Debug, Clone)]
pub struct StreamRead {
    pub mu: Mat,
    /// Log-sum-exp branch at `beta`, present when a temperature was given.
    pub f_max: Option<Mat>,
}

/// Streams values (and optionally the log-sum-exp branch at per-channel
/// inverse temperatures `beta`) through `scan`, normalizing with the
/// all-ones channel.
pub fn stream_fem_read<S: LinearScan>(scan: &mut S, values: &Mat, beta: Option<&[f64]>) -> Result<StreamRead> {
    let (n, d) = values.shape();
    if scan.len() != n {
        return Err(shape_err(format!("scan length {} vs {} value rows", scan.len(), n)));
    }
    if let Some(b) = beta {
        if b.len() != d {
            return Err(shape_err(format!("beta has {} entries for {d} channels", b.len())));
        }
        if b.iter().any(|&x| !(x > 0.0)) {
            return Err(FemError::InvalidArgument("beta must be positive".into()));
        }
    }
    let lse_width = if beta.is_some() { d } else { 0 };
    let width = d + lse_width + 1;
    let ones = d + lse_width;
    let mut state = Mat::zeros(scan.state_rows(), width);
    let mut u = vec![0.0; width];
    let mut out = vec![0.0; width];
    let mut running_max = vec![f64::NEG_INFINITY; lse_width];
    let mut mu = Mat::zeros(n, d);
    let mut f_max = beta.map(|_| Mat::zeros(n, d));
    u[ones] = 1.0;

    for t in 0..n {
        let v = values.row(t);
        u[..d].copy_from_slice(v);
        if let Some(b) = beta {
            for c in 0..d {
                let scaled = b[c] * v[c];
                if scaled > running_max[c] {
                    if running_max[c].is_finite() {
                        let shrink = (running_max[c] - scaled).exp();
                        for r in 0..state.rows() {
                            state.row_mut(r)[d + c] *= shrink;
                        }
                    }
                    running_max[c] = scaled;
                }
                u[d + c] = (scaled - running_max[c]).exp();
            }
        }
        scan.step(&mut state, t, &u, &mut out);
        let den = out[ones];
        if !(den > 0.0) {
            return Err(FemError::EmptySupport { row: t });
        }
        for c in 0..d {
            mu.set(t, c, out[c] / den);
        }
        if let (Some(b), Some(f)) = (beta, f_max.as_mut()) {
            for c in 0..d {
                let ratio = out[d + c] / den;
                f.set(t, c, (running_max[c] + ratio.ln()) / b[c]);
            }
        }
    }
    Ok(StreamRead { mu, f_max })
}

/// Streaming GLA state after the last step: `a` is the envelope-scaled
/// accumulator over `[v; 1]` (m×(d+1)), `b` its key-only column.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub a: Mat,
    pub b: Vec<f64>,
    /// `log D_T = Σ_τ g_τ`.
    pub log_envelope: f64,
    /// Normalizer of the last row, `Z_T = ⟨q̃_T, b⟩` (envelope-scaled).
    pub z: f64,
}

/// Runs the GLA scan over `[values; 1]` and returns the terminal state.
pub fn gla_stream_state(params: &GlaParams, values: &Mat) -> Result<StreamState> {
    let (n, d) = values.shape();
    if n != params.len() {
        return Err(shape_err("gla stream: value rows differ from sequence length"));
    }
    let mut scan = GlaScan::new(params);
    let mut a = Mat::zeros(scan.state_rows(), d + 1);
    let mut u = vec![1.0; d + 1];
    let mut out = vec![0.0; d + 1];
    for t in 0..n {
        u[..d].copy_from_slice(values.row(t));
        scan.step(&mut a, t, &u, &mut out);
    }
    let b = a.col(d);
    let z = if n > 0 { dot(params.q.row(n - 1), &b) } else { 0.0 };
    let log_envelope = cumsum(&params.gates).last().copied().unwrap_or(0.0);
    Ok(StreamState { a, b, log_envelope, z })
}

pub(crate) fn gla_terminal_state(params: &GlaParams) -> StreamState {
    gla_stream_state(params, &Mat::zeros(params.len(), 0)).expect("shapes agree by construction")
}

/// Dense and streaming expectation reads under the GLA prior.
pub fn stream_read_equivalence(params: &GlaParams, values: &Mat) -> Result<(Mat, Mat)> {
    if values.rows() != params.len() {
        return Err(shape_err("stream_read_equivalence: value rows differ from sequence length"));
    }
    let (prior, _) = super::gla_prior(params)?;
    let (n, d) = values.shape();
    let mut dense = Mat::zeros(n, d);
    for t in 0..n {
        for (i, &w) in prior.row(t).iter().enumerate() {
            for (o, &v) in dense.row_mut(t).iter_mut().zip(values.row(i)) {
                *o += w * v;
            }
        }
    }
    let streamed = stream_fem_read(&mut GlaScan::new(params), values, None)?.mu;
    Ok((dense, streamed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{aft_prior, decay_prior, gla_prior, ssm_prior, PriorMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_mean(p: &PriorMatrix, v: &Mat) -> Mat {
        Mat::from_fn(v.rows(), v.cols(), |t, c| (0..=t).map(|i| p.weight(t, i) * v.get(i, c)).sum())
    }

    fn dense_lse(p: &PriorMatrix, v: &Mat, beta: &[f64]) -> Mat {
        Mat::from_fn(v.rows(), v.cols(), |t, c| {
            let b = beta[c];
            let m = (0..=t).map(|i| b * v.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..=t).map(|i| p.weight(t, i) * (b * v.get(i, c) - m).exp()).sum();
            (m + s.ln()) / b
        })
    }

    fn random_gla(rng: &mut ChaCha8Rng, n: usize, m: usize) -> GlaParams {
        let q = Mat::randn(n, m, 1.0, rng);
        let k = Mat::randn(n, m, 1.0, rng);
        let gates = (0..n).map(|_| -rng.gen_range(0.0..0.5)).collect();
        GlaParams::from_raw(&q, &k, gates).unwrap()
    }

    #[test]
    fn gla_dense_matches_stream_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_gla(&mut rng, 1, 4);
        let v = Mat::randn(1, 3, 1.0, &mut rng);
        let (dense, streamed) = stream_read_equivalence(&params, &v).unwrap();
        assert!(dense.max_abs_diff(&v) < 1e-15);
        assert!(streamed.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn gla_uniform_gives_running_mean() {
        let n = 5;
        let params = GlaParams::new(Mat::filled(n, 2, 1.0), Mat::filled(n, 2, 1.0), vec![0.0; n]).unwrap();
        let v = Mat::from_fn(n, 1, |t, _| t as f64);
        let (dense, streamed) = stream_read_equivalence(&params, &v).unwrap();
        for t in 0..n {
            let mean = t as f64 / 2.0;
            assert!((dense.get(t, 0) - mean).abs() < 1e-14);
            assert!((streamed.get(t, 0) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn gla_random_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_gla(&mut rng, 8, 4);
        let v = Mat::randn(8, 3, 1.0, &mut rng);
        let (dense, streamed) = stream_read_equivalence(&params, &v).unwrap();
        assert!(dense.max_abs_diff(&streamed) <= 1e-10);
    }

    #[test]
    fn gla_terminal_state_normalizer_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_gla(&mut rng, 6, 4);
        let (_, state) = gla_prior(&params).unwrap();
        let env = params.log_envelope();
        let last = params.len() - 1;
        let dense_z: f64 = (0..=last)
            .map(|i| (env[last] - env[i]).exp() * dot(params.q.row(last), params.k.row(i)))
            .sum();
        assert!((state.z - dense_z).abs() <= 1e-10 * dense_z);
        assert_eq!(state.a.col(0), state.b);
    }

    #[test]
    fn lse_branch_streams_for_every_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 24;
        let v = Mat::randn(n, 3, 2.0, &mut rng);
        let beta = [0.5, 3.0, 20.0];

        let gates: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..1.0)).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let gla = random_gla(&mut rng, n, 4);
        let ssm = DiagonalSsm::new(vec![0.9, 0.5], vec![1.0, 0.3], vec![0.7, 2.0], 0.4).unwrap();
        let impulse = ssm.impulse(n);

        let cases: Vec<(PriorMatrix, StreamRead)> = vec![
            (decay_prior(&gates).unwrap(), stream_fem_read(&mut DecayScan::new(&gates), &v, Some(&beta)).unwrap()),
            (aft_prior(&logits).unwrap(), stream_fem_read(&mut AftScan::new(&logits), &v, Some(&beta)).unwrap()),
            (gla_prior(&gla).unwrap().0, stream_fem_read(&mut GlaScan::new(&gla), &v, Some(&beta)).unwrap()),
            (ssm_prior(&impulse, n).unwrap(), stream_fem_read(&mut SsmScan::new(&ssm, n), &v, Some(&beta)).unwrap()),
            (ssm_prior(&impulse, n).unwrap(), stream_fem_read(&mut ConvScan::new(&impulse, n), &v, Some(&beta)).unwrap()),
        ];
        for (k, (prior, read)) in cases.iter().enumerate() {
            assert!(read.mu.max_abs_diff(&dense_mean(prior, &v)) <= 1e-10, "case {k} mean");
            let f = read.f_max.as_ref().unwrap();
            assert!(f.max_abs_diff(&dense_lse(prior, &v, &beta)) <= 1e-10, "case {k} lse");
        }
    }

    #[test]
    fn stream_rejects_bad_beta() {
        let v = Mat::zeros(3, 2);
        let gates = [0.0; 3];
        assert!(stream_fem_read(&mut DecayScan::new(&gates), &v, Some(&[1.0])).is_err());
        assert!(stream_fem_read(&mut DecayScan::new(&gates), &v, Some(&[1.0, 0.0])).is_err());
    }
}
