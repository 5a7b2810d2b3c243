//! Causal selection priors.
//!
//! Every family produces a row-stochastic lower-triangular [`PriorMatrix`]
//! over past indices. Dense constructors are O(T²) and serve as the source
//! of truth; [`stream`] holds the O(T) scans for the associative families,
//! whose normalizer is the same scan applied to an all-ones stream.

mod dense;
pub mod rope;
pub mod stream;

pub use dense::{aft_prior, decay_prior, gla_prior, softmax_prior, ssm_prior};
pub use stream::{
    gla_stream_state, stream_fem_read, stream_read_equivalence, AftScan, ConvScan, DecayScan, GlaScan, LinearScan, SsmScan,
    StreamRead, StreamState,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FemError, Result};
use crate::mat::Mat;

/// Clamp applied to log-envelope differences before exponentiation.
pub const ENVELOPE_EXP_CLAMP: f64 = 60.0;

/// Positivity floor added after `ReLU` on GLA features.
pub const GLA_FEATURE_EPS: f64 = 1e-6;

/// Tolerance on row sums checked by [`PriorMatrix::validate`].
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Softmax,
    Gla,
    Aft,
    Decay,
    Ssm,
}

impl PriorFamily {
    pub const ALL: [PriorFamily; 5] =
        [PriorFamily::Softmax, PriorFamily::Gla, PriorFamily::Aft, PriorFamily::Decay, PriorFamily::Ssm];

    pub fn name(self) -> &'static str {
        match self {
            PriorFamily::Softmax => "softmax",
            PriorFamily::Gla => "gla",
            PriorFamily::Aft => "aft",
            PriorFamily::Decay => "decay",
            PriorFamily::Ssm => "ssm",
        }
    }

    /// Whether the family admits an O(1)-per-step associative scan.
    pub fn is_streaming(self) -> bool {
        !matches!(self, PriorFamily::Softmax)
    }
}

impl std::str::FromStr for PriorFamily {
    type Err = FemError;

    fn from_str(s: &str) -> Result<Self> {
        PriorFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| FemError::InvalidArgument(format!("unknown prior family `{s}`")))
    }
}

/// Boolean T×T mask with `allowed(t, i) == false` for every `i > t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    len: usize,
    bits: Vec<bool>,
}

impl Mask {
    /// Full causal mask: `i <= t`.
    pub fn causal(len: usize) -> Self {
        let mut bits = vec![false; len * len];
        for t in 0..len {
            for i in 0..=t {
                bits[t * len + i] = true;
            }
        }
        Self { len, bits }
    }

    /// Local window: `t - window < i <= t`.
    pub fn window(len: usize, window: usize) -> Self {
        let mut bits = vec![false; len * len];
        for t in 0..len {
            for i in t.saturating_sub(window.saturating_sub(1))..=t {
                bits[t * len + i] = true;
            }
        }
        Self { len, bits }
    }

    /// Rejects any entry above the diagonal.
    pub fn from_bits(len: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != len * len {
            return Err(shape_err(format!("mask needs {} entries, got {}", len * len, bits.len())));
        }
        for t in 0..len {
            for i in t + 1..len {
                if bits[t * len + i] {
                    return Err(FemError::InvalidArgument(format!("mask is not causal at ({t}, {i})")));
                }
            }
        }
        Ok(Self { len, bits })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allowed(&self, t: usize, i: usize) -> bool {
        self.bits[t * self.len + i]
    }

    /// Removes index `i` from every row.
    pub fn block_index(&mut self, i: usize) {
        for t in 0..self.len {
            self.bits[t * self.len + i] = false;
        }
    }
}

/// Row-stochastic causal prior `p_t(i)` with its support `M_t = {i : p_t(i) > 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    weights: Mat,
    support: Vec<bool>,
}

impl PriorMatrix {
    /// Builds a prior from weights that are already normalized; the support
    /// is the positivity pattern. Use [`normalize_scores`] for raw scores.
    pub fn from_weights(weights: Mat) -> Result<Self> {
        if weights.rows() != weights.cols() {
            return Err(shape_err(format!("prior must be square, got {:?}", weights.shape())));
        }
        let support = weights.as_slice().iter().map(|&w| w > 0.0).collect();
        let prior = Self { weights, support };
        prior.validate()?;
        Ok(prior)
    }

    /// Uniform causal prior, `p_t(i) = 1/t`.
    pub fn uniform(len: usize) -> Self {
        let weights = Mat::from_fn(len, len, |t, i| if i <= t { 1.0 / (t + 1) as f64 } else { 0.0 });
        let support = weights.as_slice().iter().map(|&w| w > 0.0).collect();
        Self { weights, support }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, t: usize, i: usize) -> f64 {
        self.weights.get(t, i)
    }

    /// Row `t` restricted to `i <= t`.
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.weights.row(t)[..=t]
    }

    #[inline]
    pub fn in_support(&self, t: usize, i: usize) -> bool {
        self.support[t * self.len() + i]
    }

    pub fn support_indices(&self, t: usize) -> Vec<usize> {
        (0..=t).filter(|&i| self.in_support(t, i)).collect()
    }

    /// Checks nonnegativity, causality, zeros off support and unit row sums.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for t in 0..n {
            let mut sum = 0.0;
            for i in 0..n {
                let w = self.weights.get(t, i);
                if !w.is_finite() || w < 0.0 {
                    return Err(FemError::NonFinite(format!("prior weight ({t}, {i}) = {w}")));
                }
                if i > t && (w != 0.0 || self.in_support(t, i)) {
                    return Err(FemError::InvalidArgument(format!("prior is not causal at ({t}, {i})")));
                }
                if !self.in_support(t, i) && w != 0.0 {
                    return Err(FemError::InvalidArgument(format!("mass off support at ({t}, {i})")));
                }
                sum += w;
            }
            if sum == 0.0 {
                return Err(FemError::EmptySupport { row: t });
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(FemError::InvalidArgument(format!("row {t} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Unnormalized nonnegative causal scores `s_t(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores {
    pub scores: Mat,
    pub family: PriorFamily,
}

impl RawScores {
    pub fn new(scores: Mat, family: PriorFamily) -> Result<Self> {
        if scores.rows() != scores.cols() {
            return Err(shape_err(format!("scores must be square, got {:?}", scores.shape())));
        }
        let n = scores.rows();
        for t in 0..n {
            for i in 0..n {
                let s = scores.get(t, i);
                if !(s >= 0.0) || !s.is_finite() {
                    return Err(FemError::InvalidArgument(format!("score ({t}, {i}) = {s} is not a finite nonnegative")));
                }
                if i > t && s != 0.0 {
                    return Err(FemError::InvalidArgument(format!("score ({t}, {i}) above the diagonal")));
                }
            }
        }
        Ok(Self { scores, family })
    }
}

/// `p_t(i) = s_t(i) / Σ_{r<=t} s_t(r)`; support is the positivity pattern of `s`.
pub fn normalize_scores(raw: &RawScores) -> Result<PriorMatrix> {
    let n = raw.scores.rows();
    let mut weights = Mat::zeros(n, n);
    let mut support = vec![false; n * n];
    for t in 0..n {
        let row = &raw.scores.row(t)[..=t];
        let z: f64 = row.iter().sum();
        if !(z > 0.0) {
            return Err(FemError::EmptySupport { row: t });
        }
        for (i, &s) in row.iter().enumerate() {
            if s > 0.0 {
                weights.set(t, i, s / z);
                support[t * n + i] = true;
            }
        }
    }
    Ok(PriorMatrix { weights, support })
}

/// Parameters of the gated-linear-attention prior, already mapped to the
/// nonnegative orthant (`ReLU(RoPE(·)) + ε`).
#[derive(Debug, Clone, PartialEq)]
pub struct GlaParams {
    /// T×m query features.
    pub q: Mat,
    /// T×m key features.
    pub k: Mat,
    /// Per-step decay gate, `g_τ <= 0`.
    pub gates: Vec<f64>,
}

impl GlaParams {
    /// Validates positivity of the features and nonpositivity of the gates.
    pub fn new(q: Mat, k: Mat, gates: Vec<f64>) -> Result<Self> {
        if q.shape() != k.shape() || gates.len() != q.rows() {
            return Err(shape_err(format!(
                "gla params: q {:?}, k {:?}, gates {}",
                q.shape(),
                k.shape(),
                gates.len()
            )));
        }
        if q.as_slice().iter().chain(k.as_slice()).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(FemError::InvalidArgument("gla features must be strictly positive".into()));
        }
        if gates.iter().any(|&g| !(g <= 0.0)) {
            return Err(FemError::InvalidArgument("gla gates must be nonpositive".into()));
        }
        Ok(Self { q, k, gates })
    }

    /// Maps raw queries/keys through RoPE, `ReLU` and the ε floor.
    pub fn from_raw(q_raw: &Mat, k_raw: &Mat, gates: Vec<f64>) -> Result<Self> {
        let feat = |m: &Mat| rope::apply_rope(m, rope::ROPE_BASE).map(|x| x.max(0.0) + GLA_FEATURE_EPS);
        Self::new(feat(q_raw), feat(k_raw), gates)
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    /// `log D_t = Σ_{τ<=t} g_τ`.
    pub fn log_envelope(&self) -> Vec<f64> {
        cumsum(&self.gates)
    }
}

/// Nonnegative impulse response `H(τ)`, `τ = 0..L-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmImpulse {
    h: Vec<f64>,
}

impl SsmImpulse {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(FemError::InvalidArgument("impulse must have at least one tap".into()));
        }
        if h.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(FemError::InvalidArgument("impulse taps must be finite and nonnegative".into()));
        }
        Ok(Self { h })
    }

    pub fn taps(&self) -> &[f64] {
        &self.h
    }

    #[inline]
    pub fn at(&self, lag: usize) -> f64 {
        self.h.get(lag).copied().unwrap_or(0.0)
    }
}

/// Diagonal state-space model with nonnegative parameters:
/// `H(0) = d`, `H(τ) = Σ_n c_n a_n^{τ-1} b_n` for `τ >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalSsm {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

impl DiagonalSsm {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self> {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(shape_err("diagonal ssm: a, b, c must have equal length"));
        }
        let ok = a.iter().all(|&x| (0.0..=1.0).contains(&x))
            && b.iter().chain(&c).all(|&x| x >= 0.0 && x.is_finite())
            && d >= 0.0;
        if !ok {
            return Err(FemError::InvalidArgument("diagonal ssm needs a in [0,1] and nonnegative b, c, d".into()));
        }
        Ok(Self { a, b, c, d })
    }

    /// First `len` taps of the impulse response.
    pub fn impulse(&self, len: usize) -> SsmImpulse {
        let mut h = Vec::with_capacity(len);
        for lag in 0..len {
            let tap = if lag == 0 {
                self.d
            } else {
                self.a
                    .iter()
                    .zip(&self.b)
                    .zip(&self.c)
                    .map(|((&a, &b), &c)| c * a.powi(lag as i32 - 1) * b)
                    .sum()
            };
            h.push(tap);
        }
        SsmImpulse { h }
    }
}

pub(crate) fn cumsum(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    xs.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}
