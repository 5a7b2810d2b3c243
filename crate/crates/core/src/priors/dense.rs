//! O(T²) dense prior constructors.

use super::{
    cumsum, normalize_scores, stream, GlaParams, Mask, PriorFamily, PriorMatrix, RawScores, SsmImpulse,
    StreamState, ENVELOPE_EXP_CLAMP,
};
use crate::error::{shape_err, FemError, Result};
use crate::mat::{dot, Mat};

/// Masked row softmax, stabilized by the per-row max over unmasked entries.
pub fn softmax_prior(logits: &Mat, mask: &Mask) -> Result<PriorMatrix> {
    let weights = masked_softmax_rows(logits, mask)?;
    let n = weights.rows();
    let support = (0..n * n).map(|k| weights.as_slice()[k] > 0.0).collect();
    Ok(PriorMatrix { weights, support })
}

pub(crate) fn masked_softmax_rows(logits: &Mat, mask: &Mask) -> Result<Mat> {
    let n = logits.rows();
    if logits.cols() != n || mask.len() != n {
        return Err(shape_err(format!("softmax prior: logits {:?}, mask {}", logits.shape(), mask.len())));
    }
    let mut out = Mat::zeros(n, n);
    for t in 0..n {
        let row = logits.row(t);
        let max = (0..=t)
            .filter(|&i| mask.allowed(t, i))
            .map(|i| row[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(FemError::EmptySupport { row: t });
        }
        if !max.is_finite() {
            return Err(FemError::NonFinite(format!("softmax logits in row {t}")));
        }
        let mut z = 0.0;
        let out_row = out.row_mut(t);
        for i in 0..=t {
            if mask.allowed(t, i) {
                let e = (row[i] - max).exp();
                out_row[i] = e;
                z += e;
            }
        }
        for w in &mut out_row[..=t] {
            *w /= z;
        }
    }
    Ok(out)
}

/// `K_{t,i} = exp(clamp(L_t - L_i))` for `i <= t`, zero above the diagonal.
pub(crate) fn decay_kernel(log_envelope: &[f64]) -> Mat {
    let n = log_envelope.len();
    Mat::from_fn(n, n, |t, i| {
        if i <= t {
            (log_envelope[t] - log_envelope[i]).clamp(-ENVELOPE_EXP_CLAMP, ENVELOPE_EXP_CLAMP).exp()
        } else {
            0.0
        }
    })
}

/// Gated-linear-attention prior `p_t(i) ∝ exp(Σ_{τ=i+1}^t g_τ) ⟨q̃_t, k̃_i⟩`,
/// together with the terminal streaming state for the all-ones stream.
pub fn gla_prior(params: &GlaParams) -> Result<(PriorMatrix, StreamState)> {
    let kernel = decay_kernel(&params.log_envelope());
    let n = params.len();
    let scores = Mat::from_fn(n, n, |t, i| {
        if i <= t {
            kernel.get(t, i) * dot(params.q.row(t), params.k.row(i))
        } else {
            0.0
        }
    });
    let prior = normalize_scores(&RawScores { scores, family: PriorFamily::Gla })?;
    let state = stream::gla_terminal_state(params);
    Ok((prior, state))
}

/// AFT-style prior `p_t(i) = exp(k_i) / Σ_{r<=t} exp(k_r)`, stabilized by the running max.
pub fn aft_prior(k_logits: &[f64]) -> Result<PriorMatrix> {
    if k_logits.iter().any(|k| !k.is_finite()) {
        return Err(FemError::NonFinite("aft logits".into()));
    }
    let n = k_logits.len();
    let mut weights = Mat::zeros(n, n);
    let mut running_max = f64::NEG_INFINITY;
    for t in 0..n {
        running_max = running_max.max(k_logits[t]);
        let row = weights.row_mut(t);
        let mut z = 0.0;
        for i in 0..=t {
            let e = (k_logits[i] - running_max).exp();
            row[i] = e;
            z += e;
        }
        for w in &mut row[..=t] {
            *w /= z;
        }
    }
    PriorMatrix::from_weights(weights)
}

/// Pure decay prior `p_t(i) ∝ exp(Σ_{τ=i+1}^t g_τ)`, `g_τ <= 0`.
pub fn decay_prior(gates: &[f64]) -> Result<PriorMatrix> {
    if gates.iter().any(|&g| !(g <= 0.0)) {
        return Err(FemError::InvalidArgument("decay gates must be nonpositive".into()));
    }
    let scores = decay_kernel(&cumsum(gates));
    normalize_scores(&RawScores { scores, family: PriorFamily::Decay })
}

/// SSM prior `p_t(i) = H(t-i) / Σ_{r<=t} H(t-r)`.
pub fn ssm_prior(impulse: &SsmImpulse, len: usize) -> Result<PriorMatrix> {
    let scores = Mat::from_fn(len, len, |t, i| if i <= t { impulse.at(t - i) } else { 0.0 });
    normalize_scores(&RawScores { scores, family: PriorFamily::Ssm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_row(p: &PriorMatrix, t: usize, expected: &[f64], tol: f64) {
        for (i, e) in expected.iter().enumerate() {
            assert!((p.weight(t, i) - e).abs() <= tol, "row {t} idx {i}: {} vs {e}", p.weight(t, i));
        }
    }

    #[test]
    fn softmax_examples() {
        let logits = Mat::from_rows(&[vec![0.7, 0.0], vec![0.0, 0.0]]);
        let p = softmax_prior(&logits, &Mask::causal(2)).unwrap();
        assert_row(&p, 0, &[1.0], 0.0);
        assert_row(&p, 1, &[0.5, 0.5], 0.0);

        let logits = Mat::from_rows(&[vec![0.0, 0.0], vec![1f64.ln(), 3f64.ln()]]);
        let p = softmax_prior(&logits, &Mask::causal(2)).unwrap();
        assert_row(&p, 1, &[0.25, 0.75], 1e-15);
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let mut mask = Mask::causal(3);
        mask.block_index(1);
        let logits = Mat::from_fn(3, 3, |t, i| (t + 2 * i) as f64);
        let p = softmax_prior(&logits, &mask).unwrap();
        assert_eq!(p.weight(2, 1), 0.0);
        assert!(!p.in_support(2, 1));
        p.validate().unwrap();
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut mask = Mask::causal(2);
        mask.block_index(0);
        let err = softmax_prior(&Mat::zeros(2, 2), &mask).unwrap_err();
        assert_eq!(err, FemError::EmptySupport { row: 0 });
    }

    #[test]
    fn aft_examples() {
        let p = aft_prior(&[0.0, 3f64.ln()]).unwrap();
        assert_row(&p, 0, &[1.0], 0.0);
        assert_row(&p, 1, &[0.25, 0.75], 1e-15);
        let p = aft_prior(&[2.5; 4]).unwrap();
        assert_row(&p, 3, &[0.25; 4], 1e-15);
    }

    #[test]
    fn decay_examples() {
        let p = decay_prior(&[0.0; 4]).unwrap();
        assert_row(&p, 3, &[0.25; 4], 1e-15);

        let p = decay_prior(&[0.0, -1.0, -1.0]).unwrap();
        let z = (-2f64).exp() + (-1f64).exp() + 1.0;
        assert_row(&p, 2, &[(-2f64).exp() / z, (-1f64).exp() / z, 1.0 / z], 1e-15);

        let p = decay_prior(&[-1e3; 6]).unwrap();
        for t in 0..6 {
            assert!(p.weight(t, t) > 1.0 - 1e-6);
        }
        assert!(decay_prior(&[0.1]).is_err());
    }

    #[test]
    fn ssm_examples() {
        let p = ssm_prior(&SsmImpulse::new(vec![1.0, 0.0, 0.0]).unwrap(), 4).unwrap();
        for t in 0..4 {
            assert_eq!(p.weight(t, t), 1.0);
        }
        let p = ssm_prior(&SsmImpulse::new(vec![1.0]).unwrap(), 3).unwrap();
        assert_eq!(p.weight(2, 2), 1.0);

        let p = ssm_prior(&SsmImpulse::new(vec![2.0, 1.0]).unwrap(), 3).unwrap();
        assert_row(&p, 2, &[0.0, 1.0 / 3.0, 2.0 / 3.0], 1e-15);

        let uniform = ssm_prior(&SsmImpulse::new(vec![1.0; 5]).unwrap(), 5).unwrap();
        assert!(uniform.weights().max_abs_diff(PriorMatrix::uniform(5).weights()) <= 1e-14);
    }

    #[test]
    fn ssm_empty_row_errors() {
        let err = ssm_prior(&SsmImpulse::new(vec![0.0, 1.0]).unwrap(), 3).unwrap_err();
        assert_eq!(err, FemError::EmptySupport { row: 0 });
    }

    #[test]
    fn gla_without_decay_is_normalized_kernel() {
        let q = Mat::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.5], vec![3.0, 1.0]]);
        let k = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0], vec![0.1, 4.0]]);
        let params = GlaParams::new(q.clone(), k.clone(), vec![0.0; 3]).unwrap();
        let (p, _) = gla_prior(&params).unwrap();
        let s: Vec<f64> = (0..3).map(|i| dot(q.row(2), k.row(i))).collect();
        let z: f64 = s.iter().sum();
        assert_row(&p, 2, &[s[0] / z, s[1] / z, s[2] / z], 1e-15);
        assert_row(&p, 0, &[1.0], 0.0);
    }

    #[test]
    fn decay_and_ssm_and_uniform_coincide() {
        let a = decay_prior(&[0.0; 7]).unwrap();
        let b = ssm_prior(&SsmImpulse::new(vec![1.0; 7]).unwrap(), 7).unwrap();
        let u = PriorMatrix::uniform(7);
        assert!(a.weights().max_abs_diff(u.weights()) <= 1e-14);
        assert!(b.weights().max_abs_diff(u.weights()) <= 1e-14);
    }
}
