use super::{check_beta, check_values, gather, kernel, posterior, FemGates, FemReadout, PosteriorTensor};
use crate::error::{shape_err, Result};
use crate::mat::Mat;
use crate::priors::PriorMatrix;

/// `∇_v F` per (t, channel); equals the posterior.
pub fn grad_free_energy_v(p: &PriorMatrix, v: &Mat, beta: &[f64]) -> Result<PosteriorTensor> {
    posterior(p, v, beta)
}

/// `β (Diag q - q qᵀ)` restricted to the support of row `t`, indices in
/// ascending order (`p.support_indices(t)`).
pub fn hessian_free_energy_v(p: &PriorMatrix, v: &Mat, beta: &[f64], t: usize, c: usize) -> Result<Mat> {
    check_values(p, v)?;
    check_beta(beta)?;
    if t >= p.len() || c >= v.cols() || beta.len() != v.cols() {
        return Err(shape_err(format!("hessian at ({t}, {c}) out of range")));
    }
    let mut col = Vec::new();
    gather(v, t, c, &mut col);
    let q = kernel::posterior(p.row(t), &col, beta[c]);
    let support = p.support_indices(t);
    let b = beta[c];
    Ok(Mat::from_fn(support.len(), support.len(), |a, k| {
        let (qa, qk) = (q[support[a]], q[support[k]]);
        b * (if a == k { qa } else { 0.0 } - qa * qk)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoGateGrads {
    pub dv: Mat,
    pub dlambda: Mat,
    pub dg: Mat,
    pub dbeta_max: Vec<f64>,
    /// Gradient in the raw prior weights (lower triangle).
    pub dp: Mat,
}

/// Reverse pass of [`super::two_gate_read`] for upstream `∂L/∂o`.
pub fn backward_two_gate(
    readout: &FemReadout,
    upstream: &Mat,
    p: &PriorMatrix,
    v: &Mat,
    gates: &FemGates,
) -> Result<TwoGateGrads> {
    check_values(p, v)?;
    gates.validate()?;
    let (n, d) = v.shape();
    if upstream.shape() != (n, d) || readout.o.shape() != (n, d) || gates.lambda.shape() != (n, d) {
        return Err(shape_err("backward_two_gate: upstream, readout and gates must match values"));
    }
    let mut dv = Mat::zeros(n, d);
    let mut dlambda = Mat::zeros(n, d);
    let mut dg = Mat::zeros(n, d);
    let mut dbeta_max = vec![0.0; d];
    let mut dp = Mat::zeros(n, n);
    let mut col = Vec::with_capacity(n);
    for t in 0..n {
        let row = p.row(t);
        for c in 0..d {
            let up = upstream.get(t, c);
            if up == 0.0 {
                continue;
            }
            let (lam, g, beta) = (gates.lambda.get(t, c), gates.g.get(t, c), gates.beta_max[c]);
            dg.set(t, c, up * readout.f_tilde.get(t, c));
            let scale = up * g;
            dlambda.set(t, c, scale * (readout.f_max.get(t, c) - readout.mu.get(t, c)));

            gather(v, t, c, &mut col);
            let owned;
            let q: &[f64] = match &readout.posterior_cache {
                Some(cache) => cache.slice(t, c),
                None => {
                    owned = kernel::posterior(row, &col, beta);
                    &owned
                }
            };
            for i in 0..=t {
                dv.add_at(i, c, scale * ((1.0 - lam) * row[i] + lam * q[i]));
            }
            if lam != 0.0 {
                dbeta_max[c] += scale * lam * kernel::dfree_energy_dbeta(row, &col, beta);
            }
            let df_dp = if lam != 0.0 { kernel::dfree_energy_dp(row, &col, beta) } else { vec![0.0; t + 1] };
            for i in 0..=t {
                dp.add_at(t, i, scale * ((1.0 - lam) * col[i] + lam * df_dp[i]));
            }
        }
    }
    Ok(TwoGateGrads { dv, dlambda, dg, dbeta_max, dp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_read::two_gate_read;
    use crate::priors::{normalize_scores, PriorFamily, RawScores};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Loss `Σ up ⊙ o` with unconstrained prior weights.
    fn loss(w: &Mat, v: &Mat, lambda: &Mat, g: &Mat, beta: &[f64], up: &Mat) -> f64 {
        let (n, d) = v.shape();
        let mut total = 0.0;
        for t in 0..n {
            let row = &w.row(t)[..=t];
            for c in 0..d {
                let col: Vec<f64> = (0..=t).map(|i| v.get(i, c)).collect();
                let mu = kernel::mean(row, &col);
                let f = kernel::free_energy(row, &col, beta[c]);
                let l = lambda.get(t, c);
                total += up.get(t, c) * g.get(t, c) * ((1.0 - l) * mu + l * f);
            }
        }
        total
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale.max(1e-12)
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = PriorMatrix::uniform(3);
        let v = Mat::from_fn(3, 2, |t, c| (t + c) as f64);
        let gates = FemGates::expectation(3, 2);
        let out = two_gate_read(&p, &v, &gates).unwrap();
        let grads = backward_two_gate(&out, &Mat::zeros(3, 2), &p, &v, &gates).unwrap();
        assert_eq!(grads.dv.max_abs(), 0.0);
        assert_eq!(grads.dp.max_abs(), 0.0);
        assert!(grads.dbeta_max.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_case_weights_are_prior() {
        let p = PriorMatrix::uniform(4);
        let v = Mat::from_fn(4, 1, |t, _| t as f64);
        let gates = FemGates::expectation(4, 1);
        let out = two_gate_read(&p, &v, &gates).unwrap();
        let mut up = Mat::zeros(4, 1);
        up.set(3, 0, 1.0);
        let grads = backward_two_gate(&out, &up, &p, &v, &gates).unwrap();
        assert!(grads.dv.col(0).iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hessian_two_point_bound_is_tight() {
        let p = PriorMatrix::from_weights(Mat::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]])).unwrap();
        let v = Mat::zeros(2, 1);
        let h = hessian_free_energy_v(&p, &v, &[1.0], 1, 0).unwrap();
        let expected = Mat::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]);
        assert!(h.max_abs_diff(&expected) < 1e-15);
        let h0 = hessian_free_energy_v(&p, &v, &[1.0], 0, 0).unwrap();
        assert_eq!(h0.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, d) = (5, 3);
        let scores = Mat::from_fn(n, n, |t, i| if i <= t { rng.gen_range(0.1..1.0) } else { 0.0 });
        let p = normalize_scores(&RawScores::new(scores, PriorFamily::Softmax).unwrap()).unwrap();
        let v = Mat::randn(n, d, 1.0, &mut rng);
        let lambda = Mat::uniform(n, d, 0.1, 0.9, &mut rng);
        let g = Mat::uniform(n, d, 0.5, 1.5, &mut rng);
        let beta = vec![0.7, 2.0, 5.0];
        let up = Mat::randn(n, d, 1.0, &mut rng);
        let gates = FemGates::new(lambda.clone(), g.clone(), beta.clone()).unwrap();
        let out = two_gate_read(&p, &v, &gates).unwrap();
        let grads = backward_two_gate(&out, &up, &p, &v, &gates).unwrap();
        let w = p.weights().clone();
        let h = 1e-5;

        let fd_mat = |m: &Mat, eval: &dyn Fn(&Mat) -> f64| {
            let mut out = Mat::zeros(m.rows(), m.cols());
            for k in 0..m.len() {
                let (mut a, mut b) = (m.clone(), m.clone());
                a.as_mut_slice()[k] += h;
                b.as_mut_slice()[k] -= h;
                out.as_mut_slice()[k] = (eval(&a) - eval(&b)) / (2.0 * h);
            }
            out
        };
        let check = |name: &str, analytic: &Mat, numeric: &Mat| {
            let err = analytic.max_abs_diff(numeric) / numeric.max_abs().max(1e-12);
            assert!(err <= 1e-6, "{name}: rel err {err}");
        };
        check("dv", &grads.dv, &fd_mat(&v, &|x| loss(&w, x, &lambda, &g, &beta, &up)));
        check("dlambda", &grads.dlambda, &fd_mat(&lambda, &|x| loss(&w, &v, x, &g, &beta, &up)));
        check("dg", &grads.dg, &fd_mat(&g, &|x| loss(&w, &v, &lambda, x, &beta, &up)));
        let mut dp_fd = fd_mat(&w, &|x| loss(x, &v, &lambda, &g, &beta, &up));
        for t in 0..n {
            for i in t + 1..n {
                dp_fd.set(t, i, 0.0);
            }
        }
        check("dp", &grads.dp, &dp_fd);
        for c in 0..d {
            let (mut a, mut b) = (beta.clone(), beta.clone());
            a[c] += h;
            b[c] -= h;
            let fd = (loss(&w, &v, &lambda, &g, &a, &up) - loss(&w, &v, &lambda, &g, &b, &up)) / (2.0 * h);
            assert!(rel_err(grads.dbeta_max[c], fd, fd.abs()) <= 1e-6, "dbeta {c}");
        }
    }
}
