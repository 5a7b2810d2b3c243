use fem_core::fem_read::{free_energy, hidden_temperature, ltl_read, mean_read, posterior, two_gate_read, FemGates};
use fem_core::oracle::{brute_force_read, brute_posterior, kahan_sum, kl, lse_read};
use fem_core::priors::{decay_prior, normalize_scores, softmax_prior, stream_fem_read, DecayScan, Mask, PriorFamily, PriorMatrix, RawScores};
use fem_core::Mat;
use proptest::prelude::*;

fn prior_and_values() -> impl Strategy<Value = (PriorMatrix, Mat)> {
    (1usize..8, 1usize..4).prop_flat_map(|(n, d)| {
        (prop::collection::vec(0.05f64..1.0, n * n), prop::collection::vec(-3.0f64..3.0, n * d)).prop_map(
            move |(s, v)| {
                let scores = Mat::from_fn(n, n, |t, i| if i <= t { s[t * n + i] } else { 0.0 });
                let p = normalize_scores(&RawScores::new(scores, PriorFamily::Softmax).unwrap()).unwrap();
                (p, Mat::from_vec(n, d, v))
            },
        )
    })
}

fn column(v: &Mat, t: usize, c: usize) -> Vec<f64> {
    (0..=t).map(|i| v.get(i, c)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prior_rows_are_causal_distributions((p, _) in prior_and_values()) {
        for t in 0..p.len() {
            let row = p.row(t);
            prop_assert!((kahan_sum(row.iter().copied()) - 1.0).abs() < 1e-12);
            prop_assert!(row[t + 1..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn softmax_prior_ignores_logit_shift(n in 1usize..8, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let logits = Mat::from_fn(n, n, |t, i| ((seed.wrapping_mul(31).wrapping_add((t * n + i) as u64) % 97) as f64) / 20.0);
        let a = softmax_prior(&logits, &Mask::causal(n)).unwrap();
        let b = softmax_prior(&logits.map(|x| x + shift), &Mask::causal(n)).unwrap();
        prop_assert!(a.weights().max_abs_diff(b.weights()) < 1e-12);
    }

    #[test]
    fn decomposition_mean_plus_kl((p, v) in prior_and_values(), beta in 0.05f64..20.0) {
        let d = v.cols();
        let f = free_energy(&p, &v, &vec![beta; d]).unwrap();
        let mu = mean_read(&p, &v).unwrap();
        for t in 0..p.len() {
            for c in 0..d {
                let col = column(&v, t, c);
                let q = brute_posterior(&p.row(t)[..=t], &col, beta);
                let rhs = mu.get(t, c) + kl(&p.row(t)[..=t], &q).unwrap() / beta;
                prop_assert!((f.get(t, c) - rhs).abs() < 1e-10, "F {} vs {}", f.get(t, c), rhs);
            }
        }
    }

    #[test]
    fn shift_and_scale_laws((p, v) in prior_and_values(), beta in 0.05f64..10.0, a in -5.0f64..5.0, s in 0.1f64..4.0) {
        let d = v.cols();
        let f = free_energy(&p, &v, &vec![beta; d]).unwrap();
        let shifted = free_energy(&p, &v.map(|x| x + a), &vec![beta; d]).unwrap();
        let scaled = free_energy(&p, &v.scale(s), &vec![beta / s; d]).unwrap();
        for (k, &x) in f.as_slice().iter().enumerate() {
            prop_assert!((shifted.as_slice()[k] - (x + a)).abs() < 1e-12 * (1.0 + a.abs() + x.abs()) * 8.0);
            prop_assert!((scaled.as_slice()[k] - s * x).abs() < 1e-12 * s.max(1.0) * (1.0 + x.abs()) * 8.0);
        }
    }

    #[test]
    fn free_energy_is_monotone_and_bounded((p, v) in prior_and_values(), b1 in 0.01f64..10.0, gap in 0.0f64..10.0) {
        let d = v.cols();
        let lo = free_energy(&p, &v, &vec![b1; d]).unwrap();
        let hi = free_energy(&p, &v, &vec![b1 + gap; d]).unwrap();
        let mu = mean_read(&p, &v).unwrap();
        for t in 0..p.len() {
            for c in 0..d {
                let max = (0..=t).map(|i| v.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo.get(t, c) <= hi.get(t, c) + 1e-12);
                prop_assert!(mu.get(t, c) <= lo.get(t, c) + 1e-12);
                prop_assert!(hi.get(t, c) <= max + 1e-12);
            }
        }
    }

    #[test]
    fn posterior_matches_brute_force((p, v) in prior_and_values(), beta in 0.05f64..30.0) {
        let d = v.cols();
        let q = posterior(&p, &v, &vec![beta; d]).unwrap();
        for t in 0..p.len() {
            for c in 0..d {
                let oracle = brute_posterior(&p.row(t)[..=t], &column(&v, t, c), beta);
                let got = &q.slice(t, c)[..=t];
                for (a, b) in got.iter().zip(&oracle) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_gate_read_matches_oracle((p, v) in prior_and_values(), lam in 0.0f64..=1.0, g in 0.1f64..3.0, beta in 0.01f64..50.0) {
        let (n, d) = v.shape();
        let gates = FemGates::new(Mat::filled(n, d, lam), Mat::filled(n, d, g), vec![beta; d]).unwrap();
        let fast = two_gate_read(&p, &v, &gates).unwrap();
        let slow = brute_force_read(&p, &v, &gates).unwrap();
        prop_assert!(fast.o.max_abs_diff(&slow.o) < 1e-10);
    }

    #[test]
    fn hidden_temperature_reconstructs_ltl((p, v) in prior_and_values(), lam in 0.0f64..=1.0, beta_max in 0.1f64..20.0) {
        let (n, d) = v.shape();
        let t = n - 1;
        let (f_tilde, _, _) = ltl_read(&p, &v, &vec![beta_max; d], &Mat::filled(n, d, lam)).unwrap();
        for c in 0..d {
            let col = column(&v, t, c);
            let pr = &p.row(t)[..=t];
            if col.iter().zip(pr).filter(|(_, &w)| w > 0.0).all(|(&x, _)| (x - col[0]).abs() < 1e-9) {
                continue;
            }
            let b = hidden_temperature(&p, &v, beta_max, lam, t, c).unwrap();
            prop_assert!((0.0..=beta_max).contains(&b));
            let f = if b == 0.0 { kahan_sum(pr.iter().zip(&col).map(|(a, x)| a * x)) } else { lse_read(pr, &col, b) };
            prop_assert!((f - f_tilde.get(t, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn decay_stream_equals_dense(gates in prop::collection::vec(-1.0f64..0.0, 1..40), beta in 0.1f64..5.0, seed in any::<u64>()) {
        let n = gates.len();
        let v = Mat::from_fn(n, 2, |t, c| (((seed ^ (t * 7 + c) as u64).wrapping_mul(0x9e37_79b9) % 1000) as f64) / 250.0 - 2.0);
        let p = decay_prior(&gates).unwrap();
        let (_, mu, f_max) = ltl_read(&p, &v, &[beta, beta], &Mat::zeros(n, 2)).unwrap();
        let s = stream_fem_read(&mut DecayScan::new(&gates), &v, Some(&[beta, beta])).unwrap();
        prop_assert!(s.mu.max_abs_diff(&mu) < 1e-10);
        prop_assert!(s.f_max.unwrap().max_abs_diff(&f_max) < 1e-10);
    }
}
