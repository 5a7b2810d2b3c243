use fem_core::block::{block_backward, block_forward, init_params, BlockConfig, FemBlockParams, Toggles};
use fem_core::priors::PriorFamily;
use fem_core::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randomized(config: &BlockConfig, seed: u64) -> FemBlockParams {
    let mut params = init_params(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (_, m) in params.named_mut() {
        *m = Mat::randn(m.rows(), m.cols(), 0.3, &mut rng);
    }
    params
}

fn objective(x: &Mat, params: &FemBlockParams, config: &BlockConfig, up: &Mat) -> f64 {
    let (y, _) = block_forward(x, params, config).unwrap();
    y.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
}

fn check_block(family: PriorFamily, toggles: Toggles, seed: u64) {
    let config = BlockConfig { d_model: 12, d: 8, r: 4, heads: 2, family, toggles };
    let params = randomized(&config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::randn(6, 12, 1.0, &mut rng);
    let up = Mat::randn(6, 12, 1.0, &mut rng);
    let (_, cache) = block_forward(&x, &params, &config).unwrap();
    let grads = block_backward(&cache, &up).unwrap();
    let h = 1e-6;
    for (name, analytic) in grads {
        let mut numeric = Mat::zeros(analytic.rows(), analytic.cols());
        for k in 0..analytic.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.as_mut_slice()[k] += h;
            minus.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.as_mut_slice()[k] -= h;
            numeric.as_mut_slice()[k] =
                (objective(&x, &plus, &config, &up) - objective(&x, &minus, &config, &up)) / (2.0 * h);
        }
        let scale = numeric.max_abs();
        if scale == 0.0 {
            assert_eq!(analytic.max_abs(), 0.0, "{name}: analytic nonzero where numeric is zero");
            continue;
        }
        let err = analytic.max_abs_diff(&numeric) / scale;
        assert!(err <= 1e-5, "{family:?} {toggles:?} {name}: rel err {err:e} scale {scale:e}");
    }
}

#[test]
fn softmax_block_matches_finite_differences() {
    check_block(PriorFamily::Softmax, Toggles::ALL, 1);
}

#[test]
fn gla_block_matches_finite_differences() {
    check_block(PriorFamily::Gla, Toggles::ALL, 2);
}

#[test]
fn ablated_blocks_match_finite_differences() {
    check_block(PriorFamily::Softmax, Toggles { temp: false, ..Toggles::ALL }, 3);
    check_block(PriorFamily::Gla, Toggles { gate: false, conv: false, ..Toggles::ALL }, 4);
}

#[test]
fn every_parameter_block_receives_gradient() {
    for family in [PriorFamily::Softmax, PriorFamily::Gla] {
        let config = BlockConfig { d_model: 12, d: 8, r: 4, heads: 2, family, toggles: Toggles::ALL };
        let params = randomized(&config, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Mat::randn(8, 12, 1.0, &mut rng);
        let target = Mat::randn(8, 12, 1.0, &mut rng);
        let (y, cache) = block_forward(&x, &params, &config).unwrap();
        let up = y.zip_map(&target, |a, b| 2.0 * (a - b) / y.len() as f64);
        for (name, g) in block_backward(&cache, &up).unwrap() {
            assert!(g.max_abs() > 0.0, "{family:?}: {name} has zero gradient");
        }
    }
}

#[test]
fn zero_lambda_path_leaves_beta_without_gradient() {
    let config = BlockConfig {
        d_model: 12,
        d: 8,
        r: 4,
        heads: 2,
        family: PriorFamily::Softmax,
        toggles: Toggles { lse: false, ..Toggles::ALL },
    };
    let params = randomized(&config, 21);
    let x = Mat::randn(5, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(22));
    let (_, cache) = block_forward(&x, &params, &config).unwrap();
    let grads = block_backward(&cache, &Mat::filled(5, 12, 1.0)).unwrap();
    let beta = grads.iter().find(|(n, _)| *n == "beta_max_raw").unwrap();
    assert_eq!(beta.1.max_abs(), 0.0);
}

#[test]
fn zero_lambda_block_equals_expectation_block() {
    // λ ≡ 0 through the gate (very negative bias) against the −L,−T toggles.
    let full = BlockConfig { d_model: 12, d: 8, r: 4, heads: 2, family: PriorFamily::Gla, toggles: Toggles::ALL };
    let plain = BlockConfig { toggles: Toggles { lse: false, temp: false, ..Toggles::ALL }, ..full };
    let mut params = init_params(&full, 5).unwrap();
    params.b_lambda = Mat::filled(1, 8, -800.0);
    let x = Mat::randn(7, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let (a, _) = block_forward(&x, &params, &full).unwrap();
    let (b, _) = block_forward(&x, &params, &plain).unwrap();
    assert_eq!(a, b);
}
