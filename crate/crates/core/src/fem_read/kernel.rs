//! Per-(row, channel) kernels. `p` and `v` cover the same index range
//! `0..=t`; entries with `p == 0` are off the support and never enter a max
//! or a posterior.

/// Below this tilt spread the free energy is evaluated around the mean with
/// `log1p`/`expm1`, which keeps `(F - μ)/β` accurate for tiny β.
const SMALL_TILT: f64 = 0.5;

#[inline]
pub fn mean(p: &[f64], v: &[f64]) -> f64 {
    p.iter().zip(v).map(|(&w, &x)| w * x).sum()
}

/// Max and min of `v` over the support of `p`; `None` on empty support.
pub fn support_range(p: &[f64], v: &[f64]) -> Option<(f64, f64)> {
    let mut range: Option<(f64, f64)> = None;
    for (&w, &x) in p.iter().zip(v) {
        if w > 0.0 {
            range = Some(match range {
                None => (x, x),
                Some((hi, lo)) => (hi.max(x), lo.min(x)),
            });
        }
    }
    range
}

/// Smallest index attaining the max of `v` over the support.
pub fn support_argmax(p: &[f64], v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&w, &x)) in p.iter().zip(v).enumerate() {
        if w > 0.0 && best.map_or(true, |b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// `(1/β) log Σ p e^{βv}`; `β = 0` returns the mean.
pub fn free_energy(p: &[f64], v: &[f64], beta: f64) -> f64 {
    let mu = mean(p, v);
    if beta == 0.0 {
        return mu;
    }
    let Some((hi, lo)) = support_range(p, v) else {
        return f64::NAN;
    };
    let mass: f64 = p.iter().sum();
    let spread = beta * (hi - mu).abs().max((lo - mu).abs());
    if spread <= SMALL_TILT && (mass - 1.0).abs() <= 1e-12 {
        let s: f64 = p
            .iter()
            .zip(v)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &x)| w * (beta * (x - mu)).exp_m1())
            .sum();
        return mu + s.ln_1p() / beta;
    }
    let m = beta * (hi - mu);
    let s: f64 = p
        .iter()
        .zip(v)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &x)| w * (beta * (x - mu) - m).exp())
        .sum();
    mu + (m + s.ln()) / beta
}

/// One pass over `[v, e^{βv}]` with a running max; rows with a small tilt
/// spread are re-evaluated around the mean.
pub fn mean_and_free_energy(p: &[f64], v: &[f64], beta: f64) -> (f64, f64) {
    let mut mu = 0.0;
    let mut m = f64::NEG_INFINITY;
    let mut s = 0.0;
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (&w, &x) in p.iter().zip(v) {
        mu += w * x;
        if w > 0.0 {
            hi = hi.max(x);
            lo = lo.min(x);
            let z = beta * x;
            if z > m {
                s *= (m - z).exp();
                m = z;
            }
            s += w * (z - m).exp();
        }
    }
    if beta == 0.0 || beta * (hi - lo) <= SMALL_TILT {
        return (mu, free_energy(p, v, beta));
    }
    (mu, (m + s.ln()) / beta)
}

/// Posterior `q ∝ p e^{βv}`, exactly zero off the support.
pub fn posterior(p: &[f64], v: &[f64], beta: f64) -> Vec<f64> {
    let m = p
        .iter()
        .zip(v)
        .filter(|(&w, _)| w > 0.0)
        .map(|(_, &x)| beta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = p
        .iter()
        .zip(v)
        .map(|(&w, &x)| if w > 0.0 { w * (beta * x - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= z);
    q
}

/// `KL(q^{(β)} ‖ p)`, evaluated as `β Σ q (v - F)`.
pub fn tilt_kl(p: &[f64], v: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let f = free_energy(p, v, beta);
    let q = posterior(p, v, beta);
    let kl: f64 = q.iter().zip(v).filter(|(&w, _)| w > 0.0).map(|(&w, &x)| w * beta * (x - f)).sum();
    kl.max(0.0)
}

/// `∂F/∂β = KL(q ‖ p) / β²`.
pub fn dfree_energy_dbeta(p: &[f64], v: &[f64], beta: f64) -> f64 {
    tilt_kl(p, v, beta) / (beta * beta)
}

/// `∂F/∂p_i = e^{βv_i} / (β Σ p e^{βv})` for every index in range, with `p`
/// treated as unconstrained.
pub fn dfree_energy_dp(p: &[f64], v: &[f64], beta: f64) -> Vec<f64> {
    let m = p
        .iter()
        .zip(v)
        .filter(|(&w, _)| w > 0.0)
        .map(|(_, &x)| beta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = p.iter().zip(v).filter(|(&w, _)| w > 0.0).map(|(&w, &x)| w * (beta * x - m).exp()).sum();
    v.iter().map(|&x| (beta * x - m).exp() / (beta * s)).collect()
}

/// Mean, free energy and posterior from a single exponential pass (the
/// centered kernel is used instead for small tilt spreads).
pub fn tilt_stats(p: &[f64], v: &[f64], beta: f64, q: &mut Vec<f64>) -> (f64, f64) {
    let mu = mean(p, v);
    let m = p
        .iter()
        .zip(v)
        .filter(|(&w, _)| w > 0.0)
        .map(|(_, &x)| beta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    q.clear();
    q.extend(p.iter().zip(v).map(|(&w, &x)| if w > 0.0 { w * (beta * x - m).exp() } else { 0.0 }));
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= s);
    let lo = p.iter().zip(v).filter(|(&w, _)| w > 0.0).map(|(_, &x)| beta * x).fold(f64::INFINITY, f64::min);
    let f = if m - lo <= SMALL_TILT { free_energy(p, v, beta) } else { (m + s.ln()) / beta };
    (mu, f)
}
