//! Free-energy read over a causal prior.
//!
//! For prior row `p_t`, values `v` and inverse temperature `β`:
//! `F = (1/β) log Σ_i p_t(i) e^{β v_i}` per channel, posterior
//! `q ∝ p_t e^{βv}`. The layer output mixes the mean `μ` and a single
//! `β_max` branch with gate `λ`, then scales by an outer gate `g`.

pub mod kernel;
mod grad;
mod solve;

pub use grad::{backward_two_gate, grad_free_energy_v, hessian_free_energy_v, TwoGateGrads};
pub use solve::{budget_dual_solve, hidden_temperature, hull_membership_2pt, min_truncation_degree, BudgetSolution};

use crate::error::{shape_err, FemError, Result};
use crate::mat::Mat;
use crate::priors::PriorMatrix;

/// Posterior caches beyond this many entries are recomputed on demand.
pub const POSTERIOR_CACHE_LIMIT: usize = 1 << 24;

/// Per-step, per-channel gates.
#[derive(Debug, Clone, PartialEq)]
pub struct FemGates {
    pub lambda: Mat,
    pub g: Mat,
    pub beta_max: Vec<f64>,
}

impl FemGates {
    pub fn new(lambda: Mat, g: Mat, beta_max: Vec<f64>) -> Result<Self> {
        let gates = Self { lambda, g, beta_max };
        gates.validate()?;
        Ok(gates)
    }

    /// `λ ≡ 0`, `g ≡ 1`: the plain expectation read.
    pub fn expectation(len: usize, channels: usize) -> Self {
        Self { lambda: Mat::zeros(len, channels), g: Mat::filled(len, channels, 1.0), beta_max: vec![1.0; channels] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.shape() != self.g.shape() || self.beta_max.len() != self.lambda.cols() {
            return Err(shape_err(format!(
                "gates: lambda {:?}, g {:?}, beta_max {}",
                self.lambda.shape(),
                self.g.shape(),
                self.beta_max.len()
            )));
        }
        if self.lambda.as_slice().iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(FemError::InvalidArgument("lambda must lie in [0, 1]".into()));
        }
        if self.g.as_slice().iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(FemError::InvalidArgument("outer gate must be positive".into()));
        }
        check_beta(&self.beta_max)
    }
}

/// Per-(t, channel) probability vectors over `0..=t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTensor {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PosteriorTensor {
    fn zeros(len: usize, channels: usize) -> Self {
        Self { len, channels, data: vec![0.0; len * len * channels] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `q_t^{(c)}` over indices `0..=t`.
    pub fn slice(&self, t: usize, c: usize) -> &[f64] {
        let start = (t * self.channels + c) * self.len;
        &self.data[start..start + t + 1]
    }

    fn slice_mut(&mut self, t: usize, c: usize) -> &mut [f64] {
        let start = (t * self.channels + c) * self.len;
        &mut self.data[start..start + t + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemReadout {
    pub o: Mat,
    pub mu: Mat,
    pub f_max: Mat,
    /// `(1 - λ) μ + λ F_max`.
    pub f_tilde: Mat,
    /// Posterior at `β_max`, kept when small enough.
    pub posterior_cache: Option<PosteriorTensor>,
}

pub(crate) fn check_beta(beta: &[f64]) -> Result<()> {
    if beta.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
        return Err(FemError::InvalidArgument("inverse temperatures must be positive and finite".into()));
    }
    Ok(())
}

pub(crate) fn check_values(p: &PriorMatrix, v: &Mat) -> Result<()> {
    if v.rows() != p.len() {
        return Err(shape_err(format!("prior length {} vs {} value rows", p.len(), v.rows())));
    }
    if v.cols() == 0 {
        return Err(shape_err("values need at least one channel"));
    }
    if !v.all_finite() {
        return Err(FemError::NonFinite("values".into()));
    }
    Ok(())
}

/// Copies column `c` of rows `0..=t` into `buf`.
pub(crate) fn gather(v: &Mat, t: usize, c: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend((0..=t).map(|i| v.get(i, c)));
}

/// `μ_t = Σ_i p_t(i) v_i`.
pub fn mean_read(p: &PriorMatrix, v: &Mat) -> Result<Mat> {
    check_values(p, v)?;
    let (n, d) = v.shape();
    let mut mu = Mat::zeros(n, d);
    for t in 0..n {
        for (i, &w) in p.row(t).iter().enumerate() {
            if w != 0.0 {
                for (o, &x) in mu.row_mut(t).iter_mut().zip(v.row(i)) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(mu)
}

/// Per-channel free energy at inverse temperatures `beta`.
pub fn free_energy(p: &PriorMatrix, v: &Mat, beta: &[f64]) -> Result<Mat> {
    check_values(p, v)?;
    check_beta(beta)?;
    if beta.len() != v.cols() {
        return Err(shape_err("beta length differs from channel count"));
    }
    let (n, d) = v.shape();
    let mut out = Mat::zeros(n, d);
    let mut col = Vec::with_capacity(n);
    for t in 0..n {
        for c in 0..d {
            gather(v, t, c, &mut col);
            out.set(t, c, kernel::free_energy(p.row(t), &col, beta[c]));
        }
    }
    Ok(out)
}

/// Posterior `q_t^{(c)} ∝ p_t e^{β_c v_{·,c}}`.
pub fn posterior(p: &PriorMatrix, v: &Mat, beta: &[f64]) -> Result<PosteriorTensor> {
    check_values(p, v)?;
    check_beta(beta)?;
    if beta.len() != v.cols() {
        return Err(shape_err("beta length differs from channel count"));
    }
    let (n, d) = v.shape();
    let mut q = PosteriorTensor::zeros(n, d);
    let mut col = Vec::with_capacity(n);
    for t in 0..n {
        for c in 0..d {
            gather(v, t, c, &mut col);
            q.slice_mut(t, c).copy_from_slice(&kernel::posterior(p.row(t), &col, beta[c]));
        }
    }
    Ok(q)
}

/// Linearized-temperature read. Returns `(F̃, μ, F_max)`.
pub fn ltl_read(p: &PriorMatrix, v: &Mat, beta_max: &[f64], lambda: &Mat) -> Result<(Mat, Mat, Mat)> {
    check_values(p, v)?;
    check_beta(beta_max)?;
    let (n, d) = v.shape();
    if beta_max.len() != d || lambda.shape() != (n, d) {
        return Err(shape_err("ltl_read: beta_max or lambda shape"));
    }
    if lambda.as_slice().iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(FemError::InvalidArgument("lambda must lie in [0, 1]".into()));
    }
    let mut mu = Mat::zeros(n, d);
    let mut f_max = Mat::zeros(n, d);
    let mut col = Vec::with_capacity(n);
    for t in 0..n {
        for c in 0..d {
            gather(v, t, c, &mut col);
            let (m, f) = kernel::mean_and_free_energy(p.row(t), &col, beta_max[c]);
            mu.set(t, c, m);
            f_max.set(t, c, f);
        }
    }
    let f_tilde = Mat::from_fn(n, d, |t, c| {
        let l = lambda.get(t, c);
        (1.0 - l) * mu.get(t, c) + l * f_max.get(t, c)
    });
    Ok((f_tilde, mu, f_max))
}

/// `o = g ⊙ ((1 - λ) μ + λ F_max)`.
pub fn two_gate_read(p: &PriorMatrix, v: &Mat, gates: &FemGates) -> Result<FemReadout> {
    gates.validate()?;
    let (f_tilde, mu, f_max) = ltl_read(p, v, &gates.beta_max, &gates.lambda)?;
    if gates.g.shape() != v.shape() {
        return Err(shape_err("outer gate shape differs from values"));
    }
    let o = f_tilde.zip_map(&gates.g, |f, g| g * f);
    let (n, d) = v.shape();
    let posterior_cache = if n * n * d <= POSTERIOR_CACHE_LIMIT { Some(posterior(p, v, &gates.beta_max)?) } else { None };
    Ok(FemReadout { o, mu, f_max, f_tilde, posterior_cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{normalize_scores, PriorFamily, RawScores};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point_mass(n: usize, at: usize) -> PriorMatrix {
        let scores = Mat::from_fn(n, n, |t, i| if i == at.min(t) { 1.0 } else { 0.0 });
        normalize_scores(&RawScores::new(scores, PriorFamily::Softmax).unwrap()).unwrap()
    }

    fn two_point() -> (PriorMatrix, Mat) {
        let w = Mat::from_rows(&[vec![1.0, 0.0], vec![0.25, 0.75]]);
        (PriorMatrix::from_weights(w).unwrap(), Mat::from_rows(&[vec![1.0], vec![-1.0]]))
    }

    fn random_prior(rng: &mut ChaCha8Rng, n: usize) -> PriorMatrix {
        let scores = Mat::from_fn(n, n, |t, i| if i <= t { rng.gen_range(0.05..1.0) } else { 0.0 });
        normalize_scores(&RawScores::new(scores, PriorFamily::Softmax).unwrap()).unwrap()
    }

    #[test]
    fn mean_read_examples() {
        let v = Mat::from_rows(&[vec![1.0, 5.0], vec![2.0, 6.0], vec![3.0, 7.0]]);
        let mu = mean_read(&point_mass(3, 1), &v).unwrap();
        assert_eq!(mu.row(2), v.row(1));
        let mu = mean_read(&PriorMatrix::uniform(3), &v).unwrap();
        assert!((mu.get(2, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn free_energy_examples() {
        let v = Mat::filled(4, 1, 2.0);
        let f = free_energy(&PriorMatrix::uniform(4), &v, &[3.0]).unwrap();
        assert!(f.as_slice().iter().all(|&x| (x - 2.0).abs() < 1e-15));

        let (p, v) = two_point();
        let f = free_energy(&p, &v, &[2.0]).unwrap();
        let expected = 0.5 * (0.25 * 2f64.exp() + 0.75 * (-2f64).exp()).ln();
        assert!((f.get(1, 0) - expected).abs() < 1e-15);

        let v = Mat::from_rows(&[vec![0.3], vec![-4.0], vec![9.0]]);
        let f = free_energy(&point_mass(3, 1), &v, &[50.0]).unwrap();
        assert_eq!(f.get(2, 0), -4.0);
    }

    #[test]
    fn tiny_beta_posterior_is_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_prior(&mut rng, 6);
        let v = Mat::randn(6, 2, 1.0, &mut rng);
        let q = posterior(&p, &v, &[1e-12, 1e-12]).unwrap();
        for t in 0..6 {
            for c in 0..2 {
                for (a, b) in q.slice(t, c).iter().zip(p.row(t)) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
        let f = free_energy(&p, &v, &[1e-12, 1e-12]).unwrap();
        let mu = mean_read(&p, &v).unwrap();
        assert!(f.max_abs_diff(&mu) < 1e-11);
    }

    #[test]
    fn masked_index_stays_out_of_posterior() {
        let w = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.5, 0.0, 0.5]]);
        let p = PriorMatrix::from_weights(w).unwrap();
        let v = Mat::from_rows(&[vec![0.0], vec![100.0], vec![1.0]]);
        let q = posterior(&p, &v, &[10.0]).unwrap();
        assert_eq!(q.slice(2, 0)[1], 0.0);
        let f = free_energy(&p, &v, &[10.0]).unwrap();
        assert!(f.get(2, 0) <= 1.0);
    }

    #[test]
    fn ltl_endpoints_and_mix() {
        let (p, v) = two_point();
        let at = |l: f64| ltl_read(&p, &v, &[2.0], &Mat::filled(2, 1, l)).unwrap();
        let (f0, mu, fm) = at(0.0);
        assert_eq!(f0, mu);
        let (f1, _, _) = at(1.0);
        assert_eq!(f1, fm);
        let (f3, _, _) = at(0.3);
        let direct = free_energy(&p, &v, &[2.0]).unwrap();
        let mean = mean_read(&p, &v).unwrap();
        let expected = 0.7 * mean.get(1, 0) + 0.3 * direct.get(1, 0);
        assert!((f3.get(1, 0) - expected).abs() <= 1e-12);
    }

    #[test]
    fn two_gate_containment_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_prior(&mut rng, 5);
        let v = Mat::randn(5, 3, 1.0, &mut rng);
        let out = two_gate_read(&p, &v, &FemGates::expectation(5, 3)).unwrap();
        assert_eq!(out.o, mean_read(&p, &v).unwrap());

        let lambda = Mat::uniform(5, 3, 0.0, 1.0, &mut rng);
        let g = Mat::uniform(5, 3, 0.5, 2.0, &mut rng);
        let gates = FemGates::new(lambda.clone(), g.clone(), vec![0.5, 2.0, 7.0]).unwrap();
        let doubled = FemGates::new(lambda, g.scale(2.0), vec![0.5, 2.0, 7.0]).unwrap();
        let a = two_gate_read(&p, &v, &gates).unwrap();
        let b = two_gate_read(&p, &v, &doubled).unwrap();
        assert_eq!(b.o, a.o.scale(2.0));
        for (m, f) in a.mu.as_slice().iter().zip(a.f_max.as_slice()) {
            assert!(*m <= f + 1e-12);
        }
    }

    #[test]
    fn gates_are_validated() {
        assert!(FemGates::new(Mat::filled(1, 1, 1.5), Mat::filled(1, 1, 1.0), vec![1.0]).is_err());
        assert!(FemGates::new(Mat::filled(1, 1, 0.5), Mat::filled(1, 1, 0.0), vec![1.0]).is_err());
        assert!(FemGates::new(Mat::filled(1, 1, 0.5), Mat::filled(1, 1, 1.0), vec![0.0]).is_err());
    }
}
