use super::{check_values, gather, kernel};
use crate::error::{shape_err, FemError, Result};
use crate::mat::Mat;
use crate::priors::PriorMatrix;

pub const BISECTION_MAX_ITERS: usize = 200;
pub const BISECTION_TOL: f64 = 1e-10;
const CONSTANT_SPREAD: f64 = 1e-12;

/// Bisection for an increasing `f` on `[lo, hi]`, run until the bracket
/// stops shrinking or the iteration cap is hit.
fn bisect_increasing(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (f(lo) - target).abs() <= (f(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

/// Inverse temperature `β* ∈ [0, β_max]` whose free energy equals the LTL
/// read `(1 - λ) μ + λ F(β_max)` at position `t`, channel `c`.
pub fn hidden_temperature(
    p: &PriorMatrix,
    v: &Mat,
    beta_max_c: f64,
    lambda_tc: f64,
    t: usize,
    c: usize,
) -> Result<f64> {
    check_values(p, v)?;
    if t >= p.len() || c >= v.cols() {
        return Err(shape_err(format!("position ({t}, {c}) out of range")));
    }
    if !(beta_max_c > 0.0) || !beta_max_c.is_finite() {
        return Err(FemError::InvalidArgument("beta_max must be positive".into()));
    }
    if !(0.0..=1.0).contains(&lambda_tc) {
        return Err(FemError::InvalidArgument("lambda must lie in [0, 1]".into()));
    }
    let mut col = Vec::new();
    gather(v, t, c, &mut col);
    let row = p.row(t);
    let (hi, lo) = kernel::support_range(row, &col).ok_or(FemError::EmptySupport { row: t })?;
    if hi - lo < CONSTANT_SPREAD {
        return Err(FemError::ConstantValues { row: t, channel: c });
    }
    if lambda_tc == 0.0 {
        return Ok(0.0);
    }
    if lambda_tc == 1.0 {
        return Ok(beta_max_c);
    }
    let mu = kernel::mean(row, &col);
    let f_max = kernel::free_energy(row, &col, beta_max_c);
    let target = (1.0 - lambda_tc) * mu + lambda_tc * f_max;
    Ok(bisect_increasing(0.0, beta_max_c, target, |b| kernel::free_energy(row, &col, b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSolution {
    pub beta: f64,
    pub q: Vec<f64>,
    /// `KL(q ‖ p)` at the returned `beta`.
    pub kl: f64,
    /// The budget is not reachable below `beta_cap`.
    pub saturated: bool,
}

/// Solves `KL(q^{(β)} ‖ p) = B` for `β ∈ [0, beta_cap]`; `q^{(β)}` is the
/// maximizer of `E_q[v]` under the budget.
pub fn budget_dual_solve(p: &[f64], v: &[f64], budget: f64, beta_cap: f64) -> Result<BudgetSolution> {
    if p.len() != v.len() || p.is_empty() {
        return Err(shape_err("budget_dual_solve: p and v need equal nonzero length"));
    }
    if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(FemError::InvalidArgument("p must be a probability vector".into()));
    }
    if !(budget >= 0.0) || !(beta_cap > 0.0) {
        return Err(FemError::InvalidArgument("need budget >= 0 and beta_cap > 0".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FemError::NonFinite("values".into()));
    }
    let solution = |beta: f64, saturated: bool| BudgetSolution {
        beta,
        q: if beta == 0.0 { p.to_vec() } else { kernel::posterior(p, v, beta) },
        kl: kernel::tilt_kl(p, v, beta),
        saturated,
    };
    if budget == 0.0 {
        return Ok(solution(0.0, false));
    }
    let (hi, lo) = kernel::support_range(p, v).ok_or(FemError::EmptySupport { row: 0 })?;
    if hi - lo < CONSTANT_SPREAD {
        return Err(FemError::ConstantValues { row: 0, channel: 0 });
    }
    if kernel::tilt_kl(p, v, beta_cap) < budget {
        return Ok(solution(beta_cap, true));
    }
    let beta = bisect_increasing(0.0, beta_cap, budget, |b| kernel::tilt_kl(p, v, b));
    Ok(solution(beta, false))
}

/// Smallest `N` with `Σ_{n>N} R^n / n! <= eps`. The tail is summed
/// directly from the smallest terms up, with compensation.
pub fn min_truncation_degree(r: f64, eps: f64) -> Result<usize> {
    if !(r > 0.0) || !r.is_finite() || !(eps > 0.0 && eps < 1.0) {
        return Err(FemError::InvalidArgument("need R > 0 and 0 < eps < 1".into()));
    }
    let mut terms = vec![1.0];
    let mut n = 0usize;
    loop {
        n += 1;
        let next = terms[n - 1] * r / n as f64;
        terms.push(next);
        if n as f64 > 2.0 * r + 10.0 && next < eps * 1e-30 {
            break;
        }
    }
    // tails[k] = Σ_{n>k} terms[n]
    let mut tails = vec![0.0; terms.len()];
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for k in (0..terms.len() - 1).rev() {
        let y = terms[k + 1] - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        tails[k] = sum;
    }
    Ok(tails.iter().position(|&tail| tail <= eps).expect("series tail falls below eps"))
}

/// Whether `target = α v1 + (1 - α) v2` for some `α ∈ [0, 1]`, within 1e-10.
pub fn hull_membership_2pt(v1: &[f64], v2: &[f64], target: &[f64]) -> Result<bool> {
    if v1.len() != v2.len() || v1.len() != target.len() {
        return Err(shape_err("hull_membership_2pt: vectors differ in length"));
    }
    let mut alpha: Option<f64> = None;
    for ((&a, &b), &x) in v1.iter().zip(v2).zip(target) {
        let span = a - b;
        if span.abs() <= BISECTION_TOL {
            if (x - b).abs() > BISECTION_TOL {
                return Ok(false);
            }
            continue;
        }
        let k = (x - b) / span;
        match alpha {
            Some(prev) if (prev - k).abs() > BISECTION_TOL => return Ok(false),
            Some(_) => {}
            None => alpha = Some(k),
        }
    }
    Ok(alpha.map_or(true, |a| (-BISECTION_TOL..=1.0 + BISECTION_TOL).contains(&a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_read::{free_energy, ltl_read};

    fn instance() -> (PriorMatrix, Mat) {
        let w = Mat::from_rows(&[vec![1.0, 0.0], vec![0.25, 0.75]]);
        (PriorMatrix::from_weights(w).unwrap(), Mat::from_rows(&[vec![1.0], vec![-1.0]]))
    }

    #[test]
    fn hidden_temperature_endpoints_and_root() {
        let (p, v) = instance();
        assert_eq!(hidden_temperature(&p, &v, 2.0, 0.0, 1, 0).unwrap(), 0.0);
        assert_eq!(hidden_temperature(&p, &v, 2.0, 1.0, 1, 0).unwrap(), 2.0);
        let beta = hidden_temperature(&p, &v, 2.0, 0.5, 1, 0).unwrap();
        let (ft, _, _) = ltl_read(&p, &v, &[2.0], &Mat::filled(2, 1, 0.5)).unwrap();
        let f = free_energy(&p, &v, &[beta]).unwrap();
        assert!((f.get(1, 0) - ft.get(1, 0)).abs() <= 1e-10);
        assert!(beta > 0.0 && beta < 2.0);
    }

    #[test]
    fn hidden_temperature_rejects_constant_column() {
        let p = PriorMatrix::uniform(3);
        let v = Mat::filled(3, 1, 4.0);
        let err = hidden_temperature(&p, &v, 1.0, 0.5, 2, 0).unwrap_err();
        assert_eq!(err, FemError::ConstantValues { row: 2, channel: 0 });
    }

    #[test]
    fn budget_examples() {
        let s = budget_dual_solve(&[0.5, 0.5], &[1.0, 0.0], 0.0, 100.0).unwrap();
        assert_eq!((s.beta, s.q.as_slice()), (0.0, &[0.5, 0.5][..]));
        let s = budget_dual_solve(&[0.5, 0.5], &[3.0, 3.0], 0.0, 100.0).unwrap();
        assert_eq!(s.beta, 0.0);
        let s = budget_dual_solve(&[0.5, 0.5], &[1.0, 0.0], 0.1, 100.0).unwrap();
        assert!((s.kl - 0.1).abs() <= 1e-8);
        assert!(!s.saturated);
    }

    #[test]
    fn budget_saturates_and_rejects_constant() {
        let s = budget_dual_solve(&[0.5, 0.5], &[1.0, 0.0], 5.0, 3.0).unwrap();
        assert!(s.saturated);
        assert_eq!(s.beta, 3.0);
        let err = budget_dual_solve(&[0.5, 0.5], &[2.0, 2.0], 0.1, 3.0).unwrap_err();
        assert!(matches!(err, FemError::ConstantValues { .. }));
    }

    #[test]
    fn truncation_degree_table() {
        let got: Vec<usize> = [5.0, 10.0]
            .iter()
            .flat_map(|&r| [1e-4, 1e-6, 1e-8].map(|e| min_truncation_degree(r, e).unwrap()))
            .collect();
        assert_eq!(got, vec![19, 22, 25, 33, 36, 40]);
    }

    #[test]
    fn hull_examples() {
        assert!(!hull_membership_2pt(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap());
        assert!(hull_membership_2pt(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]).unwrap());
        assert!(hull_membership_2pt(&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]).unwrap());
        assert!(!hull_membership_2pt(&[1.0, 0.0], &[0.0, 1.0], &[1.5, -0.5]).unwrap());
    }
}
