//! Rotary position embedding over adjacent feature pairs.

use crate::mat::Mat;

pub const ROPE_BASE: f64 = 10000.0;

/// Rotates pairs `(2j, 2j+1)` of row `t` by `t · base^{-2j/m}`. A trailing
/// odd feature is left untouched.
pub fn apply_rope(x: &Mat, base: f64) -> Mat {
    rotate(x, base, 1.0)
}

/// Transpose of [`apply_rope`] (rotation by the negated angle); used to pull
/// gradients back through the embedding.
pub fn apply_rope_transpose(x: &Mat, base: f64) -> Mat {
    rotate(x, base, -1.0)
}

fn rotate(x: &Mat, base: f64, sign: f64) -> Mat {
    let m = x.cols();
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        for j in 0..m / 2 {
            let freq = base.powf(-2.0 * j as f64 / m as f64);
            let (sin, cos) = (sign * t as f64 * freq).sin_cos();
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * cos - b * sin;
            row[2 * j + 1] = a * sin + b * cos;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let x = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(apply_rope(&x, ROPE_BASE), x);
    }

    #[test]
    fn preserves_norms_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::randn(7, 6, 1.0, &mut rng);
        let y = apply_rope(&x, ROPE_BASE);
        for t in 0..7 {
            let n0: f64 = x.row(t).iter().map(|v| v * v).sum();
            let n1: f64 = y.row(t).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        assert!(apply_rope_transpose(&y, ROPE_BASE).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn relative_position_dot_product() {
        // <R_t q, R_s k> depends only on t - s.
        let q = [0.3, -1.2, 0.8, 0.5];
        let k = [1.1, 0.4, -0.7, 0.2];
        let at = |t: usize, v: &[f64; 4]| {
            let mut m = Mat::zeros(t + 1, 4);
            m.row_mut(t).copy_from_slice(v);
            apply_rope(&m, ROPE_BASE).row(t).to_vec()
        };
        let d1 = crate::mat::dot(&at(5, &q), &at(3, &k));
        let d2 = crate::mat::dot(&at(9, &q), &at(7, &k));
        assert!((d1 - d2).abs() < 1e-12);
    }
}
