use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = probe[i];
        probe[i] = xi + h;
        let plus = f(&probe);
        probe[i] = xi - h;
        let minus = f(&probe);
        probe[i] = xi;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: format!("f(x ± h·e_{i}) = ({plus}, {minus})"),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error: length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = super::norm(a).max(super::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Matrix, RngState};

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], DEFAULT_STEP).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn reports_offending_index() {
        let err = finite_diff_grad(|x| if x[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn quadratic_forms_match_analytic() {
        for seed in [1, 2, 3] {
            let mut rng = RngState::new(seed);
            let n = 6;
            let q = Matrix::random_normal(n, n, 1.0, &mut rng);
            let x = rng.gaussian_vec(n);
            let f = |v: &[f64]| crate::numkit::dot(v, &q.matvec(v).unwrap());
            // ∇(xᵀQx) = (Q + Qᵀ)x
            let analytic: Vec<f64> =
                crate::numkit::add(&q.matvec(&x).unwrap(), &q.tr_matvec(&x).unwrap());
            let numeric = finite_diff_grad(f, &x, DEFAULT_STEP).unwrap();
            assert!(rel_error(&analytic, &numeric) < 1e-6);
        }
    }
}
