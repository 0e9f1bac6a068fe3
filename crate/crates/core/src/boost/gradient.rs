use crate::error::{Error, Result};
use crate::qr::{BasisFactor, FeatureMatrix};

/// `∂τ̂/∂θ = xᵀ Φ_B⁻¹ ∂S_B/∂θ`.
///
/// `dscore_dtheta_b[k]` is the gradient of the score of basis row
/// `basis[k]`. Computed as one transposed solve `Φ_Bᵀ w = x` followed by
/// `Σ_k w_k ∂S_{B_k}`.
pub fn tau_gradient(
    basis: &[usize],
    features: &FeatureMatrix,
    dscore_dtheta_b: &[Vec<f64>],
    test_features: &[f64],
) -> Result<Vec<f64>> {
    let d = features.cols();
    if basis.len() != d || dscore_dtheta_b.len() != d || test_features.len() != d {
        return Err(Error::Validation(format!(
            "basis of size {} and {} score gradients for {d} features",
            basis.len(),
            dscore_dtheta_b.len()
        )));
    }
    if let Some(&i) = basis.iter().find(|&&i| i >= features.rows()) {
        return Err(Error::Validation(format!("basis row {i} out of range")));
    }
    let p = dscore_dtheta_b.first().map_or(0, Vec::len);
    if dscore_dtheta_b.iter().any(|g| g.len() != p) {
        return Err(Error::Validation("ragged score gradient matrix".into()));
    }
    let w = BasisFactor::from_rows(features, basis)?.solve_transpose(test_features);
    let mut out = vec![0.0; p];
    for (wk, g) in w.iter().zip(dscore_dtheta_b) {
        for (o, gi) in out.iter_mut().zip(g) {
            *o += wk * gi;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_score_gradient() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let g = tau_gradient(&[0, 2], &f, &[vec![0.0; 3], vec![0.0; 3]], &[1.0, 0.5]).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn scalar_chain() {
        let f = FeatureMatrix::intercept_only(4);
        let g = tau_gradient(&[2], &f, &[vec![0.25, -3.0]], &[1.0]).unwrap();
        assert_eq!(g, vec![0.25, -3.0]);
    }

    #[test]
    fn two_point_line() {
        // τ = x·β with β through (0, S₀) and (1, S₁); at x = 0.25 the weights
        // on S₀ and S₁ are 0.75 and 0.25
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let g = tau_gradient(&[0, 1], &f, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 0.25]).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn singular_basis() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let err = tau_gradient(&[0, 1], &f, &[vec![1.0], vec![1.0]], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::SingularBasis { .. }));
    }
}
