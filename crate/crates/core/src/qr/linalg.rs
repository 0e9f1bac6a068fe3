use super::FeatureMatrix;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, LU};
use nalgebra::Dyn;

// pivots below this fraction of the largest pivot are treated as zero
const RELATIVE_PIVOT_TOL: f64 = 1e-12;

/// LU factors of a square basis matrix `Φ_B` and its transpose.
pub(crate) struct BasisFactor {
    lu: LU<f64, Dyn, Dyn>,
    lu_t: LU<f64, Dyn, Dyn>,
}

impl BasisFactor {
    pub(crate) fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let dim = m.nrows();
        let lu_t = m.transpose().lu();
        let lu = m.lu();
        if !well_conditioned(&lu) || !well_conditioned(&lu_t) {
            return Err(Error::SingularBasis { dim });
        }
        Ok(Self { lu, lu_t })
    }

    pub(crate) fn from_rows(features: &FeatureMatrix, basis: &[usize]) -> Result<Self> {
        let d = features.cols();
        let m = DMatrix::from_fn(basis.len(), d, |r, c| features.row(basis[r])[c]);
        Self::from_matrix(m)
    }

    /// Solve `Φ_B x = rhs`.
    pub(crate) fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        self.lu
            .solve(&b)
            .expect("factor checked non-singular")
            .as_slice()
            .to_vec()
    }

    /// Solve `Φ_Bᵀ x = rhs`.
    pub(crate) fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        self.lu_t
            .solve(&b)
            .expect("factor checked non-singular")
            .as_slice()
            .to_vec()
    }

    /// Column `k` of `Φ_B⁻¹`.
    pub(crate) fn inverse_column(&self, k: usize, dim: usize) -> Vec<f64> {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        self.solve(&e)
    }
}

fn well_conditioned(lu: &LU<f64, Dyn, Dyn>) -> bool {
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    max > 0.0 && diag.iter().all(|&p| p > RELATIVE_PIVOT_TOL * max)
}

/// Coefficients `β` that interpolate `scores_B` on the basis rows, i.e. the
/// solution of `Φ_B β = S_B`.
pub fn basis_interpolator(features_b: &[Vec<f64>], scores_b: &[f64]) -> Result<Vec<f64>> {
    let d = features_b.len();
    if scores_b.len() != d || features_b.iter().any(|r| r.len() != d) {
        return Err(Error::Validation(format!(
            "basis system must be {d}x{d} with {d} scores"
        )));
    }
    if features_b.iter().flatten().chain(scores_b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite entry in basis system".into()));
    }
    let m = DMatrix::from_fn(d, d, |r, c| features_b[r][c]);
    Ok(BasisFactor::from_matrix(m)?.solve(scores_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_returns_scores() {
        let beta = basis_interpolator(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[3.5, -2.0]).unwrap();
        assert_eq!(beta, vec![3.5, -2.0]);
    }

    #[test]
    fn scalar_system() {
        assert_eq!(basis_interpolator(&[vec![2.0]], &[6.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn singular_basis_is_rejected() {
        let err = basis_interpolator(&[vec![1.0, 2.0], vec![2.0, 4.0]], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::SingularBasis { dim: 2 }));
    }

    #[test]
    fn random_system_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            // diagonally dominant keeps the instance well conditioned
            let a: Vec<Vec<f64>> = (0..4)
                .map(|r| {
                    (0..4)
                        .map(|c| rng.gen_range(-1.0..1.0) + if r == c { 5.0 } else { 0.0 })
                        .collect()
                })
                .collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let x = basis_interpolator(&a, &b).unwrap();
            let resid: f64 = a
                .iter()
                .zip(&b)
                .map(|(row, bi)| {
                    let lhs: f64 = row.iter().zip(&x).map(|(p, q)| p * q).sum();
                    (lhs - bi).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            assert!(resid <= 1e-10, "residual {resid}");
        }
    }
}
