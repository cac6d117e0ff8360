//! Frechet distance between Gaussian fits of two embedding sets.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Negative eigenvalues and distances down to this (relative) size are
/// treated as rounding noise and clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Sample mean and unbiased covariance of row vectors.
pub fn mean_and_covariance(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 embeddings, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("embeddings have different lengths".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "embedding".into(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, symmetrize(cov)))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric PSD matrix, clamping rounding-level negatives.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min < -PSD_TOLERANCE * max.max(1.0) {
        let condition = if min.abs() > 0.0 { max / min.abs() } else { f64::INFINITY };
        return Err(Error::Numerical(format!(
            "{what} is not positive semi-definite: min eigenvalue {min:e}, max {max:e}, |max/min| = {condition:e}"
        )));
    }
    for v in eig.eigenvalues.iter_mut() {
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Symmetric PSD square root via eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(symmetrize(m.clone()), "covariance")?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(symmetrize(&eig.eigenvectors * root * eig.eigenvectors.transpose()))
}

/// Frechet distance between two Gaussians.
///
/// `Tr(sqrt(Sa Sb))` is computed as `Tr(sqrt(sqrt(Sa) Sb sqrt(Sa)))`, whose
/// argument is symmetric PSD.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() {
        return Err(Error::Shape {
            expected: vec![mu_a.len()],
            actual: vec![mu_b.len()],
        });
    }
    let root_a = sqrtm_psd(cov_a)?;
    let inner = symmetrize(&root_a * cov_b * &root_a);
    let eig = psd_eigen(inner, "sqrt(Sa) Sb sqrt(Sa)")?;
    let tr_cross: f64 = eig.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    let scale = cov_a.trace() + cov_b.trace() + diff.dot(&diff);
    if value < -PSD_TOLERANCE * scale.max(1.0) {
        return Err(Error::Numerical(format!("Frechet distance came out negative: {value:e}")));
    }
    Ok(value.max(0.0))
}

/// FID between two sets of embeddings.
pub fn fid_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_and_covariance(a)?;
    let (mu_b, cov_b) = mean_and_covariance(b)?;
    let d = mu_a.len();
    if a.len() < 2 * d || b.len() < 2 * d {
        warn!(
            "FID on {} and {} samples of {d}-d embeddings; covariance estimates are rank-deficient below {}",
            a.len(),
            b.len(),
            2 * d
        );
    }
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, d: usize, seed: u64, scale: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|j| scale * (rng.gen::<f64>() - 0.5) * (1.0 + j as f64)).collect())
            .collect()
    }

    #[test]
    fn self_distance_is_zero() {
        let a = cloud(64, 6, 1, 1.0);
        assert!(fid_from_embeddings(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn pure_mean_shift() {
        let a = cloud(50, 4, 2, 1.0);
        let d = [0.5, -1.0, 2.0, 0.25];
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&d).map(|(x, s)| x + s).collect()).collect();
        let expected: f64 = d.iter().map(|v| v * v).sum();
        assert!((fid_from_embeddings(&a, &b).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn symmetric() {
        let a = cloud(60, 5, 3, 1.0);
        let b = cloud(70, 5, 4, 2.0);
        let ab = fid_from_embeddings(&a, &b).unwrap();
        let ba = fid_from_embeddings(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn commuting_covariances_match_closed_form() {
        // Diagonal covariances: FID = sum (sqrt(a_i) - sqrt(b_i))^2.
        let ca = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 9.0]));
        let cb = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 4.0]));
        let mu = DVector::zeros(3);
        let f = frechet_distance(&mu, &ca, &mu, &cb).unwrap();
        assert!((f - (1.0 + 0.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let mu = DVector::zeros(2);
        assert!(matches!(frechet_distance(&mu, &bad, &mu, &bad), Err(Error::Numerical(_))));
    }
}
