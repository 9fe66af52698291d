//! Comparison estimators: probabilistic-PCA correction and naive regression.
//!
//! The PPCA model is `z ~ Normal(0, prior_var · I)`,
//! `t ~ Normal(W z + mean, noise_var · I)`; both parameters are variances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::LN_2PI;
use crate::numeric::Matrix;

/// Ridge added to the scaled Gram matrix when the design is singular.
pub const RIDGE: f64 = 1e-6;
/// Smallest-to-largest Gram eigenvalue ratio treated as singular.
pub const SINGULAR_RATIO: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcaModel {
    /// `T × D` loadings.
    pub w: Matrix,
    pub noise_var: f64,
    pub prior_var: f64,
    /// Per-treatment mean.
    pub mean: Vec<f64>,
}

impl PpcaModel {
    pub fn new(w: Matrix, noise_var: f64, prior_var: f64, mean: Vec<f64>) -> Result<Self> {
        if !(noise_var > 0.0) || !(prior_var > 0.0) {
            return Err(Error::Config("PPCA variances must be positive".into()));
        }
        if mean.len() != w.rows() {
            return Err(Error::Shape(format!(
                "mean has {} entries, loadings have {} rows",
                mean.len(),
                w.rows()
            )));
        }
        Ok(Self {
            w,
            noise_var,
            prior_var,
            mean,
        })
    }

    /// One treatment, one latent, unit loading, prior variance `σ²` and
    /// noise variance `σκ`. Its posterior mean is `σ/(σ+κ)·t` with
    /// variance `σ²(1 − σ/(σ+κ))`.
    pub fn scalar(sigma: f64, kappa: f64) -> Result<Self> {
        Self::new(Matrix::scalar(1.0), sigma * kappa, sigma * sigma, vec![0.0])
    }

    pub fn t(&self) -> usize {
        self.w.rows()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    /// Marginal covariance `prior_var · W Wᵀ + noise_var · I`.
    pub fn marginal_covariance(&self) -> DMatrix<f64> {
        let w = to_dmatrix(&self.w);
        let t = self.t();
        &w * w.transpose() * self.prior_var + DMatrix::identity(t, t) * self.noise_var
    }

    /// Mean log density per row.
    pub fn log_likelihood(&self, data: &Matrix) -> Result<f64> {
        if data.cols() != self.t() {
            return Err(Error::Shape(format!(
                "data has {} columns, model has {}",
                data.cols(),
                self.t()
            )));
        }
        let chol = self
            .marginal_covariance()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let t = self.t();
        let mut total = 0.0;
        for r in 0..data.rows() {
            let x =
                DVector::from_iterator(t, data.row(r).iter().zip(&self.mean).map(|(v, m)| v - m));
            total += x.dot(&chol.solve(&x));
        }
        let n = data.rows().max(1) as f64;
        Ok(-0.5 * (t as f64 * LN_2PI + log_det) - 0.5 * total / n)
    }

    /// Exact Gaussian posterior over `z` given treatments.
    pub fn posterior(&self) -> Result<PpcaPosterior> {
        let d = self.d();
        let w = to_dmatrix(&self.w);
        let prec = DMatrix::identity(d, d) / self.prior_var + w.transpose() * &w / self.noise_var;
        let cov = prec.try_inverse().ok_or(Error::NotPositiveDefinite)?;
        let gain = &cov * w.transpose() / self.noise_var;
        Ok(PpcaPosterior {
            gain: from_dmatrix(&gain),
            covariance: from_dmatrix(&cov),
            mean: self.mean.clone(),
        })
    }
}

/// `z | t ~ Normal(gain · (t − mean), covariance)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcaPosterior {
    /// `D × T`.
    pub gain: Matrix,
    /// `D × D`.
    pub covariance: Matrix,
    pub mean: Vec<f64>,
}

impl PpcaPosterior {
    /// Posterior means, one row per row of `t`.
    pub fn means(&self, t: &Matrix) -> Result<Matrix> {
        if t.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "treatments have {} columns, model has {}",
                t.cols(),
                self.mean.len()
            )));
        }
        let mut centered = t.clone();
        for r in 0..t.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        Ok(centered.matmul(&self.gain.transpose()))
    }
}

/// Posterior of `z` for a single treatment row.
pub fn ppca_posterior(model: &PpcaModel, t_row: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let post = model.posterior()?;
    let mean = post.means(&Matrix::row_vector(t_row))?.into_vec();
    Ok((mean, post.covariance))
}

/// Maximum-likelihood PPCA with `d` components from the eigendecomposition
/// of the sample covariance. Requires `d < T` so the noise variance is
/// identified by the discarded eigenvalues.
pub fn fit_ppca(data: &Matrix, d: usize) -> Result<PpcaModel> {
    let (n, t) = data.shape();
    if n <= d {
        return Err(Error::Data(format!(
            "PPCA with {d} components needs more than {d} rows, got {n}"
        )));
    }
    if d >= t {
        return Err(Error::Config(format!(
            "PPCA with {d} components needs more than {d} treatments"
        )));
    }
    let (mean, vals, vecs) = covariance_eigen(data);
    let noise_var = vals[d..].iter().sum::<f64>() / (t - d) as f64;
    if !(noise_var > 1e-12 * vals[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::Data(
            "rank-deficient covariance: discarded eigenvalues are zero".into(),
        ));
    }
    let w = loadings(&vals, &vecs, d, noise_var);
    PpcaModel::new(w, noise_var, 1.0, mean)
}

/// PPCA loadings with the noise variance held fixed; allows `d = T`.
pub fn fit_ppca_fixed_noise(data: &Matrix, d: usize, noise_var: f64) -> Result<PpcaModel> {
    if d > data.cols() {
        return Err(Error::Config(format!(
            "{d} components exceed {} treatments",
            data.cols()
        )));
    }
    if data.rows() < 2 {
        return Err(Error::Data("PPCA needs at least two rows".into()));
    }
    let (mean, vals, vecs) = covariance_eigen(data);
    let w = loadings(&vals, &vecs, d, noise_var);
    PpcaModel::new(w, noise_var, 1.0, mean)
}

/// Column means plus eigenpairs of the ML sample covariance, sorted by
/// decreasing eigenvalue.
fn covariance_eigen(data: &Matrix) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let (n, t) = data.shape();
    let mean = data.column_means();
    let x = DMatrix::from_fn(n, t, |r, c| data.get(r, c) - mean[c]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(t, t, |r, c| eig.eigenvectors[(r, order[c])]);
    (mean, vals, vecs)
}

fn loadings(vals: &[f64], vecs: &DMatrix<f64>, d: usize, noise_var: f64) -> Matrix {
    let t = vecs.nrows();
    let mut w = Matrix::zeros(t, d);
    for c in 0..d {
        let s = (vals[c] - noise_var).max(0.0).sqrt();
        for r in 0..t {
            w.set(r, c, vecs[(r, c)] * s);
        }
    }
    w
}

/// Least-squares coefficients with an intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Set when the design was singular and the ridge fallback was used.
    pub ridge_used: bool,
}

/// Ordinary least squares of `y` on the columns of `x` plus an intercept.
pub fn least_squares(x: &Matrix, y: &[f64]) -> Result<Regression> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Data(format!(
            "outcome has {} rows, design has {n}",
            y.len()
        )));
    }
    if n < 2 {
        return Err(Error::Data("regression needs at least two rows".into()));
    }
    let xm = x.column_means();
    let ym = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, p, |r, c| x.get(r, c) - xm[c]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let mut gram = xc.transpose() * &xc / n as f64;
    let rhs = xc.transpose() * yc / n as f64;
    let eig = gram.clone().symmetric_eigenvalues();
    let hi = eig.iter().cloned().fold(0.0f64, f64::max);
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let ridge_used = p > 0 && !(hi > 0.0 && lo / hi >= SINGULAR_RATIO);
    if ridge_used {
        for i in 0..p {
            gram[(i, i)] += RIDGE;
        }
    }
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::numerical("least squares", "Gram matrix not positive definite"))?
        .solve(&rhs);
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("least squares", "non-finite coefficients"));
    }
    let intercept = ym
        - coefficients
            .iter()
            .zip(&xm)
            .map(|(b, m)| b * m)
            .sum::<f64>();
    Ok(Regression {
        coefficients,
        intercept,
        ridge_used,
    })
}

/// Regression of `y` on `t` alone.
pub fn naive_regress(data: &Dataset) -> Result<Regression> {
    least_squares(&data.treatments, data.outcome()?)
}

/// Regression of `y` on `[E[z | t], t]` under a `d`-component PPCA fit;
/// the returned coefficients are the treatment block only.
pub fn pca_correct_regress(data: &Dataset, d: usize) -> Result<Regression> {
    let y = data.outcome()?;
    if d == 0 {
        return naive_regress(data);
    }
    let model = fit_ppca(&data.treatments, d)?;
    let z = model.posterior()?.means(&data.treatments)?;
    let fit = least_squares(&Matrix::hcat(&[&z, &data.treatments]), y)?;
    Ok(Regression {
        coefficients: fit.coefficients[d..].to_vec(),
        intercept: fit.intercept,
        ridge_used: fit.ridge_used,
    })
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_vec(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    #[test]
    fn scalar_posterior_cases() {
        let (m, v) = ppca_posterior(&PpcaModel::scalar(1.0, 1.0).unwrap(), &[2.0]).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-14);
        assert!((v.item() - 0.5).abs() < 1e-14);
        // no signal: posterior returns to the prior
        let (m, v) = ppca_posterior(&PpcaModel::scalar(1.5, 1e12).unwrap(), &[3.0]).unwrap();
        assert!(m[0].abs() < 1e-9);
        assert!((v.item() - 2.25).abs() < 1e-9);
    }

    #[test]
    fn posterior_matches_grid_bayes() {
        let mut rng = RngStream::new(7, 0);
        let w = rng.normal_matrix(3, 1);
        let model = PpcaModel::new(w.clone(), 0.7, 1.3, vec![0.2, -0.1, 0.4]).unwrap();
        let t = [0.5, 1.2, -0.8];
        let (mean, cov) = ppca_posterior(&model, &t).unwrap();
        let (lo, hi, k) = (-15.0, 15.0, 200_001);
        let h = (hi - lo) / (k - 1) as f64;
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for j in 0..k {
            let z = lo + h * j as f64;
            let mut lp = -0.5 * z * z / 1.3;
            for i in 0..3 {
                let r = t[i] - model.mean[i] - w.get(i, 0) * z;
                lp -= 0.5 * r * r / 0.7;
            }
            let p = lp.exp();
            s0 += p;
            s1 += p * z;
            s2 += p * z * z;
        }
        let m = s1 / s0;
        let var = s2 / s0 - m * m;
        assert!((m - mean[0]).abs() < 1e-6, "{m} vs {}", mean[0]);
        assert!((var - cov.item()).abs() < 1e-6, "{var} vs {}", cov.item());
    }

    #[test]
    fn independent_unit_columns_give_shrunk_identity_loadings() {
        let mut rng = RngStream::new(8, 0);
        let data = rng.normal_matrix(50_000, 3);
        let kappa = 0.4;
        let model = fit_ppca_fixed_noise(&data, 3, kappa).unwrap();
        let w = to_dmatrix(&model.w);
        let wwt = &w * w.transpose();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 - kappa } else { 0.0 };
                assert!(
                    (wwt[(r, c)] - expect).abs() < 0.03,
                    "{r},{c}: {}",
                    wwt[(r, c)]
                );
            }
        }
    }

    #[test]
    fn null_model_noise_is_sample_variance() {
        let mut rng = RngStream::new(9, 0);
        let data = rng.normal_matrix(20_000, 6).map(|v| 2.0 * v);
        let model = fit_ppca(&data, 1).unwrap();
        assert!((model.noise_var - 4.0).abs() < 0.15);
        let loading: f64 = model.w.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(loading < 0.5, "{loading}");
    }

    #[test]
    fn rank_deficiency_and_dimension_errors() {
        let mut rng = RngStream::new(10, 0);
        let z = rng.normal_matrix(100, 1);
        let data = Matrix::hcat(&[&z, &z.map(|v| 2.0 * v), &z.map(|v| -v)]);
        assert!(matches!(fit_ppca(&data, 1), Err(Error::Data(_))));
        assert!(matches!(fit_ppca(&data, 3), Err(Error::Config(_))));
    }

    #[test]
    fn regression_cases() {
        let mut rng = RngStream::new(11, 0);
        let t = rng.normal_matrix(500, 3);
        let zero = Dataset::new(t.clone(), Some(vec![0.0; 500])).unwrap();
        assert!(naive_regress(&zero)
            .unwrap()
            .coefficients
            .iter()
            .all(|c| c.abs() < 1e-12));
        assert!(pca_correct_regress(&zero, 1)
            .unwrap()
            .coefficients
            .iter()
            .all(|c| c.abs() < 1e-12));

        let dup = Matrix::hcat(&[&t, &t.select_columns(&[0])]);
        let y: Vec<f64> = (0..500).map(|r| t.get(r, 0)).collect();
        let d = Dataset::new(dup, Some(y)).unwrap();
        assert!(naive_regress(&d).unwrap().ridge_used);
        assert!(pca_correct_regress(&d, 1).unwrap().ridge_used);

        let y: Vec<f64> = (0..500).map(|r| t.get(r, 1) - 2.0 * t.get(r, 2)).collect();
        let d = Dataset::new(t, Some(y)).unwrap();
        assert_eq!(
            pca_correct_regress(&d, 0).unwrap(),
            naive_regress(&d).unwrap()
        );
    }
}
