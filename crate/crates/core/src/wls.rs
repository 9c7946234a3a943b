//! Weighted least squares on pseudo-data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative size of an `R` diagonal entry below which the design is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t_values: Vec<f64>,
    /// Residual dispersion, `N - p` denominator.
    pub sigma2: f64,
    pub sigma: f64,
    pub loglik: f64,
    /// Linear predictor `x_i' beta`.
    pub fitted_mu: Vec<f64>,
    pub residuals: Vec<f64>,
    pub df_residual: usize,
    /// `(X'WX)^{-1}`, row-major, so callers can rescale standard errors.
    #[serde(skip)]
    pub unscaled_cov: Vec<f64>,
}

impl FitResult {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn unscaled_cov_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_row_slice(p, p, &self.unscaled_cov)
    }
}

/// QR factorisation of `W^{1/2} X` with a rank check. Returns `(Q'W^{1/2}v, R)`.
pub(crate) fn weighted_qr(
    v: &[f64],
    x: &DMatrix<f64>,
    w: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    if v.len() != n || w.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, response {}, weights {}",
            v.len(),
            w.len()
        )));
    }
    if n <= p {
        return Err(Error::InsufficientDof { n, p });
    }
    if let Some(i) = w.iter().position(|wi| !(wi.is_finite() && *wi > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weight {} at row {} is not positive",
            w[i],
            i + 1
        )));
    }
    let sw: Vec<f64> = w.iter().map(|wi| wi.sqrt()).collect();
    let mut a = x.clone();
    for (i, s) in sw.iter().enumerate() {
        a.row_mut(i).scale_mut(*s);
    }
    let b = DVector::from_iterator(n, v.iter().zip(&sw).map(|(vi, s)| vi * s));
    let qr = a.qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if max_diag == 0.0 || r.diagonal().iter().any(|d| d.abs() <= RANK_TOL * max_diag) {
        return Err(Error::SingularDesign);
    }
    let qtb = qr.q().transpose() * b;
    Ok((qtb, r))
}

/// Fits `v ~ X beta` minimising `sum_i w_i (v_i - x_i' beta)^2`.
pub fn fit_wls(v: &[f64], x: &DMatrix<f64>, w: &[f64]) -> Result<FitResult> {
    let (n, p) = x.shape();
    let (qtb, r) = weighted_qr(v, x, w)?;
    let beta = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::SingularDesign)?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::SingularDesign)?;
    let unscaled = &r_inv * r_inv.transpose();

    let fitted = x * &beta;
    let residuals: Vec<f64> = v.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let rss: f64 = residuals.iter().zip(w).map(|(e, wi)| wi * e * e).sum();
    let df = n - p;
    let sigma2 = rss / df as f64;

    let se: Vec<f64> = (0..p).map(|k| (sigma2 * unscaled[(k, k)]).sqrt()).collect();
    let t_values = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let loglik = gaussian_loglik(&residuals, w, sigma2);

    Ok(FitResult {
        beta: beta.as_slice().to_vec(),
        se,
        t_values,
        sigma2,
        sigma: sigma2.sqrt(),
        loglik,
        fitted_mu: fitted.as_slice().to_vec(),
        residuals,
        df_residual: df,
        unscaled_cov: unscaled.transpose().as_slice().to_vec(),
    })
}

/// Sum of `log N(e_i; 0, sigma2 / w_i)`. An exact fit (`sigma2 = 0`) has
/// unbounded density and reports `+inf`.
pub(crate) fn gaussian_loglik(residuals: &[f64], w: &[f64], sigma2: f64) -> f64 {
    if sigma2 == 0.0 {
        return f64::INFINITY;
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    residuals
        .iter()
        .zip(w)
        .map(|(e, wi)| -0.5 * (ln2pi + (sigma2 / wi).ln() + wi * e * e / sigma2))
        .sum()
}

/// Back-transformed Poisson means `z_i exp(x_i' beta)`.
pub fn predict_mean(fit: &FitResult, x_new: &DMatrix<f64>, z_new: &[f64]) -> Result<Vec<f64>> {
    if x_new.ncols() != fit.p() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, fit has {} coefficients",
            x_new.ncols(),
            fit.p()
        )));
    }
    if x_new.nrows() != z_new.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} design rows but {} offsets",
            x_new.nrows(),
            z_new.len()
        )));
    }
    if z_new.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
        return Err(Error::InvalidArgument("offsets must be positive".into()));
    }
    let beta = DVector::from_column_slice(&fit.beta);
    let eta = x_new * beta;
    Ok(eta.iter().zip(z_new).map(|(e, z)| z * e.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn line_design() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0])
    }

    /// `(X'WX)^{-1} X'Wv` by explicit normal equations and Gaussian elimination.
    fn normal_equations(v: &[f64], x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
        let (n, p) = x.shape();
        let mut a = vec![vec![0.0; p + 1]; p];
        for i in 0..n {
            for j in 0..p {
                for k in 0..p {
                    a[j][k] += w[i] * x[(i, j)] * x[(i, k)];
                }
                a[j][p] += w[i] * x[(i, j)] * v[i];
            }
        }
        for col in 0..p {
            let piv = (col..p)
                .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for row in 0..p {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..=p {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        (0..p).map(|j| a[j][p] / a[j][j]).collect()
    }

    #[test]
    fn exact_line_has_zero_dispersion() {
        let fit = fit_wls(&[0.0, 1.0, 2.0], &line_design(), &[1.0; 3]).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.beta[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.sigma2, 0.0, epsilon = 1e-24);
    }

    #[test]
    fn duplicate_column_is_singular() {
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 3.0, 3.0,
        ]);
        let err = fit_wls(&[1.0, 2.0, 3.0, 5.0], &x, &[1.0; 4]).unwrap_err();
        assert!(matches!(err, Error::SingularDesign));
        assert_eq!(err.to_string(), "singular design");
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            fit_wls(&[1.0, 2.0], &x, &[1.0; 2]),
            Err(Error::InsufficientDof { n: 2, p: 2 })
        ));
    }

    #[test]
    fn unit_weights_match_ols_oracle() {
        let x = DMatrix::from_row_slice(5, 2, &[
            1.0, -1.0, 1.0, 0.3, 1.0, 0.9, 1.0, 2.0, 1.0, 2.5,
        ]);
        let v = [0.1, 0.7, 1.1, 2.3, 2.4];
        let fit = fit_wls(&v, &x, &[1.0; 5]).unwrap();
        let ols = normal_equations(&v, &x, &[1.0; 5]);
        for (a, b) in fit.beta.iter().zip(&ols) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn predict_mean_examples() {
        let fit = fit_wls(&[0.0, 1.0, 2.0], &line_design(), &[1.0; 3]).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let mean = predict_mean(&fit, &x, &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean[1], 5.436_563_656_918_09, epsilon = 1e-11);

        let mut flat = fit.clone();
        flat.beta = vec![3f64.ln(), 0.0];
        let m = predict_mean(&flat, &DMatrix::from_row_slice(1, 2, &[1.0, 5.0]), &[1.0]).unwrap();
        assert_abs_diff_eq!(m[0], 3.0, epsilon = 1e-12);

        assert!(predict_mean(&fit, &DMatrix::from_element(1, 3, 1.0), &[1.0]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, DMatrix<f64>, Vec<f64>)> {
        (1usize..=4).prop_flat_map(|p| {
            (p + 2..=20).prop_flat_map(move |n| {
                (
                    proptest::collection::vec(-3.0f64..3.0, n),
                    proptest::collection::vec(-2.0f64..2.0, n * (p - 1)),
                    proptest::collection::vec(0.1f64..5.0, n),
                )
                    .prop_map(move |(v, xs, w)| {
                        let mut x = DMatrix::from_element(n, p, 1.0);
                        for i in 0..n {
                            for j in 1..p {
                                x[(i, j)] = xs[i * (p - 1) + j - 1];
                            }
                        }
                        (v, x, w)
                    })
            })
        })
    }

    proptest! {
        #[test]
        fn weight_scaling_leaves_beta_and_se(inst in instance(), k in 0.01f64..100.0) {
            let (v, x, w) = inst;
            let a = fit_wls(&v, &x, &w).unwrap();
            let scaled: Vec<f64> = w.iter().map(|wi| wi * k).collect();
            let b = fit_wls(&v, &x, &scaled).unwrap();
            for j in 0..x.ncols() {
                prop_assert!((a.beta[j] - b.beta[j]).abs() < 1e-12 * (1.0 + a.beta[j].abs()));
                prop_assert!((a.se[j] - b.se[j]).abs() < 1e-12 * (1.0 + a.se[j]));
            }
            prop_assert!((b.sigma2 - k * a.sigma2).abs() < 1e-9 * (1.0 + b.sigma2));
        }

        #[test]
        fn residuals_are_weighted_orthogonal(inst in instance()) {
            let (v, x, w) = inst;
            let fit = fit_wls(&v, &x, &w).unwrap();
            for j in 0..x.ncols() {
                let s: f64 = (0..v.len()).map(|i| x[(i, j)] * w[i] * fit.residuals[i]).sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }
}
