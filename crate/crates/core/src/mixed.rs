//! Linear mixed models on pseudo-data.
//!
//! The working model is
//!
//! ```text
//! v = X beta + sum_l Z_l b_l + e,   b_l ~ N(0, tau2_l I),   e_i ~ N(0, sigma2 / w_i)
//! ```
//!
//! Variance parameters are estimated by maximising the (ML or REML) marginal
//! likelihood. `sigma2` is profiled out analytically, so the numerical
//! search runs over the log variance ratios `tau2_l / sigma2` only.
//!
//! For fixed ratios `gamma`, write `Zt = Z diag(sqrt(gamma))`. Then `beta`
//! and `u = b / sqrt(gamma)` solve the augmented system
//!
//! ```text
//! [ Zt'WZt + I   Zt'WX ] [u   ]   [Zt'Wv]
//! [ X'WZt        X'WX  ] [beta] = [X'Wv ]
//! ```
//!
//! whose Cholesky factor also yields `log|I + Zt'WZt|` (leading block) and
//! `log|X'H^{-1}X|` (trailing block), with `H = W^{-1} + Z Gamma Z'`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::GroupFactor;
use crate::error::{Error, Result};
use crate::wls::{fit_wls, FitResult};

/// Lower bound of the log variance ratios; at the bound a term is dropped.
pub const LOG_RATIO_MIN: f64 = -30.0;
pub const LOG_RATIO_MAX: f64 = 20.0;
pub const LOGLIK_TOL: f64 = 1e-8;
const EIGEN_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Group,
    Spatial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectTerm {
    pub label: String,
    pub kind: TermKind,
    pub z: DMatrix<f64>,
    /// Level names for group terms, one per column.
    pub levels: Vec<String>,
    /// Retained eigenvalues for spatial terms, one per column.
    pub eigenvalues: Vec<f64>,
}

impl RandomEffectTerm {
    pub fn n_columns(&self) -> usize {
        self.z.ncols()
    }
}

/// Indicator design with one column per level (order of first appearance).
pub fn group_design(factor: &GroupFactor) -> Result<RandomEffectTerm> {
    let levels: Vec<String> = factor.levels().into_iter().map(String::from).collect();
    if levels.len() < 2 {
        return Err(Error::Data(format!(
            "group '{}' has a single level",
            factor.name
        )));
    }
    let index: HashMap<&str, usize> = levels
        .iter()
        .enumerate()
        .map(|(k, l)| (l.as_str(), k))
        .collect();
    let mut z = DMatrix::zeros(factor.labels.len(), levels.len());
    for (i, label) in factor.labels.iter().enumerate() {
        z[(i, index[label.as_str()])] = 1.0;
    }
    Ok(RandomEffectTerm {
        label: factor.name.clone(),
        kind: TermKind::Group,
        z,
        levels,
        eigenvalues: Vec::new(),
    })
}

fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Moran eigenvector basis of the doubly centred exponential kernel
/// `M C M`, `C_ij = exp(-d_ij / range)`, `M = I - 11'/N`.
///
/// Eigenvectors with eigenvalue above `1e-10` times the largest are kept
/// and scaled by the square root of their eigenvalue, so a single variance
/// parameter gives each one a prior variance proportional to its
/// eigenvalue. `range` defaults to the largest pairwise distance.
///
/// Coincident points are collapsed before the eigendecomposition, so the
/// cost depends on the number of distinct locations rather than on `N`.
pub fn moran_basis(coords: &[[f64; 2]], range: Option<f64>) -> Result<RandomEffectTerm> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "spatial basis needs at least 2 points, got {n}"
        )));
    }
    let mut site_of = Vec::with_capacity(n);
    let mut sites: Vec<[f64; 2]> = Vec::new();
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    for p in coords {
        let key = (p[0].to_bits(), p[1].to_bits());
        let k = *index.entry(key).or_insert_with(|| {
            sites.push(*p);
            sites.len() - 1
        });
        site_of.push(k);
    }
    let k = sites.len();
    if k < 2 {
        return Err(Error::Data("no positive spatial structure: all coordinates coincide".into()));
    }
    let range = match range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::InvalidArgument(format!("spatial range must be positive, got {r}"))),
        None => {
            let mut dmax = 0.0f64;
            for a in 0..k {
                for b in a + 1..k {
                    dmax = dmax.max(distance(&sites[a], &sites[b]));
                }
            }
            dmax
        }
    };

    let kernel = DMatrix::from_fn(k, k, |a, b| (-distance(&sites[a], &sites[b]) / range).exp());
    let kernel_eig = SymmetricEigen::new(kernel);
    let sqrt_vals = kernel_eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &kernel_eig.eigenvectors
        * DMatrix::from_diagonal(&sqrt_vals)
        * kernel_eig.eigenvectors.transpose();

    // A'MA for the site-membership matrix A.
    let mut counts = vec![0.0; k];
    for &s in &site_of {
        counts[s] += 1.0;
    }
    let nf = n as f64;
    let centred_gram = DMatrix::from_fn(k, k, |a, b| {
        let diag = if a == b { counts[a] } else { 0.0 };
        diag - counts[a] * counts[b] / nf
    });
    let inner = &root * centred_gram * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) {
        return Err(Error::Data("no positive spatial structure".into()));
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&j| eig.eigenvalues[j] > EIGEN_REL_TOL * largest)
        .collect();

    let mut z = DMatrix::zeros(n, kept.len());
    let mut eigenvalues = Vec::with_capacity(kept.len());
    for (c, &j) in kept.iter().enumerate() {
        let site_values = &root * eig.eigenvectors.column(j);
        let mut col: Vec<f64> = site_of.iter().map(|&s| site_values[s]).collect();
        let mean = col.iter().sum::<f64>() / nf;
        col.iter_mut().for_each(|v| *v -= mean);
        z.column_mut(c).copy_from_slice(&col);
        eigenvalues.push(eig.eigenvalues[j]);
    }
    Ok(RandomEffectTerm {
        label: "spatial".into(),
        kind: TermKind::Spatial,
        z,
        levels: Vec::new(),
        eigenvalues,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmmOptions {
    pub reml: bool,
    pub max_evaluations: usize,
}

impl Default for LmmOptions {
    fn default() -> Self {
        Self {
            reml: false,
            max_evaluations: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub label: String,
    pub kind: TermKind,
    pub tau2: f64,
    pub b: Vec<f64>,
    /// `Z_l b_l`, one value per observation.
    pub effect: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFit {
    pub fixed: FitResult,
    pub terms: Vec<TermEstimate>,
    pub sigma2: f64,
    pub loglik: f64,
    pub reml: bool,
    pub converged: bool,
    pub evaluations: usize,
}

impl MixedFit {
    pub fn tau2(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.tau2).collect()
    }

    /// Sum of all term effects per observation.
    pub fn total_effect(&self) -> Vec<f64> {
        let n = self.fixed.fitted_mu.len();
        let mut out = vec![0.0; n];
        for t in &self.terms {
            out.iter_mut().zip(&t.effect).for_each(|(o, e)| *o += e);
        }
        out
    }
}

/// Weighted cross-products that stay fixed while the variance ratios vary.
struct CrossProducts {
    n: usize,
    p: usize,
    blocks: Vec<(usize, usize)>,
    xtwx: DMatrix<f64>,
    ztwx: DMatrix<f64>,
    ztwz: DMatrix<f64>,
    xtwv: DVector<f64>,
    ztwv: DVector<f64>,
    vtwv: f64,
    sum_log_w: f64,
}

/// Solution of the augmented system for fixed ratios.
struct Profile {
    loglik: f64,
    sigma2: f64,
    beta: DVector<f64>,
    b: DVector<f64>,
    beta_cov_unscaled: DMatrix<f64>,
}

impl CrossProducts {
    fn new(v: &[f64], x: &DMatrix<f64>, w: &[f64], terms: &[RandomEffectTerm]) -> Result<Self> {
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
        if terms.is_empty() {
            return Err(Error::InvalidArgument("at least one random-effect term is required".into()));
        }
        if w.iter().any(|wi| !(wi.is_finite() && *wi > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let q: usize = terms.iter().map(|t| t.n_columns()).sum();
        let mut z = DMatrix::zeros(n, q);
        let mut blocks = Vec::with_capacity(terms.len());
        let mut start = 0;
        for t in terms {
            if t.z.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "term '{}' has {} rows, expected {n}",
                    t.label,
                    t.z.nrows()
                )));
            }
            z.columns_mut(start, t.n_columns()).copy_from(&t.z);
            blocks.push((start, t.n_columns()));
            start += t.n_columns();
        }
        let mut wx = x.clone();
        let mut wz = z.clone();
        for i in 0..n {
            wx.row_mut(i).scale_mut(w[i]);
            wz.row_mut(i).scale_mut(w[i]);
        }
        let vv = DVector::from_column_slice(v);
        Ok(Self {
            n,
            p,
            blocks,
            xtwx: x.transpose() * &wx,
            ztwx: z.transpose() * &wx,
            ztwz: z.transpose() * &wz,
            xtwv: wx.transpose() * &vv,
            ztwv: wz.transpose() * &vv,
            vtwv: v.iter().zip(w).map(|(a, b)| a * a * b).sum(),
            sum_log_w: w.iter().map(|x| x.ln()).sum(),
        })
    }

    fn q(&self) -> usize {
        self.ztwz.nrows()
    }

    fn scales(&self, ratios: &[f64]) -> DVector<f64> {
        let mut s = DVector::zeros(self.q());
        for (&(start, len), r) in self.blocks.iter().zip(ratios) {
            for j in start..start + len {
                s[j] = r.sqrt();
            }
        }
        s
    }

    fn profile(&self, ratios: &[f64], reml: bool) -> Option<Profile> {
        let (p, q) = (self.p, self.q());
        let s = self.scales(ratios);
        let m = p + q;
        let mut a = DMatrix::zeros(m, m);
        for i in 0..q {
            for j in 0..q {
                a[(i, j)] = s[i] * self.ztwz[(i, j)] * s[j];
            }
            a[(i, i)] += 1.0;
            for j in 0..p {
                let val = s[i] * self.ztwx[(i, j)];
                a[(i, q + j)] = val;
                a[(q + j, i)] = val;
            }
        }
        a.view_mut((q, q), (p, p)).copy_from(&self.xtwx);
        let mut rhs = DVector::zeros(m);
        for i in 0..q {
            rhs[i] = s[i] * self.ztwv[i];
        }
        rhs.rows_mut(q, p).copy_from(&self.xtwv);

        let chol = a.cholesky()?;
        let sol = chol.solve(&rhs);
        let l = chol.l();
        let logdet_re: f64 = (0..q).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let logdet_fixed: f64 = (q..m).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let prss = (self.vtwv - sol.dot(&rhs)).max(0.0);

        let n = self.n as f64;
        let logdet_h = -self.sum_log_w + logdet_re;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let (sigma2, loglik) = if reml {
            let dof = n - p as f64;
            let s2 = prss / dof;
            (s2, -0.5 * (dof * (ln2pi + s2.ln()) + logdet_h + logdet_fixed + dof))
        } else {
            let s2 = prss / n;
            (s2, -0.5 * (n * (ln2pi + s2.ln()) + logdet_h + n))
        };

        let inv = chol.inverse();
        let beta_cov_unscaled = inv.view((q, q), (p, p)).into_owned();
        let u = sol.rows(0, q).into_owned();
        Some(Profile {
            loglik,
            sigma2,
            beta: sol.rows(q, p).into_owned(),
            b: u.component_mul(&s),
            beta_cov_unscaled,
        })
    }
}

fn ratio_of(log_ratio: f64) -> f64 {
    if log_ratio <= LOG_RATIO_MIN {
        0.0
    } else {
        log_ratio.min(LOG_RATIO_MAX).exp()
    }
}

/// Profiled log-likelihood at the given log variance ratios `ln(tau2_l / sigma2)`.
pub fn profile_loglik(
    v: &[f64],
    x: &DMatrix<f64>,
    w: &[f64],
    terms: &[RandomEffectTerm],
    log_ratios: &[f64],
    reml: bool,
) -> Result<f64> {
    let cp = CrossProducts::new(v, x, w, terms)?;
    let ratios: Vec<f64> = log_ratios.iter().map(|&t| ratio_of(t)).collect();
    cp.profile(&ratios, reml)
        .map(|p| p.loglik)
        .ok_or_else(|| Error::Numerical("mixed-model equations are singular".into()))
}

/// Fits the mixed model at fixed variance ratios `tau2_l / sigma2`
/// (`sigma2` still estimated). Ratios of zero drop the term.
pub fn fit_lmm_at(
    v: &[f64],
    x: &DMatrix<f64>,
    w: &[f64],
    terms: &[RandomEffectTerm],
    ratios: &[f64],
    reml: bool,
) -> Result<MixedFit> {
    let cp = CrossProducts::new(v, x, w, terms)?;
    if ratios.len() != terms.len() || ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::InvalidArgument("one non-negative ratio per term is required".into()));
    }
    assemble(&cp, v, x, terms, ratios, reml, true, 1)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    cp: &CrossProducts,
    v: &[f64],
    x: &DMatrix<f64>,
    terms: &[RandomEffectTerm],
    ratios: &[f64],
    reml: bool,
    converged: bool,
    evaluations: usize,
) -> Result<MixedFit> {
    let prof = cp
        .profile(ratios, reml)
        .ok_or_else(|| Error::Numerical("mixed-model equations are singular".into()))?;
    let p = cp.p;
    let fitted = x * &prof.beta;
    let mut estimates = Vec::with_capacity(terms.len());
    let mut total = vec![0.0; cp.n];
    for ((t, &(start, len)), r) in terms.iter().zip(&cp.blocks).zip(ratios) {
        let b = prof.b.rows(start, len).into_owned();
        let effect = &t.z * &b;
        total.iter_mut().zip(effect.iter()).for_each(|(o, e)| *o += e);
        estimates.push(TermEstimate {
            label: t.label.clone(),
            kind: t.kind,
            tau2: r * prof.sigma2,
            b: b.as_slice().to_vec(),
            effect: effect.as_slice().to_vec(),
        });
    }
    let residuals: Vec<f64> = (0..cp.n).map(|i| v[i] - fitted[i] - total[i]).collect();
    let se: Vec<f64> = (0..p)
        .map(|k| (prof.sigma2 * prof.beta_cov_unscaled[(k, k)]).sqrt())
        .collect();
    let fixed = FitResult {
        beta: prof.beta.as_slice().to_vec(),
        t_values: prof.beta.iter().zip(&se).map(|(b, s)| b / s).collect(),
        se,
        sigma2: prof.sigma2,
        sigma: prof.sigma2.sqrt(),
        loglik: prof.loglik,
        fitted_mu: fitted.as_slice().to_vec(),
        residuals,
        df_residual: cp.n - p,
        unscaled_cov: prof.beta_cov_unscaled.transpose().as_slice().to_vec(),
    };
    Ok(MixedFit {
        fixed,
        terms: estimates,
        sigma2: prof.sigma2,
        loglik: prof.loglik,
        reml,
        converged,
        evaluations,
    })
}

/// Fits the mixed model by maximising the marginal likelihood over the
/// variance components.
pub fn fit_lmm(
    v: &[f64],
    x: &DMatrix<f64>,
    w: &[f64],
    terms: &[RandomEffectTerm],
    opts: LmmOptions,
) -> Result<MixedFit> {
    let cp = CrossProducts::new(v, x, w, terms)?;
    let l = terms.len();

    // Noiseless data: the fixed effects reproduce v exactly.
    let ols = fit_wls(v, x, w)?;
    let rss: f64 = ols.residuals.iter().zip(w).map(|(e, wi)| wi * e * e).sum();
    if rss <= 1e-24 * (1.0 + cp.vtwv) {
        let zeros = vec![0.0; l];
        let mut fit = assemble(&cp, v, x, terms, &zeros, opts.reml, true, 0)?;
        fit.sigma2 = 0.0;
        fit.fixed.sigma2 = 0.0;
        fit.fixed.sigma = 0.0;
        fit.fixed.se = vec![0.0; x.ncols()];
        fit.loglik = f64::INFINITY;
        fit.fixed.loglik = f64::INFINITY;
        return Ok(fit);
    }

    let mut evaluations = 0usize;
    let mut objective = |theta: &[f64]| -> f64 {
        evaluations += 1;
        let ratios: Vec<f64> = theta.iter().map(|&t| ratio_of(t)).collect();
        match cp.profile(&ratios, opts.reml) {
            Some(p) if p.loglik.is_finite() => -p.loglik,
            _ => f64::INFINITY,
        }
    };

    // Coarse per-coordinate scan for a starting point.
    let mut start = vec![0.0; l];
    let grid = [-8.0, -4.0, -2.0, 0.0, 2.0, 4.0];
    for _ in 0..2 {
        for k in 0..l {
            let mut best = (objective(&start), start[k]);
            for &g in &grid {
                let mut trial = start.clone();
                trial[k] = g;
                let f = objective(&trial);
                if f < best.0 {
                    best = (f, g);
                }
            }
            start[k] = best.1;
        }
    }

    let budget = opts.max_evaluations.max(50 * l);
    let mut theta = start;
    let mut best = objective(&theta);
    let mut converged = false;
    let mut used = 0;
    while used < budget {
        let (next, f, evals) = nelder_mead(&mut objective, &theta, 1.0, budget - used);
        used += evals;
        let improvement = best - f;
        if f <= best {
            theta = next;
            best = f;
        }
        if improvement.abs() < LOGLIK_TOL {
            converged = true;
            break;
        }
    }

    // Terms whose variance can be dropped without loss sit at the bound.
    for k in 0..l {
        if theta[k] <= LOG_RATIO_MIN {
            continue;
        }
        let mut trial = theta.clone();
        trial[k] = LOG_RATIO_MIN;
        let f = objective(&trial);
        if f <= best + 1e-10 {
            theta = trial;
            best = best.min(f);
        }
    }

    let ratios: Vec<f64> = theta.iter().map(|&t| ratio_of(t)).collect();
    assemble(&cp, v, x, terms, &ratios, opts.reml, converged, evaluations)
}

/// Box-constrained Nelder-Mead over `[LOG_RATIO_MIN, LOG_RATIO_MAX]^d`.
/// Returns the best vertex, its value, and the evaluations spent.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    step: f64,
    budget: usize,
) -> (Vec<f64>, f64, usize) {
    let d = start.len();
    let clamp = |x: &mut Vec<f64>| {
        x.iter_mut()
            .for_each(|v| *v = v.clamp(LOG_RATIO_MIN, LOG_RATIO_MAX));
    };
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let mut x0 = start.to_vec();
    clamp(&mut x0);
    let f0 = eval(&x0, &mut evals);
    simplex.push((x0.clone(), f0));
    for k in 0..d {
        let mut x = x0.clone();
        x[k] += if x[k] + step <= LOG_RATIO_MAX { step } else { -step };
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }

    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[d].1 - simplex[0].1;
        let size = simplex
            .iter()
            .skip(1)
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0f64, f64::max);
        if (spread.is_finite() && spread < 1e-11) && size < 1e-6 || size < 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|(x, _)| x[j]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let along = |t: f64| {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp(&mut x);
            x
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = vertex
                        .0
                        .iter()
                        .zip(&best)
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    let fx = eval(&x, &mut evals);
                    *vertex = (x, fx);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    (x, fx, evals)
}
