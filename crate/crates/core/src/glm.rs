//! Maximum-likelihood baselines: Poisson, quasi-Poisson and negative
//! binomial (NB2) regression with a log link and `log z` offset.
//!
//! Fits never fail on numerical trouble. Non-convergence, diverging
//! coefficients and an unbounded NB size parameter are reported through
//! [`FitFlag`]s so that a Monte Carlo driver can count them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::data::CountDataset;
use crate::error::{Error, Result};
use crate::wls::FitResult;

pub const MAX_ITERATIONS: usize = 100;
pub const SCORE_TOL: f64 = 1e-8;
/// Coefficients larger than this in absolute value indicate the MLE is not
/// (or only weakly) identified.
pub const DIVERGENCE_BOUND: f64 = 1e3;
/// NB size parameters beyond this are treated as "no overdispersion".
pub const THETA_MAX: f64 = 1e8;
const THETA_MIN: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispersionKind {
    FixedOne,
    Pearson,
    NbTheta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFlag {
    NonConvergence,
    IdentificationFailure,
    ThetaDivergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Poisson,
    OdPoisson,
    NegBin,
}

impl std::str::FromStr for GlmFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(Self::Poisson),
            "odpoisson" | "quasipoisson" => Ok(Self::OdPoisson),
            "negbin" | "nb" => Ok(Self::NegBin),
            other => Err(Error::InvalidArgument(format!("unknown GLM family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    #[serde(flatten)]
    pub fit: FitResult,
    pub family: GlmFamily,
    pub dispersion_kind: DispersionKind,
    pub theta: Option<f64>,
    pub fitted_mean: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Infinity norm of the score at the returned estimate.
    pub score_norm: f64,
    pub flags: Vec<FitFlag>,
}

impl GlmFit {
    pub fn has_failure(&self) -> bool {
        self.flags
            .iter()
            .any(|f| matches!(f, FitFlag::NonConvergence | FitFlag::IdentificationFailure))
    }
}

pub fn fit(d: &CountDataset, family: GlmFamily) -> Result<GlmFit> {
    match family {
        GlmFamily::Poisson => fit_poisson(d),
        GlmFamily::OdPoisson => fit_quasipoisson(d),
        GlmFamily::NegBin => fit_negbin(d),
    }
}

struct Problem<'a> {
    y: Vec<f64>,
    x: &'a DMatrix<f64>,
    log_z: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(d: &'a CountDataset) -> Result<Self> {
        let (n, p) = d.design().shape();
        if n <= p {
            return Err(Error::InsufficientDof { n, p });
        }
        Ok(Self {
            y: d.counts().iter().map(|&v| v as f64).collect(),
            x: d.design(),
            log_z: d.offsets().iter().map(|z| z.ln()).collect(),
        })
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Linear predictor without the offset, and the mean including it.
    fn predict(&self, beta: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let eta = self.x * beta;
        let mu = eta
            .iter()
            .zip(&self.log_z)
            .map(|(e, lz)| (e + lz).exp())
            .collect();
        (eta, mu)
    }

    fn initial_beta(&self) -> DVector<f64> {
        let sum_y: f64 = self.y.iter().sum();
        let sum_z: f64 = self.log_z.iter().map(|l| l.exp()).sum();
        let mut beta = DVector::zeros(self.p());
        beta[0] = ((sum_y + 0.5) / sum_z).ln();
        beta
    }

    /// `X' diag(a) X`.
    fn weighted_gram(&self, a: &[f64]) -> DMatrix<f64> {
        let mut xa = self.x.clone();
        for (i, ai) in a.iter().enumerate() {
            xa.row_mut(i).scale_mut(*ai);
        }
        self.x.transpose() * xa
    }

    fn xt(&self, a: &[f64]) -> DVector<f64> {
        self.x.transpose() * DVector::from_column_slice(a)
    }

    fn ln_factorials(&self) -> f64 {
        self.y.iter().map(|&y| ln_factorial(y as u64)).sum()
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn poisson_loglik_at(pb: &Problem, mu: &[f64], lnfact: f64) -> f64 {
    pb.y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| if y > 0.0 { y * m.ln() - m } else { -m })
        .sum::<f64>()
        - lnfact
}

/// Newton iterations with step halving, shared by the Poisson and NB
/// (fixed theta) fits. `derivs` returns per-observation score and
/// (positive) curvature on the linear-predictor scale; `loglik` evaluates
/// the objective from the means.
struct NewtonOutcome {
    beta: DVector<f64>,
    mu: Vec<f64>,
    iterations: usize,
    converged: bool,
    score_norm: f64,
}

fn newton<D, L>(pb: &Problem, start: DVector<f64>, derivs: D, loglik: L) -> NewtonOutcome
where
    D: Fn(f64, f64) -> (f64, f64),
    L: Fn(&[f64]) -> f64,
{
    let mut beta = start;
    let (_, mut mu) = pb.predict(&beta);
    let mut ll = loglik(&mu);
    let mut last_step = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut score_norm;

    loop {
        let (g, h): (Vec<f64>, Vec<f64>) = pb.y.iter().zip(&mu).map(|(&y, &m)| derivs(y, m)).unzip();
        let score = pb.xt(&g);
        score_norm = inf_norm(&score);
        let step_tol = 1e-6 * (1.0 + inf_norm(&beta));
        if score_norm < SCORE_TOL && last_step < step_tol {
            converged = true;
            break;
        }
        if iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        let info = pb.weighted_gram(&h);
        let Some(chol) = info.cholesky() else {
            break;
        };
        let delta = chol.solve(&score);

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &beta + &delta * scale;
            let (_, trial_mu) = pb.predict(&trial);
            let trial_ll = loglik(&trial_mu);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = trial;
                mu = trial_mu;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        last_step = inf_norm(&delta) * scale;
        // Floating-point floor: the step is negligible and the score cannot
        // shrink further.
        if last_step < 1e-13 * (1.0 + inf_norm(&beta)) && score_norm < 1e-6 {
            let (g, _): (Vec<f64>, Vec<f64>) =
                pb.y.iter().zip(&mu).map(|(&y, &m)| derivs(y, m)).unzip();
            score_norm = inf_norm(&pb.xt(&g));
            converged = true;
            break;
        }
    }
    NewtonOutcome {
        beta,
        mu,
        iterations,
        converged,
        score_norm,
    }
}

fn failure_flags(beta: &DVector<f64>, converged: bool) -> Vec<FitFlag> {
    let mut flags = Vec::new();
    if !converged {
        flags.push(FitFlag::NonConvergence);
    }
    if !converged || inf_norm(beta) > DIVERGENCE_BOUND || beta.iter().any(|b| !b.is_finite()) {
        flags.push(FitFlag::IdentificationFailure);
    }
    flags
}

fn assemble_fit(
    pb: &Problem,
    beta: &DVector<f64>,
    mu: &[f64],
    cov: Option<DMatrix<f64>>,
    dispersion: f64,
    loglik: f64,
) -> FitResult {
    let p = pb.p();
    let n = pb.n();
    let cov = cov.unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let se: Vec<f64> = (0..p).map(|k| (dispersion * cov[(k, k)]).sqrt()).collect();
    let eta = pb.x * beta;
    FitResult {
        beta: beta.as_slice().to_vec(),
        t_values: beta.iter().zip(&se).map(|(b, s)| b / s).collect(),
        se,
        sigma2: dispersion,
        sigma: dispersion.sqrt(),
        loglik,
        fitted_mu: eta.as_slice().to_vec(),
        residuals: pb.y.iter().zip(mu).map(|(y, m)| y - m).collect(),
        df_residual: n - p,
        unscaled_cov: cov.transpose().as_slice().to_vec(),
    }
}

/// Poisson regression by Newton-Raphson (equivalently IRLS; the log link
/// is canonical), standard errors from the inverse Fisher information.
pub fn fit_poisson(d: &CountDataset) -> Result<GlmFit> {
    let pb = Problem::new(d)?;
    let lnfact = pb.ln_factorials();
    let out = newton(
        &pb,
        pb.initial_beta(),
        |y, m| (y - m, m),
        |mu| poisson_loglik_at(&pb, mu, lnfact),
    );
    let info = pb.weighted_gram(&out.mu);
    let cov = info.try_inverse();
    let loglik = poisson_loglik_at(&pb, &out.mu, lnfact);
    let flags = failure_flags(&out.beta, out.converged);
    Ok(GlmFit {
        fit: assemble_fit(&pb, &out.beta, &out.mu, cov, 1.0, loglik),
        family: GlmFamily::Poisson,
        dispersion_kind: DispersionKind::FixedOne,
        theta: None,
        fitted_mean: out.mu,
        converged: out.converged,
        iterations: out.iterations,
        score_norm: out.score_norm,
        flags,
    })
}

/// Pearson statistic over residual degrees of freedom.
pub fn pearson_dispersion(y: &[u64], mu: &[f64], p: usize) -> f64 {
    let chi2: f64 = y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let r = y as f64 - m;
            r * r / m
        })
        .sum();
    chi2 / (y.len() - p) as f64
}

/// Poisson point estimates with standard errors inflated by the Pearson
/// dispersion.
pub fn fit_quasipoisson(d: &CountDataset) -> Result<GlmFit> {
    let mut g = fit_poisson(d)?;
    let phi = pearson_dispersion(d.counts(), &g.fitted_mean, d.p());
    let scale = phi.sqrt();
    for (se, (b, t)) in g.fit.se.iter_mut().zip(g.fit.beta.iter().zip(g.fit.t_values.iter_mut())) {
        *se *= scale;
        *t = b / *se;
    }
    g.fit.sigma2 = phi;
    g.fit.sigma = scale;
    g.family = GlmFamily::OdPoisson;
    g.dispersion_kind = DispersionKind::Pearson;
    Ok(g)
}

/// NB2 log-likelihood with mean `z exp(x'beta)` and size `theta`.
pub fn negbin_loglik(d: &CountDataset, beta: &[f64], theta: f64) -> Result<f64> {
    let pb = Problem::new(d)?;
    if beta.len() != pb.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for {} design columns",
            beta.len(),
            pb.p()
        )));
    }
    let (_, mu) = pb.predict(&DVector::from_column_slice(beta));
    Ok(nb_loglik_at(&pb, &mu, theta, pb.ln_factorials()))
}

fn nb_loglik_at(pb: &Problem, mu: &[f64], theta: f64, lnfact: f64) -> f64 {
    let mut ll = -lnfact;
    for (&y, &m) in pb.y.iter().zip(mu) {
        let yi = y as u64;
        ll += (0..yi).map(|k| (theta + k as f64).ln()).sum::<f64>();
        // theta * ln(theta / (theta + m)) = -theta * ln1p(m / theta)
        ll += -theta * (m / theta).ln_1p();
        if y > 0.0 {
            ll += y * (m.ln() - (theta + m).ln());
        }
    }
    ll
}

/// `t/(1+t) - ln(1+t)`, accurate for small `t`.
fn ratio_minus_log1p(t: f64) -> f64 {
    if t < 1e-3 {
        let mut term = t * t;
        let mut sum = 0.0;
        for n in 2..12 {
            let nf = n as f64;
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            sum += sign * (nf - 1.0) / nf * term;
            term *= t;
        }
        sum
    } else {
        t / (1.0 + t) - t.ln_1p()
    }
}

/// Derivative of the NB log-likelihood in theta, arranged to avoid
/// cancellation when theta is large.
fn theta_score(pb: &Problem, mu: &[f64], theta: f64) -> f64 {
    pb.y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let yi = y as u64;
            let digamma_part: f64 = (0..yi)
                .map(|k| {
                    let k = k as f64;
                    -k / (theta * (theta + k))
                })
                .sum();
            digamma_part + y * m / (theta * (theta + m)) + ratio_minus_log1p(m / theta)
        })
        .sum()
}

fn theta_curvature(pb: &Problem, mu: &[f64], theta: f64) -> f64 {
    pb.y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let yi = y as u64;
            let trigamma_part: f64 = (0..yi).map(|k| -1.0 / (theta + k as f64).powi(2)).sum();
            trigamma_part + m / (theta * (theta + m)) + (y - m) / (theta + m).powi(2)
        })
        .sum()
}

enum ThetaSolution {
    Finite(f64),
    Divergent,
}

/// Root of the theta score in `ln theta`, by bracketing then safeguarded
/// Newton.
fn solve_theta(pb: &Problem, mu: &[f64], start: f64) -> ThetaSolution {
    let f = |phi: f64| theta_score(pb, mu, phi.exp());
    let mut phi = start.clamp(THETA_MIN, THETA_MAX).ln();
    let f0 = f(phi);
    if f0 == 0.0 {
        return ThetaSolution::Finite(phi.exp());
    }
    // Score is positive below the root and negative above it.
    let (mut lo, mut hi);
    if f0 > 0.0 {
        lo = phi;
        hi = phi;
        loop {
            hi += 4f64.ln();
            if hi >= THETA_MAX.ln() {
                if f(THETA_MAX.ln()) > 0.0 {
                    return ThetaSolution::Divergent;
                }
                hi = THETA_MAX.ln();
                break;
            }
            if f(hi) < 0.0 {
                break;
            }
            lo = hi;
        }
    } else {
        hi = phi;
        lo = phi;
        loop {
            lo -= 4f64.ln();
            if lo <= THETA_MIN.ln() {
                lo = THETA_MIN.ln();
                break;
            }
            if f(lo) > 0.0 {
                break;
            }
            hi = lo;
        }
    }
    phi = 0.5 * (lo + hi);
    for _ in 0..200 {
        let theta = phi.exp();
        let s = theta_score(pb, mu, theta);
        if s > 0.0 {
            lo = phi;
        } else {
            hi = phi;
        }
        // d s / d phi = theta * d s / d theta
        let ds = theta * theta_curvature(pb, mu, theta);
        let mut next = if ds < 0.0 { phi - s / ds } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - phi).abs() < 1e-14 * (1.0 + phi.abs()) || hi - lo < 1e-14 {
            phi = next;
            break;
        }
        phi = next;
    }
    ThetaSolution::Finite(phi.exp())
}

fn method_of_moments_theta(pb: &Problem, mu: &[f64]) -> f64 {
    let (num, den) = pb.y.iter().zip(mu).fold((0.0, 0.0), |(a, b), (&y, &m)| {
        (a + m * m, b + (y - m) * (y - m) - m)
    });
    let theta = num / den;
    if theta.is_finite() && theta > 0.0 {
        theta.clamp(1e-4, THETA_MAX)
    } else {
        1e4
    }
}

/// Negative binomial regression. Alternates Newton steps for beta given
/// theta with a one-dimensional root solve for theta given beta. When the
/// likelihood keeps increasing in theta the Poisson fit is returned with a
/// [`FitFlag::ThetaDivergence`] flag.
pub fn fit_negbin(d: &CountDataset) -> Result<GlmFit> {
    let pb = Problem::new(d)?;
    let lnfact = pb.ln_factorials();
    let poisson = fit_poisson(d)?;

    let diverged = |mut pois: GlmFit| {
        pois.family = GlmFamily::NegBin;
        pois.flags.push(FitFlag::ThetaDivergence);
        Ok(pois)
    };

    let mut beta = DVector::from_column_slice(&poisson.fit.beta);
    let mut theta = method_of_moments_theta(&pb, &poisson.fitted_mean);
    let mut converged = false;
    let mut iterations = 0;
    let mut score_norm = f64::INFINITY;
    let mut beta_converged = true;

    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let th = theta;
        let out = newton(
            &pb,
            beta.clone(),
            |y, m| {
                let denom = th + m;
                (th * (y - m) / denom, th * m * (th + y) / (denom * denom))
            },
            |mu| nb_loglik_at(&pb, mu, th, lnfact),
        );
        beta = out.beta;
        beta_converged = out.converged;
        theta = match solve_theta(&pb, &out.mu, theta) {
            ThetaSolution::Finite(t) => t,
            ThetaSolution::Divergent => return diverged(poisson),
        };
        let (_, mu) = pb.predict(&beta);
        let g: Vec<f64> = pb
            .y
            .iter()
            .zip(&mu)
            .map(|(&y, &m)| theta * (y - m) / (theta + m))
            .collect();
        score_norm = inf_norm(&pb.xt(&g)).max(theta_score(&pb, &mu, theta).abs());
        if score_norm < SCORE_TOL {
            converged = true;
            break;
        }
    }
    converged &= beta_converged;

    let (_, mu) = pb.predict(&beta);
    let cov = observed_information_cov(&pb, &mu, theta);
    let loglik = nb_loglik_at(&pb, &mu, theta, lnfact);
    let mut flags = failure_flags(&beta, converged);
    if theta >= THETA_MAX * 0.999 {
        flags.push(FitFlag::ThetaDivergence);
    }
    Ok(GlmFit {
        fit: assemble_fit(&pb, &beta, &mu, cov, 1.0, loglik),
        family: GlmFamily::NegBin,
        dispersion_kind: DispersionKind::NbTheta,
        theta: Some(theta),
        fitted_mean: mu,
        converged,
        iterations,
        score_norm,
        flags,
    })
}

/// Inverse of the joint observed information in `(beta, theta)`, restricted
/// to the beta block.
fn observed_information_cov(pb: &Problem, mu: &[f64], theta: f64) -> Option<DMatrix<f64>> {
    let p = pb.p();
    let mut h_bb = Vec::with_capacity(pb.n());
    let mut h_bt = Vec::with_capacity(pb.n());
    for (&y, &m) in pb.y.iter().zip(mu) {
        let denom = theta + m;
        h_bb.push(theta * m * (theta + y) / (denom * denom));
        h_bt.push(-m * (y - m) / (denom * denom));
    }
    let mut info = DMatrix::zeros(p + 1, p + 1);
    info.view_mut((0, 0), (p, p)).copy_from(&pb.weighted_gram(&h_bb));
    let cross = pb.xt(&h_bt);
    for k in 0..p {
        info[(k, p)] = cross[k];
        info[(p, k)] = cross[k];
    }
    info[(p, p)] = -theta_curvature(pb, mu, theta);
    let inv = info.try_inverse()?;
    Some(inv.view((0, 0), (p, p)).into_owned())
}
