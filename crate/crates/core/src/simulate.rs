//! Synthetic over-dispersed count data for the three Monte Carlo designs:
//! a plain regression, one with a Gaussian-process spatial effect, and one
//! with group random intercepts.
//!
//! Every scenario draws from independent ChaCha streams (covariates,
//! responses, coordinates, effects), so scenarios that differ only in
//! `beta0` or `sigma2` share covariates and uniforms: a paired design.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CountDataset, GroupFactor};
use crate::error::{Error, Result};

const STREAM_COVARIATES: u64 = 0;
const STREAM_RESPONSES: u64 = 1;
const STREAM_COORDS: u64 = 2;
const STREAM_EFFECTS: u64 = 3;

/// Above this mean the inversion sampler is replaced by a rejection
/// sampler seeded from the observation's own uniform.
const INVERSION_MAX_LAMBDA: f64 = 500.0;

pub const DEFAULT_BETA: [f64; 2] = [2.0, 0.5];
pub const DEFAULT_SPATIAL_RANGE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Basic,
    Spatial,
    Group,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::Basic => "basic",
            Case::Spatial => "spatial",
            Case::Group => "group",
        })
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Case::Basic),
            "spatial" => Ok(Case::Spatial),
            "group" => Ok(Case::Group),
            other => Err(Error::InvalidArgument(format!(
                "unknown case '{other}' (expected basic, spatial or group)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub case: Case,
    pub n: usize,
    pub beta0: f64,
    pub beta: [f64; 2],
    pub sigma2: f64,
    pub seed: u64,
    pub spatial_range: f64,
    /// Defaults to 3 groups below N = 200 and 10 from N = 200 on.
    pub n_groups: Option<usize>,
    /// Standard deviation of the group intercepts; 0 switches them off.
    pub group_sd: f64,
}

impl SimulationScenario {
    pub fn new(case: Case, n: usize, beta0: f64, sigma2: f64, seed: u64) -> Self {
        Self {
            case,
            n,
            beta0,
            beta: DEFAULT_BETA,
            sigma2,
            seed,
            spatial_range: DEFAULT_SPATIAL_RANGE,
            n_groups: None,
            group_sd: 1.0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn groups(&self) -> usize {
        self.n_groups.unwrap_or(if self.n >= 200 { 10 } else { 3 })
    }

    /// `(beta0, beta1, beta2)`.
    pub fn true_beta(&self) -> Vec<f64> {
        vec![self.beta0, self.beta[0], self.beta[1]]
    }

    pub fn label(&self) -> String {
        format!(
            "{}_n{}_beta0={}_sigma2={}",
            self.case, self.n, self.beta0, self.sigma2
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::InvalidArgument(format!("N must be >= 10, got {}", self.n)));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be >= 1, got {}",
                self.sigma2
            )));
        }
        if !self.beta0.is_finite() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite".into()));
        }
        if self.case == Case::Spatial && !(self.spatial_range > 0.0) {
            return Err(Error::InvalidArgument("spatial range must be positive".into()));
        }
        if self.case == Case::Group && self.groups() < 2 {
            return Err(Error::InvalidArgument("need at least 2 groups".into()));
        }
        if !(self.group_sd >= 0.0) {
            return Err(Error::InvalidArgument("group sd must be >= 0".into()));
        }
        Ok(())
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Per-iteration seed derived from a master seed.
pub fn iteration_seed(master: u64, iteration: u64) -> u64 {
    master ^ iteration
}

/// A generated dataset together with the truth it was generated from.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: CountDataset,
    pub beta: Vec<f64>,
    /// Per-observation random effect (`s_i` or `g_group(i)`), if any.
    pub effect: Option<Vec<f64>>,
}

/// One draw with `E[Y] = lambda` and `Var[Y] = sigma2 * lambda`: a
/// gamma-mixed Poisson (equivalently negative binomial with size
/// `lambda / (sigma2 - 1)`), or plain Poisson when `sigma2 = 1`.
///
/// Draws by CDF inversion from a single uniform, so the result is
/// monotone in `lambda` for a fixed random state.
pub fn sample_odpoisson<R: Rng + ?Sized>(lambda: f64, sigma2: f64, rng: &mut R) -> u64 {
    let bits = rng.next_u64();
    if !(lambda > 0.0) {
        return 0;
    }
    if lambda > INVERSION_MAX_LAMBDA {
        let mut sub = ChaCha8Rng::seed_from_u64(bits);
        let rate = if sigma2 > 1.0 {
            let shape = lambda / (sigma2 - 1.0);
            Gamma::new(shape, sigma2 - 1.0).unwrap().sample(&mut sub)
        } else {
            lambda
        };
        return if rate > 0.0 {
            Poisson::new(rate).unwrap().sample(&mut sub) as u64
        } else {
            0
        };
    }
    // 53 high bits -> uniform in [0, 1)
    let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let (mut pk, step): (f64, Box<dyn Fn(f64) -> f64>) = if sigma2 > 1.0 {
        let size = lambda / (sigma2 - 1.0);
        let q = 1.0 - 1.0 / sigma2;
        ((-size * sigma2.ln()).exp(), Box::new(move |k| (size + k) / (k + 1.0) * q))
    } else {
        ((-lambda).exp(), Box::new(move |k| lambda / (k + 1.0)))
    };
    let mut cdf = pk;
    let mut k = 0u64;
    let cap = (lambda + 60.0 * (sigma2 * lambda).sqrt() + 60.0) as u64;
    while u >= cdf && k < cap {
        pk *= step(k as f64);
        k += 1;
        cdf += pk;
    }
    k
}

fn covariates(s: &SimulationScenario) -> (Vec<f64>, Vec<f64>) {
    let mut rng = s.stream(STREAM_COVARIATES);
    let mut x1 = Vec::with_capacity(s.n);
    let mut x2 = Vec::with_capacity(s.n);
    for _ in 0..s.n {
        x1.push(rng.sample(StandardNormal));
        x2.push(rng.sample(StandardNormal));
    }
    (x1, x2)
}

fn responses(s: &SimulationScenario, eta: &[f64]) -> Vec<u64> {
    let mut rng = s.stream(STREAM_RESPONSES);
    eta.iter()
        .map(|e| sample_odpoisson(e.exp(), s.sigma2, &mut rng))
        .collect()
}

fn linear_predictor(s: &SimulationScenario, x1: &[f64], x2: &[f64]) -> Vec<f64> {
    x1.iter()
        .zip(x2)
        .map(|(a, b)| s.beta0 + s.beta[0] * a + s.beta[1] * b)
        .collect()
}

fn base_dataset(y: Vec<u64>, x1: Vec<f64>, x2: Vec<f64>) -> Result<CountDataset> {
    CountDataset::new(y, vec![("x1".into(), x1), ("x2".into(), x2)], None)
}

fn expect_case(s: &SimulationScenario, case: Case) -> Result<()> {
    s.validate()?;
    if s.case != case {
        return Err(Error::InvalidArgument(format!(
            "scenario case is {}, expected {case}",
            s.case
        )));
    }
    Ok(())
}

/// `lambda_i = exp(beta0 + beta1 x1 + beta2 x2)`, unit offsets.
pub fn gen_case1(s: &SimulationScenario) -> Result<SimulatedData> {
    expect_case(s, Case::Basic)?;
    let (x1, x2) = covariates(s);
    let eta = linear_predictor(s, &x1, &x2);
    let y = responses(s, &eta);
    Ok(SimulatedData {
        dataset: base_dataset(y, x1, x2)?,
        beta: s.true_beta(),
        effect: None,
    })
}

/// Exponential covariance `exp(-d / range)` between planar points.
pub fn exponential_covariance(points: &[[f64; 2]], range: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        let dx = points[i][0] - points[j][0];
        let dy = points[i][1] - points[j][1];
        (-(dx * dx + dy * dy).sqrt() / range).exp()
    })
}

/// Zero-mean, unit-variance Gaussian process draw at the given points.
pub fn gaussian_process<R: Rng + ?Sized>(
    points: &[[f64; 2]],
    range: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = points.len();
    let cov = exponential_covariance(points, range);
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            let jittered = cov + DMatrix::identity(n, n) * 1e-10;
            jittered.cholesky().ok_or_else(|| {
                Error::Numerical("spatial covariance is not positive definite".into())
            })?
        }
    };
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((chol.l() * z).as_slice().to_vec())
}

/// Adds a spatial process `s_i` with exponential covariance to the linear
/// predictor; coordinates are uniform on the unit square.
pub fn gen_case2(s: &SimulationScenario) -> Result<SimulatedData> {
    expect_case(s, Case::Spatial)?;
    let (x1, x2) = covariates(s);
    let mut coord_rng = s.stream(STREAM_COORDS);
    let points: Vec<[f64; 2]> = (0..s.n)
        .map(|_| [coord_rng.random::<f64>(), coord_rng.random::<f64>()])
        .collect();
    let effect = gaussian_process(&points, s.spatial_range, &mut s.stream(STREAM_EFFECTS))?;
    let eta: Vec<f64> = linear_predictor(s, &x1, &x2)
        .iter()
        .zip(&effect)
        .map(|(e, si)| e + si)
        .collect();
    let y = responses(s, &eta);
    let ds = base_dataset(y, x1, x2)?.with_coords(("sx".into(), "sy".into()), points)?;
    Ok(SimulatedData {
        dataset: ds,
        beta: s.true_beta(),
        effect: Some(effect),
    })
}

/// Adds `N(0, group_sd^2)` group intercepts; observations are assigned to
/// groups uniformly at random.
pub fn gen_case3(s: &SimulationScenario) -> Result<SimulatedData> {
    expect_case(s, Case::Group)?;
    let (x1, x2) = covariates(s);
    let g = s.groups();
    let mut rng = s.stream(STREAM_EFFECTS);
    let levels: Vec<f64> = (0..g)
        .map(|_| s.group_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let membership: Vec<usize> = (0..s.n).map(|_| rng.random_range(0..g)).collect();
    let effect: Vec<f64> = membership.iter().map(|&k| levels[k]).collect();
    let eta: Vec<f64> = linear_predictor(s, &x1, &x2)
        .iter()
        .zip(&effect)
        .map(|(e, gi)| e + gi)
        .collect();
    let y = responses(s, &eta);
    let labels = membership.iter().map(|k| format!("g{}", k + 1)).collect();
    let ds = base_dataset(y, x1, x2)?.with_group(GroupFactor::new("group", labels))?;
    Ok(SimulatedData {
        dataset: ds,
        beta: s.true_beta(),
        effect: Some(effect),
    })
}

pub fn generate(s: &SimulationScenario) -> Result<SimulatedData> {
    match s.case {
        Case::Basic => gen_case1(s),
        Case::Spatial => gen_case2(s),
        Case::Group => gen_case3(s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(lambda: f64, sigma2: f64, draws: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = (0..draws)
            .map(|_| sample_odpoisson(lambda, sigma2, &mut rng) as f64)
            .collect();
        let mean = ys.iter().sum::<f64>() / draws as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        (mean, var)
    }

    #[test]
    fn poisson_moments_at_unit_dispersion() {
        let (m, v) = moments(3.0, 1.0, 100_000, 1);
        // sd(mean) = sqrt(3/1e5); sd(var) ~ sqrt((mu4 - s^4)/n) with mu4 = 3 + 3*9
        assert!((m - 3.0).abs() < 3.0 * (3.0f64 / 1e5).sqrt(), "{m}");
        assert!((v - 3.0).abs() < 3.0 * ((30.0 - 9.0) / 1e5f64).sqrt(), "{v}");
    }

    #[test]
    fn small_mean_is_mostly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zeros = (0..100_000)
            .filter(|_| sample_odpoisson(0.1, 5.0, &mut rng) == 0)
            .count();
        assert!(zeros as f64 / 1e5 > 0.9);
    }

    #[test]
    fn large_mean_branch_keeps_moments() {
        let (m, v) = moments(800.0, 5.0, 20_000, 3);
        assert!((m - 800.0).abs() < 3.0 * (4000.0f64 / 2e4).sqrt() * 1.5, "{m}");
        assert!((v / 4000.0 - 1.0).abs() < 0.08, "{v}");
    }

    #[test]
    fn draws_are_monotone_in_lambda_for_a_fixed_state() {
        for seed in 0..200 {
            let mut prev = 0;
            for lambda in [0.05, 0.2, 0.7, 1.5, 4.0, 20.0] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y = sample_odpoisson(lambda, 5.0, &mut rng);
                assert!(y >= prev);
                prev = y;
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for case in [Case::Basic, Case::Spatial, Case::Group] {
            let s = SimulationScenario::new(case, 60, -1.0, 5.0, 42);
            let a = generate(&s).unwrap();
            let b = generate(&s).unwrap();
            assert_eq!(a.dataset, b.dataset);
            assert_eq!(a.effect, b.effect);
        }
    }

    #[test]
    fn case_mismatch_and_bad_parameters_rejected() {
        let s = SimulationScenario::new(Case::Spatial, 50, 0.0, 1.0, 0);
        assert!(gen_case1(&s).is_err());
        assert!(gen_case1(&SimulationScenario::new(Case::Basic, 5, 0.0, 1.0, 0)).is_err());
        assert!(gen_case1(&SimulationScenario::new(Case::Basic, 50, 0.0, 0.5, 0)).is_err());
    }

    #[test]
    fn default_group_counts() {
        let big = gen_case3(&SimulationScenario::new(Case::Group, 200, 0.0, 5.0, 8)).unwrap();
        assert_eq!(big.dataset.groups()[0].levels().len(), 10);
        let small = SimulationScenario::new(Case::Group, 50, 0.0, 5.0, 8);
        assert_eq!(small.groups(), 3);
    }

    #[test]
    fn very_negative_intercept_gives_many_zeros() {
        let s = SimulationScenario::new(Case::Basic, 200, -2.0, 5.0, 4);
        assert!(gen_case1(&s).unwrap().dataset.zero_ratio() > 0.5);
    }

    #[test]
    fn short_range_process_is_nearly_uncorrelated() {
        let mut coord = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 2]> = (0..400).map(|_| [coord.random(), coord.random()]).collect();
        let s = gaussian_process(&pts, 1e-3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum();
        let lag: f64 = s.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!((lag / var).abs() < 0.1);
    }
}
