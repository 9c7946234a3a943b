//! Closed-form log-Gaussian pseudo-data for Poisson regression.
//!
//! Each method maps a count `y` with exposure `z` to a log-scale response
//! `v` whose working distribution is `N(mu, sigma2 / (y + c))`, so a weighted
//! linear fit of `v` on the design approximates Poisson inference on `mu`.
//!
//! | method    | response                                   | variance      |
//! |-----------|--------------------------------------------|---------------|
//! | Proposed  | `log((y+0.5)/z) - (1 + 0.5 r)/(y+0.5)`     | `1/(y+0.5)`   |
//! | Posterior | `log((y+c)/z)`                             | `1/(y+c)`     |
//! | Taylor    | `log((y+c)/z) - c/(y+c)`                   | `1/(y+c)`     |
//!
//! `r` is the share of zero counts; it blends the mode-matched response
//! (`r = 0`) with the mean-rescaled one (`r = 1`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shift fixed by mode matching; the only value giving a linear link
/// between the Poisson and log-Gaussian means.
pub const PROPOSED_C: f64 = 0.5;
pub const POSTERIOR_DEFAULT_C: f64 = 0.0;
pub const TAYLOR_DEFAULT_C: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ApproximationMethod {
    Proposed,
    Posterior { c: f64 },
    Taylor { c: f64 },
}

impl ApproximationMethod {
    pub fn posterior() -> Self {
        Self::Posterior {
            c: POSTERIOR_DEFAULT_C,
        }
    }

    pub fn taylor() -> Self {
        Self::Taylor {
            c: TAYLOR_DEFAULT_C,
        }
    }

    /// Replaces `c` for Posterior/Taylor. Proposed has no tunable `c`.
    pub fn with_c(self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidArgument(format!("c must be >= 0, got {c}")));
        }
        match self {
            Self::Proposed => Err(Error::InvalidArgument(
                "the proposed method has no tuning parameter c".into(),
            )),
            Self::Posterior { .. } => Ok(Self::Posterior { c }),
            Self::Taylor { .. } => Ok(Self::Taylor { c }),
        }
    }

    pub fn c(&self) -> f64 {
        match *self {
            Self::Proposed => PROPOSED_C,
            Self::Posterior { c } | Self::Taylor { c } => c,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Posterior { .. } => "posterior",
            Self::Taylor { .. } => "taylor",
        }
    }
}

impl fmt::Display for ApproximationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Proposed => f.write_str("proposed"),
            Self::Posterior { c } => write!(f, "posterior(c={c})"),
            Self::Taylor { c } => write!(f, "taylor(c={c})"),
        }
    }
}

impl FromStr for ApproximationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" => Ok(Self::Proposed),
            "posterior" => Ok(Self::posterior()),
            "taylor" => Ok(Self::taylor()),
            other => Err(Error::InvalidArgument(format!(
                "unknown approximation method '{other}'"
            ))),
        }
    }
}

fn check_log_domain(m: ApproximationMethod, y: u64) -> Result<f64> {
    let shifted = y as f64 + m.c();
    if shifted <= 0.0 {
        return Err(Error::Transform(
            "logarithm of zero; supply c > 0 or use Proposed".into(),
        ));
    }
    Ok(shifted)
}

/// Log-scale pseudo-response for one observation.
pub fn pseudo_response(m: ApproximationMethod, y: u64, z: f64, r: f64) -> Result<f64> {
    let shifted = check_log_domain(m, y)?;
    Ok(match m {
        ApproximationMethod::Proposed => (shifted / z).ln() - (1.0 + 0.5 * r) / shifted,
        ApproximationMethod::Posterior { .. } => (shifted / z).ln(),
        ApproximationMethod::Taylor { c } => (shifted / z).ln() - c / shifted,
    })
}

/// Tabulated weight `1/(y + c)`: the working variance of the pseudo-response
/// per unit dispersion. Least-squares fits use its reciprocal.
pub fn weight(m: ApproximationMethod, y: u64) -> Result<f64> {
    let shifted = check_log_domain(m, y)?;
    Ok(1.0 / shifted)
}

/// Poisson mode centre `lambda - 0.5`; negative below `lambda = 0.5`,
/// where only the mean-based approximation applies.
pub fn mode_center(lambda: f64) -> f64 {
    lambda - 0.5
}

/// Error-free sum: `a + b == s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Mode of `y` under the mode-matched log-Gaussian model, evaluated from
/// its location `log z + mu + 1/(y+0.5)` and variance `1/(y+0.5)`.
///
/// The mode is `exp(location - variance) - 0.5`. `log z` is kept out of the
/// exponent (as a factor `z`) and the location is carried as an unevaluated
/// sum, so the variance cancels without rounding; a rounding error of one
/// ulp in the exponent would otherwise be visible at large `z e^mu`.
pub fn log_gaussian_mode(mu: f64, z: f64, y: u64) -> f64 {
    let variance = 1.0 / (y as f64 + PROPOSED_C);
    let (loc_hi, loc_lo) = two_sum(mu, variance);
    let (d_hi, d_lo) = two_sum(loc_hi, -variance);
    z * (d_hi + (d_lo + loc_lo)).exp() - PROPOSED_C
}

/// Mode-based pseudo-count `(y+0.5)/z * exp(-1/(y+0.5))`.
pub fn mode_pseudo_count(y: u64, z: f64) -> f64 {
    let shifted = y as f64 + PROPOSED_C;
    shifted / z * (-1.0 / shifted).exp()
}

/// Mean-based pseudo-count `(y+0.5)/z * exp(-1.5/(y+0.5))`.
pub fn mean_pseudo_count(y: u64, z: f64) -> f64 {
    let shifted = y as f64 + PROPOSED_C;
    shifted / z * (-1.5 / shifted).exp()
}

/// Response and weights for a whole sample under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoData {
    pub method: ApproximationMethod,
    pub response: Vec<f64>,
    /// `1/(y+c)`, as returned by [`weight`].
    pub weight: Vec<f64>,
    /// `y + c`, the least-squares weights.
    pub precision: Vec<f64>,
    pub zero_ratio: f64,
}

impl PseudoData {
    pub fn build(m: ApproximationMethod, y: &[u64], z: &[f64], r: f64) -> Result<Self> {
        if y.len() != z.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} counts but {} offsets",
                y.len(),
                z.len()
            )));
        }
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("zero ratio {r} outside [0, 1]")));
        }
        let mut response = Vec::with_capacity(y.len());
        let mut weights = Vec::with_capacity(y.len());
        let mut precision = Vec::with_capacity(y.len());
        for (&yi, &zi) in y.iter().zip(z) {
            response.push(pseudo_response(m, yi, zi, r)?);
            weights.push(weight(m, yi)?);
            precision.push(yi as f64 + m.c());
        }
        Ok(Self {
            method: m,
            response,
            weight: weights,
            precision,
            zero_ratio: r,
        })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}
