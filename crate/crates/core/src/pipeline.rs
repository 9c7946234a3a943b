//! Dataset -> pseudo-data -> weighted (mixed) linear fit.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::CountDataset;
use crate::error::{Error, Result};
use crate::mixed::{fit_lmm, group_design, moran_basis, LmmOptions, MixedFit, RandomEffectTerm};
use crate::transform::{ApproximationMethod, PseudoData};
use crate::wls::{fit_wls, FitResult};

/// What to do with observations the transform cannot handle (zero counts
/// under a shift of `c = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndefinedPolicy {
    Error,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ClosedFormFit {
    Fixed(FitResult),
    Mixed(MixedFit),
}

impl ClosedFormFit {
    pub fn fixed(&self) -> &FitResult {
        match self {
            ClosedFormFit::Fixed(f) => f,
            ClosedFormFit::Mixed(m) => &m.fixed,
        }
    }

    pub fn mixed(&self) -> Option<&MixedFit> {
        match self {
            ClosedFormFit::Fixed(_) => None,
            ClosedFormFit::Mixed(m) => Some(m),
        }
    }
}

/// Random-effect terms from the dataset's group factors and coordinates.
pub fn build_terms(
    ds: &CountDataset,
    use_groups: bool,
    use_spatial: bool,
    spatial_range: Option<f64>,
) -> Result<Vec<RandomEffectTerm>> {
    let mut terms = Vec::new();
    if use_groups {
        for g in ds.groups() {
            terms.push(group_design(g)?);
        }
    }
    if use_spatial {
        let coords = ds
            .coords()
            .ok_or_else(|| Error::Data("dataset has no coordinates".into()))?;
        terms.push(moran_basis(&coords.points, spatial_range)?);
    }
    Ok(terms)
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Fits a closed-form approximation. The zero ratio is taken from the full
/// sample even when rows are dropped. Random-effect estimates are returned
/// for every row of the dataset.
pub fn fit_closed_form(
    ds: &CountDataset,
    method: ApproximationMethod,
    terms: &[RandomEffectTerm],
    opts: LmmOptions,
    policy: UndefinedPolicy,
) -> Result<ClosedFormFit> {
    let r = ds.zero_ratio();
    let keep: Vec<usize> = match policy {
        UndefinedPolicy::Drop if method.c() == 0.0 => (0..ds.n()).filter(|&i| ds.counts()[i] > 0).collect(),
        _ => (0..ds.n()).collect(),
    };
    if keep.len() == ds.n() {
        let pd = PseudoData::build(method, ds.counts(), ds.offsets(), r)?;
        return fit_pseudo(&pd, ds.design(), terms, opts);
    }
    let y: Vec<u64> = keep.iter().map(|&i| ds.counts()[i]).collect();
    let z: Vec<f64> = keep.iter().map(|&i| ds.offsets()[i]).collect();
    let pd = PseudoData::build(method, &y, &z, r)?;
    let x = select_rows(ds.design(), &keep);
    let sub_terms: Vec<RandomEffectTerm> = terms
        .iter()
        .map(|t| RandomEffectTerm {
            z: select_rows(&t.z, &keep),
            ..t.clone()
        })
        .collect();
    match fit_pseudo(&pd, &x, &sub_terms, opts)? {
        ClosedFormFit::Mixed(mut m) => {
            for (est, term) in m.terms.iter_mut().zip(terms) {
                let b = nalgebra::DVector::from_column_slice(&est.b);
                est.effect = (&term.z * b).as_slice().to_vec();
            }
            Ok(ClosedFormFit::Mixed(m))
        }
        fixed => Ok(fixed),
    }
}

/// Weighted fit of pseudo-data; mixed when `terms` is non-empty.
pub fn fit_pseudo(
    pd: &PseudoData,
    x: &DMatrix<f64>,
    terms: &[RandomEffectTerm],
    opts: LmmOptions,
) -> Result<ClosedFormFit> {
    if terms.is_empty() {
        fit_wls(&pd.response, x, &pd.precision).map(ClosedFormFit::Fixed)
    } else {
        fit_lmm(&pd.response, x, &pd.precision, terms, opts).map(ClosedFormFit::Mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_without_shift_errors_or_drops_zeros() {
        let ds = CountDataset::new(
            vec![0, 1, 3, 0, 5, 2, 7],
            vec![("x".into(), vec![-1.0, 0.0, 0.5, -0.8, 1.0, 0.2, 1.5])],
            None,
        )
        .unwrap();
        let m = ApproximationMethod::posterior();
        let err = fit_closed_form(&ds, m, &[], LmmOptions::default(), UndefinedPolicy::Error);
        assert!(matches!(err, Err(Error::Transform(_))));
        let fit = fit_closed_form(&ds, m, &[], LmmOptions::default(), UndefinedPolicy::Drop).unwrap();
        assert_eq!(fit.fixed().residuals.len(), 5);
    }
}
