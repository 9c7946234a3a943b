//! Monte Carlo comparison of estimators over a grid of simulated scenarios.
//!
//! Every iteration generates one dataset per scenario and hands that same
//! dataset to every estimator. Iterations run in parallel; results are keyed
//! by iteration index and reduced in index order, so a report depends only
//! on the grid, the estimator list, the iteration count and the seed.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, GlmFamily};
use crate::mixed::LmmOptions;
use crate::pipeline::{build_terms, fit_closed_form, UndefinedPolicy};
use crate::simulate::{generate, iteration_seed, Case, SimulatedData, SimulationScenario};
use crate::transform::ApproximationMethod;

pub const COEFFICIENT_NAMES: [&str; 3] = ["beta0", "beta1", "beta2"];

/// One estimator's output on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Estimated random effect per observation (mixed cases).
    pub effect: Option<Vec<f64>>,
}

/// Anything the harness can score.
pub trait BenchEstimator: Send + Sync {
    fn name(&self) -> String;
    fn estimate(&self, data: &SimulatedData) -> Result<Estimate>;

    fn supports(&self, _case: Case) -> bool {
        true
    }
}

/// Built-in estimators: the three closed-form approximations and the three
/// GLM baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    ClosedForm(ApproximationMethod),
    Glm(GlmFamily),
}

impl Estimator {
    pub fn defaults_for(case: Case) -> Vec<Estimator> {
        let mut out = vec![
            Estimator::ClosedForm(ApproximationMethod::Proposed),
            Estimator::ClosedForm(ApproximationMethod::posterior()),
            Estimator::ClosedForm(ApproximationMethod::taylor()),
        ];
        if case == Case::Basic {
            out.extend([
                Estimator::Glm(GlmFamily::Poisson),
                Estimator::Glm(GlmFamily::OdPoisson),
                Estimator::Glm(GlmFamily::NegBin),
            ]);
        }
        out
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::ClosedForm(ApproximationMethod::Proposed) => f.write_str("proposed"),
            Estimator::ClosedForm(m) => {
                let default = ApproximationMethod::from_str(m.name()).map(|d| d.c()).ok();
                if default == Some(m.c()) {
                    f.write_str(m.name())
                } else {
                    write!(f, "{}:{}", m.name(), m.c())
                }
            }
            Estimator::Glm(GlmFamily::Poisson) => f.write_str("poisson"),
            Estimator::Glm(GlmFamily::OdPoisson) => f.write_str("odpoisson"),
            Estimator::Glm(GlmFamily::NegBin) => f.write_str("negbin"),
        }
    }
}

/// `proposed`, `posterior[:c]`, `taylor[:c]`, `poisson`, `odpoisson`, `negbin`.
impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, c) = match s.split_once(':') {
            Some((n, c)) => {
                let c: f64 = c
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad c in estimator '{s}'")))?;
                (n, Some(c))
            }
            None => (s, None),
        };
        if let Ok(m) = ApproximationMethod::from_str(name) {
            return Ok(Estimator::ClosedForm(match c {
                Some(c) => m.with_c(c)?,
                None => m,
            }));
        }
        if c.is_some() {
            return Err(Error::InvalidArgument(format!("estimator '{name}' takes no c")));
        }
        GlmFamily::from_str(name)
            .map(Estimator::Glm)
            .map_err(|_| Error::InvalidArgument(format!("unknown estimator '{s}'")))
    }
}

impl BenchEstimator for Estimator {
    fn name(&self) -> String {
        self.to_string()
    }

    fn supports(&self, case: Case) -> bool {
        matches!(self, Estimator::ClosedForm(_)) || case == Case::Basic
    }

    fn estimate(&self, data: &SimulatedData) -> Result<Estimate> {
        let ds = &data.dataset;
        match *self {
            Estimator::ClosedForm(method) => {
                let terms = build_terms(ds, true, ds.coords().is_some(), None)?;
                // Posterior with c = 0 cannot take the log of a zero count;
                // such rows are left out of that estimator's fit.
                let fit = fit_closed_form(ds, method, &terms, LmmOptions::default(), UndefinedPolicy::Drop)?;
                if let Some(m) = fit.mixed() {
                    if !m.converged {
                        return Err(Error::Numerical("variance components did not converge".into()));
                    }
                }
                let f = fit.fixed();
                Ok(Estimate {
                    beta: f.beta.clone(),
                    se: f.se.clone(),
                    effect: fit.mixed().map(|m| m.total_effect()),
                })
            }
            Estimator::Glm(family) => {
                if ds.coords().is_some() || !ds.groups().is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "{self} does not support random effects"
                    )));
                }
                let g = glm::fit(ds, family)?;
                if g.has_failure() {
                    return Err(Error::Numerical(format!("{self}: {:?}", g.flags)));
                }
                Ok(Estimate {
                    beta: g.fit.beta,
                    se: g.fit.se,
                    effect: None,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub truth: f64,
    pub rmse: Option<f64>,
    pub bias: Option<f64>,
    pub mean_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub coefficients: Vec<CoefficientSummary>,
    pub effect_rmse: Option<f64>,
    pub failure_count: usize,
    pub iterations_completed: usize,
}

impl EstimatorSummary {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientSummary> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub label: String,
    pub scenario: SimulationScenario,
    pub estimators: Vec<EstimatorSummary>,
}

impl ScenarioResult {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub iterations: usize,
    pub grid: Vec<SimulationScenario>,
    pub estimators: Vec<String>,
    pub invocation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub provenance: Provenance,
    pub scenarios: Vec<ScenarioResult>,
}

impl BenchReport {
    pub fn scenario(&self, label: &str) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|s| s.label == label)
    }
}

/// Truth used to score effect estimates. Spatial effects are compared after
/// removing their sample mean, which the intercept absorbs.
fn effect_truth(data: &SimulatedData, case: Case) -> Option<Vec<f64>> {
    let effect = data.effect.as_ref()?;
    if case == Case::Spatial {
        let mean = effect.iter().sum::<f64>() / effect.len() as f64;
        Some(effect.iter().map(|e| e - mean).collect())
    } else {
        Some(effect.clone())
    }
}

/// Per-coefficient RMSE, bias and mean SE over successful iterations.
fn summarise(
    name: String,
    truth: &[f64],
    estimates: &[(Estimate, Option<Vec<f64>>)],
    failures: usize,
) -> EstimatorSummary {
    let k = estimates.len();
    let kf = k as f64;
    let coefficients = truth
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let label = COEFFICIENT_NAMES
                .get(j)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("beta{j}"));
            if k == 0 {
                return CoefficientSummary {
                    name: label,
                    truth: t,
                    rmse: None,
                    bias: None,
                    mean_se: None,
                };
            }
            let errors = estimates.iter().map(|(e, _)| e.beta[j] - t);
            let bias = errors.clone().sum::<f64>() / kf;
            let mse = errors.map(|d| d * d).sum::<f64>() / kf;
            let mean_se = estimates.iter().map(|(e, _)| e.se[j]).sum::<f64>() / kf;
            CoefficientSummary {
                name: label,
                truth: t,
                rmse: Some(mse.sqrt()),
                bias: Some(bias),
                mean_se: Some(mean_se),
            }
        })
        .collect();

    let mut sq = 0.0;
    let mut count = 0usize;
    for (e, truth) in estimates {
        if let (Some(est), Some(tr)) = (&e.effect, truth) {
            sq += est.iter().zip(tr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += tr.len();
        }
    }
    EstimatorSummary {
        estimator: name,
        coefficients,
        effect_rmse: (count > 0).then(|| (sq / count as f64).sqrt()),
        failure_count: failures,
        iterations_completed: k,
    }
}

/// Runs every estimator on `iters` paired replications of every scenario.
/// Iteration `i` uses seed `seed ^ i` for all scenarios.
pub fn run_bench(
    grid: &[SimulationScenario],
    estimators: &[Box<dyn BenchEstimator>],
    iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    run_bench_with(grid, estimators, iters, seed, generate)
}

/// [`run_bench`] with a custom data generator.
pub fn run_bench_with<G>(
    grid: &[SimulationScenario],
    estimators: &[Box<dyn BenchEstimator>],
    iters: usize,
    seed: u64,
    generator: G,
) -> Result<BenchReport>
where
    G: Fn(&SimulationScenario) -> Result<SimulatedData> + Sync,
{
    if iters < 2 {
        return Err(Error::InvalidArgument("iters >= 2 required".into()));
    }
    for s in grid {
        s.validate()?;
        if let Some(e) = estimators.iter().find(|e| !e.supports(s.case)) {
            return Err(Error::InvalidArgument(format!(
                "estimator '{}' does not support the {} case",
                e.name(),
                s.case
            )));
        }
    }
    let mut scenarios = Vec::with_capacity(grid.len());
    for scenario in grid {
        type Outcome = Vec<Result<(Estimate, Option<Vec<f64>>)>>;
        let per_iteration: Vec<Result<(Vec<f64>, Outcome)>> = (0..iters)
            .into_par_iter()
            .map(|it| {
                let s = scenario.with_seed(iteration_seed(seed, it as u64));
                let data = generator(&s)?;
                let truth = effect_truth(&data, s.case);
                let outcomes = estimators
                    .iter()
                    .map(|e| {
                        e.estimate(&data).and_then(|est| {
                            if est.beta.len() != data.beta.len()
                                || est.beta.iter().chain(&est.se).any(|v| !v.is_finite())
                            {
                                Err(Error::Numerical("non-finite estimate".into()))
                            } else {
                                Ok((est, truth.clone()))
                            }
                        })
                    })
                    .collect();
                Ok((data.beta, outcomes))
            })
            .collect();

        let mut truth_beta = scenario.true_beta();
        let mut buckets: Vec<(Vec<(Estimate, Option<Vec<f64>>)>, usize)> =
            (0..estimators.len()).map(|_| (Vec::new(), 0)).collect();
        for result in per_iteration {
            let (beta, outcomes) = result?;
            truth_beta = beta;
            for (bucket, outcome) in buckets.iter_mut().zip(outcomes) {
                match outcome {
                    Ok(v) => bucket.0.push(v),
                    Err(_) => bucket.1 += 1,
                }
            }
        }
        let summaries = estimators
            .iter()
            .zip(buckets)
            .map(|(e, (ok, failed))| summarise(e.name(), &truth_beta, &ok, failed))
            .collect();
        scenarios.push(ScenarioResult {
            label: scenario.label(),
            scenario: scenario.clone(),
            estimators: summaries,
        });
    }
    Ok(BenchReport {
        provenance: Provenance {
            master_seed: seed,
            iterations: iters,
            grid: grid.to_vec(),
            estimators: estimators.iter().map(|e| e.name()).collect(),
            invocation: None,
        },
        scenarios,
    })
}

pub const CSV_HEADER: [&str; 5] = ["scenario", "estimator", "coefficient", "metric", "value"];

/// Long-format rows `(scenario, estimator, coefficient, metric, value)`.
pub fn report_rows(r: &BenchReport) -> Vec<[String; 5]> {
    let mut rows = Vec::new();
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
    for s in &r.scenarios {
        for e in &s.estimators {
            for c in &e.coefficients {
                for (metric, value) in [("rmse", c.rmse), ("bias", c.bias), ("mean_se", c.mean_se)] {
                    rows.push([
                        s.label.clone(),
                        e.estimator.clone(),
                        c.name.clone(),
                        metric.into(),
                        fmt(value),
                    ]);
                }
            }
            if let Some(v) = e.effect_rmse {
                rows.push([s.label.clone(), e.estimator.clone(), String::new(), "effect_rmse".into(), v.to_string()]);
            }
            rows.push([
                s.label.clone(),
                e.estimator.clone(),
                String::new(),
                "failure_count".into(),
                e.failure_count.to_string(),
            ]);
            rows.push([
                s.label.clone(),
                e.estimator.clone(),
                String::new(),
                "iterations_completed".into(),
                e.iterations_completed.to_string(),
            ]);
        }
    }
    rows
}

/// Writes `bench.csv` (long format) and `bench.json` (full report) into
/// `dir`. Returns the two paths.
pub fn write_report(r: &BenchReport, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("bench.csv");
    let json_path = dir.join("bench.json");

    let mut file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    if let Some(inv) = &r.provenance.invocation {
        writeln!(file, "# {inv}").map_err(|e| Error::io(&csv_path, e))?;
    }
    let mut wtr = csv::Writer::from_writer(file);
    wtr.write_record(CSV_HEADER)?;
    for row in report_rows(r) {
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json = serde_json::to_string_pretty(r)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<BenchReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Shifted(f64);

    impl BenchEstimator for Shifted {
        fn name(&self) -> String {
            format!("shift{}", self.0)
        }

        fn estimate(&self, data: &SimulatedData) -> Result<Estimate> {
            Ok(Estimate {
                beta: data.beta.iter().map(|b| b + self.0).collect(),
                se: vec![1.0; data.beta.len()],
                effect: None,
            })
        }
    }

    #[test]
    fn parse_estimators() {
        assert_eq!("proposed".parse::<Estimator>().unwrap().to_string(), "proposed");
        assert_eq!("taylor:2".parse::<Estimator>().unwrap().to_string(), "taylor:2");
        assert_eq!("taylor:1".parse::<Estimator>().unwrap().to_string(), "taylor");
        assert_eq!("odpoisson".parse::<Estimator>().unwrap(), Estimator::Glm(GlmFamily::OdPoisson));
        assert!("proposed:1".parse::<Estimator>().is_err());
        assert!("poisson:1".parse::<Estimator>().is_err());
        assert!("ols".parse::<Estimator>().is_err());
    }

    #[test]
    fn constant_offset_estimator() {
        let grid = [SimulationScenario::new(Case::Basic, 20, 0.0, 1.0, 0)];
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(Shifted(0.1)), Box::new(Shifted(0.0))];
        let r = run_bench(&grid, &est, 5, 9).unwrap();
        let s = &r.scenarios[0];
        for c in &s.estimator("shift0.1").unwrap().coefficients {
            assert!((c.rmse.unwrap() - 0.1).abs() < 1e-12);
            assert!((c.bias.unwrap() - 0.1).abs() < 1e-12);
        }
        for c in &s.estimator("shift0").unwrap().coefficients {
            assert_eq!(c.rmse, Some(0.0));
            assert_eq!(c.bias, Some(0.0));
        }
    }

    #[test]
    fn three_iteration_hand_example() {
        let estimates: Vec<(Estimate, Option<Vec<f64>>)> = [0.5, 1.5, 1.3]
            .iter()
            .map(|b| {
                (
                    Estimate {
                        beta: vec![*b],
                        se: vec![0.2],
                        effect: Some(vec![0.0, 1.0]),
                    },
                    Some(vec![1.0, 1.0]),
                )
            })
            .collect();
        let s = summarise("x".into(), &[1.0], &estimates, 2);
        let c = &s.coefficients[0];
        // errors -0.5, 0.5, 0.3
        assert!((c.bias.unwrap() - 0.1).abs() < 1e-15);
        assert!((c.rmse.unwrap() - (0.59f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((c.mean_se.unwrap() - 0.2).abs() < 1e-15);
        assert!((s.effect_rmse.unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.failure_count, s.iterations_completed), (2, 3));
    }

    #[test]
    fn too_few_iterations_rejected() {
        let grid = [SimulationScenario::new(Case::Basic, 20, 0.0, 1.0, 0)];
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(Shifted(0.0))];
        assert!(run_bench(&grid, &est, 1, 0).is_err());
    }

    #[test]
    fn glm_estimators_reject_random_effects() {
        let s = SimulationScenario::new(Case::Group, 50, 0.0, 1.0, 3);
        let data = generate(&s).unwrap();
        assert!(Estimator::Glm(GlmFamily::Poisson).estimate(&data).is_err());
        assert!(!Estimator::Glm(GlmFamily::Poisson).supports(Case::Group));
        let grid = [s];
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(Estimator::Glm(GlmFamily::Poisson))];
        assert!(matches!(run_bench(&grid, &est, 3, 0), Err(Error::InvalidArgument(_))));
    }

    fn small_bench() -> BenchReport {
        let grid = [
            SimulationScenario::new(Case::Basic, 40, -1.0, 3.0, 0),
            SimulationScenario::new(Case::Basic, 40, 1.0, 1.0, 0),
        ];
        let est: Vec<Box<dyn BenchEstimator>> = ["proposed", "taylor", "poisson"]
            .iter()
            .map(|s| Box::new(s.parse::<Estimator>().unwrap()) as Box<dyn BenchEstimator>)
            .collect();
        run_bench(&grid, &est, 6, 42).unwrap()
    }

    #[test]
    fn same_seed_same_report() {
        assert_eq!(small_bench(), small_bench());
    }

    #[test]
    fn rmse_decomposes_into_bias_and_variance() {
        // Recompute from the raw estimates of one scenario.
        let s = SimulationScenario::new(Case::Basic, 40, -1.0, 3.0, 0);
        let m = Estimator::ClosedForm(ApproximationMethod::Proposed);
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(m)];
        let r = run_bench(std::slice::from_ref(&s), &est, 6, 42).unwrap();
        let cells = &r.scenarios[0].estimators[0];
        let b1: Vec<f64> = (0..6)
            .map(|i| {
                let d = generate(&s.with_seed(iteration_seed(42, i))).unwrap();
                m.estimate(&d).unwrap().beta[1]
            })
            .collect();
        let mean = b1.iter().sum::<f64>() / 6.0;
        let var = b1.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 6.0;
        let c = cells.coefficient("beta1").unwrap();
        let (rmse, bias) = (c.rmse.unwrap(), c.bias.unwrap());
        assert!((rmse * rmse - (bias * bias + var)).abs() < 1e-10);
        assert!((bias - (mean - c.truth)).abs() < 1e-12);
        for sc in &small_bench().scenarios {
            for e in &sc.estimators {
                for c in &e.coefficients {
                    assert!(c.rmse.unwrap() >= c.bias.unwrap().abs());
                }
                assert_eq!(e.iterations_completed + e.failure_count, 6);
            }
        }
    }

    struct Recorder(std::sync::Mutex<Vec<u64>>);

    impl BenchEstimator for Recorder {
        fn name(&self) -> String {
            "recorder".into()
        }

        fn estimate(&self, data: &SimulatedData) -> Result<Estimate> {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            data.dataset.counts().hash(&mut h);
            for v in data.dataset.design().iter() {
                v.to_bits().hash(&mut h);
            }
            self.0.lock().unwrap().push(h.finish());
            Shifted(0.0).estimate(data)
        }
    }

    #[test]
    fn estimators_see_identical_datasets() {
        let grid = [SimulationScenario::new(Case::Basic, 30, 0.0, 2.0, 0)];
        let a = std::sync::Arc::new(Recorder(Default::default()));
        struct Shared(std::sync::Arc<Recorder>);
        impl BenchEstimator for Shared {
            fn name(&self) -> String {
                "shared".into()
            }
            fn estimate(&self, data: &SimulatedData) -> Result<Estimate> {
                self.0.estimate(data)
            }
        }
        let b = std::sync::Arc::new(Recorder(Default::default()));
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(Shared(a.clone())), Box::new(Shared(b.clone()))];
        run_bench(&grid, &est, 8, 5).unwrap();
        let mut ha = a.0.lock().unwrap().clone();
        let mut hb = b.0.lock().unwrap().clone();
        ha.sort_unstable();
        hb.sort_unstable();
        assert_eq!(ha, hb);
        ha.dedup();
        assert_eq!(ha.len(), 8);
    }

    #[test]
    fn write_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = small_bench();
        r.provenance.invocation = Some("countfit bench --seed 42".into());
        let (csv_path, json_path) = write_report(&r, dir.path()).unwrap();
        assert_eq!(read_report(&json_path).unwrap(), r);
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert!(text.starts_with("# countfit bench --seed 42\nscenario,estimator,coefficient,metric,value\n"));
        // 2 scenarios x 3 estimators x (3 coef x 3 metrics + failure + completed)
        assert_eq!(text.lines().count(), 2 + 2 * 3 * 11);
    }

    #[test]
    fn empty_grid_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(Shifted(0.0))];
        let r = run_bench(&[], &est, 2, 0).unwrap();
        let (csv_path, _) = write_report(&r, dir.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(csv_path).unwrap(),
            "scenario,estimator,coefficient,metric,value\n"
        );
    }

    #[test]
    fn one_cell_report_has_one_row_per_metric() {
        let grid = [SimulationScenario::new(Case::Basic, 20, 0.0, 1.0, 0)];
        let est: Vec<Box<dyn BenchEstimator>> = vec![Box::new(Shifted(0.0))];
        let r = run_bench(&grid, &est, 2, 0).unwrap();
        let rows = report_rows(&r);
        assert_eq!(rows.len(), 3 * 3 + 2);
        let mut keys: Vec<_> = rows.iter().map(|r| (r[2].clone(), r[3].clone())).collect();
        keys.dedup();
        assert_eq!(keys.len(), rows.len());
    }
}
