//! `countfit` command-line front end.
//!
//! Exit codes: 0 on success, 2 on bad input, 3 when a fit fails
//! numerically. Errors are written to stderr as a single JSON object.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::bench::{self, BenchEstimator, Estimator};
use crate::data::{self, CsvSchema};
use crate::error::{Error, Result};
use crate::glm::{self, GlmFamily};
use crate::mixed::{moran_basis, LmmOptions};
use crate::pipeline::{build_terms, fit_closed_form, ClosedFormFit, UndefinedPolicy};
use crate::simulate::{generate, Case, SimulationScenario};
use crate::wls::FitResult;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const SEED_ENV: &str = "COUNTFIT_SEED";

#[derive(Debug, Parser)]
#[command(name = "countfit", version, about = "Closed-form and exact regression for over-dispersed counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a count regression to a CSV file.
    Fit(FitArgs),
    /// Write a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run the Monte Carlo estimator comparison.
    Bench(BenchArgs),
    /// Write the Moran eigenvector basis for a set of coordinates.
    Basis(BasisArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Count column.
    #[arg(long, default_value = "y")]
    pub count: String,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Exposure column (positive; enters as log offset).
    #[arg(long)]
    pub offset: Option<String>,
    /// Grouping column for a random intercept. Repeatable.
    #[arg(long = "group")]
    pub groups: Vec<String>,
    /// Coordinate columns `x,y` for a spatial random effect.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub spatial: Option<Vec<String>>,
    /// Range of the spatial kernel (default: largest pairwise distance).
    #[arg(long)]
    pub range: Option<f64>,
    /// proposed, posterior, taylor, poisson, odpoisson or negbin.
    #[arg(long, default_value = "proposed")]
    pub method: String,
    /// Shift constant for posterior / taylor.
    #[arg(long)]
    pub c: Option<f64>,
    /// Use REML for the variance components.
    #[arg(long)]
    pub reml: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub case: String,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub beta0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "basic")]
    pub case: String,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-2,-1,0,1,2")]
    pub beta0: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub sigma2: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "200")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Estimators, comma separated (default: all that apply to the case).
    #[arg(long, value_delimiter = ',')]
    pub estimators: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Coordinate columns `x,y`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub spatial: Vec<String>,
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = if e.is_input_error() {
            (EXIT_INPUT, "input")
        } else {
            (EXIT_NUMERICAL, "numerical")
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn input_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        kind: "input",
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Seed and where it came from, for provenance.
fn resolve_seed(seed: Option<u64>, matches: &ArgMatches) -> (u64, &'static str) {
    match (seed, matches.value_source("seed")) {
        (Some(s), Some(ValueSource::EnvVariable)) => (s, SEED_ENV),
        (Some(s), _) => (s, "flag"),
        (None, _) => (0, "default"),
    }
}

fn quote(arg: &str) -> String {
    let plain = !arg.is_empty()
        && arg
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.,:/=+".contains(c));
    if plain {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}

fn invocation_string(args: &[String]) -> String {
    let mut parts = vec!["countfit".to_string()];
    parts.extend(args.iter().skip(1).map(|a| quote(a)));
    parts.join(" ")
}

fn with_seed(invocation: &str, seed: (u64, &str)) -> String {
    format!("{invocation} [seed={} from {}]", seed.0, seed.1)
}

fn emit_error(f: &Failure) {
    let v = json!({"error": f.kind, "message": f.message, "exit_code": f.code});
    eprintln!("{v}");
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let f = input_failure(e.render().to_string().trim().to_string());
            emit_error(&f);
            return f.code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let f = input_failure(e.to_string());
            emit_error(&f);
            return f.code;
        }
    };
    let text: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let invocation = invocation_string(&text);
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");

    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, &invocation),
        Command::Simulate(a) => cmd_simulate(a, &with_seed(&invocation, resolve_seed(a.seed, sub))),
        Command::Bench(a) => {
            let seed = resolve_seed(a.seed, sub);
            cmd_bench(a, seed.0, &with_seed(&invocation, seed))
        }
        Command::Basis(a) => cmd_basis(a, &invocation),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            emit_error(&f);
            f.code
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn parse_method(method: &str, c: Option<f64>) -> std::result::Result<Estimator, Failure> {
    let e: Estimator = method.parse().map_err(Failure::from)?;
    match (e, c) {
        (Estimator::ClosedForm(m), Some(c)) => Ok(Estimator::ClosedForm(m.with_c(c)?)),
        (_, Some(_)) => Err(input_failure(format!("--c does not apply to method '{method}'"))),
        (e, None) => Ok(e),
    }
}

fn stars(t: f64) -> &'static str {
    let a = t.abs();
    if a >= 3.29 {
        "***"
    } else if a >= 2.58 {
        "**"
    } else if a >= 1.96 {
        "*"
    } else {
        ""
    }
}

fn coefficient_table(names: &[String], f: &FitResult) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(11);
    let mut s = format!("{:<width$} {:>12} {:>12} {:>9}\n", "", "Estimate", "Std. Error", "t value");
    for (k, name) in names.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<width$} {:>12.5} {:>12.5} {:>9.3} {}",
            name,
            f.beta[k],
            f.se[k],
            f.t_values[k],
            stars(f.t_values[k])
        );
    }
    s.push_str("---\nSignif.: *** |t|>=3.29  ** |t|>=2.58  * |t|>=1.96\n");
    s
}

fn cmd_fit(a: &FitArgs, invocation: &str) -> CmdResult {
    let method = parse_method(&a.method, a.c)?;
    let mut schema = CsvSchema::new(a.count.clone());
    schema.covariates = a.covariates.clone();
    schema.offset = a.offset.clone();
    schema.groups = a.groups.clone();
    schema.coords = match &a.spatial {
        None => None,
        Some(cols) if cols.len() == 2 => Some((cols[0].clone(), cols[1].clone())),
        Some(_) => return Err(input_failure("--spatial expects two columns: x,y")),
    };
    let has_random = !a.groups.is_empty() || a.spatial.is_some();
    if matches!(method, Estimator::Glm(_)) && has_random {
        return Err(input_failure(format!(
            "method '{method}' does not support --group or --spatial"
        )));
    }
    if matches!(method, Estimator::Glm(_)) && (a.reml || a.range.is_some()) {
        return Err(input_failure("--reml and --range apply only to mixed closed-form fits"));
    }

    let ds = data::load_csv(&a.input, &schema)?;
    let names = ds.coefficient_names();
    let config = json!({
        "input": a.input,
        "count": a.count,
        "covariates": a.covariates,
        "offset": a.offset,
        "groups": a.groups,
        "spatial": a.spatial,
        "range": a.range,
        "method": method.to_string(),
        "c": match method { Estimator::ClosedForm(m) => Some(m.c()), _ => None },
        "reml": a.reml,
        "format": format!("{:?}", a.format).to_lowercase(),
        "out": a.out,
    });
    let mut report = json!({
        "invocation": invocation,
        "config": config,
        "method": method.to_string(),
        "n": ds.n(),
        "p": ds.p(),
        "zero_ratio": ds.zero_ratio(),
        "coefficient_names": names,
    });

    let mut failure = None;
    let fixed: FitResult;
    let mut table_extra = String::new();
    match method {
        Estimator::ClosedForm(m) => {
            let terms = build_terms(&ds, true, a.spatial.is_some(), a.range)?;
            let opts = LmmOptions {
                reml: a.reml,
                ..LmmOptions::default()
            };
            let fit = fit_closed_form(&ds, m, &terms, opts, UndefinedPolicy::Error)?;
            match &fit {
                ClosedFormFit::Fixed(_) => {
                    report["random_effects"] = json!([]);
                }
                ClosedFormFit::Mixed(mf) => {
                    report["random_effects"] = serde_json::to_value(&mf.terms).map_err(Error::from)?;
                    report["mixed"] = json!({
                        "reml": mf.reml,
                        "converged": mf.converged,
                        "evaluations": mf.evaluations,
                    });
                    for t in &mf.terms {
                        let _ = writeln!(table_extra, "tau2[{}] = {:.6}", t.label, t.tau2);
                    }
                    if !mf.converged {
                        failure = Some(Failure {
                            code: EXIT_NUMERICAL,
                            kind: "numerical",
                            message: "variance components did not converge".into(),
                        });
                    }
                }
            }
            fixed = fit.fixed().clone();
        }
        Estimator::Glm(family) => {
            let g = glm::fit(&ds, family)?;
            report["random_effects"] = json!([]);
            report["glm"] = json!({
                "family": family,
                "dispersion_kind": g.dispersion_kind,
                "theta": g.theta,
                "converged": g.converged,
                "iterations": g.iterations,
                "score_norm": g.score_norm,
                "flags": g.flags,
            });
            if let Some(t) = g.theta {
                let _ = writeln!(table_extra, "theta = {t:.6}");
            }
            if family == GlmFamily::OdPoisson {
                let _ = writeln!(table_extra, "dispersion = {:.6}", g.fit.sigma2);
            }
            if g.has_failure() {
                failure = Some(Failure {
                    code: EXIT_NUMERICAL,
                    kind: "numerical",
                    message: format!("fit failed: {:?}", g.flags),
                });
            }
            fixed = g.fit;
        }
    }
    report["coefficients"] = Value::Array(
        names
            .iter()
            .enumerate()
            .map(|(k, n)| json!({"name": n, "estimate": fixed.beta[k], "se": fixed.se[k], "t": fixed.t_values[k]}))
            .collect(),
    );
    report["sigma2"] = json_number(fixed.sigma2);
    report["sigma"] = json_number(fixed.sigma);
    report["loglik"] = json_number(fixed.loglik);
    report["fit"] = serde_json::to_value(&fixed).map_err(Error::from)?;

    let json_text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    if let Some(out) = &a.out {
        write_output(Some(out), &json_text)?;
    }
    match a.format {
        OutputFormat::Json if a.out.is_none() => write_output(None, &json_text)?,
        OutputFormat::Json => {}
        OutputFormat::Table => {
            let mut s = format!("# {invocation}\nmethod: {method}  N = {}  zero ratio = {:.4}\n\n", ds.n(), ds.zero_ratio());
            s.push_str(&coefficient_table(&names, &fixed));
            let _ = writeln!(s, "\nsigma2 = {:.6}  sigma = {:.6}  loglik = {:.4}", fixed.sigma2, fixed.sigma, fixed.loglik);
            s.push_str(&table_extra);
            write_output(None, &s)?;
        }
    }
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

/// JSON has no infinities; they are written as strings.
fn json_number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn parse_case(s: &str) -> std::result::Result<Case, Failure> {
    s.parse::<Case>().map_err(Failure::from)
}

fn cmd_simulate(a: &SimulateArgs, provenance: &str) -> CmdResult {
    let case = parse_case(&a.case)?;
    let scenario = SimulationScenario::new(case, a.n, a.beta0, a.sigma2, a.seed.unwrap_or(0));
    scenario.validate()?;
    let sim = generate(&scenario)?;
    let extra: Vec<(String, Vec<f64>)> = sim
        .effect
        .iter()
        .map(|e| ("effect".to_string(), e.clone()))
        .collect();
    let mut buf = Vec::new();
    data::write_csv_to(&sim.dataset, &mut buf, Some(provenance), &extra)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    write_output(a.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64, provenance: &str) -> CmdResult {
    let case = parse_case(&a.case)?;
    if a.iters < 2 {
        return Err(input_failure("iters >= 2 required"));
    }
    let estimators: Vec<Estimator> = if a.estimators.is_empty() {
        Estimator::defaults_for(case)
    } else {
        a.estimators
            .iter()
            .map(|s| s.parse::<Estimator>())
            .collect::<Result<_>>()?
    };
    let mut grid = Vec::new();
    for &n in &a.n {
        for &s2 in &a.sigma2 {
            for &b0 in &a.beta0 {
                grid.push(SimulationScenario::new(case, n, b0, s2, seed));
            }
        }
    }
    let boxed: Vec<Box<dyn BenchEstimator>> = estimators
        .into_iter()
        .map(|e| Box::new(e) as Box<dyn BenchEstimator>)
        .collect();
    let mut report = bench::run_bench(&grid, &boxed, a.iters, seed)?;
    report.provenance.invocation = Some(provenance.to_string());
    let (csv_path, json_path) = bench::write_report(&report, &a.out)?;
    println!(
        "{}",
        json!({"csv": csv_path, "json": json_path, "scenarios": report.scenarios.len(), "seed": seed})
    );
    Ok(())
}

fn cmd_basis(a: &BasisArgs, invocation: &str) -> CmdResult {
    if a.spatial.len() != 2 {
        return Err(input_failure("--spatial expects two columns: x,y"));
    }
    let points = read_points(&a.input, &a.spatial[0], &a.spatial[1])?;
    let term = moran_basis(&points, a.range)?;
    let mut buf = Vec::new();
    writeln!(buf, "# {invocation}").map_err(|e| Error::io("<csv>", e))?;
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        let header: Vec<String> = (1..=term.z.ncols()).map(|k| format!("e{k}")).collect();
        wtr.write_record(&header).map_err(Error::from)?;
        for i in 0..term.z.nrows() {
            let row: Vec<String> = term.z.row(i).iter().map(|v| v.to_string()).collect();
            wtr.write_record(&row).map_err(Error::from)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    let mut text = String::from_utf8(buf).expect("csv output is utf-8");
    let eig: Vec<String> = term.eigenvalues.iter().map(|v| v.to_string()).collect();
    text.insert_str(
        text.find('\n').map(|i| i + 1).unwrap_or(0),
        &format!("# eigenvalues: {}\n", eig.join(",")),
    );
    write_output(a.out.as_deref(), &text)?;
    Ok(())
}

/// Reads two numeric columns by name.
fn read_points(path: &Path, xcol: &str, ycol: &str) -> Result<Vec<[f64; 2]>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    };
    let (ix, iy) = (find(xcol)?, find(ycol)?);
    let mut points = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Row {
                    row: k + 1,
                    message: format!("non-numeric coordinate '{}'", rec.get(j).unwrap_or("")),
                })
        };
        points.push([parse(ix)?, parse(iy)?]);
    }
    Ok(points)
}
