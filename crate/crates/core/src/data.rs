//! Count datasets: construction, validation and CSV interchange.
//!
//! A [`CountDataset`] always carries an intercept as the first design column.
//! Offsets are the exposures `z_i` (not their logarithms) and default to 1.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A categorical column used for group random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFactor {
    pub name: String,
    pub labels: Vec<String>,
}

impl GroupFactor {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            labels,
        }
    }

    /// Distinct levels in order of first appearance.
    pub fn levels(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.labels
            .iter()
            .filter(|l| seen.insert(l.as_str()))
            .map(String::as_str)
            .collect()
    }
}

/// Planar coordinates with the column names they were read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinates {
    pub names: (String, String),
    pub points: Vec<[f64; 2]>,
}

/// Maps CSV column names to dataset roles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub count: String,
    pub covariates: Vec<String>,
    pub offset: Option<String>,
    pub coords: Option<(String, String)>,
    pub groups: Vec<String>,
}

impl CsvSchema {
    pub fn new(count: impl Into<String>) -> Self {
        Self {
            count: count.into(),
            ..Default::default()
        }
    }
}

/// Counts, design matrix (with intercept), offsets, and optional spatial
/// coordinates and group factors. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    count_name: String,
    y: Vec<u64>,
    covariate_names: Vec<String>,
    x: DMatrix<f64>,
    offset_name: Option<String>,
    offset: Vec<f64>,
    coords: Option<Coordinates>,
    groups: Vec<GroupFactor>,
}

impl CountDataset {
    /// Builds a dataset from raw columns. The intercept is prepended; a
    /// missing offset defaults every exposure to 1.
    pub fn new(
        y: Vec<u64>,
        covariates: Vec<(String, Vec<f64>)>,
        offset: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        let mut x = DMatrix::from_element(n, covariates.len() + 1, 1.0);
        let mut covariate_names = Vec::with_capacity(covariates.len());
        for (j, (name, col)) in covariates.into_iter().enumerate() {
            if col.len() != n {
                return Err(Error::Data(format!(
                    "covariate '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("non-finite value in covariate '{name}'"),
                });
            }
            x.column_mut(j + 1).copy_from_slice(&col);
            covariate_names.push(name);
        }
        let (offset_name, offset) = match offset {
            Some(z) => {
                if z.len() != n {
                    return Err(Error::Data(format!(
                        "offset has {} rows, expected {n}",
                        z.len()
                    )));
                }
                if let Some(i) = z.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::Row {
                        row: i + 1,
                        message: "non-positive offset".into(),
                    });
                }
                (Some("z".to_string()), z)
            }
            None => (None, vec![1.0; n]),
        };
        Ok(Self {
            count_name: "y".into(),
            y,
            covariate_names,
            x,
            offset_name,
            offset,
            coords: None,
            groups: Vec::new(),
        })
    }

    pub fn with_count_name(mut self, name: impl Into<String>) -> Self {
        self.count_name = name.into();
        self
    }

    pub fn with_offset_name(mut self, name: impl Into<String>) -> Self {
        self.offset_name = Some(name.into());
        self
    }

    pub fn with_coords(mut self, names: (String, String), points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != self.n() {
            return Err(Error::Data(format!(
                "coordinates have {} rows, expected {}",
                points.len(),
                self.n()
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::Row {
                row: i + 1,
                message: "non-finite coordinate".into(),
            });
        }
        self.coords = Some(Coordinates { names, points });
        Ok(self)
    }

    pub fn with_group(mut self, factor: GroupFactor) -> Result<Self> {
        if factor.labels.len() != self.n() {
            return Err(Error::Data(format!(
                "group '{}' has {} rows, expected {}",
                factor.name,
                factor.labels.len(),
                self.n()
            )));
        }
        if factor.levels().len() < 2 {
            return Err(Error::Data(format!(
                "group '{}' has fewer than 2 distinct levels",
                factor.name
            )));
        }
        self.groups.push(factor);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of design columns, intercept included.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn counts(&self) -> &[u64] {
        &self.y
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offset
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Coefficient labels: `(Intercept)` followed by the covariate names.
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.covariate_names.iter().cloned())
            .collect()
    }

    pub fn coords(&self) -> Option<&Coordinates> {
        self.coords.as_ref()
    }

    pub fn groups(&self) -> &[GroupFactor] {
        &self.groups
    }

    pub fn zero_ratio(&self) -> f64 {
        zero_ratio(&self.y)
    }

    /// The schema this dataset is written with by [`write_csv`].
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            count: self.count_name.clone(),
            covariates: self.covariate_names.clone(),
            offset: self.offset_name.clone(),
            coords: self.coords.as_ref().map(|c| c.names.clone()),
            groups: self.groups.iter().map(|g| g.name.clone()).collect(),
        }
    }
}

/// Fraction of zero counts. Offsets play no role.
pub fn zero_ratio(y: &[u64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    y.iter().filter(|&&v| v == 0).count() as f64 / y.len() as f64
}

/// Reads and validates a CSV file. Lines starting with `#` are comments.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CountDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<CountDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in header")))
    };

    let count_idx = col(&schema.count)?;
    let cov_idx = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let offset_idx = schema.offset.as_deref().map(col).transpose()?;
    let coord_idx = match &schema.coords {
        Some((a, b)) => Some((col(a)?, col(b)?)),
        None => None,
    };
    let group_idx = schema
        .groups
        .iter()
        .map(|g| col(g))
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut covs = vec![Vec::new(); cov_idx.len()];
    let mut offset = Vec::new();
    let mut coords = Vec::new();
    let mut groups = vec![Vec::new(); group_idx.len()];

    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: format!("malformed row: {e}"),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        y.push(parse_count(&rec[count_idx], row)?);
        for (k, &j) in cov_idx.iter().enumerate() {
            covs[k].push(parse_real(&rec[j], &schema.covariates[k], row)?);
        }
        if let Some(j) = offset_idx {
            let z = parse_real(&rec[j], "offset", row)?;
            if z <= 0.0 {
                return Err(Error::Row {
                    row,
                    message: format!("non-positive offset {z}"),
                });
            }
            offset.push(z);
        }
        if let Some((a, b)) = coord_idx {
            coords.push([
                parse_real(&rec[a], "coordinate", row)?,
                parse_real(&rec[b], "coordinate", row)?,
            ]);
        }
        for (k, &j) in group_idx.iter().enumerate() {
            groups[k].push(rec[j].to_string());
        }
    }
    if y.is_empty() {
        return Err(Error::Data("CSV contains no data rows".into()));
    }

    let covariates = schema.covariates.iter().cloned().zip(covs).collect();
    let mut ds = CountDataset::new(y, covariates, offset_idx.map(|_| offset))?
        .with_count_name(schema.count.clone());
    if let Some(name) = &schema.offset {
        ds = ds.with_offset_name(name.clone());
    }
    if let Some(names) = &schema.coords {
        ds = ds.with_coords(names.clone(), coords)?;
    }
    for (name, labels) in schema.groups.iter().zip(groups) {
        ds = ds.with_group(GroupFactor::new(name.clone(), labels))?;
    }
    Ok(ds)
}

fn parse_count(field: &str, row: usize) -> Result<u64> {
    let v: f64 = field.parse().map_err(|_| Error::Row {
        row,
        message: format!("count '{field}' is not a number"),
    })?;
    if !v.is_finite() || v.fract() != 0.0 {
        return Err(Error::Row {
            row,
            message: format!("non-integer count '{field}'"),
        });
    }
    if v < 0.0 {
        return Err(Error::Data(format!("negative count at row {row}")));
    }
    Ok(v as u64)
}

fn parse_real(field: &str, what: &str, row: usize) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Row {
            row,
            message: format!("invalid {what} value '{field}'"),
        }),
    }
}

/// Writes the dataset with its own schema (see [`CountDataset::schema`]).
/// An optional provenance line is emitted as a leading `#` comment.
pub fn write_csv(ds: &CountDataset, path: impl AsRef<Path>, provenance: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(ds, file, provenance, &[])
}

/// Like [`write_csv`] but to any writer, with extra trailing columns
/// (used by the simulator to store the true random effects).
pub fn write_csv_to<W: Write>(
    ds: &CountDataset,
    mut out: W,
    provenance: Option<&str>,
    extra: &[(String, Vec<f64>)],
) -> Result<()> {
    if let Some(p) = provenance {
        writeln!(out, "# {p}").map_err(|e| Error::io("<csv>", e))?;
    }
    let schema = ds.schema();
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![schema.count.clone()];
    header.extend(schema.covariates.iter().cloned());
    if let Some(o) = &schema.offset {
        header.push(o.clone());
    }
    if let Some((a, b)) = &schema.coords {
        header.push(a.clone());
        header.push(b.clone());
    }
    header.extend(schema.groups.iter().cloned());
    header.extend(extra.iter().map(|(n, _)| n.clone()));
    wtr.write_record(&header)?;

    for i in 0..ds.n() {
        let mut rec = vec![ds.y[i].to_string()];
        for j in 1..ds.p() {
            rec.push(ds.x[(i, j)].to_string());
        }
        if schema.offset.is_some() {
            rec.push(ds.offset[i].to_string());
        }
        if let Some(c) = &ds.coords {
            rec.push(c.points[i][0].to_string());
            rec.push(c.points[i][1].to_string());
        }
        for g in &ds.groups {
            rec.push(g.labels[i].clone());
        }
        for (_, col) in extra {
            rec.push(col[i].to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
