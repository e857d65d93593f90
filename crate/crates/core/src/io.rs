//! Yield-curve ingestion and file formats for datasets, draws and results.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use chrono::{Months, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bench::{ResultRow, StudyProtocol};
use crate::error::{Error, Result};
use crate::far::GibbsDraws;
use crate::grid::{EvaluationGrid, ObservationSet};

pub const NOMINAL_MATURITIES: [f64; 11] = [1.0, 3.0, 6.0, 12.0, 24.0, 36.0, 60.0, 84.0, 120.0, 240.0, 360.0];
pub const REAL_MATURITIES: [f64; 5] = [60.0, 84.0, 120.0, 240.0, 360.0];
const MISSING: [&str; 6] = ["", "ND", "NA", "N/A", "NaN", "."];
const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d", "%m/%d/%Y", "%Y/%m/%d"];
const MAX_REPORTED: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    Nominal,
    Real,
}

impl CurveKind {
    pub fn maturities(self) -> &'static [f64] {
        match self {
            Self::Nominal => &NOMINAL_MATURITIES,
            Self::Real => &REAL_MATURITIES,
        }
    }
}

/// Column-name to maturity (months) mapping. Names not in the table are
/// parsed as `<n>M`, `<n> Mo`, `<n>Y`, `<n> Yr` and similar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityDictionary(pub BTreeMap<String, f64>);

impl Default for MaturityDictionary {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        for (code, months) in [
            ("M01", 1.0),
            ("M03", 3.0),
            ("M06", 6.0),
            ("Y01", 12.0),
            ("Y02", 24.0),
            ("Y03", 36.0),
            ("Y05", 60.0),
            ("Y07", 84.0),
            ("Y10", 120.0),
            ("Y20", 240.0),
            ("Y30", 360.0),
        ] {
            m.insert(format!("RIFLGFC{code}_N.B"), months);
            if code.starts_with('Y') && months >= 60.0 {
                m.insert(format!("RIFLGFC{code}_XII_N.B"), months);
            }
        }
        Self(m)
    }
}

impl MaturityDictionary {
    pub fn months(&self, name: &str) -> Option<f64> {
        let name = name.trim();
        if let Some(&v) = self.0.get(name) {
            return Some(v);
        }
        let lower = name.to_ascii_lowercase();
        let digits: String = lower.chars().take_while(|c| c.is_ascii_digit() || *c == '.').collect();
        let n: f64 = digits.parse().ok()?;
        let unit = lower[digits.len()..].trim().trim_end_matches('s');
        match unit {
            "m" | "mo" | "mon" | "month" => Some(n),
            "y" | "yr" | "year" => Some(12.0 * n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub kind: CurveKind,
    pub dictionary: MaturityDictionary,
    /// Lines before the header (file metadata).
    pub skip_lines: usize,
}

impl IngestOptions {
    pub fn new(kind: CurveKind) -> Self {
        Self {
            kind,
            dictionary: MaturityDictionary::default(),
            skip_lines: 0,
        }
    }
}

/// Daily yields (percent) by maturity, with missing cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldDataset {
    pub kind: CurveKind,
    pub dates: Vec<NaiveDate>,
    /// Strictly increasing, in months.
    pub maturities: Vec<f64>,
    /// `yields[t][k]` at `maturities[k]`.
    pub yields: Vec<Vec<Option<f64>>>,
    /// Rows dropped because every yield was missing.
    pub dropped_rows: usize,
}

impl YieldDataset {
    /// Maturities mapped affinely onto `[0, 1]` by the largest maturity.
    pub fn rescaled(&self) -> Vec<f64> {
        let top = self.maturities.iter().cloned().fold(0.0, f64::max);
        self.maturities.iter().map(|m| m / top).collect()
    }

    pub fn to_observations(&self) -> Result<ObservationSet> {
        let pts = self.rescaled();
        let grid = EvaluationGrid::new(pts.clone())?;
        let data = self
            .yields
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&pts)
                    .filter_map(|(y, &p)| y.map(|v| (p, v)))
                    .unzip()
            })
            .collect();
        ObservationSet::new(grid, data)
    }

    /// Rows with dates in `[from, to)`.
    pub fn date_range(&self, from: NaiveDate, to: NaiveDate) -> std::ops::Range<usize> {
        let a = self.dates.partition_point(|d| *d < from);
        let b = self.dates.partition_point(|d| *d < to);
        a..b
    }

    /// Consecutive non-overlapping estimation periods of `months` months
    /// starting at `first`, each evaluated on the following calendar month.
    /// Windows without data in either period are skipped.
    pub fn windows(&self, first: NaiveDate, count: usize, months: u32, horizons: &[usize]) -> Vec<YieldWindow> {
        let mut out = Vec::new();
        let mut start = first;
        for _ in 0..count {
            let Some(fit_end) = start.checked_add_months(Months::new(months)) else { break };
            let Some(eval_end) = fit_end.checked_add_months(Months::new(1)) else { break };
            let fit = self.date_range(start, fit_end);
            let eval = self.date_range(fit_end, eval_end);
            if fit.len() >= 2 && !eval.is_empty() {
                out.push(YieldWindow {
                    label: start.format("%-m/%y").to_string(),
                    start_date: start,
                    protocol: StudyProtocol {
                        start: fit.start,
                        n_fit: fit.len(),
                        n_eval: eval.len(),
                        horizons: horizons.to_vec(),
                        ..Default::default()
                    },
                });
            }
            start = fit_end;
        }
        out
    }
}

/// One estimation window of a yield study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldWindow {
    /// `month/yy` of the estimation start.
    pub label: String,
    pub start_date: NaiveDate,
    pub protocol: StudyProtocol,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    DATE_FORMATS.iter().find_map(|f| NaiveDate::parse_from_str(s.trim(), f).ok())
}

fn report(errors: Vec<String>) -> Error {
    let more = errors.len().saturating_sub(MAX_REPORTED);
    let mut msg = errors.into_iter().take(MAX_REPORTED).collect::<Vec<_>>().join("; ");
    if more > 0 {
        msg.push_str(&format!("; and {more} more"));
    }
    Error::Parse {
        location: "yield file".into(),
        message: msg,
    }
}

/// Parse a CSV with a date column followed by one column per maturity.
pub fn read_yields<R: Read>(reader: R, opts: &IngestOptions) -> Result<YieldDataset> {
    let mut text = String::new();
    std::io::BufReader::new(reader).read_to_string(&mut text)?;
    let body: String = text.lines().skip(opts.skip_lines).collect::<Vec<_>>().join("\n");
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            location: "header".into(),
            message: "need a date column and at least one maturity".into(),
        });
    }
    let mut cols: Vec<(usize, f64)> = Vec::new();
    let mut errors = Vec::new();
    for (j, name) in header.iter().enumerate().skip(1) {
        match opts.dictionary.months(name) {
            Some(m) => cols.push((j, m)),
            None => errors.push(format!("header: unknown maturity column '{name}'")),
        }
    }
    if !errors.is_empty() {
        return Err(report(errors));
    }
    cols.sort_by(|a, b| a.1.total_cmp(&b.1));
    if cols.windows(2).any(|w| w[0].1 == w[1].1) {
        return Err(Error::Parse {
            location: "header".into(),
            message: "duplicate maturity".into(),
        });
    }
    let mut dates = Vec::new();
    let mut yields = Vec::new();
    let mut dropped = 0;
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2 + opts.skip_lines;
        let rec = rec?;
        let Some(date) = parse_date(rec.get(0).unwrap_or("")) else {
            errors.push(format!("line {line}: unparseable date '{}'", rec.get(0).unwrap_or("")));
            continue;
        };
        let mut row = Vec::with_capacity(cols.len());
        for &(j, _) in &cols {
            let cell = rec.get(j).unwrap_or("").trim();
            if MISSING.contains(&cell) {
                row.push(None);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(Some(v)),
                    _ => {
                        errors.push(format!("line {line}, column '{}': non-numeric '{cell}'", &header[j]));
                        row.push(None);
                    }
                }
            }
        }
        if row.iter().all(Option::is_none) {
            dropped += 1;
            continue;
        }
        dates.push(date);
        yields.push(row);
    }
    if !errors.is_empty() {
        return Err(report(errors));
    }
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parse {
            location: "dates".into(),
            message: "dates must be strictly increasing".into(),
        });
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with no yields");
    }
    Ok(YieldDataset {
        kind: opts.kind,
        dates,
        maturities: cols.iter().map(|c| c.1).collect(),
        yields,
        dropped_rows: dropped,
    })
}

pub fn ingest_yields(path: &Path, opts: &IngestOptions) -> Result<YieldDataset> {
    read_yields(File::open(path)?, opts)
}

/// Plain dataset layout: grid points and per-time observed points and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub grid: Vec<f64>,
    pub times: Vec<TimeRecord>,
    /// Latent curves on the grid, when simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Vec<Vec<f64>>>,
    /// True kernels on the grid by lag, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<Vec<Vec<f64>>>>,
    /// Maturities in months per grid point, for yield data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maturities: Option<Vec<f64>>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRecord {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

fn vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.as_slice().to_vec()).collect()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl DatasetFile {
    pub fn from_observations(set: &ObservationSet) -> Self {
        Self {
            grid: set.grid.points().to_vec(),
            times: set
                .times
                .iter()
                .map(|o| TimeRecord {
                    points: o.points.clone(),
                    values: o.values.as_slice().to_vec(),
                })
                .collect(),
            truth: None,
            oracle: None,
            psi: None,
            maturities: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn with_simulation(mut self, truth: &[DVector<f64>], oracle: &[DVector<f64>], psi: &[DMatrix<f64>]) -> Self {
        self.truth = Some(vecs(truth));
        self.oracle = Some(vecs(oracle));
        self.psi = Some(psi.iter().map(rows_of).collect());
        self
    }

    pub fn observations(&self) -> Result<ObservationSet> {
        let grid = EvaluationGrid::new(self.grid.clone())?;
        ObservationSet::new(
            grid,
            self.times.iter().map(|t| (t.points.clone(), t.values.clone())).collect(),
        )
    }

    pub fn truth_vectors(&self) -> Option<Vec<DVector<f64>>> {
        self.truth.as_ref().map(|t| t.iter().map(|v| DVector::from_column_slice(v)).collect())
    }

    pub fn oracle_vectors(&self) -> Option<Vec<DVector<f64>>> {
        self.oracle.as_ref().map(|t| t.iter().map(|v| DVector::from_column_slice(v)).collect())
    }

    pub fn psi_matrices(&self) -> Option<Vec<DMatrix<f64>>> {
        self.psi.as_ref().map(|ps| {
            ps.iter()
                .map(|rows| {
                    let n = rows.len();
                    DMatrix::from_fn(n, rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
                })
                .collect()
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }
}

impl From<&YieldDataset> for DatasetFile {
    fn from(y: &YieldDataset) -> Self {
        let mut out = y
            .to_observations()
            .map(|s| Self::from_observations(&s))
            .expect("maturities are validated at ingestion");
        out.maturities = Some(y.maturities.clone());
        out.metadata = serde_json::json!({
            "kind": y.kind,
            "dates": y.dates.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
            "dropped_rows": y.dropped_rows,
        });
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub description: String,
}

/// Sidecar describing a columnar draws file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsSchema {
    pub format: String,
    pub rows: usize,
    pub columns: Vec<ColumnSchema>,
    pub metadata: serde_json::Value,
}

/// Per-draw scalars and the forecast trace as CSV, one row per kept draw.
pub fn write_draws(csv_path: &Path, schema_path: &Path, draws: &GibbsDraws, metadata: serde_json::Value) -> Result<()> {
    let mut cols: Vec<(String, String, Vec<f64>)> = Vec::new();
    let n = draws.sigma_nu2.len();
    let col = |name: String, desc: &str, v: Vec<f64>| (name, desc.to_owned(), v);
    cols.push(col("sigma_nu2".into(), "observation error variance", draws.sigma_nu2.clone()));
    if draws.sigma_eta2.len() == n {
        cols.push(col("sigma_eta2".into(), "innovation nugget variance", draws.sigma_eta2.clone()));
    }
    cols.push(col(
        "p_star".into(),
        "largest included lag",
        draws.p_star.iter().map(|&p| p as f64).collect(),
    ));
    let p = draws.inclusion.first().map_or(0, Vec::len);
    for l in 0..p {
        cols.push(col(
            format!("s_{}", l + 1),
            "lag inclusion indicator",
            draws.inclusion.iter().map(|s| s[l] as u8 as f64).collect(),
        ));
    }
    let j = draws.factor_var.first().map_or(0, Vec::len);
    for k in 0..j {
        cols.push(col(
            format!("factor_var_{}", k + 1),
            "factor variance",
            draws.factor_var.iter().map(|v| v[k]).collect(),
        ));
    }
    for l in 0..draws.lambda_psi.first().map_or(0, Vec::len) {
        cols.push(col(
            format!("lambda_psi_{}", l + 1),
            "kernel smoothing precision",
            draws.lambda_psi.iter().map(|v| v[l]).collect(),
        ));
    }
    for l in 0..draws.kappa.first().map_or(0, Vec::len) {
        cols.push(col(
            format!("kappa_{}", l + 1),
            "kernel penalty mix",
            draws.kappa.iter().map(|v| v[l]).collect(),
        ));
    }
    if draws.matern.len() == n && n > 0 {
        cols.push(col("matern_s2".into(), "Matérn variance", draws.matern.iter().map(|m| m.0).collect()));
        cols.push(col("matern_rho2".into(), "Matérn range", draws.matern.iter().map(|m| m.1).collect()));
    }
    if draws.trace.len() == n {
        for i in 0..draws.trace.first().map_or(0, |v| v.len()) {
            cols.push(col(
                format!("forecast_{i}"),
                "first-origin forecast at grid point",
                draws.trace.iter().map(|v| v[i]).collect(),
            ));
        }
    }
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(std::iter::once("draw".to_owned()).chain(cols.iter().map(|c| c.0.clone())))?;
    for r in 0..n {
        let mut rec = vec![r.to_string()];
        rec.extend(cols.iter().map(|c| c.2[r].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let schema = DrawsSchema {
        format: "csv".into(),
        rows: n,
        columns: std::iter::once(ColumnSchema {
            name: "draw".into(),
            description: "kept draw index".into(),
        })
        .chain(cols.iter().map(|c| ColumnSchema {
            name: c.0.clone(),
            description: c.1.clone(),
        }))
        .collect(),
        metadata,
    };
    write_json(schema_path, &schema)
}

/// Columns of a draws CSV by name.
pub fn read_draws(csv_path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut r = csv::Reader::from_path(csv_path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut out: BTreeMap<String, Vec<f64>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (name, cell) in names.iter().zip(rec.iter()) {
            let v = cell.parse().map_err(|_| Error::Parse {
                location: format!("line {}, column {name}", line + 2),
                message: format!("non-numeric '{cell}'"),
            })?;
            out.get_mut(name).expect("column").push(v);
        }
    }
    Ok(out)
}

pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Result rows under a metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub metadata: serde_json::Value,
    pub rows: Vec<ResultRow>,
}

pub fn write_rows_json(path: &Path, rows: &[ResultRow], metadata: serde_json::Value) -> Result<()> {
    write_json(
        path,
        &ResultsFile {
            metadata,
            rows: rows.to_vec(),
        },
    )
}

/// Grid-indexed vectors as CSV with one column per grid point.
pub fn write_curves_csv(path: &Path, grid: &[f64], labels: &[String], curves: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once("label".to_owned()).chain(grid.iter().map(|g| g.to_string())))?;
    for (l, c) in labels.iter().zip(curves) {
        w.write_record(std::iter::once(l.clone()).chain(c.iter().map(|v| v.to_string())))?;
    }
    w.flush()?;
    Ok(())
}
