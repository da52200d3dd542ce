//! Run records, accuracy curves, CSV/plotdata output and layer-ratio tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pruning::{layer_ratio_diagnostic, Mask};

pub const SCHEMA_VERSION: u32 = 1;

/// Pinned column order of the curves CSV.
pub const CURVE_COLUMNS: [&str; 8] = [
    "condition",
    "source",
    "target",
    "remaining_fraction",
    "prune_fraction",
    "mean_acc",
    "std_acc",
    "n",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to aggregate")]
    Empty,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("layer sets differ between pruning levels: {0}")]
    LayerMismatch(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One training run's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub condition: String,
    pub source_id: String,
    pub target_id: String,
    pub pruning_iteration: usize,
    pub remaining_fraction: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
    pub wall_time: f64,
}

/// A grid cell that did not produce a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub condition: String,
    pub pruning_iteration: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub records: Vec<RunRecord>,
    #[serde(default)]
    pub failures: Vec<CellFailure>,
}

impl Default for ExperimentResult {
    fn default() -> Self {
        ExperimentResult {
            schema_version: SCHEMA_VERSION,
            records: Vec::new(),
            failures: Vec::new(),
        }
    }
}

impl ExperimentResult {
    pub fn new(records: Vec<RunRecord>) -> Self {
        ExperimentResult {
            records,
            ..Default::default()
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ReportError::Schema(format!(
                "schema version {} not supported",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert((r.condition.as_str(), r.pruning_iteration, r.seed)) {
                return Err(ReportError::Schema(format!(
                    "duplicate record for condition `{}`, iteration {}, seed {}",
                    r.condition, r.pruning_iteration, r.seed
                )));
            }
            if !(r.remaining_fraction > 0.0 && r.remaining_fraction <= 1.0) {
                return Err(ReportError::Schema(format!(
                    "remaining_fraction {} outside (0, 1]",
                    r.remaining_fraction
                )));
            }
            if !(0.0..=1.0).contains(&r.test_accuracy) {
                return Err(ReportError::Schema(format!("test_accuracy {} outside [0, 1]", r.test_accuracy)));
            }
        }
        Ok(())
    }

    /// Mean test accuracy of one condition at one pruning iteration.
    pub fn mean_accuracy(&self, condition: &str, iteration: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.condition == condition && r.pruning_iteration == iteration)
            .map(|r| r.test_accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Writes records as CSV, one row per run.
pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ReportError::Csv(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ReportError::Csv(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| ReportError::Csv(format!("{}: {e}", path.display()))))
        .collect()
}

/// One aggregated point of an accuracy curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub condition: String,
    pub source: String,
    pub target: String,
    pub remaining_fraction: f64,
    pub prune_fraction: f64,
    pub mean_acc: f64,
    /// Sample standard deviation; 0 when `n == 1`.
    pub std_acc: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (n − 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Groups records by condition, source, target and pruning iteration.
/// Output is ordered by condition, then remaining fraction descending.
pub fn aggregate_curves(result: &ExperimentResult) -> Result<Vec<CurvePoint>, ReportError> {
    if result.records.is_empty() {
        return Err(ReportError::Empty);
    }
    result.validate()?;
    let mut groups: BTreeMap<(&str, &str, &str, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for r in &result.records {
        let g = groups
            .entry((&r.condition, &r.source_id, &r.target_id, r.pruning_iteration))
            .or_insert((r.remaining_fraction, Vec::new()));
        if g.0 != r.remaining_fraction {
            return Err(ReportError::Schema(format!(
                "condition `{}` iteration {} has inconsistent remaining fractions",
                r.condition, r.pruning_iteration
            )));
        }
        g.1.push(r.test_accuracy);
    }
    let mut points: Vec<CurvePoint> = groups
        .into_iter()
        .map(|((condition, source, target, _), (remaining, mut accs))| {
            // Summation order fixed so the result ignores record order.
            accs.sort_by(f64::total_cmp);
            let (mean_acc, std_acc) = mean_std(&accs);
            CurvePoint {
                condition: condition.to_string(),
                source: source.to_string(),
                target: target.to_string(),
                remaining_fraction: remaining,
                prune_fraction: 1.0 - remaining,
                mean_acc,
                std_acc,
                n: accs.len(),
            }
        })
        .collect();
    points.sort_by(|a, b| {
        (&a.condition, &a.source, &a.target)
            .cmp(&(&b.condition, &b.source, &b.target))
            .then(b.remaining_fraction.total_cmp(&a.remaining_fraction))
    });
    Ok(points)
}

/// Curves CSV text with the pinned header. Floats use the shortest
/// representation that parses back to the same value.
pub fn curves_to_csv(curves: &[CurvePoint]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ReportError::Csv(e.to_string());
    w.write_record(CURVE_COLUMNS).map_err(err)?;
    for c in curves {
        w.write_record([
            c.condition.clone(),
            c.source.clone(),
            c.target.clone(),
            format!("{:?}", c.remaining_fraction),
            format!("{:?}", c.prune_fraction),
            format!("{:?}", c.mean_acc),
            format!("{:?}", c.std_acc),
            c.n.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Csv(e.to_string()))
}

pub fn curves_from_csv(text: &str) -> Result<Vec<CurvePoint>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| ReportError::Csv(e.to_string()))?;
    if headers.iter().ne(CURVE_COLUMNS) {
        return Err(ReportError::Schema(format!("unexpected header {headers:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| ReportError::Csv(e.to_string()))?;
        let bad = |col: &str| ReportError::Schema(format!("row {}: bad `{col}`", i + 1));
        let f = |idx: usize| rec[idx].parse::<f64>().map_err(|_| bad(CURVE_COLUMNS[idx]));
        out.push(CurvePoint {
            condition: rec[0].to_string(),
            source: rec[1].to_string(),
            target: rec[2].to_string(),
            remaining_fraction: f(3)?,
            prune_fraction: f(4)?,
            mean_acc: f(5)?,
            std_acc: f(6)?,
            n: rec[7].parse().map_err(|_| bad("n"))?,
        });
    }
    Ok(out)
}

pub fn emit_csv(curves: &[CurvePoint], path: &Path) -> Result<(), ReportError> {
    fs::write(path, curves_to_csv(curves)?).map_err(io_err(path))
}

pub fn parse_curves_csv(path: &Path) -> Result<Vec<CurvePoint>, ReportError> {
    curves_from_csv(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Whitespace-separated blocks, one per (condition, source, target),
/// separated by two blank lines:
///
/// ```text
/// # condition=transferred source=a target=b
/// # remaining_fraction prune_fraction mean_acc std_acc n
/// 0.8 0.2 0.91 0.01 6
/// ```
pub fn plotdata(curves: &[CurvePoint]) -> String {
    let mut out = String::new();
    let mut current: Option<(&str, &str, &str)> = None;
    for c in curves {
        let key = (c.condition.as_str(), c.source.as_str(), c.target.as_str());
        if current != Some(key) {
            if current.is_some() {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# condition={} source={} target={}", c.condition, c.source, c.target);
            out.push_str("# remaining_fraction prune_fraction mean_acc std_acc n\n");
            current = Some(key);
        }
        let _ = writeln!(
            out,
            "{:?} {:?} {:?} {:?} {}",
            c.remaining_fraction, c.prune_fraction, c.mean_acc, c.std_acc, c.n
        );
    }
    out
}

pub fn emit_plotdata(curves: &[CurvePoint], path: &Path) -> Result<(), ReportError> {
    fs::write(path, plotdata(curves)).map_err(io_err(path))
}

/// Global-to-layerwise pruning-rate ratios: rows are layers in depth
/// order, columns are pruning levels.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioTable {
    pub layers: Vec<String>,
    pub levels: Vec<usize>,
    /// `values[layer][level]`
    pub values: Vec<Vec<f64>>,
}

impl RatioTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for l in &self.levels {
            let _ = write!(out, ",level_{l}");
        }
        out.push('\n');
        for (name, row) in self.layers.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

/// Ratio table for a sequence of masks from one global-pruning run; the
/// level of `masks[i]` is `i + 1`.
pub fn ratio_report(masks: &[Mask]) -> Result<RatioTable, ReportError> {
    let first = masks.first().ok_or(ReportError::Empty)?;
    let layers: Vec<String> = first.names().map(str::to_string).collect();
    let mut values = vec![Vec::with_capacity(masks.len()); layers.len()];
    for (level, m) in masks.iter().enumerate() {
        let diag = layer_ratio_diagnostic(m);
        let names: Vec<&str> = diag.iter().map(|(n, _)| n.as_str()).collect();
        if names != layers.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(ReportError::LayerMismatch(format!("level {}", level + 1)));
        }
        for (row, (_, r)) in values.iter_mut().zip(diag) {
            row.push(r);
        }
    }
    Ok(RatioTable {
        layers,
        levels: (1..=masks.len()).collect(),
        values,
    })
}
