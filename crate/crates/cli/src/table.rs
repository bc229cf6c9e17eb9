//! CSV ingestion and output.
//!
//! Per-subject tables are wide (`subject_id` plus one numeric column per
//! variable); functional covariates are long (`subject_id,time,value`).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub const ID_COLUMN: &str = "subject_id";

pub struct WideTable {
    pub ids: Vec<String>,
    /// Numeric columns in file order.
    pub columns: Vec<(String, Vec<f64>)>,
}

impl WideTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

fn open(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> CliError {
    let line = err.position().map(|p| p.line());
    let what = match err.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("expected {expected_len} fields, found {len}"),
        csv::ErrorKind::Io(e) => e.to_string(),
        _ => err.to_string(),
    };
    match line {
        Some(l) => CliError::Validation(format!("{}: line {l}: {what}", path.display())),
        None => CliError::Validation(format!("{}: {what}", path.display())),
    }
}

fn parse_number(path: &Path, line: u64, column: &str, text: &str) -> CliResult<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            CliError::Validation(format!(
                "{}: line {line}: column `{column}` has non-numeric value `{text}`",
                path.display()
            ))
        })
}

fn headers(path: &Path, rdr: &mut csv::Reader<std::fs::File>) -> CliResult<Vec<String>> {
    let h = rdr.headers().map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = h.iter().map(str::to_string).collect();
    if !names.iter().any(|n| n == ID_COLUMN) {
        return Err(CliError::Validation(format!(
            "{}: missing `{ID_COLUMN}` column",
            path.display()
        )));
    }
    Ok(names)
}

pub fn read_wide(path: &Path) -> CliResult<WideTable> {
    let mut rdr = open(path)?;
    let names = headers(path, &mut rdr)?;
    let id_at = names.iter().position(|n| n == ID_COLUMN).expect("checked");
    let mut ids = Vec::new();
    let mut columns: Vec<(String, Vec<f64>)> = names
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id_at)
        .map(|(_, n)| (n.clone(), Vec::new()))
        .collect();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[id_at].to_string();
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(CliError::Validation(format!(
                "{}: line {line}: subject `{id}` already listed on line {prev}",
                path.display()
            )));
        }
        ids.push(id);
        let mut c = 0;
        for (i, field) in rec.iter().enumerate() {
            if i == id_at {
                continue;
            }
            let v = parse_number(path, line, &columns[c].0, field)?;
            columns[c].1.push(v);
            c += 1;
        }
    }
    if ids.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(WideTable { ids, columns })
}

/// `(times, values)` per subject in file order.
pub type LongTable = HashMap<String, (Vec<f64>, Vec<f64>)>;

pub fn read_long(path: &Path) -> CliResult<LongTable> {
    let mut rdr = open(path)?;
    let names = headers(path, &mut rdr)?;
    let find = |name: &str| {
        names.iter().position(|n| n == name).ok_or_else(|| {
            CliError::Validation(format!("{}: missing `{name}` column", path.display()))
        })
    };
    let (id_at, t_at, v_at) = (find(ID_COLUMN)?, find("time")?, find("value")?);
    let mut out: LongTable = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let t = parse_number(path, line, "time", &rec[t_at])?;
        let v = parse_number(path, line, "value", &rec[v_at])?;
        let e = out.entry(rec[id_at].to_string()).or_default();
        e.0.push(t);
        e.1.push(v);
    }
    Ok(out)
}

/// Writes rows of already formatted fields.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let fail = |e: csv::Error| CliError::Validation(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}
