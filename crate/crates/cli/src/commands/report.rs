use std::io::Write;
use std::path::PathBuf;

use crate::error::{CliError, Result};
use crate::{Common, ReportArgs};

/// Columns divided by the baseline row; all others are copied through.
pub const NORMALIZED: [&str; 8] = [
    "cycles",
    "energy",
    "ops",
    "tops",
    "tops_per_w",
    "tops_per_mm2",
    "p_pe",
    "p_rac",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_tables(paths: &[PathBuf]) -> Result<Table> {
    let mut merged: Option<Table> = None;
    for path in paths {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::at(path, e))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::at(path, e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        match &mut merged {
            None => merged = Some(Table { header, rows }),
            Some(t) if t.header == header => t.rows.extend(rows),
            Some(_) => {
                return Err(CliError::validation(format!(
                    "{}: columns differ from the first input",
                    path.display()
                )))
            }
        }
    }
    merged.ok_or_else(|| CliError::validation("no input CSVs"))
}

/// Divides every normalized column by the first row where `column == value`.
pub fn normalize(table: &Table, column: &str, value: &str) -> Result<Table> {
    let key = table
        .header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| {
            CliError::validation(format!("baseline column `{column}` not in the CSV header"))
        })?;
    let base = table
        .rows
        .iter()
        .find(|r| r.get(key).map(String::as_str) == Some(value))
        .ok_or_else(|| CliError::validation(format!("no baseline row with {column}={value}")))?;
    let metric_cols: Vec<usize> = table
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| NORMALIZED.contains(&h.as_str()))
        .map(|(i, _)| i)
        .collect();
    let parse = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| CliError::validation(format!("non-numeric {what} value `{s}`")))
    };
    let mut rows = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let mut out = row.clone();
        for &c in &metric_cols {
            let name = &table.header[c];
            let v = parse(row.get(c).map_or("", String::as_str), name)?;
            let b = parse(base.get(c).map_or("", String::as_str), name)?;
            out[c] = match (v, b) {
                (Some(v), Some(b)) => (v / b).to_string(),
                _ => String::new(),
            };
        }
        rows.push(out);
    }
    Ok(Table {
        header: table.header.clone(),
        rows,
    })
}

pub fn write_table<W: Write>(table: &Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(common: &Common, args: &ReportArgs) -> Result<()> {
    let (column, value) = args.baseline.split_once('=').ok_or_else(|| {
        CliError::validation(format!(
            "--baseline `{}` is not column=value",
            args.baseline
        ))
    })?;
    let table = normalize(&read_tables(&args.inputs)?, column, value)?;
    match &common.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| CliError::at(path, e))?;
            write_table(&table, file).map_err(|e| CliError::at(path, e))
        }
        None => {
            let mut buf = Vec::new();
            write_table(&table, &mut buf)?;
            super::emit(buf)
        }
    }
}
