//! Tabular output (CSV and JSON) with a fixed column order and 6 significant
//! digits, plus the run manifest embedded in every output file.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(x) => Some(*x),
            Cell::Text(s) => s.parse().ok(),
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format_sig(*x, 6),
            Cell::Text(s) => s.clone(),
        }
    }

    fn is_finite(&self) -> bool {
        !matches!(self, Cell::Float(x) if !x.is_finite())
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::InvalidInput(format!("unknown format '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Dimension(format!(
                "row has {} cells but the table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Index of the first non-finite float, as `(row, column)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.rows.iter().enumerate().find_map(|(r, row)| {
            row.iter().position(|c| !c.is_finite()).map(|c| (r, c))
        })
    }
}

/// Column layout of the minimax design table.
pub const TABLE3_COLUMNS: [&str; 8] = ["Response", "N", "nu", "Inu(I)", "Inu(P^nu)", "T1", "T2", "T3"];

/// Column layout of the simulation tables; each mean is followed by its standard error.
pub const SIM_COLUMNS: [&str; 17] = [
    "Response", "N", "nu", "%I_n", "Inu(I)", "Inu(I)_se", "Inu(P^nu)", "Inu(P^nu)_se", "T1", "T1_se", "T2",
    "T2_se", "T3", "T3_se", "n", "runs", "redraw_rate",
];

pub fn table3_table(rows: &[(&str, usize, f64, &crate::designopt::DesignOptResult)]) -> Result<Table> {
    let mut t = Table::new(&TABLE3_COLUMNS);
    for (model, big_n, nu, r) in rows {
        t.push(vec![
            (*model).into(),
            (*big_n).into(),
            (*nu).into(),
            r.identity_breakdown.inu.into(),
            r.breakdown.inu.into(),
            r.t.t1.into(),
            r.t.t2.into(),
            r.t.t3.into(),
        ])?;
    }
    Ok(t)
}

pub fn sim_table(rows: &[(&str, usize, f64, &crate::simlab::SimSummary)]) -> Result<Table> {
    let mut t = Table::new(&SIM_COLUMNS);
    for (model, big_n, nu, s) in rows {
        t.push(vec![
            (*model).into(),
            (*big_n).into(),
            (*nu).into(),
            s.pct_identity.into(),
            s.inu_identity.mean.into(),
            s.inu_identity.se.into(),
            s.inu_p.mean.into(),
            s.inu_p.se.into(),
            s.t1.mean.into(),
            s.t1.se.into(),
            s.t2.mean.into(),
            s.t2.se.into(),
            s.t3.mean.into(),
            s.t3.se.into(),
            s.n.into(),
            s.runs.into(),
            s.redraw_rate.into(),
        ])?;
    }
    Ok(t)
}

/// `%g`-style formatting with `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_csv<W: Write>(table: &Table, manifest: Option<&RunManifest>, mut out: W) -> Result<()> {
    if let Some(m) = manifest {
        writeln!(out, "# manifest: {}", serde_json::to_string(m)?)?;
    }
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|c| c.render()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(table: &Table, manifest: Option<&RunManifest>, mut out: W) -> Result<()> {
    let rows: Vec<Vec<Value>> = table
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| match c {
                    Cell::Int(i) => Value::from(*i),
                    // printed precision, kept numeric
                    Cell::Float(x) => serde_json::from_str(&format_sig(*x, 6))
                        .unwrap_or_else(|_| Value::String(format_sig(*x, 6))),
                    Cell::Text(s) => Value::String(s.clone()),
                })
                .collect()
        })
        .collect();
    let doc = serde_json::json!({
        "manifest": manifest,
        "columns": table.columns,
        "rows": rows,
    });
    serde_json::to_writer_pretty(&mut out, &doc)?;
    writeln!(out)?;
    Ok(())
}

/// Writes the table in the requested format; non-finite floats are rejected.
pub fn emit_table<W: Write>(table: &Table, format: Format, manifest: Option<&RunManifest>, out: W) -> Result<()> {
    if let Some((r, c)) = table.first_non_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite value in row {r}, column '{}'",
            table.columns[c]
        )));
    }
    match format {
        Format::Csv => write_csv(table, manifest, out),
        Format::Json => write_json(table, manifest, out),
    }
}

fn parse_cell(s: &str) -> Cell {
    if let Ok(i) = s.parse::<i64>() {
        Cell::Int(i)
    } else if let Ok(x) = s.parse::<f64>() {
        Cell::Float(x)
    } else {
        Cell::Text(s.to_string())
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let columns = r.headers()?.iter().map(|s| s.to_string()).collect();
    let mut table = Table {
        columns,
        rows: Vec::new(),
    };
    for rec in r.records() {
        table.rows.push(rec?.iter().map(parse_cell).collect());
    }
    Ok(table)
}

pub fn read_json<R: Read>(input: R) -> Result<Table> {
    #[derive(Deserialize)]
    struct Doc {
        columns: Vec<String>,
        rows: Vec<Vec<Cell>>,
    }
    let doc: Doc = serde_json::from_reader(input)?;
    Ok(Table {
        columns: doc.columns,
        rows: doc.rows,
    })
}
