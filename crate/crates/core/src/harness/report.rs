use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::ser::Error as _;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use super::plan::ExperimentPlan;
use super::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

/// Serializes as a JSON number with exactly four decimals.
fn fixed4<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return Err(S::Error::custom("non-finite value in report"));
    }
    RawValue::from_string(format!("{v:.4}")).map_err(S::Error::custom)?.serialize(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub shots: usize,
    #[serde(serialize_with = "fixed4")]
    pub mean: f64,
    #[serde(serialize_with = "fixed4")]
    pub std: f64,
}

/// One row per (strategy, shots), sorted by strategy name then shots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    #[serde(default)]
    pub label: String,
    rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(label: impl Into<String>, mut rows: Vec<ResultRow>) -> Result<Self> {
        rows.sort_by(|a, b| (&a.strategy, a.shots).cmp(&(&b.strategy, b.shots)));
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert((r.strategy.as_str(), r.shots)) {
                return Err(HarnessError::Report(format!("duplicate row ({}, {})", r.strategy, r.shots)));
            }
            if !(r.mean.is_finite() && r.std.is_finite()) {
                return Err(HarnessError::Report(format!("non-finite value in row ({}, {})", r.strategy, r.shots)));
            }
        }
        Ok(Self { label: label.into(), rows })
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn row(&self, strategy: &str, shots: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.shots == shots)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-language test scores of one evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub table: String,
    pub strategy: String,
    pub shots: usize,
    /// Shot-set seed (few-shot only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shot_seed: Option<u64>,
    /// Training seed; absent for models averaged across seeds.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub scores: BTreeMap<String, f64>,
}

/// Everything an experiment produces: the resolved plan it ran, the summary
/// tables and the per-model scores behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plan: ExperimentPlan,
    pub tables: Vec<ResultTable>,
    pub runs: Vec<RunScore>,
}

impl ExperimentReport {
    pub fn table(&self, label: &str) -> Option<&ResultTable> {
        self.tables.iter().find(|t| t.label == label)
    }

    pub fn write_json(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| HarnessError::Report(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Report(e.to_string()))
    }
}

/// Writes one table. CSV has the header `strategy,shots,mean,std`.
pub fn emit_report(table: &ResultTable, mut w: impl Write, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            writeln!(w, "strategy,shots,mean,std")?;
            for r in &table.rows {
                writeln!(w, "{},{},{:.4},{:.4}", r.strategy, r.shots, r.mean, r.std)?;
            }
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, table).map_err(|e| HarnessError::Report(e.to_string()))?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Several tables in one stream. CSV gains a leading `table` column.
pub fn emit_tables(tables: &[ResultTable], mut w: impl Write, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            writeln!(w, "table,strategy,shots,mean,std")?;
            for t in tables {
                for r in &t.rows {
                    writeln!(w, "{},{},{},{:.4},{:.4}", t.label, r.strategy, r.shots, r.mean, r.std)?;
                }
            }
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, tables).map_err(|e| HarnessError::Report(e.to_string()))?;
            writeln!(w)?;
        }
    }
    Ok(())
}
