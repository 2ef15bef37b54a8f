//! Experiment runner: configuration, the named experiments, and their
//! `results.csv` / `report.json` / `constants.json` artifacts.

mod config;
mod experiments;
mod io;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

pub use config::{
    CircleMapConfig, CostKind, ExperimentConfig, ExperimentId, GridConfig, MethodKind, OtConfig, OutputConfig,
    TorusMapConfig,
};
pub use experiments::{correlation_observables, stability_rows, StabilityRow};
pub use io::{fmt_f64, format_measure, parse_measure, read_measure, write_atomic, write_measure, LoadedMeasure};

use crate::error::Result;

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(Cell::render).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| match &r[k] {
                    Cell::Num(v) => *v,
                    Cell::Int(v) => *v as f64,
                    Cell::Text(_) => f64::NAN,
                })
                .collect(),
        )
    }
}

/// A checked acceptance threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold {
    pub name: String,
    pub value: f64,
    pub relation: String,
    pub limit: f64,
    pub pass: bool,
}

impl Threshold {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Threshold {
            name: name.into(),
            value,
            relation: "<=".into(),
            limit,
            pass: value <= limit,
        }
    }

    pub fn above(name: &str, value: f64, limit: f64) -> Self {
        Threshold {
            name: name.into(),
            value,
            relation: ">".into(),
            limit,
            pass: value > limit,
        }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Threshold {
            name: name.into(),
            value,
            relation: ">=".into(),
            limit,
            pass: value >= limit,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentId,
    pub config: ExperimentConfig,
    pub constants: BTreeMap<String, f64>,
    pub fits: serde_json::Value,
    pub thresholds: Vec<Threshold>,
    pub pass: bool,
    pub details: serde_json::Value,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub table: Table,
}

/// Run the configured experiment; with `out_dir`, also write its three artifacts.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mut report = match config.experiment {
        ExperimentId::ExpandingDecay => experiments::expanding_decay(config)?,
        ExperimentId::AnosovDecay => experiments::anosov_decay(config)?,
        ExperimentId::StableCoupling => experiments::stable_coupling(config)?,
        ExperimentId::Stability => experiments::stability(config)?,
        ExperimentId::Ot => experiments::ot(config)?,
    };
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.pass = report.thresholds.iter().all(|t| t.pass);
    if let Some(dir) = out_dir {
        write_outputs(&report, dir)?;
    }
    Ok(report)
}

pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let out = &report.config.output;
    write_atomic(&dir.join(&out.results), report.table.to_csv().as_bytes())?;
    write_atomic(&dir.join(&out.report), pretty(report).as_bytes())?;
    write_atomic(&dir.join(&out.constants), pretty(&report.constants).as_bytes())?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}
