//! Convergence tables, iteration logs and run directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// One row of `convergence.csv`. Error columns are empty when a method was
/// not run (or has no reference value) at that iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub experiment: String,
    /// Repeat index, or `mean` for the average over repeats.
    pub repeat: String,
    pub iteration: usize,
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "D")]
    pub d: usize,
    pub err_adaptive: Option<f64>,
    pub err_prior_rule: Option<f64>,
    pub err_tensor_cc: Option<f64>,
    pub err_smolyak: Option<f64>,
    #[serde(rename = "e_N")]
    pub e_n: Option<f64>,
}

pub const CSV_HEADER: &str = "experiment,repeat,iteration,N,D,err_adaptive,err_prior_rule,err_tensor_cc,err_smolyak,e_N";

/// One JSON line per adaptive iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub experiment: String,
    pub repeat: usize,
    pub iteration: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub node_count: usize,
    pub new_nodes: usize,
    pub estimate: Vec<f64>,
    #[serde(rename = "e_N")]
    pub e_n: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
}

/// Appends `mean` rows: for each experiment label and iteration, the average
/// of every column over the repeats that reached it. A column's mean is empty
/// unless every such repeat has a value.
pub fn with_means(rows: Vec<CsvRow>) -> Vec<CsvRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&CsvRow>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.experiment) {
            order.push(r.experiment.clone());
        }
        groups.entry((r.experiment.clone(), r.iteration)).or_default().push(r);
    }
    let mean_of = |g: &[&CsvRow], f: &dyn Fn(&CsvRow) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = g.iter().map(|r| f(r)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut means = Vec::new();
    for label in &order {
        for ((exp, it), g) in groups.range((label.clone(), 0)..=(label.clone(), usize::MAX)) {
            means.push(CsvRow {
                experiment: exp.clone(),
                repeat: "mean".into(),
                iteration: *it,
                n: g.iter().map(|r| r.n).sum::<f64>() / g.len() as f64,
                d: g[0].d,
                err_adaptive: mean_of(g, &|r| r.err_adaptive),
                err_prior_rule: mean_of(g, &|r| r.err_prior_rule),
                err_tensor_cc: mean_of(g, &|r| r.err_tensor_cc),
                err_smolyak: mean_of(g, &|r| r.err_smolyak),
                e_n: mean_of(g, &|r| r.e_n),
            });
        }
    }
    let mut out = rows;
    out.extend(means);
    out
}

pub fn csv_string(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    fs::write(path, csv_string(rows)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
