//! Metric CSV files.

use std::path::Path;

use crate::CliResult;

pub const METRICS_HEADER: [&str; 8] = ["variant", "epe", "cd", "cdn", "std_e", "std_v", "params", "seed"];

/// One metrics row; absent metrics are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub epe: Option<f64>,
    pub cd: Option<f64>,
    pub cdn: Option<f64>,
    pub std_e: Option<f64>,
    pub std_v: Option<f64>,
    pub params: usize,
    pub seed: u64,
}

fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:e}"))
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            field(r.epe),
            field(r.cd),
            field(r.cdn),
            field(r.std_e),
            field(r.std_v),
            r.params.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Option<f64> { (!s.is_empty()).then(|| s.parse().ok()).flatten() };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(MetricsRow {
            variant: rec[0].to_string(),
            epe: parse(&rec[1]),
            cd: parse(&rec[2]),
            cdn: parse(&rec[3]),
            std_e: parse(&rec[4]),
            std_v: parse(&rec[5]),
            params: rec[6].parse().unwrap_or(0),
            seed: rec[7].parse().unwrap_or(0),
        });
    }
    Ok(out)
}
