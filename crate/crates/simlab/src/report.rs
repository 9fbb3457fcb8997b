use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mnar_core::output::format_f64;
use mnar_core::{Error, Result};

use crate::experiment::{ExperimentReport, ReplicationRecord};

const HEADER: [&str; 10] = [
    "rep", "target", "unit", "period", "estimate", "truth", "variance", "standardized", "baseline", "error",
];

fn record_row(r: &ReplicationRecord) -> [String; 10] {
    [
        r.rep.to_string(),
        r.target.clone(),
        r.unit.to_string(),
        r.period.to_string(),
        format_f64(r.estimate),
        format_f64(r.truth),
        format_f64(r.variance),
        format_f64(r.standardized),
        r.baseline.map(format_f64).unwrap_or_default(),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn write_records_csv<W: Write>(writer: W, records: &[ReplicationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary_json(report: &ExperimentReport) -> Result<String> {
    serde_json::to_string_pretty(&report.summary).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Writes `replications.csv` and `summary.json` into `dir`, returning the
/// paths written.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("replications.csv");
    write_records_csv(BufWriter::new(File::create(&csv_path)?), &report.records)?;
    let json_path = dir.join("summary.json");
    std::fs::write(&json_path, summary_json(report)? + "\n")?;
    Ok(vec![csv_path, json_path])
}
