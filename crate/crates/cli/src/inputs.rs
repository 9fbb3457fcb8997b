use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use mnar_core::treatment::Covariates;
use mnar_core::{load_panel, Error, ObservedPanel, PanelFormat, Result, TreatmentAssignment};

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_panel(path: &Path, format: PanelFormat) -> Result<ObservedPanel> {
    load_panel(open(path)?, format)
}

pub fn index_of(labels: &[String]) -> HashMap<&str, usize> {
    labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
}

pub fn lookup(index: &HashMap<&str, usize>, label: &str, what: &str) -> Result<usize> {
    index
        .get(label)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown {what} `{label}`")))
}

pub fn lookup_all(labels: &[String], wanted: &[String], what: &str) -> Result<Vec<usize>> {
    let index = index_of(labels);
    wanted.iter().map(|w| lookup(&index, w.trim(), what)).collect()
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?))
}

fn line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

/// `unit,treatment` rows covering every unit of the panel exactly once.
pub fn read_assignment(path: &Path, panel: &ObservedPanel, pilot_start: usize) -> Result<TreatmentAssignment> {
    let units = index_of(panel.unit_labels());
    let mut treatment_of: Vec<Option<usize>> = vec![None; panel.nrows()];
    let mut rdr = reader(path)?;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse {
                line: line(&rec),
                msg: "expected `unit,treatment`".into(),
            });
        }
        let i = lookup(&units, &rec[0], "unit").map_err(|e| Error::Parse {
            line: line(&rec),
            msg: e.to_string(),
        })?;
        let d: usize = rec[1].parse().map_err(|_| Error::Parse {
            line: line(&rec),
            msg: format!("treatment id `{}` is not a nonnegative integer", &rec[1]),
        })?;
        if treatment_of[i].replace(d).is_some() {
            return Err(Error::Parse {
                line: line(&rec),
                msg: format!("unit `{}` assigned twice", &rec[0]),
            });
        }
    }
    let ids = treatment_of
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.ok_or_else(|| Error::InvalidArgument(format!("unit `{}` has no treatment assignment", panel.unit_labels()[i])))
        })
        .collect::<Result<Vec<_>>>()?;
    TreatmentAssignment::from_labels(&ids, pilot_start)
}

/// `unit,time,x1,...,xp` rows covering every cell of the panel.
pub fn read_covariates(path: &Path, panel: &ObservedPanel) -> Result<Covariates> {
    let units = index_of(panel.unit_labels());
    let times = index_of(panel.time_labels());
    let mut rdr = reader(path)?;
    let p = rdr.headers()?.len().saturating_sub(2);
    if p == 0 {
        return Err(Error::InvalidArgument("covariate file needs columns unit,time,x1,...".into()));
    }
    let (n, m) = (panel.nrows(), panel.ncols());
    let mut cov = Covariates::zeros(n, m, p);
    let mut seen = vec![false; n * m];
    for rec in rdr.records() {
        let rec = rec?;
        let at = line(&rec);
        let parse_err = |msg: String| Error::Parse { line: at, msg };
        if rec.len() != p + 2 {
            return Err(parse_err(format!("expected {} fields, found {}", p + 2, rec.len())));
        }
        let i = lookup(&units, &rec[0], "unit").map_err(|e| parse_err(e.to_string()))?;
        let t = lookup(&times, &rec[1], "time").map_err(|e| parse_err(e.to_string()))?;
        if std::mem::replace(&mut seen[i * m + t], true) {
            return Err(Error::DuplicateKey {
                unit: rec[0].to_string(),
                time: rec[1].to_string(),
            });
        }
        for (k, slot) in cov.get_mut(i, t).iter_mut().enumerate() {
            let v: f64 = rec[k + 2]
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_err(format!("covariate `{}` is not a finite number", &rec[k + 2])))?;
            *slot = v;
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!(
            "covariates missing for unit `{}` at time `{}`",
            panel.unit_labels()[c / m],
            panel.time_labels()[c % m]
        )));
    }
    Ok(cov)
}

pub fn read_beta(path: &Path) -> Result<Vec<f64>> {
    serde_json::from_reader(open(path)?)
        .map_err(|e| Error::Parse {
            line: e.line() as u64,
            msg: format!("beta must be a JSON array of numbers: {e}"),
        })
}
