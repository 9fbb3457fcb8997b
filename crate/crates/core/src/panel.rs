//! Panel data model, CSV ingestion and missing-pattern classification.
//!
//! Indices are 0-based throughout. A `Block` pattern with `n0 = 3, t0 = 5`
//! means three always-observed units and five always-observed periods; an
//! adoption time `T_d` is the first missing column of group `d`.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use faer::Mat;
use serde::Serialize;

use crate::error::{Error, Result};

/// Row-major boolean observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    nrows: usize,
    ncols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_fn(nrows: usize, ncols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in 0..nrows {
            for t in 0..ncols {
                data.push(f(i, t));
            }
        }
        Mask { nrows, ncols, data }
    }

    pub fn full(nrows: usize, ncols: usize) -> Self {
        Mask {
            nrows,
            ncols,
            data: vec![true; nrows * ncols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> bool {
        self.data[i * self.ncols + t]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, observed: bool) {
        self.data[i * self.ncols + t] = observed;
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn count_missing(&self) -> usize {
        self.data.iter().filter(|&&b| !b).count()
    }

    /// Missing cells in row-major order.
    pub fn missing_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.nrows {
            for t in 0..self.ncols {
                if !self.get(i, t) {
                    out.push((i, t));
                }
            }
        }
        out
    }

    fn row_missing(&self, i: usize) -> usize {
        (0..self.ncols).filter(|&t| !self.get(i, t)).count()
    }

    fn col_missing(&self, t: usize) -> usize {
        (0..self.nrows).filter(|&i| !self.get(i, t)).count()
    }
}

/// Values plus observation mask. Unobserved cells hold `0.0` in `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPanel {
    values: Mat<f64>,
    mask: Mask,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl ObservedPanel {
    pub fn new(
        values: Mat<f64>,
        mask: Mask,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        let (n, t) = (values.nrows(), values.ncols());
        if (mask.nrows(), mask.ncols()) != (n, t) {
            return Err(Error::ShapeMismatch {
                expected: (n, t),
                got: (mask.nrows(), mask.ncols()),
            });
        }
        if unit_labels.len() != n || time_labels.len() != t {
            return Err(Error::InvalidPanel(format!(
                "{} unit labels and {} time labels for a {n}x{t} panel",
                unit_labels.len(),
                time_labels.len()
            )));
        }
        if n < 2 || t < 2 {
            return Err(Error::InvalidPanel(format!(
                "panel must be at least 2x2, got {n}x{t}"
            )));
        }
        let mut values = values;
        for i in 0..n {
            for j in 0..t {
                if mask.get(i, j) {
                    if !values[(i, j)].is_finite() {
                        return Err(Error::InvalidPanel(format!(
                            "non-finite observed value at unit `{}`, time `{}`",
                            unit_labels[i], time_labels[j]
                        )));
                    }
                } else {
                    values[(i, j)] = 0.0;
                }
            }
        }
        for i in 0..n {
            if mask.row_missing(i) == t {
                return Err(Error::InvalidPanel(format!(
                    "unit `{}` has no observed entries",
                    unit_labels[i]
                )));
            }
        }
        for j in 0..t {
            if mask.col_missing(j) == n {
                return Err(Error::InvalidPanel(format!(
                    "time `{}` has no observed entries",
                    time_labels[j]
                )));
            }
        }
        Ok(ObservedPanel {
            values,
            mask,
            unit_labels,
            time_labels,
        })
    }

    /// Panel with numeric default labels `0, 1, ...`.
    pub fn from_parts(values: Mat<f64>, mask: Mask) -> Result<Self> {
        let units = (0..values.nrows()).map(|i| i.to_string()).collect();
        let times = (0..values.ncols()).map(|t| t.to_string()).collect();
        Self::new(values, mask, units, times)
    }

    pub fn fully_observed(values: Mat<f64>) -> Result<Self> {
        let mask = Mask::full(values.nrows(), values.ncols());
        Self::from_parts(values, mask)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Observed values with zeros at missing cells, i.e. `Ω∘Y`.
    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.mask.get(i, t).then(|| self.values[(i, t)])
    }

    /// Same panel with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ObservedPanel {
        let mut out = self.clone();
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                out.values[(i, j)] *= c;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PatternKind {
    FullyObserved,
    SingleTreatedPeriod,
    SingleTreatedUnit,
    Block,
    Staggered,
    Irregular,
}

/// Structural description of a mask.
///
/// For the block family `row_perm`/`col_perm` list original indices with the
/// always-observed ones first; the block condition holds on permuted
/// positions. Staggered patterns keep the identity permutation since time
/// order matters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingPattern {
    pub kind: PatternKind,
    pub n0: usize,
    pub t0: usize,
    pub adoption_times: Vec<usize>,
    pub adoption_groups: Vec<Vec<usize>>,
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
}

impl MissingPattern {
    pub fn is_block_family(&self) -> bool {
        matches!(
            self.kind,
            PatternKind::Block | PatternKind::SingleTreatedPeriod | PatternKind::SingleTreatedUnit
        )
    }

    /// Always-observed units (original indices, ascending).
    pub fn control_units(&self) -> Vec<usize> {
        let mut v = self.row_perm[..self.n0].to_vec();
        v.sort_unstable();
        v
    }

    /// Always-observed periods (original indices, ascending).
    pub fn control_periods(&self) -> Vec<usize> {
        let mut v = self.col_perm[..self.t0].to_vec();
        v.sort_unstable();
        v
    }

    /// Units with at least one missing cell (original indices, ascending).
    pub fn treated_units(&self) -> Vec<usize> {
        let mut v = self.row_perm[self.n0..].to_vec();
        v.sort_unstable();
        v
    }

    /// Periods with at least one missing cell (original indices, ascending).
    pub fn treated_periods(&self) -> Vec<usize> {
        let mut v = self.col_perm[self.t0..].to_vec();
        v.sort_unstable();
        v
    }

    /// First missing period of `unit`, if any.
    pub fn adoption_time_of(&self, unit: usize) -> Option<usize> {
        match self.kind {
            PatternKind::FullyObserved | PatternKind::Irregular => None,
            PatternKind::Staggered => self
                .adoption_groups
                .iter()
                .position(|g| g.binary_search(&unit).is_ok())
                .map(|d| self.adoption_times[d]),
            _ => {
                if self.row_perm[self.n0..].contains(&unit) {
                    self.col_perm[self.t0..].iter().copied().min()
                } else {
                    None
                }
            }
        }
    }

    /// Rebuild the mask described by this pattern. `None` for `Irregular`.
    pub fn regenerate_mask(&self, nrows: usize, ncols: usize) -> Option<Mask> {
        match self.kind {
            PatternKind::Irregular => None,
            PatternKind::FullyObserved => Some(Mask::full(nrows, ncols)),
            PatternKind::Staggered => {
                let mut mask = Mask::full(nrows, ncols);
                for (g, &start) in self.adoption_groups.iter().zip(&self.adoption_times) {
                    for &i in g {
                        for t in start..ncols {
                            mask.set(i, t, false);
                        }
                    }
                }
                Some(mask)
            }
            _ => {
                let mut mask = Mask::full(nrows, ncols);
                for &i in &self.row_perm[self.n0..] {
                    for &t in &self.col_perm[self.t0..] {
                        mask.set(i, t, false);
                    }
                }
                Some(mask)
            }
        }
    }
}

fn stable_perm(len: usize, is_treated: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).filter(|&k| !is_treated(k)).collect();
    perm.extend((0..len).filter(|&k| is_treated(k)));
    perm
}

/// Classify a mask into the most specific pattern that reproduces it exactly.
pub fn classify_mask(mask: &Mask) -> MissingPattern {
    let (n, t) = (mask.nrows(), mask.ncols());
    let identity = |k: usize| (0..k).collect::<Vec<_>>();
    let mut pattern = MissingPattern {
        kind: PatternKind::Irregular,
        n0: n,
        t0: t,
        adoption_times: Vec::new(),
        adoption_groups: Vec::new(),
        row_perm: identity(n),
        col_perm: identity(t),
    };
    let row_miss: Vec<usize> = (0..n).map(|i| mask.row_missing(i)).collect();
    let col_miss: Vec<usize> = (0..t).map(|j| mask.col_missing(j)).collect();
    let treated_rows = row_miss.iter().filter(|&&c| c > 0).count();
    let treated_cols = col_miss.iter().filter(|&&c| c > 0).count();
    if treated_rows == 0 {
        pattern.kind = PatternKind::FullyObserved;
        return pattern;
    }

    // Block: every treated row misses exactly the treated columns.
    let is_block = (0..n).all(|i| row_miss[i] == 0 || row_miss[i] == treated_cols)
        && (0..t).all(|j| col_miss[j] == 0 || col_miss[j] == treated_rows);
    if is_block {
        pattern.n0 = n - treated_rows;
        pattern.t0 = t - treated_cols;
        pattern.row_perm = stable_perm(n, |i| row_miss[i] > 0);
        pattern.col_perm = stable_perm(t, |j| col_miss[j] > 0);
        pattern.kind = if treated_cols == 1 {
            PatternKind::SingleTreatedPeriod
        } else if treated_rows == 1 {
            PatternKind::SingleTreatedUnit
        } else {
            PatternKind::Block
        };
        let start = pattern.col_perm[pattern.t0..].iter().copied().min();
        if let Some(start) = start {
            if (start..t).all(|j| col_miss[j] > 0) {
                pattern.adoption_times = vec![start];
                pattern.adoption_groups = vec![pattern.treated_units()];
            }
        }
        return pattern;
    }

    // Staggered: each treated row misses a suffix of periods.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        if row_miss[i] == 0 {
            continue;
        }
        let start = t - row_miss[i];
        if !(start..t).all(|j| !mask.get(i, j)) {
            return pattern;
        }
        groups.entry(start).or_default().push(i);
    }
    pattern.kind = PatternKind::Staggered;
    pattern.n0 = n - treated_rows;
    pattern.t0 = *groups.keys().next().expect("at least one treated row");
    pattern.adoption_times = groups.keys().copied().collect();
    pattern.adoption_groups = groups.into_values().collect();
    pattern
}

pub fn classify_pattern(panel: &ObservedPanel) -> MissingPattern {
    classify_mask(panel.mask())
}

/// First cell that prevents a mask from being block or staggered: an
/// observed cell that follows a missing one in the same row. Falls back to
/// the first missing cell.
pub fn first_irregular_cell(mask: &Mask) -> Option<(usize, usize)> {
    for i in 0..mask.nrows() {
        let mut seen_missing = false;
        for t in 0..mask.ncols() {
            if !mask.get(i, t) {
                seen_missing = true;
            } else if seen_missing {
                return Some((i, t));
            }
        }
    }
    mask.missing_entries().first().copied()
}

/// Units grouped by treatment; `groups[d]` is `I_d`, `groups[0]` the control.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentAssignment {
    groups: Vec<Vec<usize>>,
    pilot_start: usize,
}

impl TreatmentAssignment {
    pub fn new(groups: Vec<Vec<usize>>, n_units: usize, pilot_start: usize) -> Result<Self> {
        if groups.is_empty() || groups[0].is_empty() {
            return Err(Error::invalid("control group I_0 must be nonempty"));
        }
        let mut owner = vec![None; n_units];
        let mut groups = groups;
        for (d, g) in groups.iter_mut().enumerate() {
            g.sort_unstable();
            for &i in g.iter() {
                if i >= n_units {
                    return Err(Error::invalid(format!(
                        "unit index {i} out of range for {n_units} units"
                    )));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::invalid(format!(
                        "unit {i} assigned to treatments {prev} and {d}"
                    )));
                }
                owner[i] = Some(d);
            }
        }
        if let Some(i) = owner.iter().position(Option::is_none) {
            return Err(Error::invalid(format!("unit {i} has no treatment assignment")));
        }
        if pilot_start == 0 {
            return Err(Error::invalid("pilot_start must leave at least one pre-pilot period"));
        }
        Ok(TreatmentAssignment {
            groups,
            pilot_start,
        })
    }

    /// Build from per-unit treatment ids.
    pub fn from_labels(treatment_of: &[usize], pilot_start: usize) -> Result<Self> {
        let d_max = treatment_of.iter().copied().max().unwrap_or(0);
        let mut groups = vec![Vec::new(); d_max + 1];
        for (i, &d) in treatment_of.iter().enumerate() {
            groups[d].push(i);
        }
        Self::new(groups, treatment_of.len(), pilot_start)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, d: usize) -> Option<&[usize]> {
        self.groups.get(d).map(Vec::as_slice)
    }

    pub fn n_treatments(&self) -> usize {
        self.groups.len()
    }

    /// First pilot column, i.e. the number of pre-pilot periods `T_0`.
    pub fn pilot_start(&self) -> usize {
        self.pilot_start
    }

    pub fn treatment_of(&self, unit: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.binary_search(&unit).is_ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelFormat {
    /// Header row of time labels, first column of unit labels.
    Wide,
    /// Wide layout with no header and no label column.
    WideBare,
    /// `unit,time,value` rows with a header.
    Long,
}

impl std::str::FromStr for PanelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wide" => Ok(PanelFormat::Wide),
            "wide-bare" | "bare" => Ok(PanelFormat::WideBare),
            "long" => Ok(PanelFormat::Long),
            other => Err(Error::invalid(format!("unknown panel format `{other}`"))),
        }
    }
}

fn parse_cell(raw: &str, line: u64) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(Error::Parse {
            line,
            msg: format!("non-finite value `{s}`"),
        }),
        Err(_) => Err(Error::Parse {
            line,
            msg: format!("non-numeric value `{s}`"),
        }),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

pub fn load_panel<R: Read>(reader: R, format: PanelFormat) -> Result<ObservedPanel> {
    match format {
        PanelFormat::Wide => load_wide(reader, true),
        PanelFormat::WideBare => load_wide(reader, false),
        PanelFormat::Long => load_long(reader, None),
    }
}

fn load_wide<R: Read>(reader: R, labelled: bool) -> Result<ObservedPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let mut time_labels: Option<Vec<String>> = None;
    if labelled {
        let header = records
            .next()
            .ok_or_else(|| Error::InvalidPanel("empty input".into()))??;
        time_labels = Some(header.iter().skip(1).map(|s| s.trim().to_string()).collect());
    }
    let mut unit_labels = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.iter().all(|s| s.trim().is_empty()) {
            continue;
        }
        let mut fields = rec.iter();
        if labelled {
            unit_labels.push(fields.next().unwrap_or("").trim().to_string());
        } else {
            unit_labels.push(rows.len().to_string());
        }
        let row = fields
            .map(|s| parse_cell(s, line))
            .collect::<Result<Vec<_>>>()?;
        let expected = time_labels.as_ref().map(Vec::len).or(rows.first().map(Vec::len));
        if let Some(expected) = expected {
            if row.len() != expected {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {expected} value cells, found {}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    let t = time_labels
        .as_ref()
        .map(Vec::len)
        .or(rows.first().map(Vec::len))
        .unwrap_or(0);
    let time_labels = time_labels.unwrap_or_else(|| (0..t).map(|j| j.to_string()).collect());
    let n = rows.len();
    let values = Mat::from_fn(n, t, |i, j| rows[i][j].unwrap_or(0.0));
    let mask = Mask::from_fn(n, t, |i, j| rows[i][j].is_some());
    ObservedPanel::new(values, mask, unit_labels, time_labels)
}

/// Long-format loader. When `declared_units` is given, the panel has exactly
/// those rows in that order and any other unit is an error.
pub fn load_long<R: Read>(reader: R, declared_units: Option<&[String]>) -> Result<ObservedPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing `{name}` column"),
            })
    };
    let (ui, ti, vi) = (col("unit")?, col("time")?, col("value")?);

    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut units: Vec<String> = Vec::new();
    if let Some(declared) = declared_units {
        for u in declared {
            unit_index.insert(u.clone(), units.len());
            units.push(u.clone());
        }
    }
    let mut time_index: HashMap<String, usize> = HashMap::new();
    let mut times: Vec<String> = Vec::new();
    let mut cells: HashMap<(usize, usize), Option<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let field = |k: usize| rec.get(k).unwrap_or("");
        let (u, tm) = (field(ui).to_string(), field(ti).to_string());
        let value = parse_cell(field(vi), line)?;
        let r = match unit_index.get(&u) {
            Some(&r) => r,
            None if declared_units.is_some() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("undeclared unit `{u}`"),
                })
            }
            None => {
                unit_index.insert(u.clone(), units.len());
                units.push(u.clone());
                units.len() - 1
            }
        };
        let c = *time_index.entry(tm.clone()).or_insert_with(|| {
            times.push(tm.clone());
            times.len() - 1
        });
        if cells.insert((r, c), value).is_some() {
            return Err(Error::DuplicateKey { unit: u, time: tm });
        }
    }

    // Numeric time labels are ordered numerically, otherwise by first appearance.
    let mut order: Vec<usize> = (0..times.len()).collect();
    let numeric: Option<Vec<f64>> = times.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    }
    let mut position = vec![0; times.len()];
    for (p, &k) in order.iter().enumerate() {
        position[k] = p;
    }
    let time_labels: Vec<String> = order.iter().map(|&k| times[k].clone()).collect();

    let (n, t) = (units.len(), times.len());
    let mut values = Mat::<f64>::zeros(n, t);
    let mut mask = Mask::from_fn(n, t, |_, _| false);
    for (&(r, c), v) in &cells {
        if let Some(v) = v {
            values[(r, position[c])] = *v;
            mask.set(r, position[c], true);
        }
    }
    ObservedPanel::new(values, mask, units, time_labels)
}
