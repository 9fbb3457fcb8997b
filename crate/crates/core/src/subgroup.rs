//! Grouping of missing entries and assembly of per-group submatrices.
//!
//! Every assembled [`SubProblem`] lists its rows and columns with the
//! always-observed part first, so its own mask is a block pattern whose
//! missing rectangle is exactly the target set.

use std::collections::BTreeMap;

use faer::{Mat, MatRef};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{first_irregular_cell, Mask, MissingPattern, ObservedPanel, PatternKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupingPlan<T = usize> {
    /// `G_1, …, G_L`
    pub groups: Vec<Vec<T>>,
    /// `G_0`: requested entries that are already observed.
    pub observed: Vec<T>,
    pub cap: usize,
}

impl<T> GroupingPlan<T> {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Contiguous chunks of at most `cap` targets in ascending order.
pub fn partition_missing<T: Ord + Clone>(targets: &[T], cap: usize) -> Result<GroupingPlan<T>> {
    if cap == 0 {
        return Err(Error::invalid("group cap must be at least 1"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("no targets to partition"));
    }
    let mut sorted = targets.to_vec();
    sorted.sort();
    sorted.dedup();
    Ok(GroupingPlan {
        groups: sorted.chunks(cap).map(<[T]>::to_vec).collect(),
        observed: Vec::new(),
        cap,
    })
}

/// `max(1, ⌊√min(n0, t0)⌋)`
pub fn default_cap(n0: usize, t0: usize) -> usize {
    ((n0.min(t0) as f64).sqrt().floor() as usize).max(1)
}

/// A submatrix with index maps back to the parent panel.
#[derive(Debug, Clone)]
pub struct SubProblem {
    pub values: Mat<f64>,
    pub mask: Mask,
    pub row_map: Vec<usize>,
    pub col_map: Vec<usize>,
    /// Sub-row indices of the target units.
    pub group_rows: Vec<usize>,
    /// Sub-column indices of the target periods.
    pub target_cols: Vec<usize>,
    /// Leading rows observed on every column of the subproblem.
    pub base_rows: usize,
    /// Leading columns observed on every row of the subproblem.
    pub base_cols: usize,
    /// True for the fully observed `Y_0` subproblem, whose targets are
    /// observed entries estimated for inference.
    pub targets_observed: bool,
    pub lambda: Option<f64>,
}

impl SubProblem {
    fn build(
        panel: &ObservedPanel,
        row_map: Vec<usize>,
        col_map: Vec<usize>,
        group_rows: Vec<usize>,
        target_cols: Vec<usize>,
        base_rows: usize,
        base_cols: usize,
        targets_observed: bool,
    ) -> Result<Self> {
        let (n, m) = (row_map.len(), col_map.len());
        let values = Mat::from_fn(n, m, |i, j| panel.values()[(row_map[i], col_map[j])]);
        let mask = Mask::from_fn(n, m, |i, j| panel.mask().get(row_map[i], col_map[j]));
        let sub = SubProblem {
            values,
            mask,
            row_map,
            col_map,
            group_rows,
            target_cols,
            base_rows,
            base_cols,
            targets_observed,
            lambda: None,
        };
        sub.check_structure()?;
        Ok(sub)
    }

    fn check_structure(&self) -> Result<()> {
        let (n, m) = self.shape();
        let mut is_target = vec![false; n * m];
        for (i, j) in self.target() {
            is_target[i * m + j] = true;
        }
        for i in 0..n {
            for j in 0..m {
                let observed = self.mask.get(i, j);
                let ok = if self.targets_observed {
                    observed
                } else {
                    observed != is_target[i * m + j]
                };
                if !ok {
                    return Err(Error::UnsupportedPattern(format!(
                        "assembled submatrix is not block-missing at parent cell ({}, {})",
                        self.row_map[i], self.col_map[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.nrows(), self.values.ncols())
    }

    /// Target cells as sub-indices, row-major.
    pub fn target(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.group_rows.len() * self.target_cols.len());
        for &i in &self.group_rows {
            for &j in &self.target_cols {
                out.push((i, j));
            }
        }
        out
    }

    pub fn to_parent(&self, (i, j): (usize, usize)) -> (usize, usize) {
        (self.row_map[i], self.col_map[j])
    }

    pub fn from_parent(&self, (p, q): (usize, usize)) -> Option<(usize, usize)> {
        let i = self.row_map.iter().position(|&r| r == p)?;
        let j = self.col_map.iter().position(|&c| c == q)?;
        Some((i, j))
    }

    /// Parent units being estimated.
    pub fn group_units(&self) -> Vec<usize> {
        self.group_rows.iter().map(|&i| self.row_map[i]).collect()
    }
}

fn require_block(pattern: &MissingPattern) -> Result<()> {
    if pattern.is_block_family() {
        Ok(())
    } else {
        Err(Error::UnsupportedPattern(format!(
            "expected a block pattern, found {:?}",
            pattern.kind
        )))
    }
}

fn control_rows_and_cols(pattern: &MissingPattern) -> (Vec<usize>, Vec<usize>) {
    (pattern.control_units(), pattern.control_periods())
}

/// Rows = control units + `units`, columns = control periods + `periods`,
/// target = `units × periods`.
pub fn assemble_block_cells(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    units: &[usize],
    periods: &[usize],
) -> Result<SubProblem> {
    require_block(pattern)?;
    let treated_units = pattern.treated_units();
    let treated_periods = pattern.treated_periods();
    if units.is_empty() || periods.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    if let Some(u) = units.iter().find(|u| treated_units.binary_search(u).is_err()) {
        return Err(Error::invalid(format!("unit {u} is not a treated unit")));
    }
    if let Some(t) = periods.iter().find(|t| treated_periods.binary_search(t).is_err()) {
        return Err(Error::invalid(format!("period {t} is not a treated period")));
    }
    let (mut rows, mut cols) = control_rows_and_cols(pattern);
    let (n0, t0) = (rows.len(), cols.len());
    rows.extend_from_slice(units);
    cols.extend_from_slice(periods);
    let group_rows = (n0..rows.len()).collect();
    let target_cols = (t0..cols.len()).collect();
    SubProblem::build(panel, rows, cols, group_rows, target_cols, n0, t0, false)
}

/// One treated period `t`: rows = control units + group, columns = control
/// periods + `t`.
pub fn assemble_block(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    group: &[usize],
    t: usize,
) -> Result<SubProblem> {
    require_block(pattern)?;
    if pattern.control_periods().binary_search(&t).is_ok() {
        return Err(Error::invalid(format!("period {t} is always observed")));
    }
    assemble_block_cells(panel, pattern, group, &[t])
}

/// Single treated period: the subproblem spans every column.
pub fn assemble_single_period(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    group: &[usize],
) -> Result<SubProblem> {
    let treated = pattern.treated_periods();
    if pattern.kind != PatternKind::SingleTreatedPeriod || treated.len() != 1 {
        return Err(Error::UnsupportedPattern(format!(
            "expected a single treated period, found {:?}",
            pattern.kind
        )));
    }
    assemble_block(panel, pattern, group, treated[0])
}

fn adoption_bounds(pattern: &MissingPattern, ncols: usize) -> Result<Vec<usize>> {
    if pattern.adoption_times.is_empty() {
        return Err(Error::UnsupportedPattern(format!(
            "{:?} pattern has no adoption times",
            pattern.kind
        )));
    }
    let mut b = pattern.adoption_times.clone();
    b.push(ncols);
    Ok(b)
}

/// Units observed on every period before `t`.
fn untreated_before(pattern: &MissingPattern, n: usize, t: usize) -> Vec<usize> {
    (0..n)
        .filter(|&i| pattern.adoption_time_of(i).is_none_or(|a| a >= t))
        .collect()
}

/// `Y_{d,d'}`: rows = units untreated before `T_{d'+1}` plus the group,
/// columns = `[0, T_d) ∪ [T_{d'}, T_{d'+1})` (0-based `d`, `T_{D} = T`).
pub fn assemble_staggered(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    d: usize,
    d_prime: usize,
    group: &[usize],
) -> Result<SubProblem> {
    let bounds = adoption_bounds(pattern, panel.ncols())?;
    let n_adopt = bounds.len() - 1;
    if d >= n_adopt || d_prime < d || d_prime >= n_adopt {
        return Err(Error::invalid(format!(
            "need d <= d' < {n_adopt}, got d = {d}, d' = {d_prime}"
        )));
    }
    if group.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    let members = &pattern.adoption_groups[d];
    if let Some(u) = group.iter().find(|u| members.binary_search(u).is_err()) {
        return Err(Error::invalid(format!("unit {u} does not adopt at period {}", bounds[d])));
    }
    let mut rows = untreated_before(pattern, panel.nrows(), bounds[d_prime + 1]);
    let n0 = rows.len();
    rows.extend_from_slice(group);
    let mut cols: Vec<usize> = (0..bounds[d]).collect();
    let t0 = cols.len();
    cols.extend(bounds[d_prime]..bounds[d_prime + 1]);
    let group_rows = (n0..rows.len()).collect();
    let target_cols = (t0..cols.len()).collect();
    SubProblem::build(panel, rows, cols, group_rows, target_cols, n0, t0, false)
}

/// Units observed at `t0` and the shared pre-period columns for the
/// inference construction.
fn inference_base(pattern: &MissingPattern, panel: &ObservedPanel, t0: usize) -> Result<Vec<usize>> {
    if pattern.is_block_family() {
        if pattern.control_periods().binary_search(&t0).is_ok() {
            return Err(Error::invalid(format!(
                "period {t0} is fully observed; inference targets a treated period"
            )));
        }
        Ok(pattern.control_units())
    } else if pattern.kind == PatternKind::Staggered {
        if t0 < pattern.adoption_times[0] {
            return Err(Error::invalid(format!(
                "period {t0} precedes the first adoption time"
            )));
        }
        Ok(untreated_before(pattern, panel.nrows(), t0 + 1))
    } else {
        Err(Error::UnsupportedPattern(format!(
            "inference needs a block or staggered pattern, found {:?}",
            pattern.kind
        )))
    }
}

/// Pre-period columns for units adopting at `adoption` (block: the control
/// periods).
fn inference_pre_cols(pattern: &MissingPattern, adoption: usize) -> Vec<usize> {
    if pattern.is_block_family() {
        pattern.control_periods()
    } else {
        (0..adoption).collect()
    }
}

/// `Y_l`: rows = units untreated at `t0` + group, columns = the group's
/// pre-adoption periods + `t0`. All units in the group must share one
/// adoption time, at or before `t0`.
pub fn assemble_inference(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    group: &[usize],
    t0: usize,
) -> Result<SubProblem> {
    if t0 >= panel.ncols() {
        return Err(Error::invalid(format!("period {t0} outside the panel")));
    }
    let base = inference_base(pattern, panel, t0)?;
    if group.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    let adoption = pattern.adoption_time_of(group[0]);
    for &u in group {
        let a = pattern.adoption_time_of(u);
        if a != adoption {
            return Err(Error::invalid(format!(
                "units {} and {u} have different adoption times",
                group[0]
            )));
        }
        if base.binary_search(&u).is_ok() {
            return Err(Error::invalid(format!("unit {u} is observed at period {t0}")));
        }
    }
    let adoption = adoption.ok_or_else(|| Error::invalid("group has no adoption time"))?;
    let mut rows = base;
    let n0 = rows.len();
    rows.extend_from_slice(group);
    let mut cols = inference_pre_cols(pattern, adoption);
    let pre = cols.len();
    cols.push(t0);
    SubProblem::build(
        panel,
        rows,
        cols,
        (n0..n0 + group.len()).collect(),
        vec![pre],
        n0,
        pre,
        false,
    )
}

/// `Y_0`: the fully observed block of units untreated at `t0` over the
/// earliest pre-adoption periods, plus column `t0`. Targets are the rows of
/// `g0` at `t0`.
pub fn assemble_inference_observed(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    g0: &[usize],
    t0: usize,
) -> Result<SubProblem> {
    if t0 >= panel.ncols() {
        return Err(Error::invalid(format!("period {t0} outside the panel")));
    }
    let base = inference_base(pattern, panel, t0)?;
    let mut group_rows = Vec::with_capacity(g0.len());
    for &u in g0 {
        let pos = base
            .binary_search(&u)
            .map_err(|_| Error::invalid(format!("unit {u} is not observed at period {t0}")))?;
        group_rows.push(pos);
    }
    let first = pattern.adoption_times.first().copied().unwrap_or(t0);
    let mut cols = inference_pre_cols(pattern, first);
    let pre = cols.len();
    cols.push(t0);
    let n0 = base.len();
    SubProblem::build(panel, base, cols, group_rows, vec![pre], n0, pre, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockOrientation {
    /// One subproblem per (treated period, unit chunk).
    ByPeriod,
    /// One subproblem per (treated unit, period chunk).
    ByUnit,
}

/// Orientation needing fewer subproblems; ties go to `ByPeriod`.
pub fn choose_orientation(treated_units: usize, treated_periods: usize, cap: usize) -> BlockOrientation {
    let by_period = treated_periods * treated_units.div_ceil(cap);
    let by_unit = treated_units * treated_periods.div_ceil(cap);
    if by_unit < by_period {
        BlockOrientation::ByUnit
    } else {
        BlockOrientation::ByPeriod
    }
}

/// Cap implied by the pattern's always-observed block.
pub fn pattern_default_cap(pattern: &MissingPattern, nrows: usize) -> usize {
    match pattern.kind {
        PatternKind::Staggered => default_cap(
            untreated_before(pattern, nrows, usize::MAX).len(),
            pattern.adoption_times[0],
        ),
        _ => default_cap(pattern.n0, pattern.t0),
    }
}

fn unsupported(panel: &ObservedPanel) -> Error {
    match first_irregular_cell(panel.mask()) {
        Some((i, t)) => Error::UnsupportedPattern(format!(
            "irregular missingness: unit `{}` is observed at time `{}` after an earlier missing period",
            panel.unit_labels()[i],
            panel.time_labels()[t]
        )),
        None => Error::UnsupportedPattern("irregular missingness".into()),
    }
}

/// Subproblems whose targets cover every missing entry exactly once.
pub fn plan_completion(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    cap: usize,
) -> Result<Vec<SubProblem>> {
    if cap == 0 {
        return Err(Error::invalid("group cap must be at least 1"));
    }
    match pattern.kind {
        PatternKind::FullyObserved => Ok(Vec::new()),
        PatternKind::Irregular => Err(unsupported(panel)),
        PatternKind::Staggered => {
            let mut subs = Vec::new();
            let n_adopt = pattern.adoption_times.len();
            for d in 0..n_adopt {
                for dp in d..n_adopt {
                    for chunk in pattern.adoption_groups[d].chunks(cap) {
                        subs.push(assemble_staggered(panel, pattern, d, dp, chunk)?);
                    }
                }
            }
            Ok(subs)
        }
        _ => {
            let units = pattern.treated_units();
            let periods = pattern.treated_periods();
            let mut subs = Vec::new();
            match choose_orientation(units.len(), periods.len(), cap) {
                BlockOrientation::ByPeriod => {
                    for &t in &periods {
                        for chunk in units.chunks(cap) {
                            subs.push(assemble_block_cells(panel, pattern, chunk, &[t])?);
                        }
                    }
                }
                BlockOrientation::ByUnit => {
                    for &u in &units {
                        for chunk in periods.chunks(cap) {
                            subs.push(assemble_block_cells(panel, pattern, &[u], chunk)?);
                        }
                    }
                }
            }
            Ok(subs)
        }
    }
}

/// Inference subproblems for the average over `group` at `t0`: the `Y_0`
/// subproblem first when some requested units are observed at `t0`, then
/// one subproblem per chunk of at most `cap` units sharing an adoption time.
pub fn plan_inference(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    group: &[usize],
    t0: usize,
    cap: usize,
) -> Result<(GroupingPlan, Vec<SubProblem>)> {
    if cap == 0 {
        return Err(Error::invalid("group cap must be at least 1"));
    }
    if group.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    if let Some(&u) = group.iter().find(|&&u| u >= panel.nrows()) {
        return Err(Error::invalid(format!("unit {u} outside the panel")));
    }
    let base = inference_base(pattern, panel, t0)?;
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let (g0, rest): (Vec<usize>, Vec<usize>) =
        sorted.into_iter().partition(|u| base.binary_search(u).is_ok());
    let mut by_adoption: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for u in rest {
        let a = pattern
            .adoption_time_of(u)
            .ok_or_else(|| Error::invalid(format!("unit {u} has no adoption time")))?;
        by_adoption.entry(a).or_default().push(u);
    }
    let mut plan = GroupingPlan {
        groups: Vec::new(),
        observed: g0.clone(),
        cap,
    };
    let mut subs = Vec::new();
    if !g0.is_empty() {
        subs.push(assemble_inference_observed(panel, pattern, &g0, t0)?);
    }
    for units in by_adoption.values() {
        for chunk in units.chunks(cap) {
            plan.groups.push(chunk.to_vec());
            subs.push(assemble_inference(panel, pattern, chunk, t0)?);
        }
    }
    Ok((plan, subs))
}

#[derive(Debug, Clone)]
pub struct Reassembled {
    /// Observed values kept, every missing entry filled from its subproblem.
    pub completed: Mat<f64>,
    /// Mean of the subproblem estimates per parent cell; NaN where no
    /// subproblem covers the cell.
    pub fitted: Mat<f64>,
    /// Number of subproblems covering each cell, row-major.
    pub coverage: Vec<u32>,
}

impl Reassembled {
    pub fn coverage_at(&self, p: usize, q: usize) -> u32 {
        self.coverage[p * self.completed.ncols() + q]
    }
}

/// Combine per-subproblem estimates into a full panel.
pub fn reassemble(panel: &ObservedPanel, fits: &[(&SubProblem, MatRef<'_, f64>)]) -> Result<Reassembled> {
    let (n, m) = (panel.nrows(), panel.ncols());
    let mut completed = panel.values().clone();
    let mut sum = Mat::<f64>::zeros(n, m);
    let mut coverage = vec![0u32; n * m];
    let mut target_hits = vec![0u32; n * m];
    for (sub, est) in fits {
        if (est.nrows(), est.ncols()) != sub.shape() {
            return Err(Error::ShapeMismatch {
                expected: sub.shape(),
                got: (est.nrows(), est.ncols()),
            });
        }
        for (i, &p) in sub.row_map.iter().enumerate() {
            for (j, &q) in sub.col_map.iter().enumerate() {
                sum[(p, q)] += est[(i, j)];
                coverage[p * m + q] += 1;
            }
        }
        if sub.targets_observed {
            continue;
        }
        for cell in sub.target() {
            let (p, q) = sub.to_parent(cell);
            target_hits[p * m + q] += 1;
            if target_hits[p * m + q] > 1 {
                return Err(Error::invalid(format!(
                    "missing entry ({p}, {q}) is targeted by more than one subproblem"
                )));
            }
            completed[(p, q)] = est[cell];
        }
    }
    for (p, q) in panel.mask().missing_entries() {
        if target_hits[p * m + q] == 0 {
            return Err(Error::invalid(format!(
                "missing entry ({p}, {q}) is not covered by any subproblem"
            )));
        }
    }
    let fitted = Mat::from_fn(n, m, |p, q| {
        let c = coverage[p * m + q];
        if c == 0 {
            f64::NAN
        } else {
            sum[(p, q)] / c as f64
        }
    });
    Ok(Reassembled {
        completed,
        fitted,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::classify_mask;

    fn panel_with(mask: Mask) -> ObservedPanel {
        let (n, m) = (mask.nrows(), mask.ncols());
        let v = Mat::from_fn(n, m, |i, t| (i * 100 + t) as f64);
        ObservedPanel::from_parts(v, mask).unwrap()
    }

    #[test]
    fn partition_examples() {
        let targets: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = partition_missing(&targets, 3)
            .unwrap()
            .groups
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(partition_missing(&targets, 10).unwrap().len(), 1);
        assert_eq!(partition_missing(&targets, 1).unwrap().len(), 10);
        assert!(partition_missing::<usize>(&[], 2).is_err());
        assert!(partition_missing(&targets, 0).is_err());
    }

    #[test]
    fn default_cap_rule() {
        assert_eq!(default_cap(200, 200), 14);
        assert_eq!(default_cap(50, 70), 7);
        assert_eq!(default_cap(0, 9), 1);
    }

    #[test]
    fn single_period_examples() {
        // Units 3.. treated in the last period (0-based: 3 control units, T = 4).
        let p = panel_with(Mask::from_fn(7, 4, |i, t| !(i >= 3 && t == 3)));
        let pat = classify_mask(p.mask());
        assert_eq!(pat.kind, PatternKind::SingleTreatedPeriod);
        let s = assemble_single_period(&p, &pat, &[4]).unwrap();
        assert_eq!(s.shape(), (4, 4));
        assert_eq!(s.target(), vec![(3, 3)]);
        assert_eq!(s.mask.count_missing(), 1);
        let s = assemble_single_period(&p, &pat, &[4, 5]).unwrap();
        assert_eq!(s.shape(), (5, 4));
        assert_eq!(s.mask.missing_entries(), vec![(3, 3), (4, 3)]);
        assert!(assemble_single_period(&p, &pat, &[1]).is_err());
    }

    #[test]
    fn block_examples() {
        let p = panel_with(Mask::from_fn(8, 9, |i, t| !(i >= 4 && t >= 5)));
        let pat = classify_mask(p.mask());
        let s = assemble_block(&p, &pat, &[6], 7).unwrap();
        assert_eq!(s.shape(), (5, 6));
        assert_eq!(s.mask.count_missing(), 1);
        assert_eq!(s.to_parent((4, 5)), (6, 7));
        assert_eq!(s.values[(4, 4)], p.values()[(6, 4)]);
        assert!(assemble_block(&p, &pat, &[6], 3).is_err());
        assert!(assemble_block(&p, &pat, &[2], 7).is_err());

        // |group| = 2 with two treated periods: two subproblems per period.
        let p = panel_with(Mask::from_fn(6, 6, |i, t| !(i >= 4 && t >= 4)));
        let pat = classify_mask(p.mask());
        let subs = plan_completion(&p, &pat, 1).unwrap();
        assert_eq!(subs.len(), 4);
        let total: usize = subs.iter().map(|s| s.target().len()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn single_unit_uses_unit_orientation() {
        let p = panel_with(Mask::from_fn(6, 10, |i, t| !(i == 5 && t >= 4)));
        let pat = classify_mask(p.mask());
        assert_eq!(pat.kind, PatternKind::SingleTreatedUnit);
        let subs = plan_completion(&p, &pat, 2).unwrap();
        assert_eq!(subs.len(), 3);
        assert!(subs.iter().all(|s| s.group_units() == vec![5]));
        assert_eq!(subs[0].target_cols.len(), 2);
    }

    #[test]
    fn staggered_interval_arithmetic() {
        // Adoption at 0-based periods 5, 7, 10 with T = 12.
        let mask = Mask::from_fn(8, 12, |i, t| match i {
            5 => t < 5,
            6 => t < 7,
            7 => t < 10,
            _ => true,
        });
        let p = panel_with(mask);
        let pat = classify_mask(p.mask());
        assert_eq!(pat.adoption_times, vec![5, 7, 10]);
        let s = assemble_staggered(&p, &pat, 0, 1, &[5]).unwrap();
        assert_eq!(s.col_map, vec![0, 1, 2, 3, 4, 7, 8, 9]);
        assert_eq!(s.row_map, vec![0, 1, 2, 3, 4, 7, 5]);
        let s = assemble_staggered(&p, &pat, 2, 2, &[7]).unwrap();
        assert_eq!(s.col_map, (0..12).collect::<Vec<_>>());
        assert_eq!(s.row_map, vec![0, 1, 2, 3, 4, 7]);
        assert!(assemble_staggered(&p, &pat, 0, 1, &[6]).is_err());
        let subs = plan_completion(&p, &pat, 5).unwrap();
        assert_eq!(subs.len(), 6);
    }

    #[test]
    fn staggered_single_adoption_reduces_to_block_band() {
        let p = panel_with(Mask::from_fn(6, 8, |i, t| !(i >= 4 && t >= 5)));
        let pat = classify_mask(p.mask());
        assert_eq!(pat.kind, PatternKind::Block);
        let s = assemble_staggered(&p, &pat, 0, 0, &[4, 5]).unwrap();
        let b = assemble_block_cells(&p, &pat, &[4, 5], &[5, 6, 7]).unwrap();
        assert_eq!(s.row_map, b.row_map);
        assert_eq!(s.col_map, b.col_map);
        assert_eq!(s.target(), b.target());
    }

    #[test]
    fn inference_construction() {
        let p = panel_with(Mask::from_fn(8, 9, |i, t| !(i >= 4 && t >= 5)));
        let pat = classify_mask(p.mask());
        let s = assemble_inference(&p, &pat, &[5, 6], 7).unwrap();
        assert_eq!(s.col_map, vec![0, 1, 2, 3, 4, 7]);
        assert_eq!(s.target(), vec![(4, 5), (5, 5)]);

        let (plan, subs) = plan_inference(&p, &pat, &[1, 2, 5], 7, 4).unwrap();
        assert_eq!(plan.observed, vec![1, 2]);
        assert_eq!(subs.len(), 2);
        assert!(subs[0].targets_observed);
        assert!(subs[0].mask.is_full());
        assert_eq!(subs[0].group_units(), vec![1, 2]);
        assert_eq!(subs[0].col_map, vec![0, 1, 2, 3, 4, 7]);

        let (_, only0) = plan_inference(&p, &pat, &[0, 3], 8, 4).unwrap();
        assert_eq!(only0.len(), 1);
        assert!(only0[0].targets_observed);
    }

    #[test]
    fn staggered_inference_splits_by_adoption() {
        let mask = Mask::from_fn(9, 10, |i, t| match i {
            5 | 6 => t < 4,
            7 | 8 => t < 6,
            _ => true,
        });
        let p = panel_with(mask);
        let pat = classify_mask(p.mask());
        let s = assemble_inference(&p, &pat, &[7], 8).unwrap();
        assert_eq!(s.col_map, vec![0, 1, 2, 3, 4, 5, 8]);
        assert_eq!(s.base_rows, 5);
        assert!(assemble_inference(&p, &pat, &[6, 7], 8).is_err());
        let (plan, subs) = plan_inference(&p, &pat, &[5, 6, 7, 8], 9, 1).unwrap();
        assert_eq!(plan.groups, vec![vec![5], vec![6], vec![7], vec![8]]);
        assert_eq!(subs.len(), 4);
        // At t0 = 4 the late adopters are still untreated and join the base rows.
        let (plan, subs) = plan_inference(&p, &pat, &[5, 7], 4, 3).unwrap();
        assert_eq!(plan.observed, vec![7]);
        assert_eq!(subs[1].base_rows, 7);
    }

    #[test]
    fn reassemble_examples() {
        let mut mask = Mask::full(3, 3);
        mask.set(2, 2, false);
        let p = panel_with(mask);
        let pat = classify_mask(p.mask());
        let subs = plan_completion(&p, &pat, 3).unwrap();
        assert_eq!(subs.len(), 1);
        let est = Mat::from_fn(3, 3, |_, _| 7.5);
        let out = reassemble(&p, &[(&subs[0], est.as_ref())]).unwrap();
        assert_eq!(out.completed[(2, 2)], 7.5);
        assert_eq!(out.completed[(0, 1)], p.values()[(0, 1)]);

        let p = panel_with(Mask::from_fn(4, 4, |i, t| !(i >= 2 && t >= 3)));
        let pat = classify_mask(p.mask());
        let subs = plan_completion(&p, &pat, 1).unwrap();
        assert_eq!(subs.len(), 2);
        let a = Mat::from_fn(3, 4, |_, _| 1.0);
        let b = Mat::from_fn(3, 4, |_, _| 3.0);
        let out = reassemble(&p, &[(&subs[0], a.as_ref()), (&subs[1], b.as_ref())]).unwrap();
        assert_eq!(out.fitted[(0, 0)], 2.0);
        assert_eq!(out.coverage_at(0, 0), 2);
        assert_eq!(out.completed[(2, 3)], 1.0);
        assert_eq!(out.completed[(3, 3)], 3.0);

        assert!(reassemble(&p, &[(&subs[0], a.as_ref()), (&subs[0], a.as_ref())]).is_err());
        assert!(reassemble(&p, &[(&subs[0], a.as_ref())]).is_err());
    }

    #[test]
    fn fully_observed_has_no_subproblems() {
        let p = panel_with(Mask::full(3, 4));
        let pat = classify_mask(p.mask());
        assert!(plan_completion(&p, &pat, 2).unwrap().is_empty());
        let out = reassemble(&p, &[]).unwrap();
        assert!(crate::linalg::max_abs_diff(out.completed.as_ref(), p.values().as_ref()) == 0.0);
    }

    #[test]
    fn irregular_is_rejected_with_cell() {
        let mut mask = Mask::full(4, 4);
        mask.set(1, 1, false);
        mask.set(2, 2, false);
        let p = panel_with(mask);
        let pat = classify_mask(p.mask());
        let err = plan_completion(&p, &pat, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unit `1`") && msg.contains("time `2`"), "{msg}");
    }
}
