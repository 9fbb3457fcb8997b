//! Multi-treatment panels: per-treatment completion, effect series with
//! variances, window aggregation and the bootstrap specification test.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{self, fit_subproblem, LambdaChoice, RankChoice, SubFit};
use crate::error::{Error, Result};
use crate::inference::{self, MAX_GRAM_CONDITION};
use crate::linalg;
use crate::normal;
use crate::panel::{classify_pattern, Mask, MissingPattern, ObservedPanel, TreatmentAssignment};
use crate::solver::SolverOptions;
use crate::subgroup;

/// Covariate tensor indexed by (unit, period, coefficient).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    n_units: usize,
    n_periods: usize,
    p: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(n_units: usize, n_periods: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_units * n_periods * p {
            return Err(Error::invalid(format!(
                "covariate tensor has {} values, expected {n_units}x{n_periods}x{p}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Covariates {
            n_units,
            n_periods,
            p,
            data,
        })
    }

    pub fn zeros(n_units: usize, n_periods: usize, p: usize) -> Self {
        Covariates {
            n_units,
            n_periods,
            p,
            data: vec![0.0; n_units * n_periods * p],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_units, self.n_periods, self.p)
    }

    pub fn get(&self, i: usize, t: usize) -> &[f64] {
        let at = (i * self.n_periods + t) * self.p;
        &self.data[at..at + self.p]
    }

    pub fn get_mut(&mut self, i: usize, t: usize) -> &mut [f64] {
        let at = (i * self.n_periods + t) * self.p;
        &mut self.data[at..at + self.p]
    }
}

/// Observed outcomes, treatment groups and an optional `xᵀβ` adjustment.
#[derive(Debug, Clone)]
pub struct TreatmentPanel {
    pub base: ObservedPanel,
    pub assignment: TreatmentAssignment,
    pub covariates: Option<Covariates>,
    pub beta: Option<Vec<f64>>,
}

impl TreatmentPanel {
    pub fn new(
        base: ObservedPanel,
        assignment: TreatmentAssignment,
        covariates: Option<Covariates>,
        beta: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n: usize = assignment.groups().iter().map(Vec::len).sum();
        if n != base.nrows() {
            return Err(Error::invalid(format!(
                "assignment covers {n} units, panel has {}",
                base.nrows()
            )));
        }
        if assignment.pilot_start() >= base.ncols() {
            return Err(Error::invalid(format!(
                "pilot start {} leaves no pilot periods in {} columns",
                assignment.pilot_start(),
                base.ncols()
            )));
        }
        match (&covariates, &beta) {
            (Some(x), Some(b)) => {
                let (nu, nt, p) = x.dims();
                if (nu, nt) != (base.nrows(), base.ncols()) || p != b.len() {
                    return Err(Error::invalid(format!(
                        "covariates are {nu}x{nt}x{p}, expected {}x{}x{}",
                        base.nrows(),
                        base.ncols(),
                        b.len()
                    )));
                }
            }
            (None, None) => {}
            _ => return Err(Error::invalid("covariates and beta must be given together")),
        }
        Ok(TreatmentPanel {
            base,
            assignment,
            covariates,
            beta,
        })
    }

    pub fn covariate_adjusted(&self) -> bool {
        self.beta.is_some()
    }

    /// Outcomes with `xᵀβ` removed from every observed cell.
    pub fn adjusted(&self) -> ObservedPanel {
        match (&self.covariates, &self.beta) {
            (Some(x), Some(b)) => {
                let v = self.base.values();
                let mask = self.base.mask();
                let values = Mat::from_fn(v.nrows(), v.ncols(), |i, t| {
                    if mask.get(i, t) {
                        v[(i, t)] - x.get(i, t).iter().zip(b).map(|(a, c)| a * c).sum::<f64>()
                    } else {
                        0.0
                    }
                });
                ObservedPanel::new(
                    values,
                    mask.clone(),
                    self.base.unit_labels().to_vec(),
                    self.base.time_labels().to_vec(),
                )
                .expect("adjustment preserves panel invariants")
            }
            _ => self.base.clone(),
        }
    }

    pub fn n_periods(&self) -> usize {
        self.base.ncols()
    }

    pub fn pilot_periods(&self) -> std::ops::Range<usize> {
        self.assignment.pilot_start()..self.base.ncols()
    }

    /// Units receiving any treatment `d ≥ 1`.
    pub fn treated_units(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.assignment.groups()[1..].iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}

/// `Ỹ^(d)`: every unit before the pilot, plus the units of `I_d` during it.
/// `d = 0` gives the control panel.
pub fn build_treatment_panel(
    base: &ObservedPanel,
    assignment: &TreatmentAssignment,
    d: usize,
) -> Result<(ObservedPanel, MissingPattern)> {
    let group = assignment
        .group(d)
        .ok_or_else(|| Error::invalid(format!("unknown treatment id {d}")))?;
    let t0 = assignment.pilot_start();
    let (n, m) = (base.nrows(), base.ncols());
    let mut member = vec![false; n];
    for &i in group {
        member[i] = true;
    }
    let mask = Mask::from_fn(n, m, |i, t| base.mask().get(i, t) && (t < t0 || member[i]));
    let values = Mat::from_fn(n, m, |i, t| if mask.get(i, t) { base.values()[(i, t)] } else { 0.0 });
    let panel = ObservedPanel::new(values, mask, base.unit_labels().to_vec(), base.time_labels().to_vec())?;
    let pattern = classify_pattern(&panel);
    Ok((panel, pattern))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreatmentOptions {
    pub rank: RankChoice,
    pub group_cap: Option<usize>,
    pub lambda: LambdaChoice,
    pub solver: SolverOptions,
}

impl Default for TreatmentOptions {
    fn default() -> Self {
        TreatmentOptions {
            rank: RankChoice::Auto { r_max: 8 },
            group_cap: None,
            lambda: LambdaChoice::Rule,
            solver: SolverOptions::default(),
        }
    }
}

/// Per-treatment panels with the shared rank and noise scale.
#[derive(Debug, Clone)]
pub struct TreatmentFit {
    pub panels: Vec<(ObservedPanel, MissingPattern)>,
    pub groups: Vec<Vec<usize>>,
    pub pilot_start: usize,
    pub rank: usize,
    /// Pooled `√(Σ_δ ‖Y_{δ,pre} − P_r(Y_{δ,pre})‖² / (N T_0))`.
    pub sigma_hat: f64,
    pub cap: usize,
    pub opts: TreatmentOptions,
}

pub fn prepare(tp: &TreatmentPanel, opts: &TreatmentOptions) -> Result<TreatmentFit> {
    opts.solver.validate()?;
    let adjusted = tp.adjusted();
    let t0 = tp.assignment.pilot_start();
    let n = adjusted.nrows();
    if (0..n).any(|i| (0..t0).any(|t| !adjusted.mask().get(i, t))) {
        return Err(Error::UnsupportedPattern(
            "every unit must be observed in all pre-pilot periods".into(),
        ));
    }
    let all: Vec<usize> = (0..n).collect();
    let pre: Vec<usize> = (0..t0).collect();
    let pre_block = completion::extract(adjusted.values().as_ref(), &all, &pre);
    let r = completion::resolve_rank(opts.rank, pre_block.as_ref())?;
    let mut ss = 0.0;
    for g in tp.assignment.groups() {
        if g.is_empty() {
            continue;
        }
        let block = completion::extract(adjusted.values().as_ref(), g, &pre);
        if r < g.len().min(t0) {
            let fit = linalg::thin_svd(block.as_ref())?.reconstruct(r);
            ss += linalg::frobenius_diff(block.as_ref(), fit.as_ref()).powi(2);
        }
    }
    let sigma_hat = (ss / (n * t0) as f64).sqrt();
    let mut panels = Vec::with_capacity(tp.assignment.n_treatments());
    for d in 0..tp.assignment.n_treatments() {
        let g = &tp.assignment.groups()[d];
        if g.len() <= r || g.len() == n {
            return Err(Error::invalid(format!(
                "treatment {d} has {} units; each group needs more than rank {r} units and must leave some out",
                g.len()
            )));
        }
        panels.push(build_treatment_panel(&adjusted, &tp.assignment, d)?);
    }
    let n_min = tp.assignment.groups().iter().map(Vec::len).min().unwrap_or(0);
    let cap = opts.group_cap.unwrap_or_else(|| subgroup::default_cap(n_min, t0));
    if cap == 0 {
        return Err(Error::invalid("group cap must be at least 1"));
    }
    Ok(TreatmentFit {
        panels,
        groups: tp.assignment.groups().to_vec(),
        pilot_start: t0,
        rank: r,
        sigma_hat,
        cap,
        opts: *opts,
    })
}

/// Estimates of `m^(δ)_{it}` for a set of units at one pilot period, with
/// each unit's row influence over `I_δ` and the column influence of the
/// `Y_0` fit over the pre-pilot periods.
#[derive(Debug, Clone)]
pub struct PeriodFit {
    pub delta: usize,
    pub t: usize,
    pub units: Vec<usize>,
    pub estimates: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl PeriodFit {
    fn position(&self, unit: usize) -> Result<usize> {
        self.units
            .binary_search(&unit)
            .map_err(|_| Error::invalid(format!("unit {unit} was not fitted")))
    }

    /// Group mean estimate with its averaged row influence.
    pub fn group(&self, group: &[usize]) -> Result<GroupInfluence> {
        if group.is_empty() {
            return Err(Error::invalid("empty group"));
        }
        let n0 = self.c.len().max(self.rho.first().map_or(0, Vec::len));
        let mut rho = vec![0.0; self.rho.first().map_or(n0, Vec::len)];
        let mut est = 0.0;
        for &u in group {
            let k = self.position(u)?;
            est += self.estimates[k];
            for (a, b) in rho.iter_mut().zip(&self.rho[k]) {
                *a += b;
            }
        }
        let g = group.len() as f64;
        rho.iter_mut().for_each(|v| *v /= g);
        Ok(GroupInfluence {
            estimate: est / g,
            rho,
            c: self.c.clone(),
            size: group.len(),
        })
    }
}

/// Influence vectors of one group-average estimate `m̂^(δ)_{G,t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfluence {
    pub estimate: f64,
    /// Weights on the period-`t` noise of the units in `I_δ`.
    pub rho: Vec<f64>,
    /// Weights on the pre-pilot noise of the group's units.
    pub c: Vec<f64>,
    pub size: usize,
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `V̂_G(d, d′) = σ̂²‖ρ^(d)‖² + σ̂²‖ρ^(d′)‖² + (σ̂²/|G|)‖c^(d) − c^(d′)‖²`.
pub fn effect_variance(a: &GroupInfluence, b: &GroupInfluence, sigma2: f64) -> Result<f64> {
    if a.size != b.size || a.c.len() != b.c.len() {
        return Err(Error::invalid("influence vectors describe different groups"));
    }
    Ok(sigma2 * (sq(&a.rho) + sq(&b.rho)) + sigma2 / a.size as f64 * diff_sq(&a.c, &b.c))
}

/// Variance of the window mean `|S|⁻¹ Σ_{t∈S} (m̂^(d)_{G,t} − m̂^(d′)_{G,t})`.
pub fn aggregate_window_variance(a: &[GroupInfluence], b: &[GroupInfluence], sigma2: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("empty window"));
    }
    if a.len() != b.len() {
        return Err(Error::invalid("window lengths differ"));
    }
    let s = a.len() as f64;
    let size = a[0].size;
    let p = a[0].c.len();
    let mut row = 0.0;
    let mut ca = vec![0.0; p];
    let mut cb = vec![0.0; p];
    for (x, y) in a.iter().zip(b) {
        if x.size != size || y.size != size || x.c.len() != p || y.c.len() != p {
            return Err(Error::invalid("influence vectors describe different groups"));
        }
        row += sq(&x.rho) + sq(&y.rho);
        for k in 0..p {
            ca[k] += x.c[k] / s;
            cb[k] += y.c[k] / s;
        }
    }
    Ok(sigma2 * row / (s * s) + sigma2 / size as f64 * diff_sq(&ca, &cb))
}

fn gram_inverse(x: faer::MatRef<'_, f64>) -> Result<Mat<f64>> {
    linalg::sym_inverse_guarded(linalg::gram(x).as_ref(), MAX_GRAM_CONDITION)
}

/// Fit `m^(δ)` at period `t` for `units` (sorted, distinct).
pub fn fit_period(tf: &TreatmentFit, delta: usize, units: &[usize], t: usize) -> Result<PeriodFit> {
    let (panel, pattern) = tf
        .panels
        .get(delta)
        .ok_or_else(|| Error::invalid(format!("unknown treatment id {delta}")))?;
    if t < tf.pilot_start || t >= panel.ncols() {
        return Err(Error::invalid(format!("period {t} is not a pilot period")));
    }
    let base = &tf.groups[delta];
    let (inside, outside): (Vec<usize>, Vec<usize>) =
        units.iter().partition(|u| base.binary_search(u).is_ok());
    let mut subs = vec![subgroup::assemble_inference_observed(panel, pattern, &inside, t)?];
    for chunk in outside.chunks(tf.cap) {
        subs.push(subgroup::assemble_inference(panel, pattern, chunk, t)?);
    }
    let opts = &tf.opts;
    for sub in subs.iter_mut() {
        sub.lambda = Some(completion::subproblem_lambda(
            opts.lambda,
            tf.sigma_hat,
            sub,
            opts.solver.lambda_constant,
        )?);
    }
    let fits: Vec<SubFit> = subs
        .par_iter()
        .map(|s| fit_subproblem(s, s.lambda.unwrap_or(0.0), tf.rank, &opts.solver))
        .collect::<Result<_>>()?;

    let y0 = &subs[0];
    let z = &fits[0].factors.z_hat;
    let zt: Vec<f64> = (0..tf.rank).map(|k| z[(y0.target_cols[0], k)]).collect();
    let c = inference::column_influence(&zt, z.subrows(0, y0.base_cols))?;

    let mut per_unit: Vec<(usize, f64, Vec<f64>)> = Vec::with_capacity(units.len());
    for (sub, fit) in subs.iter().zip(&fits) {
        let x = &fit.factors.x_hat;
        let x_base = x.subrows(0, sub.base_rows);
        let inv = gram_inverse(x_base)?;
        let tc = sub.target_cols[0];
        for &k in &sub.group_rows {
            let xk: Vec<f64> = (0..tf.rank).map(|j| x[(k, j)]).collect();
            let w: Vec<f64> = (0..tf.rank)
                .map(|a| (0..tf.rank).map(|b| inv[(a, b)] * xk[b]).sum())
                .collect();
            let rho = (0..sub.base_rows)
                .map(|i| (0..tf.rank).map(|j| w[j] * x_base[(i, j)]).sum())
                .collect();
            per_unit.push((sub.row_map[k], fit.debiased[(k, tc)], rho));
        }
    }
    per_unit.sort_by_key(|e| e.0);
    let mut out = PeriodFit {
        delta,
        t,
        units: Vec::with_capacity(per_unit.len()),
        estimates: Vec::with_capacity(per_unit.len()),
        rho: Vec::with_capacity(per_unit.len()),
        c,
    };
    for (u, e, r) in per_unit {
        out.units.push(u);
        out.estimates.push(e);
        out.rho.push(r);
    }
    Ok(out)
}

/// One `(d, t)` entry of an effect series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectPoint {
    pub d: usize,
    pub t: usize,
    pub mu: f64,
    pub theta: f64,
    pub var_mu: f64,
    pub var_theta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectSeries {
    pub group: Vec<usize>,
    pub rank: usize,
    pub sigma_hat: f64,
    pub points: Vec<EffectPoint>,
    #[serde(skip)]
    pub influence: Vec<Vec<GroupInfluence>>,
}

impl EffectSeries {
    pub fn get(&self, d: usize, t: usize) -> Option<&EffectPoint> {
        self.points.iter().find(|p| p.d == d && p.t == t)
    }

    pub fn periods(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.points.iter().map(|p| p.t).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn n_treatments(&self) -> usize {
        self.influence.first().map_or(0, Vec::len)
    }

    /// Mean `θ̂^(d)` over a window of periods with its variance.
    pub fn window_theta(&self, d: usize, window: &[usize]) -> Result<(f64, f64)> {
        if d == 0 || d >= self.n_treatments() {
            return Err(Error::invalid(format!("treatment {d} out of range")));
        }
        let periods = self.periods();
        let mut a = Vec::with_capacity(window.len());
        let mut b = Vec::with_capacity(window.len());
        let mut est = 0.0;
        for &t in window {
            let k = periods
                .binary_search(&t)
                .map_err(|_| Error::invalid(format!("period {t} was not estimated")))?;
            a.push(self.influence[k][d].clone());
            b.push(self.influence[k][d - 1].clone());
            est += self.influence[k][d].estimate - self.influence[k][d - 1].estimate;
        }
        let var = aggregate_window_variance(&a, &b, self.sigma_hat * self.sigma_hat)?;
        Ok((est / window.len().max(1) as f64, var))
    }
}

fn validate_group(tp: &TreatmentPanel, group: &[usize]) -> Result<Vec<usize>> {
    if group.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    let mut g = group.to_vec();
    g.sort_unstable();
    g.dedup();
    if let Some(&u) = g.iter().find(|&&u| u >= tp.base.nrows()) {
        return Err(Error::invalid(format!("unit {u} outside the panel")));
    }
    Ok(g)
}

/// `μ̂^(d)_t`, `θ̂^(d)_t` and their variances over every pilot period.
pub fn estimate_effects(tp: &TreatmentPanel, group: &[usize], opts: &TreatmentOptions) -> Result<EffectSeries> {
    let periods: Vec<usize> = tp.pilot_periods().collect();
    estimate_effects_at(tp, group, &periods, opts)
}

pub fn estimate_effects_at(
    tp: &TreatmentPanel,
    group: &[usize],
    periods: &[usize],
    opts: &TreatmentOptions,
) -> Result<EffectSeries> {
    let group = validate_group(tp, group)?;
    let tf = prepare(tp, opts)?;
    effects_from_fit(&tf, &group, periods)
}

pub fn effects_from_fit(tf: &TreatmentFit, group: &[usize], periods: &[usize]) -> Result<EffectSeries> {
    if group.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    let mut g = group.to_vec();
    g.sort_unstable();
    g.dedup();
    let mut ts = periods.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if ts.is_empty() {
        return Err(Error::invalid("no periods requested"));
    }
    let n_d = tf.panels.len();
    let influence: Vec<Vec<GroupInfluence>> = ts
        .par_iter()
        .map(|&t| {
            (0..n_d)
                .map(|delta| fit_period(tf, delta, &g, t)?.group(&g))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let s2 = tf.sigma_hat * tf.sigma_hat;
    let mut points = Vec::with_capacity(ts.len() * (n_d - 1));
    for d in 1..n_d {
        for (k, &t) in ts.iter().enumerate() {
            let inf = &influence[k];
            points.push(EffectPoint {
                d,
                t,
                mu: inf[d].estimate - inf[0].estimate,
                theta: inf[d].estimate - inf[d - 1].estimate,
                var_mu: effect_variance(&inf[d], &inf[0], s2)?,
                var_theta: effect_variance(&inf[d], &inf[d - 1], s2)?,
            });
        }
    }
    Ok(EffectSeries {
        group: g,
        rank: tf.rank,
        sigma_hat: tf.sigma_hat,
        points,
        influence,
    })
}

/// `m̂^(a)_{it} − m̂^(b)_{it}` for the `k`-th fitted unit, with the
/// single-unit variance `σ̂²(‖ρ_i^(a)‖² + ‖ρ_i^(b)‖²) + σ̂²‖c^(a) − c^(b)‖²`.
pub fn unit_contrast(a: &PeriodFit, b: &PeriodFit, k: usize, sigma2: f64) -> (f64, f64) {
    let variance = sigma2 * (sq(&a.rho[k]) + sq(&b.rho[k])) + sigma2 * diff_sq(&a.c, &b.c);
    (a.estimates[k] - b.estimates[k], variance)
}

/// `θ̂^(d)_{it}` with variance `V̂_{d,it}` for one unit, period and treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCell {
    pub unit: usize,
    pub t: usize,
    pub d: usize,
    pub theta: f64,
    pub variance: f64,
}

/// Unit-level incremental effects for every `unit × period × d ≥ 1`.
pub fn unit_effect_cells(tf: &TreatmentFit, units: &[usize], periods: &[usize]) -> Result<Vec<UnitCell>> {
    let mut us = units.to_vec();
    us.sort_unstable();
    us.dedup();
    if us.is_empty() || periods.is_empty() {
        return Err(Error::invalid("no units or periods requested"));
    }
    let n_d = tf.panels.len();
    let s2 = tf.sigma_hat * tf.sigma_hat;
    let per_t: Vec<Vec<UnitCell>> = periods
        .par_iter()
        .map(|&t| {
            let fits = (0..n_d)
                .map(|delta| fit_period(tf, delta, &us, t))
                .collect::<Result<Vec<_>>>()?;
            let mut cells = Vec::with_capacity(us.len() * (n_d - 1));
            for (k, &u) in us.iter().enumerate() {
                for d in 1..n_d {
                    let (theta, variance) = unit_contrast(&fits[d], &fits[d - 1], k, s2);
                    cells.push(UnitCell {
                        unit: u,
                        t,
                        d,
                        theta,
                        variance,
                    });
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;
    Ok(per_t.into_iter().flatten().collect())
}

/// Time-averaged `θ̄̂^(d)_i` per unit and treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitEffect {
    pub unit: usize,
    pub d: usize,
    pub theta_bar: f64,
    pub periods: usize,
}

pub fn estimate_unit_effects(cells: &[UnitCell]) -> Result<Vec<UnitEffect>> {
    if cells.is_empty() {
        return Err(Error::invalid("no pilot periods"));
    }
    let mut acc: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
    for c in cells {
        let e = acc.entry((c.unit, c.d)).or_insert((0.0, 0));
        e.0 += c.theta;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|((unit, d), (sum, k))| UnitEffect {
            unit,
            d,
            theta_bar: sum / k as f64,
            periods: k,
        })
        .collect())
}

/// Mean `θ̂^(d)` over all cells of each treatment; index 0 is unused.
pub fn grand_mean_baseline(cells: &[UnitCell]) -> Vec<f64> {
    let d_max = cells.iter().map(|c| c.d).max().unwrap_or(0);
    let mut sum = vec![0.0; d_max + 1];
    let mut count = vec![0usize; d_max + 1];
    for c in cells {
        sum[c.d] += c.theta;
        count[c.d] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect()
}

/// Two-way fixed-effect estimates of the incremental effects `θ̃^(d)`,
/// `d = 1..D`, on a fully observed panel. Regressors are the cumulative
/// dummies `1{d_i ≥ d, t ≥ T_0}` after removing unit and period means.
pub fn two_way_fe(values: faer::MatRef<'_, f64>, assignment: &TreatmentAssignment) -> Result<Vec<f64>> {
    let (n, m) = (values.nrows(), values.ncols());
    let n_d = assignment.n_treatments();
    if n_d < 2 {
        return Err(Error::invalid("two-way fixed effects need at least one treatment"));
    }
    let t0 = assignment.pilot_start();
    if t0 >= m {
        return Err(Error::invalid("no pilot periods"));
    }
    let level: Vec<usize> = (0..n)
        .map(|i| assignment.treatment_of(i).ok_or_else(|| Error::invalid(format!("unit {i} unassigned"))))
        .collect::<Result<_>>()?;
    let demean = |f: &dyn Fn(usize, usize) -> f64| -> Mat<f64> {
        let raw = Mat::from_fn(n, m, |i, t| f(i, t));
        let rows: Vec<f64> = (0..n).map(|i| (0..m).map(|t| raw[(i, t)]).sum::<f64>() / m as f64).collect();
        let cols: Vec<f64> = (0..m).map(|t| (0..n).map(|i| raw[(i, t)]).sum::<f64>() / n as f64).collect();
        let all = rows.iter().sum::<f64>() / n as f64;
        Mat::from_fn(n, m, |i, t| raw[(i, t)] - rows[i] - cols[t] + all)
    };
    let y = demean(&|i, t| values[(i, t)]);
    let xs: Vec<Mat<f64>> = (1..n_d)
        .map(|d| demean(&|i, t| if level[i] >= d && t >= t0 { 1.0 } else { 0.0 }))
        .collect();
    let k = xs.len();
    let dotm = |a: &Mat<f64>, b: &Mat<f64>| -> f64 {
        (0..m).map(|t| a.col_as_slice(t).iter().zip(b.col_as_slice(t)).map(|(x, y)| x * y).sum::<f64>()).sum()
    };
    let xtx = Mat::from_fn(k, k, |a, b| dotm(&xs[a], &xs[b]));
    let xty: Vec<f64> = xs.iter().map(|x| dotm(x, &y)).collect();
    let inv = linalg::sym_inverse_guarded(xtx.as_ref(), MAX_GRAM_CONDITION)?;
    Ok((0..k).map(|a| (0..k).map(|b| inv[(a, b)] * xty[b]).sum()).collect())
}

/// Critical value and decision at one confidence level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    pub level: f64,
    pub critical_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecTestResult {
    pub statistic: f64,
    pub decisions: Vec<LevelDecision>,
    pub n_draws: usize,
    pub n_cells: usize,
    pub seed: u64,
}

impl SpecTestResult {
    pub fn critical_value(&self, level: f64) -> Option<f64> {
        self.decisions.iter().find(|d| d.level == level).map(|d| d.critical_value)
    }

    pub fn reject(&self, level: f64) -> Option<bool> {
        self.decisions.iter().find(|d| d.level == level).map(|d| d.reject)
    }
}

pub const MIN_BOOTSTRAP_DRAWS: usize = 100;

/// `max_{i,t,d} |θ̂ − baseline_d| / √V̂` against the maximum of independent
/// standard normals, one per cell, simulated `n_draws` times.
pub fn spec_test(
    cells: &[UnitCell],
    baseline: &[f64],
    levels: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<SpecTestResult> {
    if cells.is_empty() {
        return Err(Error::invalid("no cells to test"));
    }
    if n_draws < MIN_BOOTSTRAP_DRAWS {
        return Err(Error::invalid(format!(
            "at least {MIN_BOOTSTRAP_DRAWS} bootstrap draws are required, got {n_draws}"
        )));
    }
    for &l in levels {
        inference::check_level(l)?;
    }
    let mut statistic: f64 = 0.0;
    for c in cells {
        if !(c.variance > 0.0) || !c.variance.is_finite() {
            return Err(Error::invalid(format!(
                "cell (unit {}, period {}, treatment {}) has variance {}",
                c.unit, c.t, c.d, c.variance
            )));
        }
        let b = *baseline
            .get(c.d)
            .ok_or_else(|| Error::invalid(format!("no baseline for treatment {}", c.d)))?;
        statistic = statistic.max((c.theta - b).abs() / c.variance.sqrt());
    }
    let maxima = bootstrap_max(cells.len(), n_draws, seed);
    let decisions = levels
        .iter()
        .map(|&level| {
            let cv = empirical_quantile(&maxima, level);
            LevelDecision {
                level,
                critical_value: cv,
                reject: statistic > cv,
            }
        })
        .collect();
    Ok(SpecTestResult {
        statistic,
        decisions,
        n_draws,
        n_cells: cells.len(),
        seed,
    })
}

/// Sorted `max_k |g_k|` over `n_cells` standard normals per draw. Draw `b`
/// uses stream `b` of a ChaCha8 generator keyed by `seed`, so results do not
/// depend on scheduling.
pub fn bootstrap_max(n_cells: usize, n_draws: usize, seed: u64) -> Vec<f64> {
    let mut maxima: Vec<f64> = (0..n_draws as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            (0..n_cells).fold(0.0f64, |m, _| m.max(normal::standard_normal(&mut rng).abs()))
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    maxima
}

/// Smallest sample value with empirical CDF at least `p` (sorted input).
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Consecutive windows of `k` periods (the last may be shorter).
pub fn windows(periods: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    Ok(periods.chunks(k).map(<[usize]>::to_vec).collect())
}
