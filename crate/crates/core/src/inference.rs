//! Noise scale, feasible variance of group averages, and confidence intervals.

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{self, fit_subproblem, LambdaChoice, RankChoice, SubFit};
use crate::debias::FactorPair;
use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;
use crate::panel::{MissingPattern, ObservedPanel, PatternKind};
use crate::solver::{self, SolverOptions};
use crate::subgroup::{self, GroupingPlan, SubProblem};

/// Condition-number ceiling for the r×r Gram matrices.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Root mean square residual over a fully observed block.
pub fn sigma_hat(y_block: MatRef<'_, f64>, m_hat_block: MatRef<'_, f64>) -> Result<f64> {
    completion::rms_residual(y_block, m_hat_block)
}

/// Factor pieces of one inference subproblem entering `V̂_G`.
#[derive(Debug, Clone)]
pub struct VarianceTerm {
    /// `|G_l|`
    pub size: usize,
    /// `X̄̂_{G_l}`
    pub x_group_mean: Vec<f64>,
    /// Rows of `X̂_l` for the always-observed units.
    pub x_base: Mat<f64>,
    /// `Ẑ_{l,t0}`
    pub z_target: Vec<f64>,
    /// Rows of `Ẑ_l` for the pre-adoption periods.
    pub z_pre: Mat<f64>,
}

impl VarianceTerm {
    pub fn from_fit(sub: &SubProblem, factors: &FactorPair) -> Result<Self> {
        let r = factors.rank;
        let (n, m) = sub.shape();
        if factors.x_hat.nrows() != n || factors.z_hat.nrows() != m {
            return Err(Error::ShapeMismatch {
                expected: (n, m),
                got: (factors.x_hat.nrows(), factors.z_hat.nrows()),
            });
        }
        if sub.target_cols.len() != 1 || sub.group_rows.is_empty() {
            return Err(Error::invalid("inference subproblems target one period and a nonempty group"));
        }
        let size = sub.group_rows.len();
        let x_group_mean = (0..r)
            .map(|k| sub.group_rows.iter().map(|&i| factors.x_hat[(i, k)]).sum::<f64>() / size as f64)
            .collect();
        let t = sub.target_cols[0];
        Ok(VarianceTerm {
            size,
            x_group_mean,
            x_base: factors.x_hat.subrows(0, sub.base_rows).to_owned(),
            z_target: (0..r).map(|k| factors.z_hat[(t, k)]).collect(),
            z_pre: factors.z_hat.subrows(0, sub.base_cols).to_owned(),
        })
    }

    pub fn rank(&self) -> usize {
        self.x_group_mean.len()
    }
}

fn quad_apply(inv: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    (0..inv.nrows())
        .map(|i| (0..v.len()).map(|j| inv[(i, j)] * v[j]).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `X̄ᵀ(Σ_j X_jX_jᵀ)^{-1} X_i` for each base row `i`.
pub fn row_influence(x_mean: &[f64], x_base: MatRef<'_, f64>) -> Result<Vec<f64>> {
    let inv = linalg::sym_inverse_guarded(linalg::gram(x_base).as_ref(), MAX_GRAM_CONDITION)?;
    let w = quad_apply(inv.as_ref(), x_mean);
    Ok((0..x_base.nrows())
        .map(|i| (0..w.len()).map(|k| w[k] * x_base[(i, k)]).sum())
        .collect())
}

/// `Ẑ_{t0}ᵀ(Σ_s Ẑ_sẐ_sᵀ)^{-1} Ẑ_s` for each pre-period `s`. Its squared norm
/// equals `Ẑ_{t0}ᵀ(Σ_s Ẑ_sẐ_sᵀ)^{-1}Ẑ_{t0}`.
pub fn column_influence(z_target: &[f64], z_pre: MatRef<'_, f64>) -> Result<Vec<f64>> {
    row_influence(z_target, z_pre)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub row: f64,
    pub col: f64,
    pub total: f64,
}

/// `V̂_G = σ̂² Σ_i (Σ_l α_l X̄_lᵀA_l^{-1}X_{l,i})² + (σ̂²/|G|) Σ_l α_l Ẑ_{l,t0}ᵀB_l^{-1}Ẑ_{l,t0}`
/// with `α_l = |G_l|/|G|`.
pub fn variance_group_average(terms: &[VarianceTerm], sigma2: f64) -> Result<VarianceComponents> {
    if terms.is_empty() {
        return Err(Error::invalid("no variance terms"));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid("sigma^2 must be nonnegative"));
    }
    let r = terms[0].rank();
    let n0 = terms[0].x_base.nrows();
    for t in terms {
        if t.rank() != r || t.x_base.ncols() != r || t.z_pre.ncols() != r || t.z_target.len() != r {
            return Err(Error::invalid("variance terms disagree on rank"));
        }
        if t.x_base.nrows() != n0 {
            return Err(Error::invalid("variance terms disagree on the always-observed units"));
        }
    }
    let total_size: usize = terms.iter().map(|t| t.size).sum();
    let g = total_size as f64;
    let mut rho = vec![0.0; n0];
    let mut col = 0.0;
    for t in terms {
        let alpha = t.size as f64 / g;
        for (acc, v) in rho.iter_mut().zip(row_influence(&t.x_group_mean, t.x_base.as_ref())?) {
            *acc += alpha * v;
        }
        let inv = linalg::sym_inverse_guarded(linalg::gram(t.z_pre.as_ref()).as_ref(), MAX_GRAM_CONDITION)?;
        col += alpha * dot(&t.z_target, &quad_apply(inv.as_ref(), &t.z_target));
    }
    let row = sigma2 * rho.iter().map(|v| v * v).sum::<f64>();
    let col = sigma2 * col / g;
    Ok(VarianceComponents {
        row,
        col,
        total: row + col,
    })
}

/// `estimate ± z_{(1+level)/2} √variance`
pub fn group_average_ci(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("variance must be positive, got {variance}")));
    }
    let half = normal::two_sided_critical(level) * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

pub fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("level must lie in (0, 1), got {level}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InferenceOptions {
    pub rank: RankChoice,
    pub level: f64,
    pub group_cap: Option<usize>,
    pub lambda: LambdaChoice,
    pub solver: SolverOptions,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            rank: RankChoice::Auto { r_max: 8 },
            level: 0.95,
            group_cap: None,
            lambda: LambdaChoice::Rule,
            solver: SolverOptions::default(),
        }
    }
}

/// Empirical proxies for the conditioning assumptions; reported, not enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceDiagnostics {
    /// Largest condition number among the r×r Gram matrices.
    pub max_gram_condition: f64,
    /// Largest normalized leverage `(n/r) X_iᵀA^{-1}X_i` over base rows.
    pub row_coherence: f64,
    /// Largest normalized leverage over pre-period columns.
    pub col_coherence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupAverageInference {
    pub estimate: f64,
    pub variance: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub row_component: f64,
    pub col_component: f64,
    pub sigma_hat: f64,
    pub sigma_initial: f64,
    pub level: f64,
    pub rank: usize,
    pub n_groups: usize,
    pub period: usize,
    pub units: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub diagnostics: InferenceDiagnostics,
}

/// Serialized inference result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub estimate: f64,
    pub variance: f64,
    pub ci: [f64; 2],
    pub components: Components,
    pub sigma_hat: f64,
    pub level: f64,
    pub n_groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub row: f64,
    pub col: f64,
}

impl GroupAverageInference {
    pub fn record(&self) -> InferenceRecord {
        InferenceRecord {
            estimate: self.estimate,
            variance: self.variance,
            ci: [self.ci_lower, self.ci_upper],
            components: Components {
                row: self.row_component,
                col: self.col_component,
            },
            sigma_hat: self.sigma_hat,
            level: self.level,
            n_groups: self.n_groups,
        }
    }

    /// Confidence interval at another level, same variance.
    pub fn ci_at(&self, level: f64) -> Result<(f64, f64)> {
        group_average_ci(self.estimate, self.variance, level)
    }
}

/// Units untreated at `t0` and the earliest pre-adoption periods: the block
/// every inference subproblem shares.
pub fn inference_reference(panel: &ObservedPanel, pattern: &MissingPattern, t0: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    match pattern.kind {
        PatternKind::Staggered => {
            let rows = (0..panel.nrows())
                .filter(|&i| pattern.adoption_time_of(i).is_none_or(|a| a > t0))
                .collect();
            Ok((rows, (0..pattern.adoption_times[0]).collect()))
        }
        _ if pattern.is_block_family() => Ok((pattern.control_units(), pattern.control_periods())),
        kind => Err(Error::UnsupportedPattern(format!(
            "inference needs a block or staggered pattern, found {kind:?}"
        ))),
    }
}

fn leverage(x: MatRef<'_, f64>) -> Result<(f64, f64)> {
    let g = linalg::gram(x);
    let (vals, _) = linalg::sym_eigen(g.as_ref())?;
    let cond = match (vals.first(), vals.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    };
    let inv = linalg::sym_inverse_guarded(g.as_ref(), MAX_GRAM_CONDITION)?;
    let (n, r) = (x.nrows(), x.ncols());
    let mut top: f64 = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..r).map(|k| x[(i, k)]).collect();
        top = top.max(dot(&row, &quad_apply(inv.as_ref(), &row)));
    }
    Ok((cond, top * n as f64 / r as f64))
}

/// Fitted inference subproblems for a group average at one period.
#[derive(Debug, Clone)]
pub struct InferenceFits {
    pub plan: GroupingPlan,
    pub subproblems: Vec<SubProblem>,
    pub fits: Vec<SubFit>,
    pub rank: usize,
    pub sigma_initial: f64,
    pub sigma_hat: f64,
}

impl InferenceFits {
    /// `|G|⁻¹ Σ_{i∈G}` of the debiased entries at the target period.
    pub fn estimate(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (sub, fit) in self.subproblems.iter().zip(&self.fits) {
            let t = sub.target_cols[0];
            for &i in &sub.group_rows {
                sum += fit.debiased[(i, t)];
                count += 1;
            }
        }
        sum / count as f64
    }

    pub fn terms(&self) -> Result<Vec<VarianceTerm>> {
        self.subproblems
            .iter()
            .zip(&self.fits)
            .map(|(s, f)| VarianceTerm::from_fit(s, &f.factors))
            .collect()
    }

    pub fn diagnostics(&self) -> Result<InferenceDiagnostics> {
        let mut d = InferenceDiagnostics {
            max_gram_condition: 0.0,
            row_coherence: 0.0,
            col_coherence: 0.0,
        };
        for t in self.terms()? {
            let (cx, lx) = leverage(t.x_base.as_ref())?;
            let (cz, lz) = leverage(t.z_pre.as_ref())?;
            d.max_gram_condition = d.max_gram_condition.max(cx).max(cz);
            d.row_coherence = d.row_coherence.max(lx);
            d.col_coherence = d.col_coherence.max(lz);
        }
        Ok(d)
    }
}

/// Assemble, solve and debias every inference subproblem for `group` at `t0`.
pub fn fit_inference(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    group: &[usize],
    t0: usize,
    opts: &InferenceOptions,
) -> Result<InferenceFits> {
    opts.solver.validate()?;
    if t0 >= panel.ncols() {
        return Err(Error::invalid(format!("period {t0} outside the panel")));
    }
    let (ref_rows, ref_cols) = inference_reference(panel, pattern, t0)?;
    let block = completion::extract(panel.values().as_ref(), &ref_rows, &ref_cols);
    let r = completion::resolve_rank(opts.rank, block.as_ref())?;
    let sigma_initial = solver::estimate_sigma_initial(block.as_ref(), r)?;
    let cap = opts
        .group_cap
        .unwrap_or_else(|| subgroup::pattern_default_cap(pattern, panel.nrows()));
    let (plan, mut subs) = subgroup::plan_inference(panel, pattern, group, t0, cap)?;
    for sub in subs.iter_mut() {
        sub.lambda = Some(completion::subproblem_lambda(
            opts.lambda,
            sigma_initial,
            sub,
            opts.solver.lambda_constant,
        )?);
    }
    let fits: Vec<SubFit> = subs
        .par_iter()
        .map(|s| fit_subproblem(s, s.lambda.unwrap_or(0.0), r, &opts.solver))
        .collect::<Result<_>>()?;

    let ref_cols_n = ref_cols.len();
    let mut mean = Mat::<f64>::zeros(ref_rows.len(), ref_cols_n);
    for fit in &fits {
        // Base rows and the earliest pre columns lead every subproblem.
        mean += fit.debiased.as_ref().submatrix(0, 0, ref_rows.len(), ref_cols_n);
    }
    mean *= faer::Scale(1.0 / fits.len() as f64);
    let sigma_hat = sigma_hat(block.as_ref(), mean.as_ref())?;
    Ok(InferenceFits {
        plan,
        subproblems: subs,
        fits,
        rank: r,
        sigma_initial,
        sigma_hat,
    })
}

pub fn infer_group_average(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    group: &[usize],
    t0: usize,
    opts: &InferenceOptions,
) -> Result<GroupAverageInference> {
    check_level(opts.level)?;
    let fits = fit_inference(panel, pattern, group, t0, opts)?;
    let estimate = fits.estimate();
    let comps = variance_group_average(&fits.terms()?, fits.sigma_hat * fits.sigma_hat)?;
    let (ci_lower, ci_upper) = group_average_ci(estimate, comps.total, opts.level)?;
    let mut units: Vec<usize> = fits.plan.observed.clone();
    units.extend(fits.plan.groups.iter().flatten());
    units.sort_unstable();
    Ok(GroupAverageInference {
        estimate,
        variance: comps.total,
        ci_lower,
        ci_upper,
        row_component: comps.row,
        col_component: comps.col,
        sigma_hat: fits.sigma_hat,
        sigma_initial: fits.sigma_initial,
        level: opts.level,
        rank: fits.rank,
        n_groups: fits.subproblems.len(),
        period: t0,
        units,
        lambdas: fits.subproblems.iter().map(|s| s.lambda.unwrap_or(0.0)).collect(),
        diagnostics: fits.diagnostics()?,
    })
}
