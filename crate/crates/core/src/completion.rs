//! End-to-end completion: classify, split, solve, debias, reassemble.

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::Serialize;

use crate::debias::{self, FactorPair};
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{classify_pattern, MissingPattern, ObservedPanel, PatternKind};
use crate::solver::{self, SolveDiagnostics, SolverOptions};
use crate::subgroup::{self, SubProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RankChoice {
    Fixed(usize),
    /// Eigenvalue-ratio estimate on the always-observed block.
    Auto { r_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LambdaChoice {
    /// `λ_l = C_λ σ̂ √max(n_l, t_l)` per subproblem.
    Rule,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompletionOptions {
    pub rank: RankChoice,
    pub group_cap: Option<usize>,
    pub lambda: LambdaChoice,
    pub solver: SolverOptions,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        CompletionOptions {
            rank: RankChoice::Auto { r_max: 8 },
            group_cap: None,
            lambda: LambdaChoice::Rule,
            solver: SolverOptions::default(),
        }
    }
}

/// Penalized fit, debiased estimate and de-shrunken factors of one subproblem.
#[derive(Debug, Clone)]
pub struct SubFit {
    pub penalized: Mat<f64>,
    pub debiased: Mat<f64>,
    pub factors: FactorPair,
    pub diagnostics: SolveDiagnostics,
}

pub fn fit_subproblem(sub: &SubProblem, lam: f64, r: usize, opts: &SolverOptions) -> Result<SubFit> {
    let fit = solver::solve_nuclear_fit(sub.values.as_ref(), &sub.mask, lam, opts)?;
    let factors = debias::deshrink_from_svd(&fit.svd, lam, r)?;
    let debiased = debias::debias_project(fit.estimate.as_ref(), sub.values.as_ref(), &sub.mask, r)?;
    Ok(SubFit {
        penalized: fit.estimate,
        debiased,
        factors,
        diagnostics: fit.diagnostics,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SubproblemReport {
    pub rows: usize,
    pub cols: usize,
    pub targets: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub rel_change: f64,
}

impl SubproblemReport {
    pub fn new(sub: &SubProblem, fit: &SubFit) -> Self {
        let (rows, cols) = sub.shape();
        SubproblemReport {
            rows,
            cols,
            targets: sub.group_rows.len() * sub.target_cols.len(),
            lambda: fit.diagnostics.lambda,
            iterations: fit.diagnostics.iterations,
            converged: fit.diagnostics.converged,
            final_objective: fit.diagnostics.final_objective,
            rel_change: fit.diagnostics.rel_change,
        }
    }
}

/// Completed panel with its fit metadata.
#[derive(Debug, Clone)]
pub struct LowRankEstimate {
    pub completed: Mat<f64>,
    /// Average debiased fit per cell (NaN where no subproblem reaches).
    pub fitted: Mat<f64>,
    pub pattern: MissingPattern,
    pub rank: usize,
    pub cap: usize,
    /// Noise scale used for λ.
    pub sigma_initial: f64,
    /// Residual noise scale of the debiased fit on the always-observed block.
    pub sigma_hat: f64,
    pub factors: Vec<FactorPair>,
    pub subproblems: Vec<SubproblemReport>,
}

/// Always-observed rows and columns used for the pilot noise scale and the
/// rank estimate.
pub fn reference_block(pattern: &MissingPattern, nrows: usize, ncols: usize) -> (Vec<usize>, Vec<usize>) {
    match pattern.kind {
        PatternKind::FullyObserved => ((0..nrows).collect(), (0..ncols).collect()),
        PatternKind::Staggered => {
            let rows = (0..nrows)
                .filter(|&i| pattern.adoption_time_of(i).is_none())
                .collect();
            (rows, (0..pattern.adoption_times[0]).collect())
        }
        _ => (pattern.control_units(), pattern.control_periods()),
    }
}

pub fn extract(values: MatRef<'_, f64>, rows: &[usize], cols: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), cols.len(), |i, j| values[(rows[i], cols[j])])
}

/// Rank from the options, validated against a block's dimensions.
pub fn resolve_rank(choice: RankChoice, block: MatRef<'_, f64>) -> Result<usize> {
    let dim = block.nrows().min(block.ncols());
    match choice {
        RankChoice::Fixed(r) => {
            if r == 0 || r >= dim {
                return Err(Error::invalid(format!(
                    "rank {r} must lie in 1..{dim} for the {}x{} always-observed block",
                    block.nrows(),
                    block.ncols()
                )));
            }
            Ok(r)
        }
        RankChoice::Auto { r_max } => {
            if dim < 2 {
                return Err(Error::invalid("always-observed block too small to estimate a rank"));
            }
            solver::estimate_rank(block, r_max.clamp(1, dim - 1))
        }
    }
}

pub fn subproblem_lambda(choice: LambdaChoice, sigma: f64, sub: &SubProblem, c: f64) -> Result<f64> {
    match choice {
        LambdaChoice::Fixed(l) => Ok(l),
        LambdaChoice::Rule => {
            let (n, m) = sub.shape();
            solver::select_lambda(sigma, n, m, c)
        }
    }
}

/// Root mean square of `y − m_hat` over a block.
pub fn rms_residual(y: MatRef<'_, f64>, m_hat: MatRef<'_, f64>) -> Result<f64> {
    if (y.nrows(), y.ncols()) != (m_hat.nrows(), m_hat.ncols()) {
        return Err(Error::ShapeMismatch {
            expected: (y.nrows(), y.ncols()),
            got: (m_hat.nrows(), m_hat.ncols()),
        });
    }
    let count = y.nrows() * y.ncols();
    if count == 0 {
        return Err(Error::invalid("empty block"));
    }
    Ok(linalg::frobenius_diff(y, m_hat) / (count as f64).sqrt())
}

pub fn complete_panel(panel: &ObservedPanel, opts: &CompletionOptions) -> Result<LowRankEstimate> {
    opts.solver.validate()?;
    let pattern = classify_pattern(panel);
    let (n, m) = (panel.nrows(), panel.ncols());
    let (ref_rows, ref_cols) = reference_block(&pattern, n, m);
    if pattern.kind == PatternKind::Irregular {
        return Err(subgroup::plan_completion(panel, &pattern, 1).unwrap_err());
    }
    let block = extract(panel.values().as_ref(), &ref_rows, &ref_cols);
    let r = resolve_rank(opts.rank, block.as_ref())?;
    let sigma_initial = solver::estimate_sigma_initial(block.as_ref(), r)?;
    let cap = opts
        .group_cap
        .unwrap_or_else(|| subgroup::pattern_default_cap(&pattern, n));
    let mut subs = subgroup::plan_completion(panel, &pattern, cap)?;
    for sub in subs.iter_mut() {
        sub.lambda = Some(subproblem_lambda(
            opts.lambda,
            sigma_initial,
            sub,
            opts.solver.lambda_constant,
        )?);
    }

    if subs.is_empty() {
        let fitted = debias::rank_r_project(panel.values().as_ref(), r)?;
        return Ok(LowRankEstimate {
            completed: panel.values().clone(),
            fitted,
            pattern,
            rank: r,
            cap,
            sigma_initial,
            sigma_hat: sigma_initial,
            factors: Vec::new(),
            subproblems: Vec::new(),
        });
    }

    let fits: Vec<SubFit> = subs
        .par_iter()
        .map(|sub| fit_subproblem(sub, sub.lambda.unwrap_or(0.0), r, &opts.solver))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&SubProblem, MatRef<'_, f64>)> = subs
        .iter()
        .zip(&fits)
        .map(|(s, f)| (s, f.debiased.as_ref()))
        .collect();
    let merged = subgroup::reassemble(panel, &pairs)?;
    let fitted_block = extract(merged.fitted.as_ref(), &ref_rows, &ref_cols);
    let sigma_hat = rms_residual(block.as_ref(), fitted_block.as_ref())?;
    let subproblems = subs
        .iter()
        .zip(&fits)
        .map(|(s, f)| SubproblemReport::new(s, f))
        .collect();
    Ok(LowRankEstimate {
        completed: merged.completed,
        fitted: merged.fitted,
        pattern,
        rank: r,
        cap,
        sigma_initial,
        sigma_hat,
        factors: fits.into_iter().map(|f| f.factors).collect(),
        subproblems,
    })
}
