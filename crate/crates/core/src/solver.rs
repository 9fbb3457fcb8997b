//! Nuclear-norm penalized completion and the tuning rules around it.
//!
//! The objective is `½‖Ω∘(Y−A)‖_F² + λ‖A‖_*`. Its smooth part has Lipschitz
//! constant 1, so proximal gradient with unit step reads
//! `A ← S_λ(Ω∘Y + Ω^c∘A)` where `S_λ` soft-thresholds singular values.

use faer::{Mat, MatRef};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Svd};
use crate::panel::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub acceleration: bool,
    /// `C_λ` in `λ = C_λ σ √max(n, m)`.
    pub lambda_constant: f64,
    /// Warm-start from a short decreasing sequence of λ values when the
    /// target λ is small relative to the data.
    pub continuation: bool,
    /// Leading singular triplets computed per prox step. `None` uses a full
    /// thin SVD; `Some(k)` uses warm-started subspace iteration that grows
    /// `k` whenever every computed singular value survives the threshold.
    pub truncated_rank: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 500,
            rel_tol: 1e-7,
            acceleration: true,
            lambda_constant: 2.0,
            continuation: true,
            truncated_rank: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::invalid("rel_tol must lie in (0, 1)"));
        }
        if !(self.lambda_constant > 0.0 && self.lambda_constant.is_finite()) {
            return Err(Error::invalid("lambda constant must be positive"));
        }
        if self.truncated_rank == Some(0) {
            return Err(Error::invalid("truncated rank must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub rel_change: f64,
    pub converged: bool,
    pub lambda: f64,
    /// Number of continuation stages run before the target λ.
    pub warm_stages: usize,
    /// Objective at the target λ after each iteration of the final stage.
    pub objective_history: Vec<f64>,
}

/// Penalized fit together with the SVD of the returned estimate.
#[derive(Debug, Clone)]
pub struct NuclearFit {
    pub estimate: Mat<f64>,
    pub svd: Svd,
    pub diagnostics: SolveDiagnostics,
}

fn check_lambda(lam: f64) -> Result<()> {
    if !(lam >= 0.0 && lam.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and nonnegative, got {lam}")));
    }
    Ok(())
}

fn threshold(svd: Svd, lam: f64) -> Svd {
    let keep = svd.s.iter().take_while(|&&s| s > lam).count();
    let mut out = svd.truncate(keep);
    out.s.iter_mut().for_each(|s| *s -= lam);
    out
}

/// `U max(Σ − λ, 0) Vᵀ`, the minimizer of `½‖A−B‖_F² + λ‖A‖_*`.
pub fn soft_threshold_svd(b: MatRef<'_, f64>, lam: f64) -> Result<Mat<f64>> {
    check_lambda(lam)?;
    let svd = threshold(linalg::thin_svd(b)?, lam);
    Ok(svd.reconstruct(svd.rank()))
}

/// `c · σ · √max(n, m)`.
pub fn select_lambda(sigma: f64, n: usize, m: usize, c_lambda: f64) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    if !(c_lambda > 0.0) {
        return Err(Error::invalid("lambda constant must be positive"));
    }
    Ok(c_lambda * sigma * (n.max(m) as f64).sqrt())
}

/// Root mean square residual of the best rank-`r` approximation.
pub fn estimate_sigma_initial(block: MatRef<'_, f64>, r: usize) -> Result<f64> {
    let (n, m) = (block.nrows(), block.ncols());
    if r >= n.min(m) {
        return Err(Error::invalid(format!(
            "rank {r} must be below min dimension {}",
            n.min(m)
        )));
    }
    let s = linalg::singular_values(block)?;
    let tail: f64 = s[r..].iter().map(|x| x * x).sum();
    Ok((tail / (n * m) as f64).sqrt())
}

/// Eigenvalue-ratio rank on a fully observed block.
pub fn estimate_rank(block: MatRef<'_, f64>, r_max: usize) -> Result<usize> {
    let dim = block.nrows().min(block.ncols());
    if r_max == 0 || r_max >= dim {
        return Err(Error::invalid(format!(
            "r_max must lie in 1..{dim}, got {r_max}"
        )));
    }
    rank_from_singular_values(&linalg::singular_values(block)?, r_max)
}

/// `argmax_{1≤k≤r_max} σ_k/σ_{k+1}`; ratios equal to within 1e-9 relative
/// count as ties and resolve to the smaller `k`.
pub fn rank_from_singular_values(s: &[f64], r_max: usize) -> Result<usize> {
    if r_max == 0 || r_max >= s.len() {
        return Err(Error::invalid(format!(
            "r_max must lie in 1..{}, got {r_max}",
            s.len()
        )));
    }
    let ratios: Vec<f64> = (0..r_max)
        .map(|k| {
            if s[k + 1] > 0.0 {
                s[k] / s[k + 1]
            } else if s[k] > 0.0 {
                f64::INFINITY
            } else {
                1.0
            }
        })
        .collect();
    let best = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = ratios
        .iter()
        .position(|&q| q == best || (best.is_finite() && q >= best * (1.0 - 1e-9)))
        .unwrap_or(0);
    Ok(k + 1)
}

struct Problem<'a> {
    y: MatRef<'a, f64>,
    mask: &'a Mask,
}

impl Problem<'_> {
    /// `Ω∘Y + Ω^c∘A`
    fn gradient_step(&self, a: MatRef<'_, f64>) -> Mat<f64> {
        Mat::from_fn(self.y.nrows(), self.y.ncols(), |i, j| {
            if self.mask.get(i, j) {
                self.y[(i, j)]
            } else {
                a[(i, j)]
            }
        })
    }

    fn data_fit(&self, a: MatRef<'_, f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                if self.mask.get(i, j) {
                    let d = self.y[(i, j)] - a[(i, j)];
                    acc += d * d;
                }
            }
        }
        0.5 * acc
    }

    fn objective(&self, a: MatRef<'_, f64>, nuclear: f64, lam: f64) -> f64 {
        self.data_fit(a) + lam * nuclear
    }
}

/// Prox operator backed by either a full SVD or warm-started subspace
/// iteration on the leading singular triplets.
struct Prox {
    truncated: Option<usize>,
    basis: Option<Mat<f64>>,
}

impl Prox {
    fn apply(&mut self, b: MatRef<'_, f64>, lam: f64) -> Result<Svd> {
        let dim = b.nrows().min(b.ncols());
        match self.truncated {
            Some(k) if k + 8 < dim => self.apply_truncated(b, lam, k),
            _ => Ok(threshold(linalg::thin_svd(b)?, lam)),
        }
    }

    fn apply_truncated(&mut self, b: MatRef<'_, f64>, lam: f64, k_min: usize) -> Result<Svd> {
        let dim = b.nrows().min(b.ncols());
        let mut k = self
            .basis
            .as_ref()
            .map(|q| q.ncols().max(k_min))
            .unwrap_or(k_min);
        loop {
            let svd = subspace_svd(b, k, self.basis.as_ref())?;
            let all_survive = svd.s.last().is_some_and(|&s| s > lam);
            if !all_survive || k + 8 >= dim {
                let kept = threshold(svd.clone(), lam);
                let next = (kept.rank() + 4).max(k_min).min(dim);
                self.basis = Some(svd.v.as_ref().subcols(0, next.min(svd.rank())).to_owned());
                if !all_survive {
                    return Ok(kept);
                }
                return Ok(threshold(linalg::thin_svd(b)?, lam));
            }
            self.basis = Some(svd.v);
            k = (2 * k).min(dim);
        }
    }
}

/// Leading `k` singular triplets of `b` by block subspace iteration started
/// from `start` (right singular directions) padded with a fixed pseudo-random
/// block.
fn subspace_svd(b: MatRef<'_, f64>, k: usize, start: Option<&Mat<f64>>) -> Result<Svd> {
    let m = b.ncols();
    let p = (k + 6).min(m);
    let mut v0 = Mat::<f64>::zeros(m, p);
    let mut filled = 0;
    if let Some(q) = start {
        let c = q.ncols().min(p);
        for j in 0..c {
            for i in 0..m {
                v0[(i, j)] = q[(i, j)];
            }
        }
        filled = c;
    }
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for j in filled..p {
        for i in 0..m {
            state = state
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            v0[(i, j)] = ((state >> 11) as f64) * (1.0 / (1u64 << 53) as f64) - 0.5;
        }
    }
    let iters = if start.is_some() { 2 } else { 4 };
    let mut v = orthonormalize(v0.as_ref());
    for _ in 0..iters {
        let u = orthonormalize((b * v.as_ref()).as_ref());
        v = orthonormalize((b.transpose() * u.as_ref()).as_ref());
    }
    let u = orthonormalize((b * v.as_ref()).as_ref());
    // b ≈ u (uᵀ b v) vᵀ with a small p×p core.
    let core = u.transpose() * b * v.as_ref();
    let small = linalg::thin_svd(core.as_ref())?;
    let uu = u.as_ref() * small.u.as_ref();
    let vv = v.as_ref() * small.v.as_ref();
    let out = Svd {
        u: uu,
        s: small.s,
        v: vv,
    };
    Ok(out.truncate(k))
}

fn orthonormalize(a: MatRef<'_, f64>) -> Mat<f64> {
    a.qr().compute_thin_Q()
}

fn nuclear_of(svd: &Svd) -> f64 {
    svd.s.iter().sum()
}

struct StageResult {
    iterate: Mat<f64>,
    svd: Svd,
    iterations: usize,
    rel_change: f64,
    converged: bool,
    history: Vec<f64>,
}

fn run_stage(
    prob: &Problem<'_>,
    prox: &mut Prox,
    start: Mat<f64>,
    start_svd: Option<Svd>,
    lam: f64,
    max_iters: usize,
    tol: f64,
    acceleration: bool,
) -> Result<StageResult> {
    let mut x = start;
    let mut x_svd = match start_svd {
        Some(s) => s,
        None => linalg::thin_svd(x.as_ref())?,
    };
    let mut f_x = prob.objective(x.as_ref(), nuclear_of(&x_svd), lam);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut history = Vec::new();
    let mut rel_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let b = prob.gradient_step(y.as_ref());
        let mut svd = prox.apply(b.as_ref(), lam)?;
        let mut x_new = svd.reconstruct(svd.rank());
        let mut f_new = prob.objective(x_new.as_ref(), nuclear_of(&svd), lam);
        if acceleration && f_new > f_x && t > 1.0 {
            // Momentum overshot: restart from the last iterate.
            t = 1.0;
            let b = prob.gradient_step(x.as_ref());
            svd = prox.apply(b.as_ref(), lam)?;
            x_new = svd.reconstruct(svd.rank());
            f_new = prob.objective(x_new.as_ref(), nuclear_of(&svd), lam);
        }
        let scale = linalg::frobenius(x.as_ref()).max(linalg::frobenius(x_new.as_ref()));
        let diff = linalg::frobenius_diff(x_new.as_ref(), x.as_ref());
        rel_change = if scale > 0.0 { diff / scale } else { 0.0 };
        if acceleration {
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let w = (t - 1.0) / t_new;
            y = Mat::from_fn(x.nrows(), x.ncols(), |i, j| {
                x_new[(i, j)] + w * (x_new[(i, j)] - x[(i, j)])
            });
            t = t_new;
        } else {
            y = x_new.clone();
        }
        x = x_new;
        x_svd = svd;
        f_x = f_new;
        history.push(f_x);
        if rel_change <= tol {
            converged = true;
            break;
        }
    }
    Ok(StageResult {
        iterate: x,
        svd: x_svd,
        iterations,
        rel_change,
        converged,
        history,
    })
}

fn validate_problem(values: MatRef<'_, f64>, mask: &Mask) -> Result<()> {
    let (n, m) = (values.nrows(), values.ncols());
    if (mask.nrows(), mask.ncols()) != (n, m) {
        return Err(Error::ShapeMismatch {
            expected: (n, m),
            got: (mask.nrows(), mask.ncols()),
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    for i in 0..n {
        if !(0..m).any(|j| mask.get(i, j)) {
            return Err(Error::invalid(format!("row {i} has no observed entries")));
        }
    }
    for j in 0..m {
        if !(0..n).any(|i| mask.get(i, j)) {
            return Err(Error::invalid(format!("column {j} has no observed entries")));
        }
        for i in 0..n {
            if mask.get(i, j) && !values[(i, j)].is_finite() {
                return Err(Error::NonFinite);
            }
        }
    }
    Ok(())
}

/// Approximate minimizer of `½‖Ω∘(Y−A)‖_F² + λ‖A‖_*`, started at `Ω∘Y`.
pub fn solve_nuclear(
    values: MatRef<'_, f64>,
    mask: &Mask,
    lam: f64,
    opts: &SolverOptions,
) -> Result<(Mat<f64>, SolveDiagnostics)> {
    let fit = solve_nuclear_fit(values, mask, lam, opts)?;
    Ok((fit.estimate, fit.diagnostics))
}

pub fn solve_nuclear_fit(
    values: MatRef<'_, f64>,
    mask: &Mask,
    lam: f64,
    opts: &SolverOptions,
) -> Result<NuclearFit> {
    opts.validate()?;
    check_lambda(lam)?;
    validate_problem(values, mask)?;
    let prob = Problem { y: values, mask };
    let a0 = prob.gradient_step(Mat::<f64>::zeros(values.nrows(), values.ncols()).as_ref());
    let a0_svd = linalg::thin_svd(a0.as_ref())?;
    let initial_objective = prob.objective(a0.as_ref(), nuclear_of(&a0_svd), lam);

    if mask.is_full() {
        // The data term is the prox coupling itself: one step is exact.
        let svd = threshold(a0_svd, lam);
        let estimate = svd.reconstruct(svd.rank());
        let f = prob.objective(estimate.as_ref(), nuclear_of(&svd), lam);
        return Ok(NuclearFit {
            estimate,
            svd,
            diagnostics: SolveDiagnostics {
                iterations: 1,
                initial_objective,
                final_objective: f,
                rel_change: 0.0,
                converged: true,
                lambda: lam,
                warm_stages: 0,
                objective_history: vec![f],
            },
        });
    }

    let mut prox = Prox {
        truncated: opts.truncated_rank,
        basis: None,
    };
    let mut iterate = a0;
    let mut iterate_svd = Some(a0_svd.clone());
    let mut total_iters = 0;
    let mut warm_stages = 0;
    if opts.continuation {
        let observed: Vec<f64> = (0..values.ncols())
            .flat_map(|j| (0..values.nrows()).map(move |i| (i, j)))
            .filter(|&(i, j)| mask.get(i, j))
            .map(|(i, j)| values[(i, j)])
            .collect();
        let rms = (observed.iter().map(|v| v * v).sum::<f64>() / observed.len() as f64).sqrt();
        let missing = mask.count_missing() as f64;
        let sigma1 = a0_svd.s.first().copied().unwrap_or(0.0);
        let mut stage_lam = (0.5 * sigma1).min(rms * missing.sqrt());
        let stage_tol = opts.rel_tol.max(1e-5);
        while stage_lam > 4.0 * lam {
            let res = run_stage(
                &prob,
                &mut prox,
                iterate,
                iterate_svd.take(),
                stage_lam,
                opts.max_iters,
                stage_tol,
                opts.acceleration,
            )?;
            total_iters += res.iterations;
            iterate = res.iterate;
            iterate_svd = Some(res.svd);
            warm_stages += 1;
            stage_lam *= 0.25;
        }
    }
    let res = run_stage(
        &prob,
        &mut prox,
        iterate,
        iterate_svd,
        lam,
        opts.max_iters,
        opts.rel_tol,
        opts.acceleration,
    )?;
    total_iters += res.iterations;
    let final_objective = res.history.last().copied().unwrap_or(initial_objective);
    Ok(NuclearFit {
        estimate: res.iterate,
        svd: res.svd,
        diagnostics: SolveDiagnostics {
            iterations: total_iters,
            initial_objective,
            final_objective,
            rel_change: res.rel_change,
            converged: res.converged,
            lambda: lam,
            warm_stages,
            objective_history: res.history,
        },
    })
}
