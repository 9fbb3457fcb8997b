use std::collections::BTreeMap;
use std::time::Instant;

use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use mnar_core::completion::{self, complete_panel, CompletionOptions, LambdaChoice, RankChoice};
use mnar_core::inference::{fit_inference, group_average_ci, variance_group_average, InferenceOptions};
use mnar_core::normal::two_sided_critical;
use mnar_core::solver::{self, SolverOptions};
use mnar_core::treatment::{self, TreatmentOptions};
use mnar_core::{MissingPattern, ObservedPanel, PatternKind, Result};

use crate::config::{Design, SimConfig};
use crate::generate::{self, rep_seed};

/// One estimate of one target in one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub target: String,
    pub unit: usize,
    pub period: usize,
    pub estimate: f64,
    pub truth: f64,
    pub variance: f64,
    /// `(estimate − truth)/√variance`
    pub standardized: f64,
    pub baseline: Option<f64>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn failed(rep: usize, target: &str, err: String) -> Self {
        ReplicationRecord {
            rep,
            target: target.into(),
            unit: 0,
            period: 0,
            estimate: f64::NAN,
            truth: f64::NAN,
            variance: f64::NAN,
            standardized: f64::NAN,
            baseline: None,
            error: Some(err),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    /// Whether the two-sided interval at `level` contains the truth.
    pub fn covered(&self, level: f64) -> bool {
        self.standardized.abs() <= two_sided_critical(level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageRate {
    pub level: f64,
    pub rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub design: Design,
    pub replications: usize,
    pub failures: usize,
    pub rmse: BTreeMap<String, f64>,
    pub coverage: BTreeMap<String, Vec<CoverageRate>>,
    pub ks: BTreeMap<String, KsResult>,
    pub wall_time_s: f64,
    pub config: SimConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub summary: Summary,
    pub records: Vec<ReplicationRecord>,
}

impl ExperimentReport {
    pub fn targets(&self) -> Vec<String> {
        let mut t: Vec<String> = self.records.iter().map(|r| r.target.clone()).collect();
        t.sort();
        t.dedup();
        t
    }

    /// Successful records of `target` from the first `reps` replications.
    pub fn records_for(&self, target: &str, reps: usize) -> Vec<&ReplicationRecord> {
        self.records
            .iter()
            .filter(|r| r.target == target && r.rep < reps && r.ok())
            .collect()
    }
}

pub fn rmse(errors: impl IntoIterator<Item = f64>) -> f64 {
    let (mut ss, mut n) = (0.0, 0usize);
    for e in errors {
        ss += e * e;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (ss / n as f64).sqrt()
    }
}

pub fn coverage_rates(records: &[&ReplicationRecord], levels: &[f64]) -> Vec<CoverageRate> {
    levels
        .iter()
        .map(|&level| {
            let hit = records.iter().filter(|r| r.covered(level)).count();
            CoverageRate {
                level,
                rate: hit as f64 / records.len().max(1) as f64,
                n: records.len(),
            }
        })
        .collect()
}

/// One-sample Kolmogorov–Smirnov test against `N(0, 1)` with the asymptotic
/// p-value and Stephens' small-sample correction.
pub fn ks_standard_normal(samples: &[f64]) -> KsResult {
    let n = samples.len();
    if n == 0 {
        return KsResult {
            statistic: f64::NAN,
            p_value: f64::NAN,
            n,
        };
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let phi = Normal::new(0.0, 1.0).expect("valid normal");
    let nf = n as f64;
    let d = x.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        let f = phi.cdf(v);
        d.max((i as f64 + 1.0) / nf - f).max(f - i as f64 / nf)
    });
    let sn = nf.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_q((sn + 0.12 + 0.11 / sn) * d),
        n,
    }
}

/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Nuclear-norm penalized fit of the whole panel (no subgrouping, no
/// debiasing), with `λ = C σ̂ √max(N, T)` and `σ̂` from the rank-`r`
/// residual on `reference`.
pub fn full_matrix_baseline(
    panel: &ObservedPanel,
    pattern: &MissingPattern,
    rank: usize,
    lambda_constant: f64,
) -> Result<Mat<f64>> {
    let (rows, cols) = completion::reference_block(pattern, panel.nrows(), panel.ncols());
    let block = completion::extract(panel.values().as_ref(), &rows, &cols);
    let sigma = solver::estimate_sigma_initial(block.as_ref(), rank)?;
    let lam = solver::select_lambda(sigma, panel.nrows(), panel.ncols(), lambda_constant)?;
    let opts = SolverOptions {
        lambda_constant,
        truncated_rank: Some(rank + 8),
        ..SolverOptions::default()
    };
    let (est, _) = solver::solve_nuclear(panel.values().as_ref(), panel.mask(), lam, &opts)?;
    Ok(est)
}

fn solver_opts(cfg: &SimConfig) -> SolverOptions {
    SolverOptions {
        lambda_constant: cfg.lambda_constant,
        ..SolverOptions::default()
    }
}

fn staggered_rep(cfg: &SimConfig, rep: usize) -> Result<ReplicationRecord> {
    let s = generate::gen_staggered(cfg, rep_seed(cfg.seed, rep as u64))?;
    let (u, t) = (s.target_unit, cfg.periods - 1);
    let opts = InferenceOptions {
        rank: RankChoice::Fixed(cfg.rank),
        level: 0.95,
        group_cap: None,
        lambda: LambdaChoice::Rule,
        solver: solver_opts(cfg),
    };
    let fits = fit_inference(&s.panel, &s.pattern, &[u], t, &opts)?;
    let estimate = fits.estimate();
    let variance = variance_group_average(&fits.terms()?, fits.sigma_hat * fits.sigma_hat)?.total;
    group_average_ci(estimate, variance, 0.95)?;
    let baseline = if rep < cfg.baseline_replications {
        Some(full_matrix_baseline(&s.panel, &s.pattern, cfg.rank, cfg.lambda_constant)?[(u, t)])
    } else {
        None
    };
    let truth = s.truth[(u, t)];
    Ok(ReplicationRecord {
        rep,
        target: "m0".into(),
        unit: u,
        period: t,
        estimate,
        truth,
        variance,
        standardized: (estimate - truth) / variance.sqrt(),
        baseline,
        error: None,
    })
}

pub const INTERACTIVE_TARGETS: [&str; 3] = ["mu1", "mu2", "theta2"];

fn interactive_rep(cfg: &SimConfig, rep: usize) -> Result<Vec<ReplicationRecord>> {
    let s = generate::gen_interactive(cfg, rep_seed(cfg.seed, rep as u64))?;
    let (u, t) = (s.target_unit, cfg.periods - 1);
    let opts = TreatmentOptions {
        rank: RankChoice::Fixed(cfg.rank),
        group_cap: None,
        lambda: LambdaChoice::Rule,
        solver: solver_opts(cfg),
    };
    let tf = treatment::prepare(&s.panel, &opts)?;
    let fits = (0..tf.panels.len())
        .map(|d| treatment::fit_period(&tf, d, &[u], t))
        .collect::<Result<Vec<_>>>()?;
    let s2 = tf.sigma_hat * tf.sigma_hat;
    let d = cfg.target_group;
    let contrasts = [(1, 0), (d, 0), (d, d - 1)];
    Ok(INTERACTIVE_TARGETS
        .iter()
        .zip(contrasts)
        .map(|(&name, (a, b))| {
            let (estimate, variance) = treatment::unit_contrast(&fits[a], &fits[b], 0, s2);
            let truth = s.truths[a][(u, t)] - s.truths[b][(u, t)];
            ReplicationRecord {
                rep,
                target: name.into(),
                unit: u,
                period: t,
                estimate,
                truth,
                variance,
                standardized: (estimate - truth) / variance.sqrt(),
                baseline: None,
                error: None,
            }
        })
        .collect())
}

fn missing_rmse(est: &Mat<f64>, truth: &Mat<f64>, panel: &ObservedPanel) -> f64 {
    rmse(panel.mask().missing_entries().into_iter().map(|(i, t)| est[(i, t)] - truth[(i, t)]))
}

/// Base matrix seed of the tobacco stand-in; fixed so that only the
/// adoption pattern varies across replications.
pub const TOBACCO_BASE_SEED: u64 = 1988;

fn tobacco_rep(cfg: &SimConfig, base: &Mat<f64>, rep: usize) -> Result<ReplicationRecord> {
    let s = generate::gen_tobacco_protocol(base, rep_seed(cfg.seed, rep as u64))?;
    let opts = CompletionOptions {
        rank: RankChoice::Fixed(cfg.rank),
        solver: solver_opts(cfg),
        ..CompletionOptions::default()
    };
    let est = complete_panel(&s.panel, &opts)?;
    let pipeline = missing_rmse(&est.completed, &s.truth, &s.panel);
    let baseline = if rep < cfg.baseline_replications {
        let b = full_matrix_baseline(&s.panel, &s.pattern, cfg.rank, cfg.lambda_constant)?;
        Some(missing_rmse(&b, &s.truth, &s.panel))
    } else {
        None
    };
    Ok(ReplicationRecord {
        rep,
        target: "rmse".into(),
        unit: 0,
        period: 0,
        estimate: pipeline,
        truth: 0.0,
        variance: f64::NAN,
        standardized: f64::NAN,
        baseline,
        error: None,
    })
}

/// Run every replication of `cfg` and summarize RMSE, coverage and the
/// normality check of the standardized errors.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let base = (cfg.design == Design::TobaccoProtocol).then(|| generate::tobacco_stand_in(TOBACCO_BASE_SEED, cfg.noise_sd));
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let out = match cfg.design {
                Design::StaggeredBasic => staggered_rep(cfg, rep).map(|r| vec![r]),
                Design::InteractiveEffects => interactive_rep(cfg, rep),
                Design::TobaccoProtocol => tobacco_rep(cfg, base.as_ref().expect("base matrix"), rep).map(|r| vec![r]),
            };
            out.unwrap_or_else(|e| vec![ReplicationRecord::failed(rep, "failed", e.to_string())])
        })
        .collect();
    let records: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    let failures = records.iter().filter(|r| !r.ok()).map(|r| r.rep).collect::<std::collections::BTreeSet<_>>().len();

    let mut report = ExperimentReport {
        summary: Summary {
            design: cfg.design,
            replications: cfg.replications,
            failures,
            rmse: BTreeMap::new(),
            coverage: BTreeMap::new(),
            ks: BTreeMap::new(),
            wall_time_s: 0.0,
            config: cfg.clone(),
        },
        records,
    };
    summarize(&mut report, cfg);
    report.summary.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn summarize(report: &mut ExperimentReport, cfg: &SimConfig) {
    let targets: Vec<String> = report.targets().into_iter().filter(|t| t != "failed").collect();
    let mut rmse_map = BTreeMap::new();
    let mut cov = BTreeMap::new();
    let mut ks = BTreeMap::new();
    for target in &targets {
        let recs = report.records_for(target, usize::MAX);
        if cfg.design == Design::TobaccoProtocol {
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
            rmse_map.insert("pipeline".to_string(), mean(recs.iter().map(|r| r.estimate).collect()));
            let base: Vec<f64> = recs.iter().filter_map(|r| r.baseline).collect();
            if !base.is_empty() {
                rmse_map.insert("baseline".to_string(), mean(base));
            }
            continue;
        }
        rmse_map.insert(target.clone(), rmse(recs.iter().map(|r| r.estimate - r.truth)));
        let paired: Vec<&&ReplicationRecord> = recs.iter().filter(|r| r.baseline.is_some()).collect();
        if !paired.is_empty() {
            rmse_map.insert(format!("{target}_paired"), rmse(paired.iter().map(|r| r.estimate - r.truth)));
            rmse_map.insert("baseline".to_string(), rmse(paired.iter().map(|r| r.baseline.unwrap() - r.truth)));
        }
        cov.insert(target.clone(), coverage_rates(&recs, &cfg.levels));
        let z: Vec<f64> = recs.iter().map(|r| r.standardized).collect();
        ks.insert(target.clone(), ks_standard_normal(&z));
    }
    report.summary.rmse = rmse_map;
    report.summary.coverage = cov;
    report.summary.ks = ks;
}

/// RMSE of the pipeline (and the baseline where run) at the target cell.
pub fn run_rmse_experiment(cfg: &SimConfig) -> Result<ExperimentReport> {
    run_experiment(cfg)
}

pub fn run_coverage_experiment(cfg: &SimConfig, levels: &[f64]) -> Result<ExperimentReport> {
    let cfg = SimConfig {
        levels: levels.to_vec(),
        baseline_replications: 0,
        ..cfg.clone()
    };
    run_experiment(&cfg)
}

/// Recompute the summary on the first `reps` replications.
pub fn restrict(report: &ExperimentReport, reps: usize) -> ExperimentReport {
    let mut cfg = report.summary.config.clone();
    cfg.replications = reps.min(cfg.replications);
    cfg.baseline_replications = cfg.baseline_replications.min(cfg.replications);
    let records: Vec<ReplicationRecord> = report.records.iter().filter(|r| r.rep < reps).cloned().collect();
    let failures = records.iter().filter(|r| !r.ok()).map(|r| r.rep).collect::<std::collections::BTreeSet<_>>().len();
    let mut out = ExperimentReport {
        summary: Summary {
            replications: cfg.replications,
            failures,
            config: cfg.clone(),
            ..report.summary.clone()
        },
        records,
    };
    summarize(&mut out, &cfg);
    out
}

pub fn is_supported(pattern: &MissingPattern) -> bool {
    pattern.kind != PatternKind::Irregular
}
