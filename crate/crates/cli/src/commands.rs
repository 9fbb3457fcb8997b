use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use mnar_core::completion::{complete_panel, CompletionOptions, SubproblemReport};
use mnar_core::inference::{infer_group_average, GroupAverageInference, InferenceOptions, InferenceRecord};
use mnar_core::normal::bonferroni_critical;
use mnar_core::output::{format_f64, to_json_string, write_matrix_csv};
use mnar_core::treatment::{
    effects_from_fit, estimate_unit_effects, grand_mean_baseline, prepare, spec_test, two_way_fe, unit_effect_cells,
    windows, SpecTestResult, TreatmentOptions, TreatmentPanel, UnitCell,
};
use mnar_core::{classify_pattern, Error, PatternKind, Result};
use mnar_simlab::config::{Design, Preset, SimConfig};
use mnar_simlab::report::write_records_csv;
use mnar_simlab::run_experiment;

use crate::args::{CompleteArgs, DesignArg, InferArgs, PresetArg, SimulateArgs, TreatArgs};
use crate::inputs::{self, lookup_all, read_panel};
use crate::manifest::ManifestBuilder;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, to_json_string(value)? + "\n")?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompletionDiagnostics {
    pattern: PatternKind,
    n_units: usize,
    n_periods: usize,
    n_missing: usize,
    rank: usize,
    group_cap: usize,
    sigma_initial: f64,
    sigma_hat: f64,
    n_subproblems: usize,
    subproblems: Vec<SubproblemReport>,
    /// Largest error on the missing entries when a truth panel is given.
    max_abs_error: Option<f64>,
}

pub fn complete(a: &CompleteArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("complete", a);
    manifest.input(&a.input.input);
    let panel = read_panel(&a.input.input, a.input.format.into())?;
    let truth = match &a.truth {
        Some(p) => {
            manifest.input(p);
            let t = read_panel(p, a.input.format.into())?;
            if (t.nrows(), t.ncols()) != (panel.nrows(), panel.ncols()) {
                return Err(Error::ShapeMismatch {
                    expected: (panel.nrows(), panel.ncols()),
                    got: (t.nrows(), t.ncols()),
                });
            }
            if !t.mask().is_full() {
                return Err(Error::InvalidArgument("truth panel must be fully observed".into()));
            }
            Some(t)
        }
        None => None,
    };
    let opts = CompletionOptions {
        rank: a.model.rank_choice(),
        group_cap: a.model.group_cap.value(),
        lambda: a.model.lambda_choice(),
        solver: a.model.solver(),
    };
    let est = complete_panel(&panel, &opts)?;
    let max_abs_error = truth.map(|t| {
        panel
            .mask()
            .missing_entries()
            .into_iter()
            .map(|(i, j)| (est.completed[(i, j)] - t.values()[(i, j)]).abs())
            .fold(0.0, f64::max)
    });

    out_dir(&a.out)?;
    let completed = a.out.join("completed.csv");
    write_matrix_csv(
        BufWriter::new(File::create(&completed)?),
        est.completed.as_ref(),
        panel.unit_labels(),
        panel.time_labels(),
    )?;
    let diagnostics = a.out.join("diagnostics.json");
    write_json(
        &diagnostics,
        &CompletionDiagnostics {
            pattern: est.pattern.kind,
            n_units: panel.nrows(),
            n_periods: panel.ncols(),
            n_missing: panel.mask().count_missing(),
            rank: est.rank,
            group_cap: est.cap,
            sigma_initial: est.sigma_initial,
            sigma_hat: est.sigma_hat,
            n_subproblems: est.subproblems.len(),
            subproblems: est.subproblems,
            max_abs_error,
        },
    )?;
    manifest.finish(&[completed, diagnostics], &a.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferOutput {
    group: Vec<String>,
    period: String,
    #[serde(flatten)]
    record: InferenceRecord,
    detail: GroupAverageInference,
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("infer", a);
    manifest.input(&a.input.input);
    let panel = read_panel(&a.input.input, a.input.format.into())?;
    let group = lookup_all(panel.unit_labels(), &a.group, "unit")?;
    let t0 = lookup_all(panel.time_labels(), std::slice::from_ref(&a.period), "time")?[0];
    let opts = InferenceOptions {
        rank: a.model.rank_choice(),
        level: a.level,
        group_cap: a.model.group_cap.value(),
        lambda: a.model.lambda_choice(),
        solver: a.model.solver(),
    };
    let pattern = classify_pattern(&panel);
    let res = infer_group_average(&panel, &pattern, &group, t0, &opts)?;

    out_dir(&a.out)?;
    let path = a.out.join("inference.json");
    write_json(
        &path,
        &InferOutput {
            group: a.group.clone(),
            period: a.period.clone(),
            record: res.record(),
            detail: res,
        },
    )?;
    manifest.finish(&[path], &a.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BaselineTest {
    baseline: Vec<f64>,
    result: SpecTestResult,
}

#[derive(Debug, Serialize)]
struct PerTreatmentTest {
    d: usize,
    baseline: f64,
    result: SpecTestResult,
}

#[derive(Debug, Serialize)]
struct SpecTests {
    /// Against the two-way fixed-effects estimates, all treatments jointly.
    model_specification: BaselineTest,
    /// Against the grand mean of each treatment's unit effects.
    per_treatment: Vec<PerTreatmentTest>,
}

pub fn treat(a: &TreatArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("treat", a);
    manifest.seed(a.seed);
    manifest.input(&a.input);
    manifest.input(&a.assignment);
    let panel = read_panel(&a.input, a.format.into())?;
    let pilot = lookup_all(panel.time_labels(), std::slice::from_ref(&a.pilot_start), "time")?[0];
    let assignment = inputs::read_assignment(&a.assignment, &panel, pilot)?;
    let (covariates, beta) = match (&a.covariates, &a.beta) {
        (Some(c), Some(b)) => {
            manifest.input(c);
            manifest.input(b);
            (Some(inputs::read_covariates(c, &panel)?), Some(inputs::read_beta(b)?))
        }
        _ => (None, None),
    };
    let tp = TreatmentPanel::new(panel, assignment, covariates, beta)?;
    let group = if a.group.is_empty() {
        tp.treated_units()
    } else {
        lookup_all(tp.base.unit_labels(), &a.group, "unit")?
    };
    let opts = TreatmentOptions {
        rank: a.model.rank_choice(),
        group_cap: a.model.group_cap.value(),
        lambda: a.model.lambda_choice(),
        solver: a.model.solver(),
    };
    let tf = prepare(&tp, &opts)?;
    let periods: Vec<usize> = tp.pilot_periods().collect();
    let series = effects_from_fit(&tf, &group, &periods)?;
    let time = tp.base.time_labels();

    out_dir(&a.out)?;
    let mut outputs = Vec::new();
    let effects = a.out.join("effects.csv");
    let mut w = csv_writer(&effects)?;
    w.write_record(["d", "t", "mu", "theta", "var_mu", "var_theta"])?;
    for p in &series.points {
        w.write_record([
            p.d.to_string(),
            time[p.t].clone(),
            format_f64(p.mu),
            format_f64(p.theta),
            format_f64(p.var_mu),
            format_f64(p.var_theta),
        ])?;
    }
    w.flush()?;
    outputs.push(effects);

    if let Some(win) = a.window {
        let ws = windows(&periods, win.0)?;
        let n_tests = a.bonferroni.unwrap_or(ws.len());
        if n_tests == 0 {
            return Err(Error::InvalidArgument("--bonferroni must be at least 1".into()));
        }
        let crit = bonferroni_critical(n_tests);
        let path = a.out.join("windows.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["d", "window", "start", "end", "theta", "variance", "z", "critical_value", "significant"])?;
        for d in 1..series.n_treatments() {
            for (k, window) in ws.iter().enumerate() {
                let (theta, var) = series.window_theta(d, window)?;
                let z = theta / var.sqrt();
                w.write_record([
                    d.to_string(),
                    k.to_string(),
                    time[window[0]].clone(),
                    time[*window.last().expect("nonempty window")].clone(),
                    format_f64(theta),
                    format_f64(var),
                    format_f64(z),
                    format_f64(crit),
                    (z.abs() > crit).to_string(),
                ])?;
            }
        }
        w.flush()?;
        outputs.push(path);
    }

    if !a.no_spec_test {
        let cells = unit_effect_cells(&tf, &group, &periods)?;
        let units = tp.base.unit_labels();
        let path = a.out.join("unit_effects.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["unit", "d", "theta_bar", "periods"])?;
        for u in estimate_unit_effects(&cells)? {
            w.write_record([units[u.unit].clone(), u.d.to_string(), format_f64(u.theta_bar), u.periods.to_string()])?;
        }
        w.flush()?;
        outputs.push(path);

        let mut baseline = vec![0.0];
        baseline.extend(two_way_fe(tp.adjusted().values().as_ref(), &tp.assignment)?);
        let model_specification = BaselineTest {
            result: spec_test(&cells, &baseline, &a.levels, a.draws, a.seed)?,
            baseline,
        };
        let grand = grand_mean_baseline(&cells);
        let per_treatment = (1..grand.len())
            .map(|d| {
                let sub: Vec<UnitCell> = cells.iter().filter(|c| c.d == d).copied().collect();
                Ok(PerTreatmentTest {
                    d,
                    baseline: grand[d],
                    result: spec_test(&sub, &grand, &a.levels, a.draws, a.seed.wrapping_add(d as u64))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let path = a.out.join("spec_test.json");
        write_json(
            &path,
            &SpecTests {
                model_specification,
                per_treatment,
            },
        )?;
        outputs.push(path);
    }
    manifest.finish(&outputs, &a.out)?;
    Ok(())
}

fn sim_config(a: &SimulateArgs) -> Result<SimConfig> {
    let design = match a.design {
        DesignArg::Staggered => Design::StaggeredBasic,
        DesignArg::Interactive => Design::InteractiveEffects,
        DesignArg::Tobacco => Design::TobaccoProtocol,
    };
    let preset = match a.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Ci => Preset::Ci,
    };
    let mut cfg = match &a.config {
        Some(path) => {
            let cfg: SimConfig = serde_json::from_reader(inputs::open(path)?).map_err(|e| Error::Parse {
                line: e.line() as u64,
                msg: format!("invalid simulation config: {e}"),
            })?;
            if cfg.design != design {
                return Err(Error::InvalidArgument(format!(
                    "config design {:?} does not match --design",
                    cfg.design
                )));
            }
            cfg
        }
        None => SimConfig::preset(design, preset),
    };
    if let Some(r) = a.reps {
        cfg.replications = r;
        cfg.baseline_replications = cfg.baseline_replications.min(r);
    }
    if let Some(b) = a.baseline_reps {
        cfg.baseline_replications = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.fix_target |= a.fix_target;
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = sim_config(a)?;
    let mut manifest = ManifestBuilder::start("simulate", &cfg);
    manifest.seed(cfg.seed);
    if let Some(p) = &a.config {
        manifest.input(p);
    }
    let report = run_experiment(&cfg)?;

    out_dir(&a.out)?;
    let records = a.out.join("replications.csv");
    write_records_csv(BufWriter::new(File::create(&records)?), &report.records)?;
    // Wall time lives in the manifest so that reruns reproduce the summary.
    let mut summary = serde_json::to_value(&report.summary).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("wall_time_s");
    }
    let summary_path = a.out.join("summary.json");
    write_json(&summary_path, &summary)?;
    manifest.finish(&[records, summary_path], &a.out)?;
    Ok(())
}
