use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mnar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnar"))
        .args(args)
        .env_remove("MNAR_THREADS")
        .output()
        .expect("run mnar")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Deterministic rank-2 values.
fn rank2(i: usize, t: usize) -> f64 {
    let (i, t) = (i as f64, t as f64);
    (1.0 + 0.1 * i) * (0.5 + 0.03 * t) + (0.7 * i).cos() * (0.4 * t).sin()
}

fn write_wide(path: &Path, n: usize, m: usize, cell: impl Fn(usize, usize) -> Option<f64>) {
    let mut s = String::from("unit");
    for t in 0..m {
        write!(s, ",{t}").unwrap();
    }
    s.push('\n');
    for i in 0..n {
        write!(s, "u{i}").unwrap();
        for t in 0..m {
            match cell(i, t) {
                Some(v) => write!(s, ",{v:.17e}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

fn read_wide(path: &Path) -> Vec<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn help_snapshot(args: &[&str], name: &str) {
    let out = mnar(args);
    assert_eq!(code(&out), 0);
    let got = String::from_utf8(out.stdout).unwrap();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name);
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {name}"));
    assert_eq!(got, want, "help output for {args:?} changed; rerun with UPDATE_SNAPSHOTS=1 to accept");
}

#[test]
fn help_snapshots() {
    help_snapshot(&["--help"], "help.txt");
    help_snapshot(&["complete", "--help"], "help_complete.txt");
    help_snapshot(&["infer", "--help"], "help_infer.txt");
    help_snapshot(&["treat", "--help"], "help_treat.txt");
    help_snapshot(&["simulate", "--help"], "help_simulate.txt");
}

#[test]
fn help_lists_defaults_for_optional_flags() {
    let out = String::from_utf8(mnar(&["complete", "--help"]).stdout).unwrap();
    for flag in ["--format", "--rank", "--r-max", "--group-cap", "--lambda-c", "--lambda ", "--max-iters", "--tol"] {
        let line = out.lines().find(|l| l.contains(flag)).unwrap_or_else(|| panic!("{flag} missing"));
        assert!(line.contains("[default:"), "{line}");
    }
}

#[test]
fn complete_fully_observed_passes_through() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("full.csv");
    write_wide(&input, 6, 5, |i, t| Some(rank2(i, t)));
    let out_dir = dir.path().join("out");
    let out = mnar(&["complete", "--input", p(&input), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got = read_wide(&out_dir.join("completed.csv"));
    for (i, row) in got.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            assert_eq!(v, format!("{:.17e}", rank2(i, t)).parse::<f64>().unwrap());
        }
    }
    let diag = read_json(out_dir.join("diagnostics.json"));
    assert_eq!(diag["n_subproblems"], 0);
    assert_eq!(diag["pattern"], "FullyObserved");
}

#[test]
fn complete_noiseless_block_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let (input, truth) = (dir.path().join("panel.csv"), dir.path().join("truth.csv"));
    write_wide(&input, 30, 30, |i, t| (i < 25 || t < 24).then(|| rank2(i, t)));
    write_wide(&truth, 30, 30, |i, t| Some(rank2(i, t)));
    let out_dir = dir.path().join("out");
    let out = mnar(&[
        "complete",
        "--input",
        p(&input),
        "--truth",
        p(&truth),
        "--rank",
        "2",
        "--lambda",
        "1e-6",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let diag = read_json(out_dir.join("diagnostics.json"));
    assert!(diag["max_abs_error"].as_f64().unwrap() <= 1e-4, "{diag}");
    assert!(diag["n_subproblems"].as_u64().unwrap() > 0);
    let sub = &diag["subproblems"][0];
    for key in ["lambda", "iterations", "converged"] {
        assert!(!sub[key].is_null(), "{key}");
    }

    let manifest = read_json(out_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "complete");
    for entry in manifest["outputs"].as_array().unwrap().iter().chain(manifest["inputs"].as_array().unwrap()) {
        let bytes = std::fs::read(entry["path"].as_str().unwrap()).unwrap();
        use sha2::Digest;
        assert_eq!(entry["sha256"], format!("{:x}", sha2::Sha256::digest(&bytes)));
    }
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("full.csv");
    write_wide(&input, 4, 4, |i, t| Some(rank2(i, t)));
    let out_dir = dir.path().join("out");
    assert_eq!(code(&mnar(&["complete", "--input", p(&input), "--out", p(&out_dir)])), 0);
    let text = std::fs::read_to_string(out_dir.join("completed.csv")).unwrap();
    let cell = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    let mantissa = cell.split('e').next().unwrap().replace(['-', '.'], "");
    assert_eq!(mantissa.len(), 17, "{cell}");
}

#[test]
fn complete_irregular_mask_exits_3_naming_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("irregular.csv");
    write_wide(&input, 6, 6, |i, t| (!((i == 4 && t == 2) || (i == 5 && t == 3))).then(|| rank2(i, t)));
    let out = mnar(&["complete", "--input", p(&input), "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("`u4`") && err.contains("`3`"), "{err}");
}

#[test]
fn ingestion_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = mnar(&["complete", "--input", p(&missing), "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&out), 2);
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "unit,0,1\na,1.0,x\n").unwrap();
    let out = mnar(&["complete", "--input", p(&bad), "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn threads_zero_is_rejected() {
    let out = mnar(&["--threads", "0", "simulate", "--design", "tobacco", "--reps", "1", "--out", "/tmp/unused"]);
    assert_eq!(code(&out), 2);
}

/// Approximately standard normal noise from a SplitMix64 hash (sum of
/// twelve uniforms minus six).
fn hashed_normal(key: u64) -> f64 {
    let mut x = key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (0..12)
        .map(|_| {
            x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
        })
        .sum::<f64>()
        - 6.0
}

fn staggered_fixture(dir: &Path, noise: f64) -> PathBuf {
    let input = dir.join("staggered.csv");
    let adopt = |i: usize| match i {
        0..=19 => None,
        20..=29 => Some(20),
        _ => Some(26),
    };
    let wobble = |i: usize, t: usize| noise * hashed_normal((i * 1000 + t) as u64);
    write_wide(&input, 40, 32, |i, t| adopt(i).is_none_or(|a| t < a).then(|| rank2(i, t) + wobble(i, t)));
    input
}

#[test]
fn infer_contains_truth_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = staggered_fixture(dir.path(), 1e-3);
    let out_dir = dir.path().join("out");
    let out = mnar(&[
        "infer", "--input", p(&input), "--group", "u22,u31", "--period", "28", "--rank", "2", "--level", "0.99", "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_json(out_dir.join("inference.json"));
    let truth = (rank2(22, 28) + rank2(31, 28)) / 2.0;
    let (lo, hi) = (v["ci"][0].as_f64().unwrap(), v["ci"][1].as_f64().unwrap());
    assert!(lo <= truth && truth <= hi, "{lo} {truth} {hi}");
    let record: mnar_core::inference::InferenceRecord = serde_json::from_value(v.clone()).unwrap();
    let again = serde_json::to_value(&record).unwrap();
    for key in ["estimate", "variance", "ci", "sigma_hat", "level", "n_groups"] {
        assert_eq!(again[key], v[key], "{key}");
    }
}

#[test]
fn infer_rejects_invalid_level() {
    let dir = tempfile::tempdir().unwrap();
    let input = staggered_fixture(dir.path(), 1e-3);
    let out = mnar(&[
        "infer", "--input", p(&input), "--group", "u22", "--period", "28", "--level", "1.5", "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("level"), "{}", stderr(&out));
}

/// Long-format outcomes with three treatment groups of ten units each,
/// 24 pre-pilot and 16 pilot periods.
fn treatment_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (n, m, t0) = (30, 40, 24);
    let level = |i: usize| i / 10;
    let mut s = String::from("unit,time,value\n");
    for i in 0..n {
        for t in 0..m {
            let shift = if t >= t0 { level(i) as f64 * (0.5 + 0.01 * i as f64) } else { 0.0 };
            let noise = 0.01 * (((i * 31 + t * 17) % 13) as f64 / 13.0 - 0.5);
            writeln!(s, "s{i},{t},{:.17e}", rank2(i, t) + shift + noise).unwrap();
        }
    }
    let outcomes = dir.join("outcomes.csv");
    std::fs::write(&outcomes, s).unwrap();
    let mut a = String::from("unit,treatment\n");
    for i in 0..n {
        writeln!(a, "s{i},{}", level(i)).unwrap();
    }
    let assignment = dir.join("assignment.csv");
    std::fs::write(&assignment, a).unwrap();
    (outcomes, assignment)
}

#[test]
fn treat_writes_effects_windows_and_spec_tests() {
    let dir = tempfile::tempdir().unwrap();
    let (outcomes, assignment) = treatment_fixture(dir.path());
    let out_dir = dir.path().join("out");
    let out = mnar(&[
        "treat",
        "--input",
        p(&outcomes),
        "--assignment",
        p(&assignment),
        "--pilot-start",
        "24",
        "--rank",
        "2",
        "--window",
        "weekly:4",
        "--bonferroni",
        "252",
        "--draws",
        "200",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut rdr = csv::Reader::from_path(out_dir.join("effects.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["d", "t", "mu", "theta", "var_mu", "var_theta"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 16);
    for r in rows.iter().filter(|r| &r[0] == "1") {
        assert_eq!(&r[2], &r[3], "theta(1) must equal mu(1)");
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
    }

    let mut rdr = csv::Reader::from_path(out_dir.join("windows.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 4);
    let crit: f64 = rows[0][7].parse().unwrap();
    assert!((crit - 3.7210).abs() < 1e-3, "{crit}");

    let spec = read_json(out_dir.join("spec_test.json"));
    let ms = &spec["model_specification"]["result"];
    assert_eq!(ms["n_draws"], 200);
    assert_eq!(ms["n_cells"].as_u64().unwrap(), 20 * 16 * 2);
    let cvs: Vec<f64> = ms["decisions"].as_array().unwrap().iter().map(|d| d["critical_value"].as_f64().unwrap()).collect();
    assert!(cvs.windows(2).all(|w| w[0] < w[1]), "{cvs:?}");
    assert_eq!(spec["per_treatment"].as_array().unwrap().len(), 2);
    assert!(out_dir.join("unit_effects.csv").exists());
}

#[test]
fn treat_covariate_adjustment_matches_preadjusted_values() {
    let dir = tempfile::tempdir().unwrap();
    let (outcomes, assignment) = treatment_fixture(dir.path());
    let text = std::fs::read_to_string(&outcomes).unwrap();
    let (mut shifted, mut cov) = (String::from("unit,time,value\n"), String::from("unit,time,x1\n"));
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let x = (f[0][1..].parse::<f64>().unwrap() * 0.37 + f[1].parse::<f64>().unwrap() * 0.11).sin();
        writeln!(shifted, "{},{},{:.17e}", f[0], f[1], f[2].parse::<f64>().unwrap() + 2.0 * x).unwrap();
        writeln!(cov, "{},{},{:.17e}", f[0], f[1], x).unwrap();
    }
    let (shifted_path, cov_path, beta_path) =
        (dir.path().join("shifted.csv"), dir.path().join("cov.csv"), dir.path().join("beta.json"));
    std::fs::write(&shifted_path, shifted).unwrap();
    std::fs::write(&cov_path, cov).unwrap();
    std::fs::write(&beta_path, "[2.0]").unwrap();
    let run = |input: &Path, extra: &[&str], out: &Path| {
        let mut args = vec![
            "treat", "--input", p(input), "--assignment", p(&assignment), "--pilot-start", "24", "--rank", "2",
            "--no-spec-test", "--out", p(out),
        ];
        args.extend_from_slice(extra);
        let o = mnar(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        read_effects(&out.join("effects.csv"))
    };
    let plain = run(&outcomes, &[], &dir.path().join("a"));
    let adjusted = run(&shifted_path, &["--covariates", p(&cov_path), "--beta", p(&beta_path)], &dir.path().join("b"));
    for (x, y) in plain.iter().zip(&adjusted) {
        assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

fn read_effects(path: &Path) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .flat_map(|r| r.unwrap().iter().skip(2).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn treat_missing_assignment_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (outcomes, _) = treatment_fixture(dir.path());
    let out = mnar(&[
        "treat",
        "--input",
        p(&outcomes),
        "--assignment",
        p(&dir.path().join("absent.csv")),
        "--pilot-start",
        "24",
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.csv"), "{}", stderr(&out));
}

fn small_staggered_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "design": "staggered_basic",
        "group_sizes": [40, 20, 20, 20],
        "periods": 60,
        "adoption_times": [30, 40, 50],
        "replications": 4,
        "baseline_replications": 2,
        "seed": 11
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_staggered_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let run = |out: &Path, threads: &str| {
        let o = mnar(&["--threads", threads, "simulate", "--design", "staggered", "--config", p(&cfg), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run(&a, "1");
    run(&b, "3");
    for f in ["replications.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ma = read_json(a.join("manifest.json"));
    let mb = read_json(b.join("manifest.json"));
    assert_eq!(ma["outputs"][0]["sha256"], mb["outputs"][0]["sha256"]);
    assert_eq!(ma["seed"], 11);
}

#[test]
fn simulate_paper_preset_emits_summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let o = mnar(&["simulate", "--design", "tobacco", "--preset", "paper", "--reps", "2", "--out", p(&out_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = read_json(out_dir.join("summary.json"));
    for key in ["design", "replications", "failures", "rmse", "coverage", "ks", "config"] {
        assert!(s.get(key).is_some(), "{key} missing from {s}");
    }
    assert_eq!(s["design"], "tobacco_protocol");
    assert!(s["rmse"]["pipeline"].as_f64().unwrap() > 0.0);
    let header = std::fs::read_to_string(out_dir.join("replications.csv")).unwrap();
    assert!(header.starts_with("rep,target,unit,period,estimate,truth,variance,standardized,baseline,error\n"));
}

#[test]
fn simulate_rejects_zero_reps() {
    let dir = tempfile::tempdir().unwrap();
    let o = mnar(&["simulate", "--design", "staggered", "--reps", "0", "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("replications"), "{}", stderr(&o));
}
