use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mnar_core::completion::{LambdaChoice, RankChoice};
use mnar_core::solver::SolverOptions;
use mnar_core::PanelFormat;

#[derive(Debug, Parser)]
#[command(
    name = "mnar",
    version,
    about = "Matrix completion and debiased inference for panels with structured missingness"
)]
pub struct Cli {
    /// Worker threads for subproblems and replications [default: available cores]
    #[arg(long, global = true, env = "MNAR_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill every missing entry of a panel with debiased low-rank estimates
    Complete(CompleteArgs),
    /// Confidence interval for the average missing outcome of a unit group at one period
    Infer(InferArgs),
    /// Treatment effects, window averages and specification tests for a pilot panel
    Treat(TreatArgs),
    /// Monte-Carlo experiments on synthetic designs
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Wide,
    WideBare,
    Long,
}

impl From<FormatArg> for PanelFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Wide => PanelFormat::Wide,
            FormatArg::WideBare => PanelFormat::WideBare,
            FormatArg::Long => PanelFormat::Long,
        }
    }
}

/// `auto` or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Auto<T> {
    Auto,
    Value(T),
}

impl<T: Serialize> Serialize for Auto<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => v.serialize(s),
        }
    }
}

impl<T: FromStr> FromStr for Auto<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(Auto::Auto)
        } else {
            s.parse().map(Auto::Value).map_err(|e: T::Err| format!("expected `auto` or a value: {e}"))
        }
    }
}

impl<T: Copy> Auto<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Auto::Auto => None,
            Auto::Value(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Rank of the low-rank signal, or `auto` for the eigenvalue-ratio estimate
    #[arg(long, default_value = "auto", value_name = "R|auto")]
    pub rank: Auto<usize>,

    /// Largest rank considered by `--rank auto`
    #[arg(long, default_value_t = 8, value_name = "R")]
    pub r_max: usize,

    /// Maximum number of target units (or periods) per subproblem
    #[arg(long, default_value = "auto", value_name = "K|auto")]
    pub group_cap: Auto<usize>,

    /// Constant C in the penalty rule λ = C σ √max(n, m)
    #[arg(long = "lambda-c", default_value_t = 2.0, value_name = "C")]
    pub lambda_c: f64,

    /// Fixed penalty for every subproblem instead of the rule
    #[arg(long, default_value = "auto", value_name = "LAMBDA|auto")]
    pub lambda: Auto<f64>,

    /// Proximal-gradient iteration limit
    #[arg(long, default_value_t = 500, value_name = "N")]
    pub max_iters: usize,

    /// Relative-change stopping tolerance
    #[arg(long, default_value_t = 1e-7, value_name = "TOL")]
    pub tol: f64,
}

impl ModelArgs {
    pub fn rank_choice(&self) -> RankChoice {
        match self.rank.value() {
            Some(r) => RankChoice::Fixed(r),
            None => RankChoice::Auto { r_max: self.r_max },
        }
    }

    pub fn lambda_choice(&self) -> LambdaChoice {
        match self.lambda.value() {
            Some(l) => LambdaChoice::Fixed(l),
            None => LambdaChoice::Rule,
        }
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.max_iters,
            rel_tol: self.tol,
            lambda_constant: self.lambda_c,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Panel CSV
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Panel layout
    #[arg(long, value_enum, default_value = "wide")]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompleteArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Fully observed panel of true values; the error on missing entries is reported
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Comma-separated unit labels to average over
    #[arg(long, value_delimiter = ',', required = true, value_name = "UNITS")]
    pub group: Vec<String>,

    /// Time label of the target period
    #[arg(long, value_name = "TIME")]
    pub period: String,

    /// Confidence level of the interval
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// `weekly:k`: consecutive windows of `k` pilot periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowArg(pub usize);

impl FromStr for WindowArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let k = s
            .strip_prefix("weekly:")
            .ok_or_else(|| format!("expected `weekly:<k>`, got `{s}`"))?;
        match k.parse::<usize>() {
            Ok(k) if k > 0 => Ok(WindowArg(k)),
            _ => Err(format!("window length must be a positive integer, got `{k}`")),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TreatArgs {
    /// Outcomes CSV holding every unit's observed outcome in every period
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Outcomes layout
    #[arg(long, value_enum, default_value = "long")]
    pub format: FormatArg,

    /// CSV with columns `unit,treatment` (0 = control)
    #[arg(long, value_name = "PATH")]
    pub assignment: PathBuf,

    /// Time label of the first pilot period
    #[arg(long, value_name = "TIME")]
    pub pilot_start: String,

    /// CSV with columns `unit,time,x1,...,xp`
    #[arg(long, value_name = "PATH", requires = "beta")]
    pub covariates: Option<PathBuf>,

    /// JSON array with the covariate coefficients
    #[arg(long, value_name = "PATH", requires = "covariates")]
    pub beta: Option<PathBuf>,

    /// Comma-separated unit labels to average over [default: all treated units]
    #[arg(long, value_delimiter = ',', value_name = "UNITS")]
    pub group: Vec<String>,

    /// Window averages of θ over consecutive pilot periods, as `weekly:k`
    #[arg(long, value_name = "weekly:K")]
    pub window: Option<WindowArg>,

    /// Number of comparisons for the uniform 95% critical value [default: window count]
    #[arg(long, value_name = "N", requires = "window")]
    pub bonferroni: Option<usize>,

    /// Confidence levels of the specification tests
    #[arg(long, value_delimiter = ',', default_value = "0.90,0.95,0.99")]
    pub levels: Vec<f64>,

    /// Bootstrap draws for the specification tests
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,

    /// Bootstrap seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Skip the unit-level specification tests
    #[arg(long)]
    pub no_spec_test: bool,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignArg {
    Staggered,
    Interactive,
    Tobacco,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Paper,
    Ci,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Data-generating design
    #[arg(long, value_enum)]
    pub design: DesignArg,

    /// Replication budget and design sizes
    #[arg(long, value_enum, default_value = "ci")]
    pub preset: PresetArg,

    /// JSON configuration replacing the preset (flags still override it)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Number of replications [default: from the preset]
    #[arg(long, value_name = "N")]
    pub reps: Option<usize>,

    /// Replications that also run the full-matrix baseline [default: from the preset]
    #[arg(long, value_name = "N")]
    pub baseline_reps: Option<usize>,

    /// Master seed [default: from the preset]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Draw the target unit once instead of per replication
    #[arg(long)]
    pub fix_target: bool,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
