use faer::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mnar_core::normal::standard_normal;
use mnar_core::treatment::{Covariates, TreatmentPanel};
use mnar_core::{classify_pattern, Error, Mask, MissingPattern, ObservedPanel, Result, TreatmentAssignment};

use crate::config::{Design, SimConfig};

/// Per-replication seed: SplitMix64 of `(seed, rep)`.
pub fn rep_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn draw2(rng: &mut ChaCha8Rng, mean: f64) -> [f64; 2] {
    [mean + standard_normal(rng), mean + standard_normal(rng)]
}

fn check(cfg: &SimConfig, design: Design) -> Result<()> {
    if cfg.design != design {
        return Err(Error::InvalidArgument(format!(
            "config describes {:?}, expected {design:?}",
            cfg.design
        )));
    }
    cfg.validate()
}

#[derive(Debug, Clone)]
pub struct StaggeredSample {
    pub panel: ObservedPanel,
    pub truth: Mat<f64>,
    pub pattern: MissingPattern,
    /// Randomly drawn unit of the target group.
    pub target_unit: usize,
}

/// Draw a unit of `group` (`0`-based index into `sizes`).
fn draw_target(rng: &mut ChaCha8Rng, sizes: &[usize], group: usize) -> usize {
    let start: usize = sizes[..group].iter().sum();
    start + rng.random_range(0..sizes[group])
}

fn target_unit(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.fix_target {
        draw_target(&mut self::rng(rep_seed(cfg.seed, u64::MAX)), &cfg.group_sizes, cfg.target_group)
    } else {
        draw_target(rng, &cfg.group_sizes, cfg.target_group)
    }
}

/// Staggered adoption: `m_it = ζ_iᵀη_t`, groups adopt in turn and stay treated.
pub fn gen_staggered(cfg: &SimConfig, seed: u64) -> Result<StaggeredSample> {
    check(cfg, Design::StaggeredBasic)?;
    let mut rng = rng(seed);
    let (n, m) = (cfg.n_units(), cfg.periods);
    let mut adopt = Vec::with_capacity(n);
    let mut zeta = Vec::with_capacity(n);
    for (g, &size) in cfg.group_sizes.iter().enumerate() {
        for _ in 0..size {
            zeta.push(draw2(&mut rng, cfg.zeta_means[g]));
            adopt.push(if g == 0 { None } else { Some(cfg.adoption_times[g - 1]) });
        }
    }
    let eta: Vec<[f64; 2]> = (0..m).map(|_| draw2(&mut rng, cfg.eta_means[0])).collect();
    let truth = Mat::from_fn(n, m, |i, t| zeta[i][0] * eta[t][0] + zeta[i][1] * eta[t][1]);
    let noise: Vec<f64> = (0..n * m).map(|_| cfg.noise_sd * standard_normal(&mut rng)).collect();
    let mask = Mask::from_fn(n, m, |i, t| adopt[i].is_none_or(|a| t < a));
    let values = Mat::from_fn(n, m, |i, t| if mask.get(i, t) { truth[(i, t)] + noise[i * m + t] } else { 0.0 });
    let panel = ObservedPanel::from_parts(values, mask)?;
    let pattern = classify_pattern(&panel);
    let target_unit = target_unit(cfg, &mut rng);
    Ok(StaggeredSample {
        panel,
        truth,
        pattern,
        target_unit,
    })
}

#[derive(Debug, Clone)]
pub struct InteractiveSample {
    pub panel: TreatmentPanel,
    /// `m^(d)` for every unit and period (pre-pilot periods share `m^(0)`).
    pub truths: Vec<Mat<f64>>,
    pub target_unit: usize,
}

/// Multi-treatment interactive effects: `y_it = ζ_iᵀη_t^(d_i) + x_itᵀβ + ε_it`
/// with `x_1 ~ N(0,1)` everywhere and `x_2 ~ N(0,1)` in the pilot only.
pub fn gen_interactive(cfg: &SimConfig, seed: u64) -> Result<InteractiveSample> {
    check(cfg, Design::InteractiveEffects)?;
    let mut rng = rng(seed);
    let (n, m, t0) = (cfg.n_units(), cfg.periods, cfg.pilot_start);
    let n_d = cfg.group_sizes.len();
    let zeta: Vec<[f64; 2]> = (0..n).map(|_| draw2(&mut rng, cfg.zeta_means[0])).collect();
    let eta: Vec<Vec<[f64; 2]>> = (0..n_d)
        .map(|d| (0..m).map(|_| draw2(&mut rng, cfg.eta_means[d])).collect())
        .collect();
    let truths: Vec<Mat<f64>> = (0..n_d)
        .map(|d| {
            Mat::from_fn(n, m, |i, t| {
                let e = eta[if t < t0 { 0 } else { d }][t];
                zeta[i][0] * e[0] + zeta[i][1] * e[1]
            })
        })
        .collect();
    let p = cfg.beta.len();
    let mut x = Covariates::zeros(n, m, p);
    for i in 0..n {
        for t in 0..m {
            let row = x.get_mut(i, t);
            for (k, v) in row.iter_mut().enumerate() {
                let z = standard_normal(&mut rng);
                *v = if k == 1 && t < t0 { 0.0 } else { z };
            }
        }
    }
    let mut groups = Vec::with_capacity(n_d);
    let mut start = 0;
    for &size in &cfg.group_sizes {
        groups.push((start..start + size).collect::<Vec<_>>());
        start += size;
    }
    let assignment = TreatmentAssignment::new(groups, n, t0)?;
    let noise: Vec<f64> = (0..n * m).map(|_| cfg.noise_sd * standard_normal(&mut rng)).collect();
    let values = Mat::from_fn(n, m, |i, t| {
        let d = assignment.treatment_of(i).unwrap_or(0);
        let xb: f64 = x.get(i, t).iter().zip(&cfg.beta).map(|(a, b)| a * b).sum();
        truths[d][(i, t)] + xb + noise[i * m + t]
    });
    let base = ObservedPanel::fully_observed(values)?;
    let (cov, beta) = if p > 0 { (Some(x), Some(cfg.beta.clone())) } else { (None, None) };
    let panel = TreatmentPanel::new(base, assignment, cov, beta)?;
    let target_unit = target_unit(cfg, &mut rng);
    Ok(InteractiveSample {
        panel,
        truths,
        target_unit,
    })
}

pub const TOBACCO_FIRST_YEAR: usize = 1970;
pub const TOBACCO_STATES: usize = 38;
pub const TOBACCO_YEARS: usize = 31;

fn year_col(year: usize) -> usize {
    year - TOBACCO_FIRST_YEAR
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SalesCategory {
    Severe,
    Moderate,
    Mild,
    Good,
}

/// Percentage change of the 1986–2000 mean over the 1970–1985 mean.
pub fn sales_change(row: &[f64]) -> f64 {
    let split = year_col(1986);
    let pre = row[..split].iter().sum::<f64>() / split as f64;
    let post = row[split..].iter().sum::<f64>() / (row.len() - split) as f64;
    100.0 * (post - pre) / pre
}

/// Severe: above −10%; moderate: −15% to −10%; mild: −20% to −15%; good: −20% or less.
pub fn categorize(change: f64) -> SalesCategory {
    if change > -10.0 {
        SalesCategory::Severe
    } else if change > -15.0 {
        SalesCategory::Moderate
    } else if change > -20.0 {
        SalesCategory::Mild
    } else {
        SalesCategory::Good
    }
}

/// Synthetic rank-3 stand-in for state cigarette sales, 1970–2000, with
/// 6 severe, 6 moderate, 6 mild and 20 good states.
pub fn tobacco_stand_in(seed: u64, noise_sd: f64) -> Mat<f64> {
    let mut rng = rng(seed);
    let split = year_col(1986);
    let decline = |t: usize| if t < split { 0.0 } else { (t + 1 - split) as f64 / (TOBACCO_YEARS - split) as f64 };
    let post_mean = (split..TOBACCO_YEARS).map(decline).sum::<f64>() / (TOBACCO_YEARS - split) as f64;
    let cycle = |t: usize| (2.0 * std::f64::consts::PI * t as f64 / 9.0).sin();
    let bands = [(-9.0, -1.0), (-14.0, -11.0), (-19.0, -16.0), (-45.0, -25.0)];
    let counts = [6, 6, 6, 20];
    let mut rows = Vec::with_capacity(TOBACCO_STATES);
    for (band, &k) in bands.iter().zip(&counts) {
        for _ in 0..k {
            let level = 90.0 + 50.0 * rng.random::<f64>();
            let change = band.0 + (band.1 - band.0) * rng.random::<f64>();
            let slope = change / 100.0 * level / post_mean;
            let amp = 2.0 * standard_normal(&mut rng);
            rows.push((level, slope, amp));
        }
    }
    let noise: Vec<f64> = (0..TOBACCO_STATES * TOBACCO_YEARS)
        .map(|_| noise_sd * standard_normal(&mut rng))
        .collect();
    Mat::from_fn(TOBACCO_STATES, TOBACCO_YEARS, |i, t| {
        let (a, b, c) = rows[i];
        a + b * decline(t) + c * cycle(t) + noise[i * TOBACCO_YEARS + t]
    })
}

#[derive(Debug, Clone)]
pub struct TobaccoSample {
    pub panel: ObservedPanel,
    pub truth: Mat<f64>,
    pub pattern: MissingPattern,
    pub categories: Vec<SalesCategory>,
    /// Adoption column per state (`None` never adopts).
    pub adoption: Vec<Option<usize>>,
}

/// Adoption protocol: half of the severe states adopt in 1986 and half in
/// 1991, moderate states in 1991 or 1996, half of the mild states in 1996;
/// the rest never adopt. Only the choice of halves is random.
pub fn gen_tobacco_protocol(base: &Mat<f64>, seed: u64) -> Result<TobaccoSample> {
    if (base.nrows(), base.ncols()) != (TOBACCO_STATES, TOBACCO_YEARS) {
        return Err(Error::ShapeMismatch {
            expected: (TOBACCO_STATES, TOBACCO_YEARS),
            got: (base.nrows(), base.ncols()),
        });
    }
    let categories: Vec<SalesCategory> = (0..TOBACCO_STATES)
        .map(|i| {
            let row: Vec<f64> = (0..TOBACCO_YEARS).map(|t| base[(i, t)]).collect();
            categorize(sales_change(&row))
        })
        .collect();
    let mut rng = rng(seed);
    let mut adoption = vec![None; TOBACCO_STATES];
    let schedule = [
        (SalesCategory::Severe, Some(1986), Some(1991)),
        (SalesCategory::Moderate, Some(1991), Some(1996)),
        (SalesCategory::Mild, Some(1996), None),
    ];
    for (cat, early, late) in schedule {
        let mut members: Vec<usize> = (0..TOBACCO_STATES).filter(|&i| categories[i] == cat).collect();
        members.shuffle(&mut rng);
        let half = members.len().div_ceil(2);
        for (k, &i) in members.iter().enumerate() {
            adoption[i] = if k < half { early } else { late }.map(year_col);
        }
    }
    let mask = Mask::from_fn(TOBACCO_STATES, TOBACCO_YEARS, |i, t| adoption[i].is_none_or(|a| t < a));
    let values = Mat::from_fn(TOBACCO_STATES, TOBACCO_YEARS, |i, t| if mask.get(i, t) { base[(i, t)] } else { 0.0 });
    let panel = ObservedPanel::from_parts(values, mask)?;
    let pattern = classify_pattern(&panel);
    Ok(TobaccoSample {
        panel,
        truth: base.clone(),
        pattern,
        categories,
        adoption,
    })
}
