use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use mnar_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    StaggeredBasic,
    InteractiveEffects,
    TobaccoProtocol,
}

impl std::str::FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staggered" | "staggered_basic" => Ok(Design::StaggeredBasic),
            "interactive" | "interactive_effects" => Ok(Design::InteractiveEffects),
            "tobacco" | "tobacco_protocol" => Ok(Design::TobaccoProtocol),
            other => Err(Error::InvalidArgument(format!(
                "unknown design `{other}` (expected staggered, interactive or tobacco)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Ci,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "ci" => Ok(Preset::Ci),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (expected paper or ci)"
            ))),
        }
    }
}

/// Simulation design and Monte-Carlo budget.
///
/// Staggered: `group_sizes[0]` never adopts, group `g ≥ 1` adopts at
/// `adoption_times[g-1]`; `zeta_means[g]` is the per-coordinate mean of
/// `ζ_i` in group `g` and `eta_means[0]` that of `η_t`.
///
/// Interactive: `group_sizes[d]` units receive treatment `d` from
/// `pilot_start`; `zeta_means[0]` is shared and `eta_means[d]` gives the
/// mean of `η_t^(d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub design: Design,
    pub group_sizes: Vec<usize>,
    pub periods: usize,
    pub adoption_times: Vec<usize>,
    pub pilot_start: usize,
    pub zeta_means: Vec<f64>,
    pub eta_means: Vec<f64>,
    pub noise_sd: f64,
    pub rank: usize,
    pub beta: Vec<f64>,
    pub replications: usize,
    /// Replications (from the first) that also run the full-matrix baseline.
    pub baseline_replications: usize,
    pub levels: Vec<f64>,
    /// Group the random target unit is drawn from.
    pub target_group: usize,
    /// Draw the target once instead of per replication.
    pub fix_target: bool,
    pub lambda_constant: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::paper(Design::StaggeredBasic)
    }
}

impl SimConfig {
    pub fn paper(design: Design) -> Self {
        let base = SimConfig {
            design,
            group_sizes: vec![200, 100, 100, 100],
            periods: 500,
            adoption_times: vec![200, 300, 400],
            pilot_start: 250,
            zeta_means: vec![2.5 / SQRT_2, 1.0 / SQRT_2, 1.5 / SQRT_2, SQRT_2],
            eta_means: vec![1.0 / SQRT_2],
            noise_sd: 1.0,
            rank: 2,
            beta: Vec::new(),
            replications: 1000,
            baseline_replications: 1000,
            levels: vec![0.90, 0.95, 0.99],
            target_group: 2,
            fix_target: false,
            lambda_constant: 2.0,
            seed: 20240601,
        };
        match design {
            Design::StaggeredBasic => base,
            Design::InteractiveEffects => SimConfig {
                group_sizes: vec![250, 250, 250],
                adoption_times: Vec::new(),
                zeta_means: vec![1.0 / SQRT_2],
                eta_means: vec![1.0 / SQRT_2, 1.5 / SQRT_2, SQRT_2],
                beta: vec![1.0, 1.0],
                baseline_replications: 0,
                ..base
            },
            Design::TobaccoProtocol => SimConfig {
                group_sizes: vec![38],
                periods: 31,
                adoption_times: Vec::new(),
                zeta_means: Vec::new(),
                eta_means: Vec::new(),
                noise_sd: 2.0,
                rank: 3,
                replications: 10,
                baseline_replications: 10,
                levels: Vec::new(),
                ..base
            },
        }
    }

    /// Paper-scale designs with smaller replication budgets.
    pub fn ci(design: Design) -> Self {
        let mut cfg = SimConfig::paper(design);
        if design != Design::TobaccoProtocol {
            cfg.replications = 200;
            cfg.baseline_replications = cfg.baseline_replications.min(100);
        }
        cfg
    }

    pub fn preset(design: Design, preset: Preset) -> Self {
        match preset {
            Preset::Paper => SimConfig::paper(design),
            Preset::Ci => SimConfig::ci(design),
        }
    }

    pub fn n_units(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.group_sizes.iter().any(|&g| g == 0) || self.periods == 0 {
            return bad("group sizes and the number of periods must be positive".into());
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad(format!("noise_sd must be nonnegative, got {}", self.noise_sd));
        }
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        for &l in &self.levels {
            if !(l > 0.0 && l < 1.0) {
                return bad(format!("level {l} outside (0, 1)"));
            }
        }
        match self.design {
            Design::StaggeredBasic => {
                let k = self.group_sizes.len();
                if k < 2 || self.adoption_times.len() != k - 1 {
                    return bad("staggered design needs one adoption time per adopting group".into());
                }
                if !self.adoption_times.windows(2).all(|w| w[0] < w[1])
                    || self.adoption_times[0] == 0
                    || *self.adoption_times.last().unwrap() >= self.periods
                {
                    return bad("adoption times must increase within (0, periods)".into());
                }
                if self.zeta_means.len() != k || self.eta_means.len() != 1 {
                    return bad("staggered design needs one ζ mean per group and one η mean".into());
                }
                if self.rank != 2 {
                    return bad("staggered design generates rank-2 signals".into());
                }
                if self.target_group == 0 || self.target_group >= k {
                    return bad(format!("target group {} is not an adopting group", self.target_group));
                }
            }
            Design::InteractiveEffects => {
                let k = self.group_sizes.len();
                if k < 2 || self.eta_means.len() != k || self.zeta_means.len() != 1 {
                    return bad("interactive design needs one η mean per treatment and one ζ mean".into());
                }
                if self.pilot_start == 0 || self.pilot_start >= self.periods {
                    return bad("pilot_start must lie in (0, periods)".into());
                }
                if self.rank != 2 {
                    return bad("interactive design generates rank-2 signals".into());
                }
                if self.beta.len() > 2 {
                    return bad("at most two covariates are generated".into());
                }
                if self.target_group >= k || self.target_group < 2 {
                    return bad("target group must receive treatment 2 or higher".into());
                }
            }
            Design::TobaccoProtocol => {
                if self.group_sizes != [38] || self.periods != 31 {
                    return bad("tobacco protocol uses a 38 x 31 panel".into());
                }
            }
        }
        if self.baseline_replications > self.replications {
            return bad("baseline_replications exceeds replications".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for d in [Design::StaggeredBasic, Design::InteractiveEffects, Design::TobaccoProtocol] {
            SimConfig::paper(d).validate().unwrap();
            SimConfig::ci(d).validate().unwrap();
        }
        let mut c = SimConfig::paper(Design::StaggeredBasic);
        c.replications = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let c: SimConfig = serde_json::from_str(r#"{"replications": 5}"#).unwrap();
        assert_eq!(c.replications, 5);
        assert_eq!(c.design, Design::StaggeredBasic);
        let back: SimConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
