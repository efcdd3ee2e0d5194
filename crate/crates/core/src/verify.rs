//! Conformal correction of a learned value function and Monte-Carlo volume of
//! the corrected safe set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{default_dt, rollout_costs};
use crate::systems::{Mode, SystemSpec};
use crate::value::{is_safe, ValueFunction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Tolerated violation rate.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_calib")]
    pub calib_samples: usize,
    #[serde(default = "default_volume")]
    pub volume_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Rollout step; `T / 500` when absent.
    #[serde(default)]
    pub rollout_dt: Option<f64>,
}

fn default_epsilon() -> f64 {
    1e-2
}
fn default_calib() -> usize {
    10_000
}
fn default_volume() -> usize {
    100_000
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            calib_samples: default_calib(),
            volume_samples: default_volume(),
            seed: 0,
            rollout_dt: None,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon must lie in (0, 1)"));
        }
        let need = min_calibration_samples(self.epsilon);
        if self.calib_samples < need {
            return Err(Error::CalibrationTooSmall {
                have: self.calib_samples,
                need,
                epsilon: self.epsilon,
            });
        }
        if self.volume_samples == 0 {
            return Err(Error::config("volume_samples must be at least 1"));
        }
        if let Some(dt) = self.rollout_dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::config("rollout_dt must be positive"));
            }
        }
        Ok(())
    }

    pub fn dt(&self, sys: &SystemSpec) -> f64 {
        self.rollout_dt.unwrap_or_else(|| default_dt(sys))
    }
}

/// The 1-based rank `⌈(M + 1)(1 − ε)⌉` of the conformal quantile.
pub fn conformal_rank(m: usize, epsilon: f64) -> usize {
    let x = (m as f64 + 1.0) * (1.0 - epsilon);
    // (M + 1)(1 − ε) is often an integer in exact arithmetic (M = 999,
    // ε = 0.1) and must not round up past it.
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

/// Smallest `M` whose conformal rank does not exceed `M`.
pub fn min_calibration_samples(epsilon: f64) -> usize {
    let mut m = (1.0 / epsilon - 1.0).floor().max(1.0) as usize;
    while m > 1 && conformal_rank(m - 1, epsilon) < m {
        m -= 1;
    }
    while conformal_rank(m, epsilon) > m {
        m += 1;
    }
    m
}

/// The `⌈(M + 1)(1 − ε)⌉`-th smallest error, floored at zero.
pub fn conformal_delta(errors: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config("epsilon must lie in (0, 1)"));
    }
    let m = errors.len();
    let k = conformal_rank(m, epsilon);
    if k > m {
        return Err(Error::CalibrationTooSmall {
            have: m,
            need: min_calibration_samples(epsilon),
            epsilon,
        });
    }
    let mut sorted = errors.to_vec();
    // NaN sorts last under total order, so a NaN error can only raise δ.
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[k - 1].max(0.0))
}

/// `n` states uniform on the system's domain box.
pub fn sample_states<R: Rng + ?Sized>(sys: &SystemSpec, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            sys.domain_lo
                .iter()
                .zip(&sys.domain_hi)
                .map(|(lo, hi)| rng.random_range(*lo..=*hi))
                .collect()
        })
        .collect()
}

/// Signed errors `sign·(V(x, 0) − J(x))`, with sign `+1` for avoid and `−1`
/// for reach, so that a positive error is always an optimistic one.
pub fn calibration_errors(vf: &dyn ValueFunction, xs: &[Vec<f64>], dt: f64) -> Result<Vec<f64>> {
    let sign = match vf.system().mode {
        Mode::Avoid => 1.0,
        Mode::Reach => -1.0,
    };
    let v = vf.values_at(xs, 0.0)?;
    let j = rollout_costs(vf, xs, dt)?;
    Ok(v.iter().zip(&j).map(|(v, j)| sign * (v - j)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub delta: f64,
    pub errors: Vec<f64>,
}

/// Draws `cfg.calib_samples` states, rolls out the learned policy from each
/// and returns the conformal correction.
pub fn calibrate<R: Rng + ?Sized>(
    vf: &dyn ValueFunction,
    cfg: &VerifyConfig,
    rng: &mut R,
) -> Result<Calibration> {
    cfg.validate()?;
    let sys = vf.system();
    let xs = sample_states(sys, cfg.calib_samples, rng);
    let errors = calibration_errors(vf, &xs, cfg.dt(sys))?;
    let delta = conformal_delta(&errors, cfg.epsilon)?;
    Ok(Calibration { delta, errors })
}

/// Per-state membership in the `delta`-corrected safe set.
pub fn safe_flags(vf: &dyn ValueFunction, xs: &[Vec<f64>], delta: f64) -> Result<Vec<bool>> {
    if !(delta >= 0.0) {
        return Err(Error::config("delta must be non-negative"));
    }
    let mode = vf.system().mode;
    Ok(vf
        .values_at(xs, 0.0)?
        .into_iter()
        .map(|v| is_safe(mode, v, delta))
        .collect())
}

/// Percentage of `n` uniform states in the `delta`-corrected safe set.
pub fn mc_volume<R: Rng + ?Sized>(
    vf: &dyn ValueFunction,
    delta: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::config("volume_samples must be at least 1"));
    }
    let xs = sample_states(vf.system(), n, rng);
    let flags = safe_flags(vf, &xs, delta)?;
    Ok(100.0 * flags.iter().filter(|f| **f).count() as f64 / n as f64)
}

/// One verified model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub system: String,
    pub variant: String,
    pub seed: u64,
    pub delta: f64,
    /// Recovered volume in percent.
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeSummary {
    pub system: String,
    pub variant: String,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

/// Mean and spread of the volume per (system, variant), sorted by key.
pub fn volume_report(records: &[RunRecord]) -> Vec<VolumeSummary> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.system.clone(), r.variant.clone()))
            .or_default()
            .push(r.volume);
    }
    groups
        .into_iter()
        .map(|((system, variant), vols)| {
            let (mean, std) = mean_std(&vols);
            VolumeSummary {
                system,
                variant,
                runs: vols.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Sample mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn format_table(rows: &[VolumeSummary]) -> String {
    let mut out = format!(
        "{:<16} {:<8} {:>4}  {:>16}\n",
        "system", "variant", "runs", "volume %"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:<8} {:>4}  {:>7.2} ± {:<6.2}",
            r.system, r.variant, r.runs, r.mean, r.std
        );
    }
    out
}
