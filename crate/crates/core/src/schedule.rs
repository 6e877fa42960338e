//! Per-step signal/noise mixing coefficients and guidance ramps.
//!
//! Steps are indexed `1..=T`. The signal weight `alpha_t` rises to exactly
//! 1 at `t = T`; the noise weight `beta_t` is derived from it so that
//! `alpha_t^2 + beta_t^2 = 1` holds exactly in `f64` arithmetic, which can
//! move `alpha_t` a few ulps off its closed form. Loss weights are
//! `gamma_t = alpha_t`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `alpha_t = sin(pi/2 * t/T)`
    Sin,
    /// `alpha_t = t/T`
    Linear,
    /// `alpha_t = phi^(T - t)`
    Pow,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Sin => "sin",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Pow => "pow",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(ScheduleKind::Sin),
            "linear" => Ok(ScheduleKind::Linear),
            "pow" => Ok(ScheduleKind::Pow),
            other => Err(Error::invalid("schedule", format!("unknown kind {other:?}"))),
        }
    }
}

/// Serializable `(kind, T, phi)` triple from which a schedule is rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub phi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Pow,
            steps: 10,
            phi: 0.75,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.phi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    phi: f64,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    /// `phi` is only consulted (and validated) for [`ScheduleKind::Pow`].
    pub fn new(kind: ScheduleKind, steps: usize, phi: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "T must be at least 1"));
        }
        if kind == ScheduleKind::Pow && !(phi > 0.0 && phi < 1.0) {
            return Err(Error::invalid("schedule", format!("phi must lie in (0, 1), got {phi}")));
        }
        let t_max = steps as f64;
        let (alphas, betas): (Vec<f64>, Vec<f64>) = (1..=steps)
            .map(|t| match kind {
                ScheduleKind::Sin => (FRAC_PI_2 * (t as f64 / t_max)).sin(),
                ScheduleKind::Linear => t as f64 / t_max,
                ScheduleKind::Pow => phi.powi((steps - t) as i32),
            })
            .map(unit_pair)
            .unzip();
        Ok(Self {
            kind,
            steps,
            phi,
            gammas: alphas.clone(),
            alphas,
            betas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            kind: self.kind,
            steps: self.steps,
            phi: self.phi,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t - 1]
    }
}

/// Floats within `n` ulps of `x`, nearest first.
fn neighbours(x: f64, n: usize) -> impl Iterator<Item = f64> {
    let (mut down, mut up) = (x, x);
    std::iter::once(x).chain((0..n).flat_map(move |_| {
        down = down.next_down();
        up = up.next_up();
        [down, up]
    }))
}

/// The exact pair `(a', b')` with `a'*a' + b'*b' == 1` nearest to
/// `(a, sqrt(1 - a^2))`. Products near 1 only take every other float, so
/// the square root alone cannot always close the identity; `a` then moves
/// by `|da| <= 2^-54 / a`.
fn unit_pair(a: f64) -> (f64, f64) {
    let b0 = (1.0 - a * a).max(0.0).sqrt();
    let mut best: Option<(f64, f64)> = None;
    for b in neighbours(b0, 64).filter(|b| (0.0..=1.0).contains(b)) {
        let r = (1.0 - b * b).max(0.0).sqrt();
        for a2 in neighbours(a, 2).chain(neighbours(r, 2)) {
            let closer = best.is_none_or(|(x, _)| (a2 - a).abs() < (x - a).abs());
            if a2 > 0.0 && a2 <= 1.0 && a2 * a2 + b * b == 1.0 && closer {
                best = Some((a2, b));
            }
        }
    }
    best.unwrap_or((a, b0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfgMode {
    Constant,
    Linear,
}

/// Guidance strength at step `t`. Linear mode ramps from 0 at `t = 1` to
/// `lambda_max` at `t = T`; with `T = 1` it returns `lambda_max`.
pub fn cfg_lambda(t: usize, steps: usize, lambda_max: f64, mode: CfgMode) -> Result<f64> {
    if t == 0 || t > steps {
        return Err(Error::invalid("cfg_lambda", format!("t = {t} outside 1..={steps}")));
    }
    if lambda_max < 0.0 || !lambda_max.is_finite() {
        return Err(Error::invalid(
            "cfg_lambda",
            format!("lambda_max = {lambda_max} must be finite and >= 0"),
        ));
    }
    Ok(match mode {
        CfgMode::Constant => lambda_max,
        CfgMode::Linear if steps == 1 => lambda_max,
        CfgMode::Linear => lambda_max * ((t - 1) as f64 / (steps - 1) as f64),
    })
}
