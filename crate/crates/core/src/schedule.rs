//! Three-phase augmentation curriculum.
//!
//! Training progress `p` runs from 0 to 1. Augmentation strength `alpha` is
//! zero during the first phase, ramps linearly through the second and stays
//! at one in the third. A phase boundary belongs to the later phase.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionChoice, CropState, N_ACTIONS};
use crate::error::{Error, Result};
use crate::noise::{self, NoiseConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Foundation,
    Transition,
    Robustness,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Foundation => 1,
            Phase::Transition => 2,
            Phase::Robustness => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgaConfig {
    /// When false, `alpha` is zero throughout and no augmentation happens.
    pub enabled: bool,
    pub phase1_end: f64,
    pub phase2_end: f64,
    /// Action-mask probability at full strength.
    pub mask_probability: f64,
    /// Also perturb the simulated weather, not just the observation.
    pub perturb_weather: bool,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            phase1_end: 0.4,
            phase2_end: 0.6,
            mask_probability: 0.1,
            perturb_weather: true,
        }
    }
}

fn check_progress(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::contract(format!("progress must be in [0, 1], got {p}")))
    }
}

impl PgaConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.phase1_end && self.phase1_end < self.phase2_end && self.phase2_end <= 1.0) {
            return Err(Error::Config(format!(
                "phase boundaries must satisfy 0 < {} < {} <= 1",
                self.phase1_end, self.phase2_end
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config("mask_probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn phase(&self, p: f64) -> Result<Phase> {
        check_progress(p)?;
        Ok(if p < self.phase1_end {
            Phase::Foundation
        } else if p < self.phase2_end {
            Phase::Transition
        } else {
            Phase::Robustness
        })
    }

    /// Schedule value regardless of `enabled`.
    pub fn scheduled_alpha(&self, p: f64) -> Result<f64> {
        Ok(match self.phase(p)? {
            Phase::Foundation => 0.0,
            Phase::Transition => (p - self.phase1_end) / (self.phase2_end - self.phase1_end),
            Phase::Robustness => 1.0,
        })
    }

    /// Effective augmentation strength.
    pub fn alpha(&self, p: f64) -> Result<f64> {
        let a = self.scheduled_alpha(p)?;
        Ok(if self.enabled { a } else { 0.0 })
    }

    pub fn mask_probability_at(&self, alpha: f64) -> f64 {
        self.mask_probability * alpha
    }
}

/// Training progress of an episode.
pub fn progress(episode: u32, total_episodes: u32) -> Result<f64> {
    if total_episodes == 0 || episode > total_episodes {
        return Err(Error::contract(format!(
            "episode {episode} outside 0..={total_episodes}"
        )));
    }
    Ok(episode as f64 / total_episodes as f64)
}

/// Draws once and reports whether the action is replaced this step.
/// The draw happens even at zero strength so stream consumption does not
/// depend on the schedule.
pub fn action_mask_gate<R: Rng + ?Sized>(cfg: &PgaConfig, alpha: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u < cfg.mask_probability_at(alpha)
}

/// Uniform choice among the other `N_ACTIONS - 1` actions.
pub fn masked_replacement<R: Rng + ?Sized>(action: ActionChoice, rng: &mut R) -> ActionChoice {
    let k = rng.random_range(0..N_ACTIONS - 1);
    let k = if k >= action.index() { k + 1 } else { k };
    ActionChoice::from_index(k).expect("index below N_ACTIONS")
}

/// Perturbed weather for the simulated day, using the temperature and
/// rainfall channels with their thresholds. Returns `None` when neither
/// channel is active.
pub fn weather_perturbation<R: Rng + ?Sized>(
    state: &CropState,
    alpha: f64,
    cfg: &NoiseConfig,
    temp_rng: &mut R,
    rain_rng: &mut R,
) -> Option<(f64, f64)> {
    let active = cfg.active_channels(alpha);
    if !active.temperature && !active.rainfall {
        return None;
    }
    let temp = if active.temperature {
        noise::temp_noise(state.temperature, alpha, cfg, temp_rng)
    } else {
        state.temperature
    };
    let rain = if active.rainfall {
        noise::rain_noise(state.rainfall, alpha, cfg, rain_rng)
    } else {
        state.rainfall
    };
    Some((temp, rain))
}
