//! Observation noise with hierarchical activation, and the fixed-magnitude
//! perturbations used for sensitivity and robustness evaluation.
//!
//! Three channels switch on as the augmentation strength grows: temperature
//! first, then rainfall, then soil moisture. Each channel draws from its own
//! RNG stream.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{idx, MAX_SOIL_LAYERS, OBS_DIM};
use crate::error::{Error, Result};
use crate::rng::{RngStreams, StreamRng};

/// How the second argument of a Gaussian noise term is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamInterpretation {
    Std,
    Variance,
}

impl ParamInterpretation {
    fn to_sd(self, param: f64) -> f64 {
        match self {
            ParamInterpretation::Std => param,
            ParamInterpretation::Variance => param.max(0.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub temp_threshold: f64,
    pub rain_threshold: f64,
    pub moisture_threshold: f64,
    /// Temperature noise sd at full strength, °C.
    pub temp_sigma_base: f64,
    /// Multiplicative rainfall bias at full strength.
    pub rain_bias_scale: f64,
    pub rain_noise_param: f64,
    pub moisture_noise_param: f64,
    pub rain_interpretation: ParamInterpretation,
    pub moisture_interpretation: ParamInterpretation,
    /// Number of soil-moisture observation slots the moisture channel touches.
    pub moisture_layers: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            temp_threshold: 0.3,
            rain_threshold: 0.5,
            moisture_threshold: 0.7,
            temp_sigma_base: 2.0,
            rain_bias_scale: 0.05,
            rain_noise_param: 0.01,
            moisture_noise_param: 0.02,
            rain_interpretation: ParamInterpretation::Std,
            moisture_interpretation: ParamInterpretation::Std,
            moisture_layers: 1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temp_threshold < self.rain_threshold && self.rain_threshold < self.moisture_threshold) {
            return Err(Error::Config(
                "noise thresholds must be strictly increasing (temperature < rainfall < moisture)".into(),
            ));
        }
        for (name, v) in [
            ("temp_sigma_base", self.temp_sigma_base),
            ("rain_bias_scale", self.rain_bias_scale),
            ("rain_noise_param", self.rain_noise_param),
            ("moisture_noise_param", self.moisture_noise_param),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.moisture_layers == 0 || self.moisture_layers > MAX_SOIL_LAYERS {
            return Err(Error::Config(format!(
                "moisture_layers must be in 1..={MAX_SOIL_LAYERS}"
            )));
        }
        Ok(())
    }

    /// Which channels are active at strength `alpha`.
    pub fn active_channels(&self, alpha: f64) -> ActiveChannels {
        ActiveChannels {
            temperature: alpha > self.temp_threshold,
            rainfall: alpha > self.rain_threshold,
            moisture: alpha > self.moisture_threshold,
        }
    }

    pub fn temp_sd(&self, alpha: f64) -> f64 {
        self.temp_sigma_base * alpha
    }

    pub fn rain_sd(&self, alpha: f64) -> f64 {
        self.rain_interpretation.to_sd(self.rain_noise_param * alpha)
    }

    pub fn moisture_sd(&self, alpha: f64) -> f64 {
        self.moisture_interpretation.to_sd(self.moisture_noise_param * alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveChannels {
    pub temperature: bool,
    pub rainfall: bool,
    pub moisture: bool,
}

/// Independent streams for the three channels.
#[derive(Debug, Clone)]
pub struct ChannelRngs {
    pub temperature: StreamRng,
    pub rainfall: StreamRng,
    pub moisture: StreamRng,
}

impl ChannelRngs {
    pub fn new(streams: &mut RngStreams, base: &str, index: u64) -> Self {
        Self {
            temperature: streams.indexed(&format!("{base}.temperature"), index),
            rainfall: streams.indexed(&format!("{base}.rainfall"), index),
            moisture: streams.indexed(&format!("{base}.moisture"), index),
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `temp + N(0, (base·alpha)²)`.
pub fn temp_noise<R: Rng + ?Sized>(temp: f64, alpha: f64, cfg: &NoiseConfig, rng: &mut R) -> f64 {
    temp + cfg.temp_sd(alpha) * gaussian(rng)
}

/// `rain + bias·alpha·rain + N(0, param·alpha)`, floored at zero.
pub fn rain_noise<R: Rng + ?Sized>(rain: f64, alpha: f64, cfg: &NoiseConfig, rng: &mut R) -> f64 {
    let bias = cfg.rain_bias_scale * alpha * rain;
    (rain + bias + cfg.rain_sd(alpha) * gaussian(rng)).max(0.0)
}

/// `moisture + clip(N(0, param·alpha), 0, 1)`, result clipped to `[0, 1]`.
///
/// Clipping the noise term at zero makes this channel a one-sided, upward
/// perturbation.
pub fn moisture_noise<R: Rng + ?Sized>(moisture: f64, alpha: f64, cfg: &NoiseConfig, rng: &mut R) -> f64 {
    let term = (cfg.moisture_sd(alpha) * gaussian(rng)).clamp(0.0, 1.0);
    (moisture + term).clamp(0.0, 1.0)
}

/// Applies the active channels to a copy of `observation`.
pub fn inject(observation: &[f64], alpha: f64, cfg: &NoiseConfig, rngs: &mut ChannelRngs) -> Result<Vec<f64>> {
    if observation.len() != OBS_DIM {
        return Err(Error::Dimension {
            expected: OBS_DIM,
            got: observation.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let mut out = observation.to_vec();
    let active = cfg.active_channels(alpha);
    if active.temperature {
        out[idx::TEMPERATURE] = temp_noise(out[idx::TEMPERATURE], alpha, cfg, &mut rngs.temperature);
    }
    if active.rainfall {
        out[idx::RAINFALL] = rain_noise(out[idx::RAINFALL], alpha, cfg, &mut rngs.rainfall);
    }
    if active.moisture {
        for i in idx::SOIL_MOISTURE..idx::SOIL_MOISTURE + cfg.moisture_layers {
            out[i] = moisture_noise(out[i], alpha, cfg, &mut rngs.moisture);
        }
    }
    Ok(out)
}

/// Fixed evaluation-time perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Temperature,
    Rainfall,
    Moisture,
    Solar,
    Combined,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Clean,
        Condition::Temperature,
        Condition::Rainfall,
        Condition::Moisture,
        Condition::Solar,
        Condition::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Temperature => "temperature",
            Condition::Rainfall => "rainfall",
            Condition::Moisture => "moisture",
            Condition::Solar => "solar",
            Condition::Combined => "combined",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Clean => "Clean observations",
            Condition::Temperature => "Temperature ±2°C",
            Condition::Rainfall => "Rainfall ±10%",
            Condition::Moisture => "Soil moisture ±0.02",
            Condition::Solar => "Solar radiation ±10%",
            Condition::Combined => "Combined perturbations",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s || (s == "temp" && *c == Condition::Temperature))
            .or(match s.as_str() {
                "rain" => Some(Condition::Rainfall),
                "soil_moisture" => Some(Condition::Moisture),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown evaluation condition {s:?}")))
    }
}

/// Magnitudes of the evaluation perturbations.
pub const EVAL_TEMP_SD: f64 = 2.0;
pub const EVAL_RAIN_FRACTION: f64 = 0.10;
pub const EVAL_MOISTURE_DELTA: f64 = 0.02;
pub const EVAL_SOLAR_FRACTION: f64 = 0.10;

/// Applies an evaluation condition to a copy of `observation`.
/// `moisture_layers` bounds the soil-moisture slots touched.
pub fn eval_perturbation<R: Rng + ?Sized>(
    observation: &[f64],
    condition: Condition,
    moisture_layers: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if observation.len() != OBS_DIM {
        return Err(Error::Dimension {
            expected: OBS_DIM,
            got: observation.len(),
        });
    }
    let mut out = observation.to_vec();
    let temp = |out: &mut Vec<f64>, rng: &mut R| {
        out[idx::TEMPERATURE] += EVAL_TEMP_SD * gaussian(rng);
    };
    let rain = |out: &mut Vec<f64>, rng: &mut R| {
        out[idx::RAINFALL] *= 1.0 + rng.random_range(-EVAL_RAIN_FRACTION..=EVAL_RAIN_FRACTION);
    };
    match condition {
        Condition::Clean => {}
        Condition::Temperature => temp(&mut out, rng),
        Condition::Rainfall => rain(&mut out, rng),
        Condition::Moisture => {
            for v in out
                .iter_mut()
                .skip(idx::SOIL_MOISTURE)
                .take(moisture_layers.min(MAX_SOIL_LAYERS))
            {
                *v = (*v + rng.random_range(-EVAL_MOISTURE_DELTA..=EVAL_MOISTURE_DELTA)).clamp(0.0, 1.0);
            }
        }
        Condition::Solar => {
            out[idx::SOLAR_RADIATION] *= 1.0 + rng.random_range(-EVAL_SOLAR_FRACTION..=EVAL_SOLAR_FRACTION);
        }
        Condition::Combined => {
            temp(&mut out, rng);
            rain(&mut out, rng);
        }
    }
    Ok(out)
}
