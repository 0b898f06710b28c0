//! Built-in surrogate maize environment.
//!
//! A daily-step process model standing in for a full crop simulator: a
//! seeded weather generator, a layered soil water and mineral-nitrogen
//! bucket model, and radiation-driven biomass growth limited by water,
//! nitrogen and temperature. Episodes last `season_length` days; the final
//! step is the harvest and pays out the grain revenue.
//!
//! # Observation index map
//!
//! | index | feature                      | unit        |
//! |-------|------------------------------|-------------|
//! | 0     | day of season                | day         |
//! | 1     | air temperature              | °C          |
//! | 2     | rainfall                     | mm/day      |
//! | 3     | solar radiation              | MJ/m²/day   |
//! | 4–6   | soil moisture, layers 1–3    | fraction    |
//! | 7–9   | soil mineral N, layers 1–3   | kg/ha       |
//! | 10    | biomass                      | kg/ha       |
//! | 11    | leaf area index              | -           |
//! | 12    | cumulative grain yield       | kg/ha       |
//! | 13    | cumulative irrigation        | mm          |
//! | 14    | cumulative nitrogen applied  | kg/ha       |
//! | 15    | thermal time (base 8 °C)     | °C·day      |
//! | 16    | last water stress factor     | 0–1         |
//! | 17    | last nitrogen stress factor  | 0–1         |
//! | 18    | cumulative rainfall          | mm          |
//! | 19    | cumulative nitrate leached   | kg/ha       |
//! | 20    | cumulative evapotranspiration| mm          |
//! | 21    | days since last irrigation   | day         |
//! | 22    | days since last fertilizer   | day         |
//! | 23    | last irrigation amount       | mm          |
//! | 24    | last nitrogen amount         | kg/ha       |
//!
//! Soil layers beyond the configured count read as 0.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const OBS_DIM: usize = 25;
pub const MAX_SOIL_LAYERS: usize = 3;
pub const N_ACTIONS: usize = 25;
pub const IRRIGATION_LEVELS: [f64; 5] = [0.0, 6.0, 12.0, 18.0, 24.0];
pub const NITROGEN_LEVELS: [f64; 5] = [0.0, 40.0, 80.0, 120.0, 160.0];

/// Positions of the named features in the observation vector.
pub mod idx {
    pub const DAY: usize = 0;
    pub const TEMPERATURE: usize = 1;
    pub const RAINFALL: usize = 2;
    pub const SOLAR_RADIATION: usize = 3;
    pub const SOIL_MOISTURE: usize = 4;
    pub const SOIL_NITROGEN: usize = 7;
    pub const BIOMASS: usize = 10;
    pub const LEAF_AREA_INDEX: usize = 11;
    pub const CUMULATIVE_YIELD: usize = 12;
    pub const CUMULATIVE_IRRIGATION: usize = 13;
    pub const CUMULATIVE_NITROGEN: usize = 14;
    pub const THERMAL_TIME: usize = 15;
    pub const WATER_STRESS: usize = 16;
    pub const NITROGEN_STRESS: usize = 17;
    pub const CUMULATIVE_RAINFALL: usize = 18;
    pub const CUMULATIVE_LEACHING: usize = 19;
    pub const CUMULATIVE_ET: usize = 20;
    pub const DAYS_SINCE_IRRIGATION: usize = 21;
    pub const DAYS_SINCE_FERTILIZATION: usize = 22;
    pub const LAST_IRRIGATION: usize = 23;
    pub const LAST_NITROGEN: usize = 24;
}

pub const FEATURE_NAMES: [&str; OBS_DIM] = [
    "day",
    "temperature",
    "rainfall",
    "solar_radiation",
    "soil_moisture_1",
    "soil_moisture_2",
    "soil_moisture_3",
    "soil_nitrogen_1",
    "soil_nitrogen_2",
    "soil_nitrogen_3",
    "biomass",
    "leaf_area_index",
    "cumulative_yield",
    "cumulative_irrigation",
    "cumulative_nitrogen",
    "thermal_time",
    "water_stress",
    "nitrogen_stress",
    "cumulative_rainfall",
    "cumulative_leaching",
    "cumulative_et",
    "days_since_irrigation",
    "days_since_fertilization",
    "last_irrigation",
    "last_nitrogen",
];

/// Nominal magnitude of each feature, used to bring policy inputs to O(1).
pub const FEATURE_SCALES: [f64; OBS_DIM] = [
    200.0, 30.0, 10.0, 20.0, 0.4, 0.4, 0.4, 100.0, 100.0, 100.0, 20000.0, 5.0, 10000.0, 500.0, 200.0, 3000.0, 1.0, 1.0,
    800.0, 50.0, 800.0, 30.0, 100.0, 24.0, 160.0,
];

/// Daily observation of the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropState {
    pub day: u32,
    pub temperature: f64,
    pub rainfall: f64,
    pub solar_radiation: f64,
    pub soil_moisture: [f64; MAX_SOIL_LAYERS],
    pub soil_nitrogen: [f64; MAX_SOIL_LAYERS],
    pub biomass: f64,
    pub leaf_area_index: f64,
    pub cumulative_yield: f64,
    pub cumulative_irrigation: f64,
    pub cumulative_nitrogen: f64,
    pub thermal_time: f64,
    pub water_stress: f64,
    pub nitrogen_stress: f64,
    pub cumulative_rainfall: f64,
    pub cumulative_leaching: f64,
    pub cumulative_et: f64,
    pub days_since_irrigation: f64,
    pub days_since_fertilization: f64,
    pub last_irrigation: f64,
    pub last_nitrogen: f64,
}

impl CropState {
    /// Flattens the state according to the index map.
    pub fn observe(&self) -> [f64; OBS_DIM] {
        let mut v = [0.0; OBS_DIM];
        v[idx::DAY] = f64::from(self.day);
        v[idx::TEMPERATURE] = self.temperature;
        v[idx::RAINFALL] = self.rainfall;
        v[idx::SOLAR_RADIATION] = self.solar_radiation;
        v[idx::SOIL_MOISTURE..idx::SOIL_MOISTURE + MAX_SOIL_LAYERS].copy_from_slice(&self.soil_moisture);
        v[idx::SOIL_NITROGEN..idx::SOIL_NITROGEN + MAX_SOIL_LAYERS].copy_from_slice(&self.soil_nitrogen);
        v[idx::BIOMASS] = self.biomass;
        v[idx::LEAF_AREA_INDEX] = self.leaf_area_index;
        v[idx::CUMULATIVE_YIELD] = self.cumulative_yield;
        v[idx::CUMULATIVE_IRRIGATION] = self.cumulative_irrigation;
        v[idx::CUMULATIVE_NITROGEN] = self.cumulative_nitrogen;
        v[idx::THERMAL_TIME] = self.thermal_time;
        v[idx::WATER_STRESS] = self.water_stress;
        v[idx::NITROGEN_STRESS] = self.nitrogen_stress;
        v[idx::CUMULATIVE_RAINFALL] = self.cumulative_rainfall;
        v[idx::CUMULATIVE_LEACHING] = self.cumulative_leaching;
        v[idx::CUMULATIVE_ET] = self.cumulative_et;
        v[idx::DAYS_SINCE_IRRIGATION] = self.days_since_irrigation;
        v[idx::DAYS_SINCE_FERTILIZATION] = self.days_since_fertilization;
        v[idx::LAST_IRRIGATION] = self.last_irrigation;
        v[idx::LAST_NITROGEN] = self.last_nitrogen;
        v
    }

    /// Inverse of [`CropState::observe`]. The day must be a non-negative
    /// integer and soil moisture must lie in `[0, 1]`.
    pub fn from_observation(v: &[f64]) -> Result<Self> {
        if v.len() != OBS_DIM {
            return Err(Error::Schema(format!(
                "observation must have {OBS_DIM} values, got {}",
                v.len()
            )));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("observation index {i} is not finite")));
        }
        let day = v[idx::DAY];
        if day < 0.0 || day.fract() != 0.0 || day > f64::from(u32::MAX) {
            return Err(Error::Schema(format!("day must be a non-negative integer, got {day}")));
        }
        let layer = |start: usize| -> [f64; MAX_SOIL_LAYERS] {
            let mut a = [0.0; MAX_SOIL_LAYERS];
            a.copy_from_slice(&v[start..start + MAX_SOIL_LAYERS]);
            a
        };
        let moisture = layer(idx::SOIL_MOISTURE);
        if moisture.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Schema(format!("soil moisture out of [0,1]: {moisture:?}")));
        }
        Ok(Self {
            day: day as u32,
            temperature: v[idx::TEMPERATURE],
            rainfall: v[idx::RAINFALL],
            solar_radiation: v[idx::SOLAR_RADIATION],
            soil_moisture: moisture,
            soil_nitrogen: layer(idx::SOIL_NITROGEN),
            biomass: v[idx::BIOMASS],
            leaf_area_index: v[idx::LEAF_AREA_INDEX],
            cumulative_yield: v[idx::CUMULATIVE_YIELD],
            cumulative_irrigation: v[idx::CUMULATIVE_IRRIGATION],
            cumulative_nitrogen: v[idx::CUMULATIVE_NITROGEN],
            thermal_time: v[idx::THERMAL_TIME],
            water_stress: v[idx::WATER_STRESS],
            nitrogen_stress: v[idx::NITROGEN_STRESS],
            cumulative_rainfall: v[idx::CUMULATIVE_RAINFALL],
            cumulative_leaching: v[idx::CUMULATIVE_LEACHING],
            cumulative_et: v[idx::CUMULATIVE_ET],
            days_since_irrigation: v[idx::DAYS_SINCE_IRRIGATION],
            days_since_fertilization: v[idx::DAYS_SINCE_FERTILIZATION],
            last_irrigation: v[idx::LAST_IRRIGATION],
            last_nitrogen: v[idx::LAST_NITROGEN],
        })
    }
}

/// One of the 25 irrigation × nitrogen combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionChoice(u8);

impl ActionChoice {
    pub fn from_index(index: usize) -> Result<Self> {
        if index >= N_ACTIONS {
            return Err(Error::contract(format!(
                "action index {index} out of range 0..{N_ACTIONS}"
            )));
        }
        Ok(Self(index as u8))
    }

    pub fn from_levels(irrigation_level: usize, nitrogen_level: usize) -> Result<Self> {
        if irrigation_level >= 5 || nitrogen_level >= 5 {
            return Err(Error::contract(format!(
                "levels ({irrigation_level}, {nitrogen_level}) out of range 0..5"
            )));
        }
        Ok(Self((5 * irrigation_level + nitrogen_level) as u8))
    }

    /// Looks up the action applying exactly these amounts.
    pub fn from_amounts(irrigation_mm: f64, nitrogen_kg_ha: f64) -> Result<Self> {
        let i = IRRIGATION_LEVELS.iter().position(|&x| x == irrigation_mm);
        let n = NITROGEN_LEVELS.iter().position(|&x| x == nitrogen_kg_ha);
        match (i, n) {
            (Some(i), Some(n)) => Self::from_levels(i, n),
            _ => Err(Error::Config(format!(
                "({irrigation_mm} mm, {nitrogen_kg_ha} kg/ha) is not an available action"
            ))),
        }
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..N_ACTIONS as u8).map(Self)
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn irrigation_level(self) -> usize {
        self.index() / 5
    }

    pub fn nitrogen_level(self) -> usize {
        self.index() % 5
    }

    pub fn irrigation_mm(self) -> f64 {
        IRRIGATION_LEVELS[self.irrigation_level()]
    }

    pub fn nitrogen_kg_ha(self) -> f64 {
        NITROGEN_LEVELS[self.nitrogen_level()]
    }
}

/// Economic weights of the daily reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// $/kg grain
    pub w1: f64,
    /// $/kg nitrogen applied
    pub w2: f64,
    /// $/mm irrigation applied
    pub w3: f64,
    /// $/kg nitrate leached (framework default, overridable)
    pub w4: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 0.158,
            w2: 0.79,
            w3: 1.1,
            w4: 0.011,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3), ("w4", self.w4)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("reward weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Daily reward: input costs and leaching penalty every day, plus the grain
/// revenue on the harvest day.
pub fn reward_components(
    yield_kg_ha: f64,
    nitrogen_kg_ha: f64,
    irrigation_mm: f64,
    leached_kg_ha: f64,
    is_harvest: bool,
    weights: &RewardWeights,
) -> Result<f64> {
    for (name, v) in [
        ("yield", yield_kg_ha),
        ("nitrogen", nitrogen_kg_ha),
        ("irrigation", irrigation_mm),
        ("leaching", leached_kg_ha),
    ] {
        if !(v >= 0.0) {
            return Err(Error::contract(format!("{name} must be >= 0, got {v}")));
        }
    }
    let costs = -weights.w2 * nitrogen_kg_ha - weights.w3 * irrigation_mm - weights.w4 * leached_kg_ha;
    Ok(if is_harvest {
        weights.w1 * yield_kg_ha + costs
    } else {
        costs
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Florida,
    Zaragoza,
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioName::Florida => "florida",
            ScenarioName::Zaragoza => "zaragoza",
        })
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "florida" => Ok(Self::Florida),
            "zaragoza" => Ok(Self::Zaragoza),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoilParams {
    pub layers: usize,
    pub layer_depth_mm: f64,
    pub field_capacity: f64,
    pub wilting_point: f64,
    pub saturation: f64,
    /// Fraction of water above field capacity draining per day.
    pub drainage_coefficient: f64,
    pub initial_moisture: f64,
    /// Initial mineral N per layer, kg/ha.
    pub initial_nitrogen: f64,
    /// Net mineralization into the top layer, kg/ha/day.
    pub mineralization: f64,
    /// Fraction of mineral N dissolved in mobile water.
    pub soluble_fraction: f64,
}

impl Default for SoilParams {
    fn default() -> Self {
        Self {
            layers: 1,
            layer_depth_mm: 600.0,
            field_capacity: 0.30,
            wilting_point: 0.12,
            saturation: 0.45,
            drainage_coefficient: 0.5,
            initial_moisture: 0.26,
            initial_nitrogen: 40.0,
            mineralization: 0.4,
            soluble_fraction: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropParams {
    /// Radiation use efficiency, g biomass per MJ PAR.
    pub radiation_use_efficiency: f64,
    pub extinction_coefficient: f64,
    pub initial_biomass: f64,
    pub lai_max: f64,
    /// Biomass at which LAI reaches 63% of its maximum.
    pub lai_biomass_scale: f64,
    pub grain_start_day: u32,
    pub grain_fraction: f64,
    pub senescence_start_day: u32,
    /// kg N taken up per kg biomass produced.
    pub nitrogen_concentration: f64,
    /// Fraction of the soil mineral N pool the roots can take up per day.
    pub nitrogen_uptake_rate: f64,
    /// Fraction of field-capacity-relative available water below which growth is water limited.
    pub water_stress_onset: f64,
    /// Pan-to-crop evapotranspiration coefficient, mm/day per °C above 5 °C at 20 MJ/m².
    pub et_coefficient: f64,
    pub base_temperature: f64,
    pub optimum_low: f64,
    pub optimum_high: f64,
    pub max_temperature: f64,
    /// Canopy warming (°C) of a fully water-stressed crop relative to the air.
    pub canopy_warming: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            radiation_use_efficiency: 2.4,
            extinction_coefficient: 0.65,
            initial_biomass: 30.0,
            lai_max: 6.0,
            lai_biomass_scale: 6000.0,
            grain_start_day: 90,
            grain_fraction: 0.6,
            senescence_start_day: 150,
            nitrogen_concentration: 0.0075,
            nitrogen_uptake_rate: 0.08,
            water_stress_onset: 0.55,
            et_coefficient: 0.24,
            base_temperature: 8.0,
            optimum_low: 18.0,
            optimum_high: 30.0,
            max_temperature: 42.0,
            canopy_warming: 6.0,
        }
    }
}

/// Weather statistics and soil/crop parameters of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub season_length: u32,
    pub temp_mean: f64,
    /// Hard bounds of daily temperature, °C.
    pub temp_range: [f64; 2],
    pub temp_seasonal_amplitude: f64,
    pub temp_autocorrelation: f64,
    pub temp_anomaly_sd: f64,
    pub rain_mean: f64,
    pub wet_day_probability: f64,
    pub solar_mean: f64,
    pub solar_wet_reduction: f64,
    pub solar_noise_sd: f64,
    pub soil: SoilParams,
    pub crop: CropParams,
}

impl ScenarioConfig {
    pub fn florida() -> Self {
        Self {
            name: ScenarioName::Florida,
            season_length: 200,
            temp_mean: 26.5,
            temp_range: [14.0, 38.0],
            temp_seasonal_amplitude: 3.0,
            temp_autocorrelation: 0.7,
            temp_anomaly_sd: 2.0,
            rain_mean: 4.2,
            wet_day_probability: 0.45,
            solar_mean: 20.0,
            solar_wet_reduction: 5.0,
            solar_noise_sd: 1.5,
            soil: SoilParams::default(),
            crop: CropParams::default(),
        }
    }

    pub fn zaragoza() -> Self {
        Self {
            name: ScenarioName::Zaragoza,
            season_length: 200,
            temp_mean: 24.0,
            temp_range: [15.0, 35.0],
            temp_seasonal_amplitude: 5.0,
            temp_autocorrelation: 0.75,
            temp_anomaly_sd: 3.5,
            rain_mean: 2.1,
            wet_day_probability: 0.12,
            solar_mean: 23.0,
            solar_wet_reduction: 6.0,
            solar_noise_sd: 2.0,
            soil: SoilParams::default(),
            crop: CropParams::default(),
        }
    }

    pub fn by_name(name: ScenarioName) -> Self {
        match name {
            ScenarioName::Florida => Self::florida(),
            ScenarioName::Zaragoza => Self::zaragoza(),
        }
    }

    /// Variance of daily rainfall implied by the wet-day × exponential model.
    pub fn rain_variance(&self) -> f64 {
        let p = self.wet_day_probability;
        let depth = self.rain_mean / p;
        p * 2.0 * depth * depth - self.rain_mean * self.rain_mean
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.soil;
        let bad = |m: String| Err(Error::Config(m));
        if self.season_length == 0 {
            return bad("season_length must be positive".into());
        }
        if !(self.temp_range[0] < self.temp_range[1]) {
            return bad(format!("temp_range must be increasing: {:?}", self.temp_range));
        }
        if !(self.wet_day_probability > 0.0 && self.wet_day_probability <= 1.0) {
            return bad("wet_day_probability must be in (0, 1]".into());
        }
        if self.rain_mean < 0.0 || self.temp_anomaly_sd < 0.0 || self.solar_noise_sd < 0.0 {
            return bad("weather spreads and means must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.temp_autocorrelation) {
            return bad("temp_autocorrelation must be in [0, 1)".into());
        }
        if s.layers == 0 || s.layers > MAX_SOIL_LAYERS {
            return bad(format!("soil layers must be in 1..={MAX_SOIL_LAYERS}"));
        }
        if !(0.0 <= s.wilting_point
            && s.wilting_point < s.field_capacity
            && s.field_capacity < s.saturation
            && s.saturation <= 1.0)
        {
            return bad("need 0 <= wilting_point < field_capacity < saturation <= 1".into());
        }
        if !(s.wilting_point..=s.saturation).contains(&s.initial_moisture) {
            return bad("initial_moisture must lie between wilting point and saturation".into());
        }
        if !(0.0..=1.0).contains(&s.drainage_coefficient) || !(0.0..=1.0).contains(&s.soluble_fraction) {
            return bad("drainage_coefficient and soluble_fraction must be in [0, 1]".into());
        }
        if s.layer_depth_mm <= 0.0 || s.initial_nitrogen < 0.0 || s.mineralization < 0.0 {
            return bad("soil depth must be positive and nitrogen terms >= 0".into());
        }
        let c = &self.crop;
        if !(c.base_temperature < c.optimum_low
            && c.optimum_low <= c.optimum_high
            && c.optimum_high < c.max_temperature)
        {
            return bad("crop temperature cardinal points must be increasing".into());
        }
        if c.grain_start_day >= self.season_length {
            return bad("grain_start_day must fall inside the season".into());
        }
        Ok(())
    }
}

/// One day of weather.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDay {
    pub temperature: f64,
    pub rainfall: f64,
    pub solar_radiation: f64,
}

/// Generates `season_length + 1` days of weather (the last day belongs to
/// the terminal state).
pub fn generate_weather<R: Rng + ?Sized>(scenario: &ScenarioConfig, rng: &mut R) -> Vec<WeatherDay> {
    let n = scenario.season_length as usize + 1;
    let len = f64::from(scenario.season_length);
    let phi = scenario.temp_autocorrelation;
    let innovation_sd = scenario.temp_anomaly_sd * (1.0 - phi * phi).sqrt();
    let depth =
        Exp::new(scenario.wet_day_probability / scenario.rain_mean.max(1e-12)).expect("positive exponential rate");
    let mut anomaly = scenario.temp_anomaly_sd * rng.sample::<f64, _>(StandardNormal);
    let mut days = Vec::with_capacity(n);
    for d in 0..n {
        if d > 0 {
            anomaly = phi * anomaly + innovation_sd * rng.sample::<f64, _>(StandardNormal);
        }
        // zero-mean seasonal bump peaking mid-season
        let seasonal = scenario.temp_seasonal_amplitude
            * ((std::f64::consts::PI * d as f64 / len).sin() - 2.0 / std::f64::consts::PI);
        let temperature =
            (scenario.temp_mean + seasonal + anomaly).clamp(scenario.temp_range[0], scenario.temp_range[1]);
        let wet = rng.random::<f64>() < scenario.wet_day_probability;
        let amount: f64 = depth.sample(rng);
        let rainfall = if wet && scenario.rain_mean > 0.0 { amount } else { 0.0 };
        let wet_shift = if wet { 1.0 } else { 0.0 } - scenario.wet_day_probability;
        let solar_radiation = (scenario.solar_mean - scenario.solar_wet_reduction * wet_shift
            + scenario.solar_noise_sd * rng.sample::<f64, _>(StandardNormal))
        .clamp(2.0, 35.0);
        days.push(WeatherDay {
            temperature,
            rainfall,
            solar_radiation,
        });
    }
    days
}

/// Auxiliary outputs of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Cumulative grain yield after the step; paid out on the harvest step.
    pub yield_kg_ha: f64,
    pub nitrate_leached: f64,
    pub nitrogen_applied: f64,
    pub irrigation_applied: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: CropState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Soil water accounting of one step, mm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WaterBalance {
    pub storage_before: f64,
    pub storage_after: f64,
    pub rainfall: f64,
    pub irrigation: f64,
    pub evapotranspiration: f64,
    pub drainage: f64,
}

impl WaterBalance {
    /// `Δstorage − (rain + irrigation − ET − drainage)`; zero up to rounding.
    pub fn residual(&self) -> f64 {
        (self.storage_after - self.storage_before)
            - (self.rainfall + self.irrigation - self.evapotranspiration - self.drainage)
    }
}

fn temperature_factor(t: f64, c: &CropParams) -> f64 {
    if t <= c.base_temperature || t >= c.max_temperature {
        0.0
    } else if t < c.optimum_low {
        (t - c.base_temperature) / (c.optimum_low - c.base_temperature)
    } else if t <= c.optimum_high {
        1.0
    } else {
        (c.max_temperature - t) / (c.max_temperature - c.optimum_high)
    }
}

/// Initial state of an episode given the day-0 weather.
pub fn initial_state(scenario: &ScenarioConfig, weather: WeatherDay) -> CropState {
    let s = &scenario.soil;
    let c = &scenario.crop;
    let mut moisture = [0.0; MAX_SOIL_LAYERS];
    let mut nitrogen = [0.0; MAX_SOIL_LAYERS];
    for l in 0..s.layers {
        moisture[l] = s.initial_moisture;
        nitrogen[l] = s.initial_nitrogen;
    }
    CropState {
        day: 0,
        temperature: weather.temperature,
        rainfall: weather.rainfall,
        solar_radiation: weather.solar_radiation,
        soil_moisture: moisture,
        soil_nitrogen: nitrogen,
        biomass: c.initial_biomass,
        leaf_area_index: c.lai_max * (1.0 - (-c.initial_biomass / c.lai_biomass_scale).exp()),
        cumulative_yield: 0.0,
        cumulative_irrigation: 0.0,
        cumulative_nitrogen: 0.0,
        thermal_time: 0.0,
        water_stress: 1.0,
        nitrogen_stress: 1.0,
        cumulative_rainfall: 0.0,
        cumulative_leaching: 0.0,
        cumulative_et: 0.0,
        days_since_irrigation: 0.0,
        days_since_fertilization: 0.0,
        last_irrigation: 0.0,
        last_nitrogen: 0.0,
    }
}

/// Advances the field by one day. The weather used is the one recorded in
/// `state`; `next_weather` becomes the weather of the returned state.
pub fn advance(
    scenario: &ScenarioConfig,
    state: &CropState,
    next_weather: WeatherDay,
    action: ActionChoice,
    weights: &RewardWeights,
) -> Result<(StepOutcome, WaterBalance)> {
    if state.day >= scenario.season_length {
        return Err(Error::contract(format!(
            "cannot step from day {} of a {}-day season",
            state.day, scenario.season_length
        )));
    }
    let s = &scenario.soil;
    let c = &scenario.crop;
    let layers = s.layers;
    let depth = s.layer_depth_mm;
    let irrigation = action.irrigation_mm();
    let fertilizer = action.nitrogen_kg_ha();
    let rain = state.rainfall.max(0.0);

    let mut water = [0.0; MAX_SOIL_LAYERS];
    let mut nitrogen = state.soil_nitrogen;
    for l in 0..layers {
        water[l] = state.soil_moisture[l] * depth;
    }
    let storage_before: f64 = water[..layers].iter().sum();
    nitrogen[0] += fertilizer;

    // Percolation: saturation excess and a fraction of the water above field
    // capacity move one layer down; mobile nitrate travels with it.
    let mut incoming_water = rain + irrigation;
    let mut incoming_n = 0.0;
    for l in 0..layers {
        water[l] += incoming_water;
        nitrogen[l] += incoming_n;
        let excess = (water[l] - s.saturation * depth).max(0.0);
        water[l] -= excess;
        let drain = s.drainage_coefficient * (water[l] - s.field_capacity * depth).max(0.0);
        water[l] -= drain;
        let out = excess + drain;
        let moved_n = if out > 0.0 {
            s.soluble_fraction * nitrogen[l] * out / (water[l] + out)
        } else {
            0.0
        };
        nitrogen[l] -= moved_n;
        incoming_water = out;
        incoming_n = moved_n;
    }
    let drainage = incoming_water;
    let leached = incoming_n;

    // Water stress from the root-zone moisture after infiltration.
    let top = water[0] / depth;
    let available = (s.field_capacity - s.wilting_point) * c.water_stress_onset;
    let water_stress = ((top - s.wilting_point) / available).clamp(0.0, 1.0);

    // Evapotranspiration: temperature- and radiation-driven demand, scaled by
    // canopy cover and limited by soil water; drawn from layers in proportion
    // to the water they hold above wilting point.
    let cover = 1.0 - (-0.6 * state.leaf_area_index).exp();
    let demand = c.et_coefficient
        * (state.temperature - 5.0).max(0.0)
        * (state.solar_radiation / 20.0)
        * (0.25 + 0.85 * cover)
        * water_stress;
    let mut extractable = [0.0; MAX_SOIL_LAYERS];
    for l in 0..layers {
        extractable[l] = (water[l] - s.wilting_point * depth).max(0.0);
    }
    let total_extractable: f64 = extractable[..layers].iter().sum();
    let et = demand.min(total_extractable);
    if total_extractable > 0.0 {
        for l in 0..layers {
            water[l] -= et * extractable[l] / total_extractable;
        }
    }
    let storage_after: f64 = water[..layers].iter().sum();

    // Growth.
    let canopy_temperature = state.temperature + c.canopy_warming * (1.0 - water_stress);
    let temp_factor = temperature_factor(canopy_temperature, c);
    let development = if state.day < c.senescence_start_day {
        1.0
    } else {
        let span = f64::from(scenario.season_length - c.senescence_start_day).max(1.0);
        1.0 - 0.7 * f64::from(state.day - c.senescence_start_day) / span
    };
    let interception = 1.0 - (-c.extinction_coefficient * state.leaf_area_index).exp();
    // g/m² -> kg/ha is a factor of 10; PAR is half of global radiation.
    let potential = c.radiation_use_efficiency * 0.5 * state.solar_radiation * interception * 10.0 * development;
    let soil_n: f64 = nitrogen[..layers].iter().sum();
    let n_demand = potential * c.nitrogen_concentration;
    let n_supply = c.nitrogen_uptake_rate * soil_n;
    let nitrogen_stress = if n_demand > 0.0 {
        (n_supply / n_demand).min(1.0)
    } else {
        1.0
    };
    let growth = potential * water_stress.min(nitrogen_stress) * temp_factor;
    let uptake = (growth * c.nitrogen_concentration).min(soil_n);
    if soil_n > 0.0 {
        for l in 0..layers {
            nitrogen[l] -= uptake * nitrogen[l] / soil_n;
            nitrogen[l] = nitrogen[l].max(0.0);
        }
    }
    nitrogen[0] += s.mineralization;

    let biomass = state.biomass + growth;
    let grain = if state.day >= c.grain_start_day {
        c.grain_fraction * growth
    } else {
        0.0
    };

    let day = state.day + 1;
    let done = day >= scenario.season_length;
    let mut moisture = [0.0; MAX_SOIL_LAYERS];
    for l in 0..layers {
        moisture[l] = (water[l] / depth).clamp(0.0, 1.0);
    }
    let next_state = CropState {
        day,
        temperature: next_weather.temperature,
        rainfall: next_weather.rainfall,
        solar_radiation: next_weather.solar_radiation,
        soil_moisture: moisture,
        soil_nitrogen: nitrogen,
        biomass,
        leaf_area_index: c.lai_max * (1.0 - (-biomass / c.lai_biomass_scale).exp()),
        cumulative_yield: state.cumulative_yield + grain,
        cumulative_irrigation: state.cumulative_irrigation + irrigation,
        cumulative_nitrogen: state.cumulative_nitrogen + fertilizer,
        thermal_time: state.thermal_time + (state.temperature - c.base_temperature).max(0.0),
        water_stress,
        nitrogen_stress,
        cumulative_rainfall: state.cumulative_rainfall + rain,
        cumulative_leaching: state.cumulative_leaching + leached,
        cumulative_et: state.cumulative_et + et,
        days_since_irrigation: if irrigation > 0.0 {
            0.0
        } else {
            state.days_since_irrigation + 1.0
        },
        days_since_fertilization: if fertilizer > 0.0 {
            0.0
        } else {
            state.days_since_fertilization + 1.0
        },
        last_irrigation: irrigation,
        last_nitrogen: fertilizer,
    };
    let info = StepInfo {
        yield_kg_ha: next_state.cumulative_yield,
        nitrate_leached: leached,
        nitrogen_applied: fertilizer,
        irrigation_applied: irrigation,
    };
    let reward = reward_components(
        info.yield_kg_ha,
        info.nitrogen_applied,
        info.irrigation_applied,
        info.nitrate_leached,
        done,
        weights,
    )?;
    let balance = WaterBalance {
        storage_before,
        storage_after,
        rainfall: rain,
        irrigation,
        evapotranspiration: et,
        drainage,
    };
    Ok((
        StepOutcome {
            next_state,
            reward,
            done,
            info,
        },
        balance,
    ))
}

/// Reset/step interface shared by the surrogate and remote simulators.
pub trait Environment: Send {
    fn reset(&mut self, seed: u64) -> Result<CropState>;

    fn step(&mut self, action: ActionChoice) -> Result<StepOutcome>;

    /// Replaces today's true temperature and rainfall before the step is
    /// taken. Returns `Ok(false)` when the backend cannot do this.
    fn perturb_weather(&mut self, _temperature: f64, _rainfall: f64) -> Result<bool> {
        Ok(false)
    }
}

/// Builds fresh environment instances, one per worker.
pub type EnvFactory = dyn Fn() -> Result<Box<dyn Environment>> + Send + Sync;

/// The built-in surrogate simulator.
#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    scenario: ScenarioConfig,
    weights: RewardWeights,
    weather: Vec<WeatherDay>,
    state: Option<CropState>,
    done: bool,
    last_balance: Option<WaterBalance>,
}

impl SurrogateEnv {
    pub fn new(scenario: ScenarioConfig, weights: RewardWeights) -> Result<Self> {
        scenario.validate()?;
        weights.validate()?;
        Ok(Self {
            scenario,
            weights,
            weather: Vec::new(),
            state: None,
            done: false,
            last_balance: None,
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    pub fn state(&self) -> Option<&CropState> {
        self.state.as_ref()
    }

    pub fn weather(&self) -> &[WeatherDay] {
        &self.weather
    }

    pub fn last_water_balance(&self) -> Option<WaterBalance> {
        self.last_balance
    }
}

impl Environment for SurrogateEnv {
    fn reset(&mut self, seed: u64) -> Result<CropState> {
        let mut rng = rng::seeded(rng::derive_seed(seed, rng::WEATHER, 0));
        self.weather = generate_weather(&self.scenario, &mut rng);
        let state = initial_state(&self.scenario, self.weather[0]);
        self.state = Some(state.clone());
        self.done = false;
        self.last_balance = None;
        Ok(state)
    }

    fn step(&mut self, action: ActionChoice) -> Result<StepOutcome> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::contract("step called before reset"))?;
        if self.done {
            return Err(Error::contract("step called after the episode finished"));
        }
        let next_weather = self.weather[state.day as usize + 1];
        let (outcome, balance) = advance(&self.scenario, state, next_weather, action, &self.weights)?;
        self.done = outcome.done;
        self.state = Some(outcome.next_state.clone());
        self.last_balance = Some(balance);
        Ok(outcome)
    }

    fn perturb_weather(&mut self, temperature: f64, rainfall: f64) -> Result<bool> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::contract("perturb_weather called before reset"))?;
        state.temperature = temperature;
        state.rainfall = rainfall.max(0.0);
        Ok(true)
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub observation: [f64; OBS_DIM],
    pub action: ActionChoice,
    pub reward: f64,
    pub info: StepInfo,
}

/// Writes an episode trace as CSV: the observation the action was taken
/// on, the action, and the reward terms of that day.
pub fn write_trace_csv<W: Write>(writer: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.extend([
        "action",
        "irrigation_mm",
        "nitrogen_kg_ha",
        "nitrate_leached",
        "yield_kg_ha",
        "reward",
    ]);
    w.write_record(&header)?;
    for row in rows {
        let mut rec: Vec<String> = row.observation.iter().map(|v| v.to_string()).collect();
        rec.push(row.action.index().to_string());
        rec.push(row.info.irrigation_applied.to_string());
        rec.push(row.info.nitrogen_applied.to_string());
        rec.push(row.info.nitrate_leached.to_string());
        rec.push(row.info.yield_kg_ha.to_string());
        rec.push(row.reward.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one episode, choosing actions with `choose(observation)`.
pub fn run_episode<E, F>(env: &mut E, seed: u64, mut choose: F) -> Result<Vec<TraceRow>>
where
    E: Environment + ?Sized,
    F: FnMut(&[f64; OBS_DIM]) -> ActionChoice,
{
    let mut state = env.reset(seed)?;
    let mut rows = Vec::new();
    loop {
        let observation = state.observe();
        let action = choose(&observation);
        let out = env.step(action)?;
        rows.push(TraceRow {
            observation,
            action,
            reward: out.reward,
            info: out.info,
        });
        state = out.next_state;
        if out.done {
            return Ok(rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn florida() -> SurrogateEnv {
        SurrogateEnv::new(ScenarioConfig::florida(), RewardWeights::default()).unwrap()
    }

    #[test]
    fn action_index_bijection() {
        for a in ActionChoice::all() {
            let back = ActionChoice::from_levels(a.irrigation_level(), a.nitrogen_level()).unwrap();
            assert_eq!(a, back);
            assert_eq!(
                ActionChoice::from_amounts(a.irrigation_mm(), a.nitrogen_kg_ha()).unwrap(),
                a
            );
        }
        let a = ActionChoice::from_index(13).unwrap();
        assert_eq!((a.irrigation_mm(), a.nitrogen_kg_ha()), (12.0, 120.0));
        assert!(ActionChoice::from_index(25).is_err());
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(reward_components(0.0, 0.0, 0.0, 0.0, true, &w).unwrap(), 0.0);
        assert_eq!(reward_components(0.0, 0.0, 0.0, 0.0, false, &w).unwrap(), 0.0);
        let r = reward_components(10000.0, 0.0, 0.0, 0.0, true, &w).unwrap();
        assert!((r - 1580.0).abs() < 1e-9);
        let r = reward_components(0.0, 160.0, 24.0, 0.0, false, &w).unwrap();
        assert!((r - (-152.8)).abs() < 1e-9);
        let d = 0.37;
        let w4 = RewardWeights { w4: d, ..w };
        let r = reward_components(0.0, 40.0, 6.0, 2.0, false, &w4).unwrap();
        assert!((r - (-0.79 * 40.0 - 1.1 * 6.0 - 2.0 * d)).abs() < 1e-12);
        assert!(reward_components(-1.0, 0.0, 0.0, 0.0, true, &w).is_err());
    }

    #[test]
    fn reset_is_deterministic() {
        let mut env = florida();
        let a = env.reset(42).unwrap();
        let b = env.reset(42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cumulative_irrigation, 0.0);
        assert_eq!(a.day, 0);
        assert_ne!(env.reset(43).unwrap(), a);
    }

    #[test]
    fn zaragoza_temperatures_in_range() {
        let mut env = SurrogateEnv::new(ScenarioConfig::zaragoza(), RewardWeights::default()).unwrap();
        let s = env.reset(123).unwrap();
        assert!((15.0..=35.0).contains(&s.temperature));
        assert!(env.weather().iter().all(|w| (15.0..=35.0).contains(&w.temperature)));
    }

    #[test]
    fn weather_statistics_match_scenarios() {
        for (scenario, temp_mean, rain_mean) in [
            (ScenarioConfig::florida(), 26.5, 4.2),
            (ScenarioConfig::zaragoza(), 24.0, 2.1),
        ] {
            let mut rng = rng::seeded(9);
            let mut t = 0.0;
            let mut r = 0.0;
            let mut n = 0.0;
            for _ in 0..400 {
                for w in generate_weather(&scenario, &mut rng) {
                    t += w.temperature;
                    r += w.rainfall;
                    n += 1.0;
                }
            }
            assert!((t / n - temp_mean).abs() < 0.3, "{:?} temp {}", scenario.name, t / n);
            assert!((r / n - rain_mean).abs() < 0.15, "{:?} rain {}", scenario.name, r / n);
        }
    }

    #[test]
    fn observation_index_map() {
        let mut env = florida();
        let s = env.reset(1).unwrap();
        let v = s.observe();
        assert_eq!(v.len(), OBS_DIM);
        assert_eq!(v[idx::DAY], 0.0);
        assert_eq!(CropState::from_observation(&v).unwrap(), s);
        let out = env.step(ActionChoice::from_index(0).unwrap()).unwrap();
        assert_eq!(out.next_state.observe()[idx::DAY], 1.0);
        let mut names = FEATURE_NAMES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), OBS_DIM);
    }

    #[test]
    fn idle_day_without_leaching_pays_nothing() {
        let mut env = florida();
        env.reset(5).unwrap();
        let out = env.step(ActionChoice::from_index(0).unwrap()).unwrap();
        assert!(!out.done);
        if out.info.nitrate_leached == 0.0 {
            assert_eq!(out.reward, 0.0);
        }
        // a dry start with no inputs never drains
        env.perturb_weather(25.0, 0.0).unwrap();
        let out = env.step(ActionChoice::from_index(0).unwrap()).unwrap();
        assert_eq!(out.info.nitrate_leached, 0.0);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn max_inputs_cost() {
        let mut env = florida();
        env.reset(5).unwrap();
        env.perturb_weather(25.0, 0.0).unwrap();
        let out = env.step(ActionChoice::from_index(24).unwrap()).unwrap();
        let expected = -0.79 * 160.0 - 1.1 * 24.0 - 0.011 * out.info.nitrate_leached;
        assert!((out.reward - expected).abs() < 1e-12);
    }

    #[test]
    fn step_after_done_is_rejected() {
        let mut env = florida();
        let rows = run_episode(&mut env, 3, |_| ActionChoice::from_index(0).unwrap()).unwrap();
        assert_eq!(rows.len(), 200);
        assert!(matches!(
            env.step(ActionChoice::from_index(0).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reward_recomputes_from_info_and_telescopes() {
        let mut env = florida();
        let w = *env.weights();
        let mut k = 0usize;
        let rows = run_episode(&mut env, 17, |_| {
            k += 7;
            ActionChoice::from_index(k % N_ACTIONS).unwrap()
        })
        .unwrap();
        let (mut total, mut n, mut water, mut leach) = (0.0, 0.0, 0.0, 0.0);
        for (i, row) in rows.iter().enumerate() {
            let harvest = i + 1 == rows.len();
            let r = reward_components(
                row.info.yield_kg_ha,
                row.info.nitrogen_applied,
                row.info.irrigation_applied,
                row.info.nitrate_leached,
                harvest,
                &w,
            )
            .unwrap();
            assert_eq!(r.to_bits(), row.reward.to_bits());
            total += row.reward;
            n += row.info.nitrogen_applied;
            water += row.info.irrigation_applied;
            leach += row.info.nitrate_leached;
        }
        let y = rows.last().unwrap().info.yield_kg_ha;
        let closed = w.w1 * y - w.w2 * n - w.w3 * water - w.w4 * leach;
        assert!((total - closed).abs() < 1e-9, "{total} vs {closed}");
    }

    #[test]
    fn water_mass_balance_holds_every_day() {
        for layers in 1..=3 {
            let mut scenario = ScenarioConfig::florida();
            scenario.soil.layers = layers;
            let mut env = SurrogateEnv::new(scenario, RewardWeights::default()).unwrap();
            let mut state = env.reset(77).unwrap();
            let mut k = 0;
            loop {
                k += 3;
                let out = env.step(ActionChoice::from_index(k % 25).unwrap()).unwrap();
                let b = env.last_water_balance().unwrap();
                assert!(b.residual().abs() < 1e-9, "layers {layers}: {}", b.residual());
                for l in 0..MAX_SOIL_LAYERS {
                    let m = out.next_state.soil_moisture[l];
                    assert!((0.0..=1.0).contains(&m));
                    assert!(out.next_state.soil_nitrogen[l] >= 0.0);
                }
                assert!(out.next_state.cumulative_irrigation >= state.cumulative_irrigation);
                assert!(out.next_state.cumulative_nitrogen >= state.cumulative_nitrogen);
                assert!(out.next_state.cumulative_yield >= state.cumulative_yield);
                assert!(out.next_state.cumulative_leaching >= state.cumulative_leaching);
                assert_eq!(out.next_state.day, state.day + 1);
                state = out.next_state;
                if out.done {
                    break;
                }
            }
        }
    }

    #[test]
    fn irrigation_keeps_soil_wetter_without_rain() {
        let mut scenario = ScenarioConfig::florida();
        scenario.rain_mean = 0.0;
        let mut wet = SurrogateEnv::new(scenario.clone(), RewardWeights::default()).unwrap();
        let mut dry = SurrogateEnv::new(scenario, RewardWeights::default()).unwrap();
        wet.reset(8).unwrap();
        dry.reset(8).unwrap();
        let irrigate = ActionChoice::from_amounts(24.0, 0.0).unwrap();
        let idle = ActionChoice::from_index(0).unwrap();
        for _ in 0..200 {
            let a = wet.step(irrigate).unwrap();
            let b = dry.step(idle).unwrap();
            assert!(a.next_state.soil_moisture[0] >= b.next_state.soil_moisture[0]);
        }
    }

    #[test]
    fn trajectories_are_seed_deterministic() {
        let actions: Vec<usize> = (0..200).map(|i| (i * 11 + 3) % 25).collect();
        let run = || {
            let mut env = florida();
            let mut it = actions.iter();
            run_episode(&mut env, 99, |_| ActionChoice::from_index(*it.next().unwrap()).unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut env = florida();
        let rows = run_episode(&mut env, 1, |_| ActionChoice::from_index(6).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 201);
        assert!(lines[0].starts_with("day,temperature,rainfall"));
        assert_eq!(lines[1].split(',').count(), OBS_DIM + 6);
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut s = ScenarioConfig::florida();
        s.soil.field_capacity = 0.05;
        assert!(s.validate().is_err());
        let mut s = ScenarioConfig::florida();
        s.soil.layers = 4;
        assert!(s.validate().is_err());
        let w = RewardWeights {
            w4: -1.0,
            ..RewardWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
