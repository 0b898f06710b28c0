//! Random network distillation and the semantic coverage grid.
//!
//! A frozen, randomly initialized target network embeds each state; a
//! predictor network is trained to match it. The squared prediction error is
//! the intrinsic reward, large for states unlike those seen before. Inputs to
//! both networks pass through a running normalizer.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{CropState, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub lr: f64,
    /// States seen before the normalizer starts standardizing.
    pub normalizer_warmup: u64,
    /// Doubles the intrinsic reward of states whose coverage bin is empty.
    pub adaptive_bonus: bool,
    /// Score novelty on the true state rather than the noisy observation.
    pub intrinsic_on_clean: bool,
    pub decay_start: f64,
    pub decay_end: f64,
}

impl Default for RndConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            embedding: 64,
            lr: 3e-4,
            normalizer_warmup: 1000,
            adaptive_bonus: true,
            intrinsic_on_clean: true,
            decay_start: 0.3,
            decay_end: 0.7,
        }
    }
}

impl RndConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embedding == 0 {
            return Err(Error::Config("RND layer sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("RND lr must be > 0".into()));
        }
        if !(0.0 <= self.decay_start && self.decay_start <= self.decay_end && self.decay_end <= 1.0) {
            return Err(Error::Config(
                "RND decay window must satisfy 0 <= start <= end <= 1".into(),
            ));
        }
        Ok(())
    }

    /// Intrinsic coefficient at progress `p`: one, then a linear decay to
    /// zero across the decay window. A window of `[0, 0]` gives zero
    /// throughout.
    pub fn lambda_int(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::contract(format!("progress must be in [0, 1], got {p}")));
        }
        Ok(if p < self.decay_start {
            1.0
        } else if p < self.decay_end {
            (self.decay_end - p) / (self.decay_end - self.decay_start)
        } else {
            0.0
        })
    }
}

/// Intrinsic coefficient with the default decay window.
pub fn lambda_int(p: f64) -> Result<f64> {
    RndConfig::default().lambda_int(p)
}

/// Running per-dimension mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationNormalizer {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
    warmup: u64,
}

/// Standardized inputs are clipped to this magnitude.
pub const NORMALIZED_CLIP: f64 = 5.0;

impl ObservationNormalizer {
    pub fn new(dim: usize, warmup: u64) -> Self {
        Self {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
            warmup,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect()
    }

    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *m2 += delta * (v - *m);
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        if self.count < self.warmup {
            return Ok(x.to_vec());
        }
        let var = self.variance();
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&var)
            .map(|((&v, &m), &s2)| ((v - m) / (s2 + 1e-8).sqrt()).clamp(-NORMALIZED_CLIP, NORMALIZED_CLIP))
            .collect())
    }
}

/// Divides intrinsic rewards by their running standard deviation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RewardScaler {
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }

    /// Records `r` and returns it scaled by the updated deviation.
    pub fn scale(&mut self, r: f64) -> f64 {
        self.count += 1;
        let delta = r - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (r - self.mean);
        r / (self.std() + 1e-8)
    }
}

#[derive(Debug, Clone)]
pub struct RndNets {
    target: Mlp,
    predictor: Mlp,
    adam: AdamState,
    lr: f64,
    target_hash: [u8; 32],
}

pub fn params_hash(net: &Mlp) -> [u8; 32] {
    let mut h = Sha256::new();
    for &p in net.params() {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

impl RndNets {
    pub fn new<R: Rng + ?Sized>(cfg: &RndConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let sizes = [OBS_DIM, cfg.hidden, cfg.hidden, cfg.embedding];
        let target = Mlp::he_uniform(&sizes, Activation::Identity, rng)?;
        let predictor = Mlp::he_uniform(&sizes, Activation::Identity, rng)?;
        Ok(Self::from_nets(target, predictor, cfg.lr))
    }

    pub fn from_nets(target: Mlp, predictor: Mlp, lr: f64) -> Self {
        let adam = AdamState::for_net(&predictor);
        let target_hash = params_hash(&target);
        Self {
            target,
            predictor,
            adam,
            lr,
            target_hash,
        }
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut Mlp {
        &mut self.predictor
    }

    pub fn target_hash(&self) -> [u8; 32] {
        self.target_hash
    }

    /// Confirms the target parameters still match the hash taken at
    /// construction.
    pub fn verify_target(&self) -> Result<()> {
        if params_hash(&self.target) == self.target_hash {
            Ok(())
        } else {
            Err(Error::contract("RND target network parameters changed"))
        }
    }

    /// Squared L2 distance between target and predictor embeddings.
    pub fn intrinsic_reward(&self, state: &[f64]) -> Result<f64> {
        let t = self.target.forward(state)?;
        let p = self.predictor.forward(state)?;
        Ok(t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Mean over batch and embedding dimensions of the squared error.
    pub fn loss(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty RND batch"));
        }
        let k = self.target.output_size() as f64;
        let mut total = 0.0;
        for s in batch {
            total += self.intrinsic_reward(s)?;
        }
        Ok(total / (batch.len() as f64 * k))
    }

    /// Gradient of [`RndNets::loss`] with respect to the predictor parameters.
    pub fn loss_gradient(&self, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty RND batch"));
        }
        let k = self.target.output_size() as f64;
        let scale = 1.0 / (batch.len() as f64 * k);
        let mut grads = vec![0.0; self.predictor.n_params()];
        let mut total = 0.0;
        for s in batch {
            let t = self.target.forward(s)?;
            let trace = self.predictor.forward_trace(s)?;
            let diff: Vec<f64> = trace.output().iter().zip(&t).map(|(p, t)| p - t).collect();
            total += diff.iter().map(|d| d * d).sum::<f64>();
            let g: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
            self.predictor.backward_trace(&trace, &g, &mut grads)?;
        }
        Ok((total * scale, grads))
    }

    /// One Adam step on the predictor. Returns the loss before the step.
    pub fn train_predictor(&mut self, batch: &[Vec<f64>]) -> Result<f64> {
        let (loss, grads) = self.loss_gradient(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("RND predictor loss {loss}")));
        }
        self.adam.step(self.predictor.params_mut(), &grads, self.lr)?;
        Ok(loss)
    }
}

/// One axis of the coverage grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub width: f64,
}

impl Axis {
    pub fn new(min: f64, max: f64, width: f64) -> Self {
        Self { min, max, width }
    }

    pub fn bins(&self) -> usize {
        let n = ((self.max - self.min) / self.width - 1e-9).ceil();
        (n as usize).max(1)
    }

    /// Bin index, clamped to the edge bins.
    pub fn bin(&self, v: f64) -> usize {
        let raw = ((v - self.min) / self.width).floor();
        if !(raw >= 0.0) {
            0
        } else {
            (raw as usize).min(self.bins() - 1)
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.width > 0.0 && self.max > self.min) {
            return Err(Error::Config(format!(
                "coverage axis {name} needs max > min and width > 0"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageBounds {
    pub day: Axis,
    pub cumulative_yield: Axis,
    pub soil_moisture: Axis,
    pub cumulative_irrigation: Axis,
}

impl Default for CoverageBounds {
    fn default() -> Self {
        Self {
            day: Axis::new(0.0, 200.0, 100.0),
            cumulative_yield: Axis::new(0.0, 20000.0, 100.0),
            soil_moisture: Axis::new(0.0, 1.0, 0.1),
            cumulative_irrigation: Axis::new(0.0, 2100.0, 100.0),
        }
    }
}

impl CoverageBounds {
    pub fn validate(&self) -> Result<()> {
        self.day.validate("day")?;
        self.cumulative_yield.validate("cumulative_yield")?;
        self.soil_moisture.validate("soil_moisture")?;
        self.cumulative_irrigation.validate("cumulative_irrigation")
    }

    pub fn total_bins(&self) -> usize {
        self.day.bins() * self.cumulative_yield.bins() * self.soil_moisture.bins() * self.cumulative_irrigation.bins()
    }
}

pub type Bin = [u32; 4];

/// Occupancy of (day, cumulative yield, surface soil moisture, cumulative
/// irrigation) bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    bounds: CoverageBounds,
    occupied: BTreeSet<Bin>,
}

impl Default for CoverageGrid {
    fn default() -> Self {
        Self::new(CoverageBounds::default()).expect("default bounds are valid")
    }
}

impl CoverageGrid {
    pub fn new(bounds: CoverageBounds) -> Result<Self> {
        bounds.validate()?;
        Ok(Self {
            bounds,
            occupied: BTreeSet::new(),
        })
    }

    pub fn bounds(&self) -> &CoverageBounds {
        &self.bounds
    }

    pub fn bin_of(&self, state: &CropState) -> Bin {
        let b = &self.bounds;
        [
            b.day.bin(state.day as f64) as u32,
            b.cumulative_yield.bin(state.cumulative_yield) as u32,
            b.soil_moisture.bin(state.soil_moisture[0]) as u32,
            b.cumulative_irrigation.bin(state.cumulative_irrigation) as u32,
        ]
    }

    pub fn is_occupied(&self, state: &CropState) -> bool {
        self.occupied.contains(&self.bin_of(state))
    }

    /// Marks the state's bin. Returns true when the bin was new.
    pub fn record_visit(&mut self, state: &CropState) -> bool {
        let bin = self.bin_of(state);
        self.occupied.insert(bin)
    }

    pub fn occupied(&self) -> &BTreeSet<Bin> {
        &self.occupied
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn total_bins(&self) -> usize {
        self.bounds.total_bins()
    }

    pub fn coverage(&self) -> f64 {
        self.occupied.len() as f64 / self.total_bins() as f64
    }

    /// Union of grids sharing the same bounds.
    pub fn union<'a>(grids: impl IntoIterator<Item = &'a CoverageGrid>) -> Result<CoverageGrid> {
        let mut iter = grids.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::contract("union of zero coverage grids"))?;
        let mut out = first.clone();
        for g in iter {
            if g.bounds != out.bounds {
                return Err(Error::contract("coverage grids have different bounds"));
            }
            out.occupied.extend(g.occupied.iter().copied());
        }
        Ok(out)
    }

    /// Multiplier on the intrinsic reward for a state about to be visited.
    pub fn bonus_factor(&self, state: &CropState, enabled: bool) -> f64 {
        if enabled && !self.is_occupied(state) {
            2.0
        } else {
            1.0
        }
    }
}
