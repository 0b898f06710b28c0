//! Deterministic decision rules shared by validation and evaluation.

use serde::{Deserialize, Serialize};

use crate::env::{idx, ActionChoice};
use crate::error::{Error, Result};

/// Maps an observation to an action.
pub trait Policy {
    fn decide(&mut self, observation: &[f64]) -> Result<ActionChoice>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn decide(&mut self, observation: &[f64]) -> Result<ActionChoice> {
        (**self).decide(observation)
    }
}

/// Calendar-based management: a fixed irrigation every `interval_days` days
/// and fixed nitrogen doses on given days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedManagement {
    pub irrigation_mm: f64,
    pub interval_days: u32,
    pub nitrogen_kg_ha: f64,
    pub nitrogen_days: Vec<u32>,
}

impl Default for FixedManagement {
    fn default() -> Self {
        Self {
            irrigation_mm: 12.0,
            interval_days: 4,
            nitrogen_kg_ha: 80.0,
            nitrogen_days: vec![10, 45],
        }
    }
}

impl FixedManagement {
    pub fn validate(&self) -> Result<()> {
        if self.interval_days == 0 {
            return Err(Error::Config("fixed management interval must be positive".into()));
        }
        ActionChoice::from_amounts(self.irrigation_mm, self.nitrogen_kg_ha)?;
        Ok(())
    }

    pub fn action_on(&self, day: u32) -> Result<ActionChoice> {
        let irrigation = if day % self.interval_days == self.interval_days - 1 {
            self.irrigation_mm
        } else {
            0.0
        };
        let nitrogen = if self.nitrogen_days.contains(&day) {
            self.nitrogen_kg_ha
        } else {
            0.0
        };
        ActionChoice::from_amounts(irrigation, nitrogen)
    }
}

impl Policy for FixedManagement {
    fn decide(&mut self, observation: &[f64]) -> Result<ActionChoice> {
        let day = observation
            .get(idx::DAY)
            .copied()
            .ok_or_else(|| Error::contract("empty observation"))?;
        self.action_on(day.max(0.0).round() as u32)
    }
}
