//! Evaluation: clean and perturbed rollouts, sensitivity and robustness
//! tables, and coverage comparison.
//!
//! Perturbations touch only what the policy observes. Every condition replays
//! the same weather for a given seed and episode, so score differences come
//! from decisions alone.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvFactory, Environment};
use crate::error::{Error, Result};
use crate::noise::{eval_perturbation, Condition};
use crate::policy::Policy;
use crate::ppo::PolicyNet;
use crate::rnd::CoverageGrid;
use crate::rng::{self, derive_seed};
use crate::ActionChoice;

/// Outcome of one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub score: f64,
    pub yield_kg_ha: f64,
    pub irrigation_mm: f64,
    pub nitrogen_kg_ha: f64,
    pub leached_kg_ha: f64,
    pub steps: u32,
}

impl EpisodeSummary {
    /// Yield per mm of irrigation; absent without irrigation.
    pub fn wue(&self) -> Option<f64> {
        (self.irrigation_mm > 0.0).then(|| self.yield_kg_ha / self.irrigation_mm)
    }

    /// Yield per kg of applied nitrogen; absent without nitrogen.
    pub fn nue(&self) -> Option<f64> {
        (self.nitrogen_kg_ha > 0.0).then(|| self.yield_kg_ha / self.nitrogen_kg_ha)
    }

    pub fn add_step(&mut self, reward: f64, info: &crate::env::StepInfo) {
        self.score += reward;
        self.yield_kg_ha = info.yield_kg_ha;
        self.irrigation_mm += info.irrigation_applied;
        self.nitrogen_kg_ha += info.nitrogen_applied;
        self.leached_kg_ha += info.nitrate_leached;
        self.steps += 1;
    }
}

/// Argmax policy over a trained network.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub net: PolicyNet,
}

impl GreedyPolicy {
    pub fn new(net: PolicyNet) -> Self {
        Self { net }
    }
}

impl Policy for GreedyPolicy {
    fn decide(&mut self, observation: &[f64]) -> Result<ActionChoice> {
        self.net.act_greedy(observation)?.choice()
    }
}

/// Runs one episode with the condition applied to each observation.
pub fn rollout<P: Policy + ?Sized>(
    env: &mut dyn Environment,
    policy: &mut P,
    env_seed: u64,
    condition: Condition,
    moisture_layers: usize,
    perturb_seed: u64,
) -> Result<EpisodeSummary> {
    let mut rng = rng::seeded(perturb_seed);
    let mut state = env.reset(env_seed)?;
    let mut summary = EpisodeSummary::default();
    loop {
        let obs = eval_perturbation(&state.observe(), condition, moisture_layers, &mut rng)?;
        let action = policy.decide(&obs)?;
        let out = env.step(action)?;
        summary.add_step(out.reward, &out.info);
        state = out.next_state;
        if out.done {
            return Ok(summary);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub episodes_per_seed: u32,
    pub moisture_layers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![42, 123, 456, 789, 1024],
            episodes_per_seed: 20,
            moisture_layers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.episodes_per_seed == 0 {
            return Err(Error::Config(
                "evaluation needs at least one seed and one episode".into(),
            ));
        }
        Ok(())
    }

    /// Environment seed of episode `k` under evaluation seed `seed`.
    pub fn episode_seed(seed: u64, k: u32) -> u64 {
        derive_seed(seed, rng::EVALUATION, k as u64)
    }

    fn perturb_seed(seed: u64, k: u32) -> u64 {
        derive_seed(seed, rng::EVAL_PERTURB, k as u64)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregate over seeds × episodes for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub condition: Condition,
    pub samples: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub yield_mean: f64,
    pub yield_std: f64,
    pub irrigation_mean: f64,
    pub nitrogen_mean: f64,
    pub leached_mean: f64,
    /// Mean over episodes that irrigated.
    pub wue_mean: Option<f64>,
    /// Mean over episodes that applied nitrogen.
    pub nue_mean: Option<f64>,
    /// Mean score for each evaluation seed, in seed order.
    pub per_seed_score: Vec<f64>,
    pub per_seed_yield: Vec<f64>,
}

impl MetricsRecord {
    pub fn from_episodes(condition: Condition, per_seed: &[Vec<EpisodeSummary>]) -> Self {
        let all: Vec<&EpisodeSummary> = per_seed.iter().flatten().collect();
        let scores: Vec<f64> = all.iter().map(|e| e.score).collect();
        let yields: Vec<f64> = all.iter().map(|e| e.yield_kg_ha).collect();
        let (score_mean, score_std) = mean_std(&scores);
        let (yield_mean, yield_std) = mean_std(&yields);
        let avg = |f: fn(&EpisodeSummary) -> f64| mean_std(&all.iter().map(|e| f(e)).collect::<Vec<_>>()).0;
        Self {
            condition,
            samples: all.len(),
            score_mean,
            score_std,
            yield_mean,
            yield_std,
            irrigation_mean: avg(|e| e.irrigation_mm),
            nitrogen_mean: avg(|e| e.nitrogen_kg_ha),
            leached_mean: avg(|e| e.leached_kg_ha),
            wue_mean: mean_opt(all.iter().map(|e| e.wue())),
            nue_mean: mean_opt(all.iter().map(|e| e.nue())),
            per_seed_score: per_seed
                .iter()
                .map(|eps| mean_std(&eps.iter().map(|e| e.score).collect::<Vec<_>>()).0)
                .collect(),
            per_seed_yield: per_seed
                .iter()
                .map(|eps| mean_std(&eps.iter().map(|e| e.yield_kg_ha).collect::<Vec<_>>()).0)
                .collect(),
        }
    }

    /// Standard deviation of the per-seed mean scores.
    pub fn per_seed_score_std(&self) -> f64 {
        mean_std(&self.per_seed_score).1
    }
}

/// Evaluates a policy under one condition. Seeds run in parallel.
pub fn evaluate<P>(
    policy: &P,
    env_factory: &EnvFactory,
    cfg: &EvalConfig,
    condition: Condition,
) -> Result<MetricsRecord>
where
    P: Policy + Clone + Send + Sync,
{
    cfg.validate()?;
    let per_seed: Vec<Vec<EpisodeSummary>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut env = env_factory()?;
            let mut p = policy.clone();
            (0..cfg.episodes_per_seed)
                .map(|k| {
                    rollout(
                        env.as_mut(),
                        &mut p,
                        EvalConfig::episode_seed(seed, k),
                        condition,
                        cfg.moisture_layers,
                        EvalConfig::perturb_seed(seed, k),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRecord::from_episodes(condition, &per_seed))
}

/// Perturbed score as a fraction of the same policy's clean score.
pub fn retention(perturbed: &MetricsRecord, clean: &MetricsRecord) -> f64 {
    perturbed.score_mean / clean.score_mean
}

/// `(clean - perturbed) / clean` in percent.
pub fn reduction_pct(clean: f64, perturbed: f64) -> f64 {
    100.0 * (clean - perturbed) / clean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub condition: Condition,
    pub metrics: MetricsRecord,
    pub score_reduction_pct: f64,
    pub yield_reduction_pct: f64,
    /// Std over seeds of the per-seed score reduction.
    pub score_reduction_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub clean: MetricsRecord,
    pub rows: Vec<SensitivityRow>,
}

pub const SENSITIVITY_CONDITIONS: [Condition; 4] = [
    Condition::Temperature,
    Condition::Rainfall,
    Condition::Moisture,
    Condition::Solar,
];

/// Each single-channel perturbation against the clean reference.
pub fn sensitivity_analysis<P>(policy: &P, env_factory: &EnvFactory, cfg: &EvalConfig) -> Result<SensitivityTable>
where
    P: Policy + Clone + Send + Sync,
{
    let clean = evaluate(policy, env_factory, cfg, Condition::Clean)?;
    let rows = SENSITIVITY_CONDITIONS
        .par_iter()
        .map(|&c| {
            let m = evaluate(policy, env_factory, cfg, c)?;
            let per_seed: Vec<f64> = clean
                .per_seed_score
                .iter()
                .zip(&m.per_seed_score)
                .map(|(c, p)| reduction_pct(*c, *p))
                .collect();
            Ok(SensitivityRow {
                condition: c,
                score_reduction_pct: reduction_pct(clean.score_mean, m.score_mean),
                yield_reduction_pct: reduction_pct(clean.yield_mean, m.yield_mean),
                score_reduction_std: mean_std(&per_seed).1,
                metrics: m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityTable { clean, rows })
}

impl SensitivityTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>12} {:>10} {:>12} {:>10} {:>8}",
            "Noise type", "Score", "Score red.", "Yield", "Yield red.", "Samples"
        );
        let _ = writeln!(
            s,
            "{:<24} {:>12.2} {:>10} {:>12.1} {:>10} {:>8}",
            Condition::Clean.label(),
            self.clean.score_mean,
            "-",
            self.clean.yield_mean,
            "-",
            self.clean.samples
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>12.2} {:>9.1}% {:>12.1} {:>9.1}% {:>8}",
                r.condition.label(),
                r.metrics.score_mean,
                r.score_reduction_pct,
                r.metrics.yield_mean,
                r.yield_reduction_pct,
                r.metrics.samples
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "condition",
            "score_mean",
            "score_std",
            "score_reduction_pct",
            "score_reduction_std",
            "yield_mean",
            "yield_reduction_pct",
            "samples",
        ])?;
        out.write_record([
            "clean".to_string(),
            self.clean.score_mean.to_string(),
            self.clean.score_std.to_string(),
            "0.0".into(),
            "0.0".into(),
            self.clean.yield_mean.to_string(),
            "0.0".into(),
            self.clean.samples.to_string(),
        ])?;
        for r in &self.rows {
            out.write_record([
                r.condition.name().to_string(),
                r.metrics.score_mean.to_string(),
                r.metrics.score_std.to_string(),
                format!("{:.1}", r.score_reduction_pct),
                format!("{:.1}", r.score_reduction_std),
                r.metrics.yield_mean.to_string(),
                format!("{:.1}", r.yield_reduction_pct),
                r.metrics.samples.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub condition: Condition,
    pub a: MetricsRecord,
    pub b: MetricsRecord,
    pub a_retention: f64,
    pub b_retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub a_name: String,
    pub b_name: String,
    pub rows: Vec<RobustnessRow>,
}

pub const ROBUSTNESS_CONDITIONS: [Condition; 4] = [
    Condition::Clean,
    Condition::Temperature,
    Condition::Rainfall,
    Condition::Combined,
];

/// Side-by-side scores and retention of two policies.
pub fn robustness_report<A, B>(
    a: (&str, &A),
    b: (&str, &B),
    env_factory: &EnvFactory,
    cfg: &EvalConfig,
    conditions: &[Condition],
) -> Result<RobustnessTable>
where
    A: Policy + Clone + Send + Sync,
    B: Policy + Clone + Send + Sync,
{
    let a_clean = evaluate(a.1, env_factory, cfg, Condition::Clean)?;
    let b_clean = evaluate(b.1, env_factory, cfg, Condition::Clean)?;
    let rows = conditions
        .iter()
        .map(|&c| {
            let (ma, mb) = if c == Condition::Clean {
                (a_clean.clone(), b_clean.clone())
            } else {
                (evaluate(a.1, env_factory, cfg, c)?, evaluate(b.1, env_factory, cfg, c)?)
            };
            Ok(RobustnessRow {
                condition: c,
                a_retention: retention(&ma, &a_clean),
                b_retention: retention(&mb, &b_clean),
                a: ma,
                b: mb,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessTable {
        a_name: a.0.to_string(),
        b_name: b.0.to_string(),
        rows,
    })
}

impl RobustnessTable {
    pub fn row(&self, condition: Condition) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>22} {:>10} {:>22} {:>10}",
            "Condition",
            format!("{} score", self.a_name),
            "Retention",
            format!("{} score", self.b_name),
            "Retention"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>12.2} ± {:>7.2} {:>9.1}% {:>12.2} ± {:>7.2} {:>9.1}%",
                r.condition.label(),
                r.a.score_mean,
                r.a.per_seed_score_std(),
                100.0 * r.a_retention,
                r.b.score_mean,
                r.b.per_seed_score_std(),
                100.0 * r.b_retention
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "condition",
            "policy",
            "score_mean",
            "score_std",
            "per_seed_std",
            "retention_pct",
            "yield_mean",
            "samples",
        ])?;
        for r in &self.rows {
            for (name, m, ret) in [(&self.a_name, &r.a, r.a_retention), (&self.b_name, &r.b, r.b_retention)] {
                out.write_record([
                    r.condition.name().to_string(),
                    name.clone(),
                    m.score_mean.to_string(),
                    m.score_std.to_string(),
                    m.per_seed_score_std().to_string(),
                    format!("{:.1}", 100.0 * ret),
                    m.yield_mean.to_string(),
                    m.samples.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub configuration: String,
    pub union_coverage: f64,
    pub union_occupied: usize,
    pub total_bins: usize,
    pub per_seed: Vec<f64>,
}

/// Union coverage across seeds for each named configuration.
pub fn coverage_comparison(configs: &[(String, Vec<&CoverageGrid>)]) -> Result<Vec<CoverageRow>> {
    configs
        .iter()
        .map(|(name, grids)| {
            let union = CoverageGrid::union(grids.iter().copied())?;
            Ok(CoverageRow {
                configuration: name.clone(),
                union_coverage: union.coverage(),
                union_occupied: union.occupied_count(),
                total_bins: union.total_bins(),
                per_seed: grids.iter().map(|g| g.coverage()).collect(),
            })
        })
        .collect()
}

pub fn coverage_text(rows: &[CoverageRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>10} {:>10} {:>10}",
        "Configuration", "Coverage", "Occupied", "Bins"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<20} {:>9.2}% {:>10} {:>10}",
            r.configuration,
            100.0 * r.union_coverage,
            r.union_occupied,
            r.total_bins
        );
    }
    s
}

/// One ensemble member's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRow {
    pub label: String,
    pub metrics: MetricsRecord,
}

/// Each top-k checkpoint scored on its own, their mean, and the final policy.
/// No combined (voting or averaging) policy is formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: Vec<MemberRow>,
    pub member_mean_score: f64,
    pub final_policy: MetricsRecord,
}

pub fn ensemble_report<P>(
    members: &[(String, P)],
    final_policy: &P,
    env_factory: &EnvFactory,
    cfg: &EvalConfig,
    condition: Condition,
) -> Result<EnsembleReport>
where
    P: Policy + Clone + Send + Sync,
{
    if members.is_empty() {
        return Err(Error::contract("ensemble report needs at least one member"));
    }
    let members = members
        .iter()
        .map(|(label, p)| {
            Ok(MemberRow {
                label: label.clone(),
                metrics: evaluate(p, env_factory, cfg, condition)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let member_mean_score = members.iter().map(|m| m.metrics.score_mean).sum::<f64>() / members.len() as f64;
    Ok(EnsembleReport {
        members,
        member_mean_score,
        final_policy: evaluate(final_policy, env_factory, cfg, condition)?,
    })
}

impl EnsembleReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>12} {:>10} {:>12}", "Policy", "Score", "Std", "Yield");
        let row = |s: &mut String, label: &str, m: &MetricsRecord| {
            let _ = writeln!(
                s,
                "{label:<24} {:>12.1} {:>10.1} {:>12.0}",
                m.score_mean, m.score_std, m.yield_mean
            );
        };
        for m in &self.members {
            row(&mut s, &m.label, &m.metrics);
        }
        let _ = writeln!(s, "{:<24} {:>12.1}", "member mean", self.member_mean_score);
        row(&mut s, "final", &self.final_policy);
        s
    }
}
