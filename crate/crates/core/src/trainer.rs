//! Training loop: curriculum schedules, rollout collection, RND and PPO
//! updates, periodic validation, early stopping and the top-k checkpoint
//! ensemble.
//!
//! Each step observes the true state, corrupts the observation according to
//! the current augmentation strength, samples an action, possibly masks it,
//! possibly perturbs the simulated weather, and steps the environment. The
//! rollout buffer spans episode boundaries; whatever remains when training
//! ends is flushed through a final update, so every step is used exactly once.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvFactory, Environment, RewardWeights, ScenarioConfig, FEATURE_SCALES};
use crate::error::{Error, Result};
use crate::eval::{rollout, EpisodeSummary, GreedyPolicy};
use crate::noise::{self, ChannelRngs, Condition, NoiseConfig};
use crate::policy::Policy;
use crate::ppo::{ppo_update, PolicyNet, PolicyOptimizer, PpoConfig, RndMode, RolloutBuffer, Transition, UpdateStats};
use crate::rnd::{CoverageBounds, CoverageGrid, ObservationNormalizer, RewardScaler, RndConfig, RndNets};
use crate::rng::{self, RngStreams, StreamRecord};
use crate::schedule::{self, PgaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub total_episodes: u32,
    pub validation_interval: u32,
    pub validation_episodes: u32,
    pub early_stopping: bool,
    pub patience: u32,
    pub min_delta: f64,
    pub keep_checkpoints: usize,
    pub scenario: ScenarioConfig,
    pub reward: RewardWeights,
    pub ppo: PpoConfig,
    pub pga: PgaConfig,
    pub noise: NoiseConfig,
    pub rnd: RndConfig,
    pub coverage: CoverageBounds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scenario(ScenarioConfig::florida())
    }
}

impl RunConfig {
    pub fn for_scenario(scenario: ScenarioConfig) -> Self {
        let noise = NoiseConfig {
            moisture_layers: scenario.soil.layers,
            ..NoiseConfig::default()
        };
        Self {
            name: scenario.name.to_string(),
            seeds: vec![42, 123, 456, 789, 1024],
            total_episodes: 2000,
            validation_interval: 50,
            validation_episodes: 5,
            early_stopping: true,
            patience: 300,
            min_delta: 20.0,
            keep_checkpoints: 5,
            scenario,
            reward: RewardWeights::default(),
            ppo: PpoConfig::default(),
            pga: PgaConfig::default(),
            noise,
            rnd: RndConfig::default(),
            coverage: CoverageBounds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_episodes == 0 {
            return Err(Error::Config("total_episodes must be positive".into()));
        }
        if self.validation_interval == 0 || self.validation_episodes == 0 {
            return Err(Error::Config(
                "validation interval and episode count must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.keep_checkpoints == 0 {
            return Err(Error::Config("keep_checkpoints must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be >= 0".into()));
        }
        self.scenario.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.pga.validate()?;
        self.noise.validate()?;
        self.rnd.validate()?;
        self.coverage.validate()
    }

    /// SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex(&Sha256::digest(text.as_bytes())))
    }

    pub fn surrogate_factory(&self) -> Box<EnvFactory> {
        let scenario = self.scenario.clone();
        let weights = self.reward;
        Box::new(move || Ok(Box::new(crate::SurrogateEnv::new(scenario.clone(), weights)?) as Box<dyn Environment>))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One metrics row per training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u32,
    pub progress: f64,
    pub phase: u8,
    pub alpha: f64,
    pub lambda_int: f64,
    pub score: f64,
    pub yield_kg_ha: f64,
    pub irrigation_mm: f64,
    pub nitrogen_kg_ha: f64,
    pub leached_kg_ha: f64,
    pub wue: Option<f64>,
    pub nue: Option<f64>,
    pub intrinsic_mean: f64,
    pub coverage: f64,
    pub masked_actions: u32,
    pub updates: u32,
    pub lr: f64,
    pub policy_loss: Option<f64>,
    pub value_loss_ext: Option<f64>,
    pub value_loss_int: Option<f64>,
    pub entropy: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub approx_kl: Option<f64>,
    pub rnd_loss: Option<f64>,
    pub validation_score: Option<f64>,
}

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 25] = [
    "episode",
    "progress",
    "phase",
    "alpha",
    "lambda_int",
    "score",
    "yield_kg_ha",
    "irrigation_mm",
    "nitrogen_kg_ha",
    "leached_kg_ha",
    "wue",
    "nue",
    "intrinsic_mean",
    "coverage",
    "masked_actions",
    "updates",
    "lr",
    "policy_loss",
    "value_loss_ext",
    "value_loss_int",
    "entropy",
    "clip_fraction",
    "approx_kl",
    "rnd_loss",
    "validation_score",
];

pub fn write_metrics_csv<W: Write>(w: W, rows: &[EpisodeMetrics]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<EpisodeMetrics>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(Error::Schema("metrics CSV columns do not match".into()));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// A policy snapshot taken at validation time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub episode: u32,
    pub validation_score: f64,
    pub policy: PolicyNet,
}

/// Keeps the `keep` best checkpoints by validation score, best first. Ties
/// go to the later episode.
pub fn ensemble_select(mut checkpoints: Vec<Checkpoint>, keep: usize) -> Result<Vec<Checkpoint>> {
    if checkpoints.is_empty() {
        return Err(Error::contract("ensemble selection needs at least one checkpoint"));
    }
    checkpoints.sort_by(|a, b| {
        b.validation_score
            .total_cmp(&a.validation_score)
            .then(b.episode.cmp(&a.episode))
    });
    checkpoints.truncate(keep);
    Ok(checkpoints)
}

/// True when no validation result in the trailing `patience` episodes beat
/// the best result before that window by at least `min_delta`. Never true
/// until some result is at least `patience` episodes old.
pub fn early_stop_check(history: &[(u32, f64)], patience: u32, min_delta: f64) -> Result<bool> {
    let &(last, _) = history
        .last()
        .ok_or_else(|| Error::contract("early-stop check on empty history"))?;
    if last < patience {
        return Ok(false);
    }
    let cutoff = last - patience;
    let prior_best = history
        .iter()
        .filter(|(e, _)| *e <= cutoff)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if prior_best == f64::NEG_INFINITY {
        return Ok(false);
    }
    Ok(history
        .iter()
        .filter(|(e, _)| *e > cutoff)
        .all(|(_, s)| *s < prior_best + min_delta))
}

/// Environment seeds used by every validation pass of a run.
pub fn validation_seeds(root: u64, n: u32) -> Vec<u64> {
    (0..n as u64)
        .map(|k| rng::derive_seed(root, rng::VALIDATION, k))
        .collect()
}

/// Mean clean score over the given environment seeds with argmax actions.
pub fn validate<P: Policy + ?Sized>(policy: &mut P, env: &mut dyn Environment, seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::contract("validation needs at least one episode"));
    }
    let mut total = 0.0;
    for &s in seeds {
        total += rollout(env, policy, s, Condition::Clean, 1, 0)?.score;
    }
    Ok(total / seeds.len() as f64)
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    pub config_hash: String,
    pub metrics: Vec<EpisodeMetrics>,
    pub updates: Vec<UpdateStats>,
    /// Best first.
    pub checkpoints: Vec<Checkpoint>,
    pub final_policy: PolicyNet,
    pub coverage: CoverageGrid,
    pub rng_audit: Vec<StreamRecord>,
    pub stopped_early_at: Option<u32>,
    pub total_steps: u64,
    pub steps_in_updates: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run: String,
    pub seed: u64,
    pub config_hash: String,
    pub episodes_run: u32,
    pub stopped_early_at: Option<u32>,
    pub total_steps: u64,
    pub steps_in_updates: u64,
    pub coverage: f64,
    pub final_policy: String,
    pub ensemble: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rank: usize,
    pub episode: u32,
    pub validation_score: f64,
    pub file: String,
}

impl RunArtifacts {
    pub fn episodes_run(&self) -> u32 {
        self.metrics.len() as u32
    }

    /// Mean score of the last `n` training episodes.
    pub fn tail_score(&self, n: usize) -> f64 {
        let k = n.min(self.metrics.len()).max(1);
        self.metrics.iter().rev().take(k).map(|m| m.score).sum::<f64>() / k as f64
    }

    pub fn best(&self) -> &PolicyNet {
        self.checkpoints
            .first()
            .map(|c| &c.policy)
            .unwrap_or(&self.final_policy)
    }

    /// Writes `<dir>/metrics.csv`, `episode_NNNN.ckpt` for each ensemble
    /// member, `final.ckpt`, `coverage.json`, `rng_audit.csv` and
    /// `manifest.json`.
    pub fn write_to(&self, dir: &Path, run: &str) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &self.metrics)?;
        let mut ensemble = Vec::new();
        for (rank, c) in self.checkpoints.iter().enumerate() {
            let file = format!("episode_{:04}.ckpt", c.episode);
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join(&file))?);
            c.policy.save(&mut f)?;
            f.flush()?;
            ensemble.push(ManifestEntry {
                rank: rank + 1,
                episode: c.episode,
                validation_score: c.validation_score,
                file,
            });
        }
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("final.ckpt"))?);
        self.final_policy.save(&mut f)?;
        f.flush()?;
        fs::write(dir.join("coverage.json"), serde_json::to_vec(&self.coverage)?)?;
        let mut audit = csv::Writer::from_path(dir.join("rng_audit.csv"))?;
        for r in &self.rng_audit {
            audit.serialize(r)?;
        }
        audit.flush()?;
        let manifest = Manifest {
            run: run.to_string(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            episodes_run: self.episodes_run(),
            stopped_early_at: self.stopped_early_at,
            total_steps: self.total_steps,
            steps_in_updates: self.steps_in_updates,
            coverage: self.coverage.coverage(),
            final_policy: "final.ckpt".into(),
            ensemble,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Training options that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Print a progress line every this many episodes.
    pub progress_every: Option<u32>,
}

struct Learner {
    net: PolicyNet,
    opt: PolicyOptimizer,
    buffer: RolloutBuffer,
    rnd: Option<(RndNets, ObservationNormalizer)>,
    rnd_inputs: Vec<Vec<f64>>,
    shuffle: rng::StreamRng,
    updates: Vec<UpdateStats>,
    rnd_loss: Option<f64>,
    steps_in_updates: u64,
}

impl Learner {
    fn update(&mut self, cfg: &RunConfig, bootstrap: (f64, f64), progress: f64) -> Result<()> {
        if self.buffer.len() < 2 {
            return Ok(());
        }
        let lambda_int = if cfg.ppo.mode == RndMode::Coupled {
            cfg.rnd.lambda_int(progress)?
        } else {
            0.0
        };
        self.buffer.finalize(bootstrap, &cfg.ppo, lambda_int)?;
        let lr = cfg.ppo.lr_at(progress);
        let stats = ppo_update(
            &mut self.net,
            &mut self.opt,
            &self.buffer,
            &cfg.ppo,
            lr,
            &mut self.shuffle,
        )?;
        if !self.net.all_finite() {
            return Err(Error::NonFinite("policy parameters after update".into()));
        }
        if let Some((nets, _)) = self.rnd.as_mut() {
            let mut total = 0.0;
            let mut n = 0;
            for chunk in self.rnd_inputs.chunks(cfg.ppo.minibatch_size) {
                total += nets.train_predictor(chunk)?;
                n += 1;
            }
            self.rnd_loss = (n > 0).then(|| total / n as f64);
            nets.verify_target()?;
        }
        self.steps_in_updates += self.buffer.len() as u64;
        self.updates.push(stats);
        self.buffer.clear();
        self.rnd_inputs.clear();
        Ok(())
    }
}

/// Observation divided by the fixed per-feature scales; the state
/// representation seen by the RND networks.
fn scaled(obs: &[f64]) -> Vec<f64> {
    obs.iter().zip(FEATURE_SCALES.iter()).map(|(v, s)| v / s).collect()
}

/// Trains one seed.
pub fn train(cfg: &RunConfig, seed: u64, env: &mut dyn Environment, opts: &TrainOptions) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut streams = RngStreams::audited(seed);
    let mut init = streams.stream(rng::POLICY_INIT);
    let net = PolicyNet::new(cfg.ppo.hidden, cfg.ppo.hidden_layers, &mut init)?;
    let rnd = if cfg.ppo.mode.uses_rnd() {
        let mut r = streams.stream(rng::RND_INIT);
        Some((
            RndNets::new(&cfg.rnd, &mut r)?,
            ObservationNormalizer::new(crate::env::OBS_DIM, cfg.rnd.normalizer_warmup),
        ))
    } else {
        None
    };
    let mut learner = Learner {
        opt: PolicyOptimizer::new(&net),
        net,
        buffer: RolloutBuffer::new(cfg.ppo.buffer_size),
        rnd,
        rnd_inputs: Vec::with_capacity(cfg.ppo.buffer_size),
        shuffle: streams.stream(rng::MINIBATCH_SHUFFLE),
        updates: Vec::new(),
        rnd_loss: None,
        steps_in_updates: 0,
    };
    let mut sampling = streams.stream(rng::POLICY_SAMPLING);
    let mut masking = streams.stream(rng::ACTION_MASK);
    let mut grid = CoverageGrid::new(cfg.coverage.clone())?;
    let mut reward_scaler = RewardScaler::default();
    let val_seeds = validation_seeds(seed, cfg.validation_episodes);

    let mut metrics = Vec::with_capacity(cfg.total_episodes as usize);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut history: Vec<(u32, f64)> = Vec::new();
    let mut stopped_early_at = None;
    let mut total_steps = 0u64;
    let mut progress = 0.0;

    for episode in 0..cfg.total_episodes {
        progress = schedule::progress(episode, cfg.total_episodes)?;
        let phase = cfg.pga.phase(progress)?;
        let alpha = cfg.pga.alpha(progress)?;
        let lambda_int = cfg.rnd.lambda_int(progress)?;
        let mut obs_rngs = ChannelRngs::new(&mut streams, rng::OBS_NOISE, episode as u64);
        let mut wtemp = streams.indexed(&format!("{}.temperature", rng::WEATHER_PERTURB), episode as u64);
        let mut wrain = streams.indexed(&format!("{}.rainfall", rng::WEATHER_PERTURB), episode as u64);

        let mut state = env.reset(streams.seed_for("episode", episode as u64))?;
        grid.record_visit(&state);
        let mut summary = EpisodeSummary::default();
        let mut intrinsic_sum = 0.0;
        let mut masked = 0u32;
        let mut observe = |clean: &[f64]| -> Result<Vec<f64>> {
            if alpha > 0.0 {
                noise::inject(clean, alpha, &cfg.noise, &mut obs_rngs)
            } else {
                Ok(clean.to_vec())
            }
        };
        let mut obs = observe(&state.observe())?;
        loop {
            let sample = learner.net.act(&obs, &mut sampling)?;
            let mut executed = sample.choice()?;
            if schedule::action_mask_gate(&cfg.pga, alpha, &mut masking) {
                executed = schedule::masked_replacement(executed, &mut masking);
                masked += 1;
            }
            if cfg.pga.perturb_weather {
                if let Some((t, r)) = schedule::weather_perturbation(&state, alpha, &cfg.noise, &mut wtemp, &mut wrain)
                {
                    env.perturb_weather(t, r)?;
                }
            }
            let out = env.step(executed)?;
            total_steps += 1;
            summary.add_step(out.reward, &out.info);
            let next_clean = out.next_state.observe();
            let next_obs = observe(&next_clean)?;

            let mut reward_int = 0.0;
            if let Some((nets, norm)) = learner.rnd.as_mut() {
                let basis = if cfg.rnd.intrinsic_on_clean || alpha == 0.0 {
                    scaled(&next_clean)
                } else {
                    scaled(&next_obs)
                };
                norm.update(&basis)?;
                let x = norm.normalize(&basis)?;
                let raw = nets.intrinsic_reward(&x)? * grid.bonus_factor(&out.next_state, cfg.rnd.adaptive_bonus);
                reward_int = reward_scaler.scale(raw);
                learner.rnd_inputs.push(x);
            }
            intrinsic_sum += reward_int;
            grid.record_visit(&out.next_state);

            learner.buffer.push(Transition {
                observation: std::mem::replace(&mut obs, next_obs),
                action: sample.action,
                log_prob: sample.log_prob,
                reward_ext: out.reward,
                reward_int,
                v_ext: sample.v_ext,
                v_int: sample.v_int,
                done: out.done,
            })?;
            if learner.buffer.is_full() {
                let bootstrap = if out.done {
                    (0.0, 0.0)
                } else {
                    let v = learner.net.evaluate(&next_clean)?;
                    (v.v_ext, v.v_int)
                };
                learner.update(cfg, bootstrap, progress)?;
            }
            state = out.next_state;
            if out.done {
                break;
            }
        }

        let mut validation_score = None;
        if (episode + 1) % cfg.validation_interval == 0 || episode + 1 == cfg.total_episodes {
            let mut greedy = GreedyPolicy::new(learner.net.clone());
            let score = validate(&mut greedy, env, &val_seeds)?;
            validation_score = Some(score);
            history.push((episode, score));
            checkpoints.push(Checkpoint {
                episode,
                validation_score: score,
                policy: learner.net.clone(),
            });
            checkpoints = ensemble_select(checkpoints, cfg.keep_checkpoints)?;
        }

        let last = learner.updates.last();
        let row = EpisodeMetrics {
            episode,
            progress,
            phase: phase.number(),
            alpha,
            lambda_int,
            score: summary.score,
            yield_kg_ha: summary.yield_kg_ha,
            irrigation_mm: summary.irrigation_mm,
            nitrogen_kg_ha: summary.nitrogen_kg_ha,
            leached_kg_ha: summary.leached_kg_ha,
            wue: summary.wue(),
            nue: summary.nue(),
            intrinsic_mean: intrinsic_sum / summary.steps.max(1) as f64,
            coverage: grid.coverage(),
            masked_actions: masked,
            updates: learner.updates.len() as u32,
            lr: cfg.ppo.lr_at(progress),
            policy_loss: last.map(|u| u.policy_loss),
            value_loss_ext: last.map(|u| u.value_loss_ext),
            value_loss_int: last.map(|u| u.value_loss_int),
            entropy: last.map(|u| u.entropy),
            clip_fraction: last.map(|u| u.clip_fraction),
            approx_kl: last.map(|u| u.approx_kl),
            rnd_loss: learner.rnd_loss,
            validation_score,
        };
        if let Some(every) = opts.progress_every {
            if every > 0 && (episode + 1) % every == 0 {
                eprintln!(
                    "[{} seed {seed}] episode {:>5} phase {} alpha {:.2} lambda {:.2} score {:>9.1} yield {:>8.0} coverage {:.4}{}",
                    cfg.name,
                    episode + 1,
                    row.phase,
                    alpha,
                    lambda_int,
                    row.score,
                    row.yield_kg_ha,
                    row.coverage,
                    validation_score.map(|v| format!(" validation {v:.1}")).unwrap_or_default()
                );
            }
        }
        metrics.push(row);

        if cfg.early_stopping && validation_score.is_some() && early_stop_check(&history, cfg.patience, cfg.min_delta)?
        {
            stopped_early_at = Some(episode);
            break;
        }
    }

    learner.update(cfg, (0.0, 0.0), progress)?;
    if learner.steps_in_updates != total_steps {
        return Err(Error::contract(format!(
            "{} steps collected but {} used in updates",
            total_steps, learner.steps_in_updates
        )));
    }

    Ok(RunArtifacts {
        seed,
        config_hash: cfg.hash()?,
        metrics,
        updates: learner.updates,
        checkpoints,
        final_policy: learner.net,
        coverage: grid,
        rng_audit: streams.audit_log().to_vec(),
        stopped_early_at,
        total_steps,
        steps_in_updates: learner.steps_in_updates,
    })
}

/// Trains every seed in parallel, one environment per seed.
pub fn train_seeds(
    cfg: &RunConfig,
    seeds: &[u64],
    env_factory: &EnvFactory,
    opts: &TrainOptions,
) -> Result<Vec<RunArtifacts>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut env = env_factory()?;
            train(cfg, s, env.as_mut(), opts)
        })
        .collect()
}

/// `<root>/<run_id>/seed_<seed>`.
pub fn seed_dir(root: &Path, run_id: &str, seed: u64) -> PathBuf {
    root.join(run_id).join(format!("seed_{seed}"))
}
