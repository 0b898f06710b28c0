//! PPO with a clipped surrogate, two value heads and per-channel GAE.
//!
//! In coupled mode the extrinsic and intrinsic reward streams each get
//! their own value head and GAE pass. Both advantage vectors are normalized
//! independently, then mixed as `ext + lambda_int * int`. Additive mode sums
//! raw rewards first and runs a single channel. Plain mode ignores intrinsic
//! reward altogether.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionChoice, FEATURE_SCALES, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{self, clip_global_norm, Activation, AdamState, Mlp, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RndMode {
    /// Separate intrinsic channel with its own value head.
    Coupled,
    /// `r_ext + additive_coef * r_int` through a single channel.
    Additive,
    /// No intrinsic reward.
    Plain,
}

impl RndMode {
    pub fn uses_rnd(self) -> bool {
        !matches!(self, RndMode::Plain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub lr: f64,
    pub lr_linear_decay: bool,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub buffer_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub mode: RndMode,
    pub additive_coef: f64,
    /// Multiplies rewards before they become value targets.
    pub reward_scale: f64,
    pub intrinsic_reward_scale: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            lr: 3e-4,
            lr_linear_decay: true,
            minibatch_size: 64,
            epochs: 10,
            buffer_size: 2048,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            mode: RndMode::Coupled,
            additive_coef: 0.1,
            reward_scale: 0.001,
            intrinsic_reward_scale: 0.1,
            hidden: 256,
            hidden_layers: 3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be >= 0");
        }
        if self.minibatch_size == 0 || self.epochs == 0 || self.buffer_size < 2 {
            return bad("minibatch_size and epochs must be positive, buffer_size at least 2");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        if self.hidden == 0 || self.hidden_layers == 0 {
            return bad("network must have at least one non-empty hidden layer");
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("additive_coef", self.additive_coef),
            ("reward_scale", self.reward_scale),
            ("intrinsic_reward_scale", self.intrinsic_reward_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, progress: f64) -> f64 {
        if self.lr_linear_decay {
            nn::linear_decay(self.lr, progress)
        } else {
            self.lr
        }
    }
}

/// Maps an observation to the trunk input. Defaults to identity.
pub type EmbeddingHook = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Actor-critic network: shared ReLU trunk, a logits head and two value
/// heads. Observations are divided by fixed per-feature scales before the
/// embedding hook.
#[derive(Clone)]
pub struct PolicyNet {
    input_scale: Vec<f64>,
    embedding: Option<EmbeddingHook>,
    pub trunk: Mlp,
    pub policy_head: Mlp,
    pub value_ext: Mlp,
    pub value_int: Mlp,
}

impl std::fmt::Debug for PolicyNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyNet")
            .field("trunk", &self.trunk.sizes())
            .field("n_actions", &self.n_actions())
            .field("embedding", &self.embedding.is_some())
            .finish()
    }
}

/// Initial scale of the logits layer, so the starting policy is near uniform.
pub const POLICY_HEAD_INIT_SCALE: f64 = 0.01;

impl PolicyNet {
    /// Network over the 25-feature crop observation and 25 actions.
    pub fn new<R: Rng + ?Sized>(hidden: usize, layers: usize, rng: &mut R) -> Result<Self> {
        Self::with_shape(FEATURE_SCALES.to_vec(), hidden, layers, N_ACTIONS, rng)
    }

    pub fn with_shape<R: Rng + ?Sized>(
        input_scale: Vec<f64>,
        hidden: usize,
        layers: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("input scales must be positive".into()));
        }
        if layers == 0 || hidden == 0 || n_actions < 2 {
            return Err(Error::Config(
                "policy needs hidden units and at least two actions".into(),
            ));
        }
        let mut sizes = vec![input_scale.len()];
        sizes.extend(std::iter::repeat_n(hidden, layers));
        let trunk = Mlp::he_uniform(&sizes, Activation::Relu, rng)?;
        let mut policy_head = Mlp::he_uniform(&[hidden, n_actions], Activation::Identity, rng)?;
        policy_head.scale_output_layer(POLICY_HEAD_INIT_SCALE);
        let value_ext = Mlp::he_uniform(&[hidden, 1], Activation::Identity, rng)?;
        let value_int = Mlp::he_uniform(&[hidden, 1], Activation::Identity, rng)?;
        Ok(Self {
            input_scale,
            embedding: None,
            trunk,
            policy_head,
            value_ext,
            value_int,
        })
    }

    /// Installs a feature embedding. Its output length must equal the trunk
    /// input size.
    pub fn with_embedding(mut self, hook: EmbeddingHook) -> Self {
        self.embedding = Some(hook);
        self
    }

    pub fn n_actions(&self) -> usize {
        self.policy_head.output_size()
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn n_params(&self) -> usize {
        self.trunk.n_params() + self.policy_head.n_params() + self.value_ext.n_params() + self.value_int.n_params()
    }

    fn prepare(&self, observation: &[f64]) -> Result<Vec<f64>> {
        if observation.len() != self.input_scale.len() {
            return Err(Error::Dimension {
                expected: self.input_scale.len(),
                got: observation.len(),
            });
        }
        if observation.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite observation"));
        }
        let scaled: Vec<f64> = observation.iter().zip(&self.input_scale).map(|(v, s)| v / s).collect();
        Ok(match &self.embedding {
            Some(hook) => hook(&scaled),
            None => scaled,
        })
    }

    pub fn evaluate(&self, observation: &[f64]) -> Result<NetOutput> {
        let x = self.prepare(observation)?;
        let h = self.trunk.forward(&x)?;
        Ok(NetOutput {
            logits: self.policy_head.forward(&h)?,
            v_ext: self.value_ext.forward(&h)?[0],
            v_int: self.value_int.forward(&h)?[0],
        })
    }

    fn forward_traced(&self, observation: &[f64]) -> Result<Traced> {
        let x = self.prepare(observation)?;
        let trunk = self.trunk.forward_trace(&x)?;
        let h = trunk.output();
        let logits = self.policy_head.forward(h)?;
        let v_ext = self.value_ext.forward(h)?[0];
        let v_int = self.value_int.forward(h)?[0];
        Ok(Traced {
            trunk,
            logits,
            v_ext,
            v_int,
        })
    }

    /// Samples from the softmax policy.
    pub fn act<R: Rng + ?Sized>(&self, observation: &[f64], rng: &mut R) -> Result<ActionSample> {
        let out = self.evaluate(observation)?;
        let probs = softmax(&out.logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                action = i;
                break;
            }
        }
        Ok(ActionSample {
            action,
            log_prob: log_softmax(&out.logits)[action],
            v_ext: out.v_ext,
            v_int: out.v_int,
        })
    }

    /// Most probable action; ties go to the lowest index.
    pub fn act_greedy(&self, observation: &[f64]) -> Result<ActionSample> {
        let out = self.evaluate(observation)?;
        let action = argmax(&out.logits);
        Ok(ActionSample {
            action,
            log_prob: log_softmax(&out.logits)[action],
            v_ext: out.v_ext,
            v_int: out.v_int,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.trunk.all_finite()
            && self.policy_head.all_finite()
            && self.value_ext.all_finite()
            && self.value_int.all_finite()
    }

    /// Binary checkpoint. The embedding hook is code, not data, and is not
    /// saved.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(POLICY_MAGIC)?;
        w.write_all(&POLICY_VERSION.to_le_bytes())?;
        w.write_all(&(self.input_scale.len() as u64).to_le_bytes())?;
        for s in &self.input_scale {
            w.write_all(&s.to_le_bytes())?;
        }
        for net in [&self.trunk, &self.policy_head, &self.value_ext, &self.value_int] {
            nn::write_mlp(w, net)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != POLICY_MAGIC {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != POLICY_VERSION {
            return Err(Error::Checkpoint(format!("unsupported policy version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8);
        if n == 0 || n > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible input size {n}")));
        }
        let mut input_scale = Vec::with_capacity(n as usize);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            input_scale.push(f64::from_le_bytes(b8));
        }
        let trunk = nn::read_mlp(r)?;
        let policy_head = nn::read_mlp(r)?;
        let value_ext = nn::read_mlp(r)?;
        let value_int = nn::read_mlp(r)?;
        let h = trunk.output_size();
        if trunk.input_size() != input_scale.len()
            || policy_head.input_size() != h
            || value_ext.sizes() != [h, 1]
            || value_int.sizes() != [h, 1]
        {
            return Err(Error::Checkpoint("policy component shapes do not fit together".into()));
        }
        Ok(Self {
            input_scale,
            embedding: None,
            trunk,
            policy_head,
            value_ext,
            value_int,
        })
    }
}

const POLICY_MAGIC: &[u8; 8] = b"AGRLPOL\0";
const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub logits: Vec<f64>,
    pub v_ext: f64,
    pub v_int: f64,
}

struct Traced {
    trunk: Trace,
    logits: Vec<f64>,
    v_ext: f64,
    v_int: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub action: usize,
    pub log_prob: f64,
    pub v_ext: f64,
    pub v_int: f64,
}

impl ActionSample {
    pub fn choice(&self) -> Result<ActionChoice> {
        ActionChoice::from_index(self.action)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// GAE over a trajectory segment. `values` holds one entry per step plus the
/// bootstrap value of the state after the last step. A `done` step does not
/// bootstrap and stops the advantage from flowing backwards across it.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::contract(format!(
            "gae lengths: rewards {n}, values {} (want {}), dones {}",
            values.len(),
            n + 1,
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    Ok(adv)
}

pub const ADV_STD_FLOOR: f64 = 1e-8;

/// `(a - mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize_adv(adv: &[f64]) -> Result<Vec<f64>> {
    if adv.len() < 2 {
        return Err(Error::contract("advantage normalization needs at least two entries"));
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADV_STD_FLOOR;
    Ok(adv.iter().map(|a| (a - mean) / denom).collect())
}

/// `ext + lambda_int * int`. At `lambda_int == 0` the extrinsic vector is
/// returned unchanged.
pub fn combined_advantage(ext: &[f64], int: &[f64], lambda_int: f64) -> Result<Vec<f64>> {
    if ext.len() != int.len() {
        return Err(Error::contract("advantage channels differ in length"));
    }
    if !(0.0..=1.0).contains(&lambda_int) {
        return Err(Error::contract(format!(
            "lambda_int must be in [0, 1], got {lambda_int}"
        )));
    }
    if lambda_int == 0.0 {
        return Ok(ext.to_vec());
    }
    Ok(ext.iter().zip(int).map(|(e, i)| e + lambda_int * i).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// The observation the policy saw, after any noise.
    pub observation: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward_ext: f64,
    pub reward_int: f64,
    pub v_ext: f64,
    pub v_int: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub ext: Vec<f64>,
    pub int: Vec<f64>,
    pub combined: Vec<f64>,
    pub return_ext: Vec<f64>,
    pub return_int: Vec<f64>,
    pub lambda_int: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    capacity: usize,
    steps: Vec<Transition>,
    advantages: Option<Advantages>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            steps: Vec::with_capacity(capacity),
            advantages: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.steps.len() >= self.capacity
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn advantages(&self) -> Option<&Advantages> {
        self.advantages.as_ref()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if self.is_full() {
            return Err(Error::contract("rollout buffer is full"));
        }
        if self.advantages.is_some() {
            return Err(Error::contract("rollout buffer already finalized"));
        }
        self.steps.push(t);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.advantages = None;
    }

    /// Computes advantages and return targets. `bootstrap` holds the
    /// extrinsic and intrinsic values of the state following the last step,
    /// used only when that step is not terminal.
    pub fn finalize(&mut self, bootstrap: (f64, f64), cfg: &PpoConfig, lambda_int: f64) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::contract("need at least two steps to finalize"));
        }
        let dones: Vec<bool> = self.steps.iter().map(|s| s.done).collect();
        let mut v_ext: Vec<f64> = self.steps.iter().map(|s| s.v_ext).collect();
        v_ext.push(bootstrap.0);
        let r_ext: Vec<f64> = self
            .steps
            .iter()
            .map(|s| match cfg.mode {
                RndMode::Additive => {
                    cfg.reward_scale * (s.reward_ext + cfg.additive_coef * cfg.intrinsic_reward_scale * s.reward_int)
                }
                _ => cfg.reward_scale * s.reward_ext,
            })
            .collect();
        let ext = gae(&r_ext, &v_ext, &dones, cfg.gamma, cfg.gae_lambda)?;
        let return_ext: Vec<f64> = ext.iter().zip(&v_ext).map(|(a, v)| a + v).collect();
        let ext_norm = normalize_adv(&ext)?;

        let (int, return_int, combined, lambda_int) = if cfg.mode == RndMode::Coupled {
            let mut v_int: Vec<f64> = self.steps.iter().map(|s| s.v_int).collect();
            v_int.push(bootstrap.1);
            let r_int: Vec<f64> = self
                .steps
                .iter()
                .map(|s| cfg.intrinsic_reward_scale * s.reward_int)
                .collect();
            let int = gae(&r_int, &v_int, &dones, cfg.gamma, cfg.gae_lambda)?;
            let return_int: Vec<f64> = int.iter().zip(&v_int).map(|(a, v)| a + v).collect();
            let combined = combined_advantage(&ext_norm, &normalize_adv(&int)?, lambda_int)?;
            (int, return_int, combined, lambda_int)
        } else {
            let n = self.steps.len();
            (vec![0.0; n], vec![0.0; n], ext_norm, 0.0)
        };
        self.advantages = Some(Advantages {
            ext,
            int,
            combined,
            return_ext,
            return_int,
            lambda_int,
        });
        Ok(())
    }
}

/// Adam state for every component of a [`PolicyNet`].
#[derive(Debug, Clone)]
pub struct PolicyOptimizer {
    trunk: AdamState,
    policy_head: AdamState,
    value_ext: AdamState,
    value_int: AdamState,
}

impl PolicyOptimizer {
    pub fn new(net: &PolicyNet) -> Self {
        Self {
            trunk: AdamState::for_net(&net.trunk),
            policy_head: AdamState::for_net(&net.policy_head),
            value_ext: AdamState::for_net(&net.value_ext),
            value_int: AdamState::for_net(&net.value_int),
        }
    }
}

/// Parameter gradients, laid out like the network components.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub trunk: Vec<f64>,
    pub policy_head: Vec<f64>,
    pub value_ext: Vec<f64>,
    pub value_int: Vec<f64>,
}

impl PolicyGrads {
    pub fn zeros(net: &PolicyNet) -> Self {
        Self {
            trunk: vec![0.0; net.trunk.n_params()],
            policy_head: vec![0.0; net.policy_head.n_params()],
            value_ext: vec![0.0; net.value_ext.n_params()],
            value_int: vec![0.0; net.value_int.n_params()],
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.trunk, &self.policy_head, &self.value_ext, &self.value_int]
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Per-sample clipped surrogate and its gradient with respect to the
/// new log-probability.
pub fn clipped_surrogate(log_prob: f64, old_log_prob: f64, adv: f64, epsilon: f64) -> (f64, f64, bool) {
    let ratio = (log_prob - old_log_prob).exp();
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
    let is_clipped = (adv >= 0.0 && ratio > 1.0 + epsilon) || (adv < 0.0 && ratio < 1.0 - epsilon);
    let value = unclipped.min(clipped);
    let grad = if is_clipped { 0.0 } else { unclipped };
    (value, grad, is_clipped)
}

/// One minibatch sample.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub observation: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub return_ext: f64,
    pub return_int: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub policy: f64,
    pub value_ext: f64,
    pub value_int: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Minibatch loss
/// `-surrogate + value_coef * (mse_ext + [train_int] mse_int) - entropy_coef * entropy`
/// (all means over the batch) and its gradient.
pub fn loss_and_grad(
    net: &PolicyNet,
    batch: &[Sample<'_>],
    cfg: &PpoConfig,
    train_int: bool,
) -> Result<(LossTerms, PolicyGrads)> {
    if batch.is_empty() {
        return Err(Error::contract("empty minibatch"));
    }
    let b = batch.len() as f64;
    let mut grads = PolicyGrads::zeros(net);
    let mut terms = LossTerms::default();
    let mut clipped = 0usize;
    for s in batch {
        let tr = net.forward_traced(s.observation)?;
        let h = tr.trunk.output().to_vec();
        let logp = log_softmax(&tr.logits);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        let (surr, dsurr, was_clipped) =
            clipped_surrogate(logp[s.action], s.old_log_prob, s.advantage, cfg.clip_epsilon);
        clipped += was_clipped as usize;
        terms.approx_kl += s.old_log_prob - logp[s.action];

        let mut dlogits = vec![0.0; probs.len()];
        for (j, d) in dlogits.iter_mut().enumerate() {
            let onehot = if j == s.action { 1.0 } else { 0.0 };
            let d_surr = dsurr * (onehot - probs[j]);
            let d_ent = -probs[j] * (logp[j] + entropy);
            *d = (-d_surr - cfg.entropy_coef * d_ent) / b;
        }
        let err_ext = tr.v_ext - s.return_ext;
        let err_int = tr.v_int - s.return_int;
        terms.policy -= surr;
        terms.entropy += entropy;
        terms.value_ext += err_ext * err_ext;
        terms.value_int += err_int * err_int;

        let ph_trace = net.policy_head.forward_trace(&h)?;
        let mut dh = net
            .policy_head
            .backward_trace(&ph_trace, &dlogits, &mut grads.policy_head)?;
        let ve_trace = net.value_ext.forward_trace(&h)?;
        let dv = cfg.value_coef * 2.0 * err_ext / b;
        let dh_ext = net.value_ext.backward_trace(&ve_trace, &[dv], &mut grads.value_ext)?;
        for (a, g) in dh.iter_mut().zip(&dh_ext) {
            *a += g;
        }
        if train_int {
            let vi_trace = net.value_int.forward_trace(&h)?;
            let dv = cfg.value_coef * 2.0 * err_int / b;
            let dh_int = net.value_int.backward_trace(&vi_trace, &[dv], &mut grads.value_int)?;
            for (a, g) in dh.iter_mut().zip(&dh_int) {
                *a += g;
            }
        }
        net.trunk.backward_trace(&tr.trunk, &dh, &mut grads.trunk)?;
    }
    terms.policy /= b;
    terms.entropy /= b;
    terms.value_ext /= b;
    terms.value_int /= b;
    terms.approx_kl /= b;
    terms.clip_fraction = clipped as f64 / b;
    terms.total = terms.policy + cfg.value_coef * (terms.value_ext + if train_int { terms.value_int } else { 0.0 })
        - cfg.entropy_coef * terms.entropy;
    Ok((terms, grads))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss_ext: f64,
    pub value_loss_int: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Clip fraction of the very first minibatch.
    pub first_clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
    pub lr: f64,
}

/// Runs the configured number of epochs over a finalized buffer.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    opt: &mut PolicyOptimizer,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let adv = buffer
        .advantages()
        .ok_or_else(|| Error::contract("ppo_update on a buffer that was not finalized"))?;
    let train_int = cfg.mode == RndMode::Coupled && adv.lambda_int > 0.0;
    let steps = buffer.steps();
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut stats = UpdateStats {
        lr,
        ..UpdateStats::default()
    };
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let batch: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&i| Sample {
                    observation: &steps[i].observation,
                    action: steps[i].action,
                    old_log_prob: steps[i].log_prob,
                    advantage: adv.combined[i],
                    return_ext: adv.return_ext[i],
                    return_int: adv.return_int[i],
                })
                .collect();
            let (terms, mut grads) = loss_and_grad(net, &batch, cfg, train_int)?;
            if !terms.total.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "PPO loss {} (policy {}, value_ext {}, value_int {}) after {} minibatches",
                    terms.total, terms.policy, terms.value_ext, terms.value_int, stats.minibatches
                )));
            }
            let norm = clip_global_norm(
                &mut [
                    &mut grads.trunk,
                    &mut grads.policy_head,
                    &mut grads.value_ext,
                    &mut grads.value_int,
                ],
                cfg.max_grad_norm,
            );
            opt.trunk.step(net.trunk.params_mut(), &grads.trunk, lr)?;
            opt.policy_head
                .step(net.policy_head.params_mut(), &grads.policy_head, lr)?;
            opt.value_ext.step(net.value_ext.params_mut(), &grads.value_ext, lr)?;
            if train_int {
                opt.value_int.step(net.value_int.params_mut(), &grads.value_int, lr)?;
            }
            if stats.minibatches == 0 {
                stats.first_clip_fraction = terms.clip_fraction;
            }
            stats.minibatches += 1;
            stats.policy_loss += terms.policy;
            stats.value_loss_ext += terms.value_ext;
            stats.value_loss_int += terms.value_int;
            stats.entropy += terms.entropy;
            stats.clip_fraction += terms.clip_fraction;
            stats.approx_kl += terms.approx_kl;
            stats.grad_norm += norm;
        }
    }
    let m = stats.minibatches.max(1) as f64;
    stats.policy_loss /= m;
    stats.value_loss_ext /= m;
    stats.value_loss_int /= m;
    stats.entropy /= m;
    stats.clip_fraction /= m;
    stats.approx_kl /= m;
    stats.grad_norm /= m;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::OBS_DIM;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_net(seed: u64, n_in: usize, hidden: usize, n_actions: usize) -> PolicyNet {
        let mut rng = seeded(seed);
        let mut net = PolicyNet::with_shape(vec![1.0; n_in], hidden, 2, n_actions, &mut rng).unwrap();
        // random biases and a larger logits layer move pre-activations off
        // the ReLU kink and make the policy non-uniform
        for m in [&mut net.trunk, &mut net.value_ext, &mut net.value_int] {
            for l in 0..m.n_layers() {
                for b in m.bias_mut(l) {
                    *b = rng.random_range(-0.3..0.3);
                }
            }
        }
        net.policy_head.scale_output_layer(100.0);
        net
    }

    fn direct_gae(r: &[f64], v: &[f64], d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    let live = if d[k] { 0.0 } else { 1.0 };
                    sum += w * (r[k] + g * v[k + 1] * live - v[k]);
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let a = gae(&[1.0], &[0.5, 2.0], &[false], 0.99, 0.0).unwrap();
        assert!((a[0] - (1.0 + 0.99 * 2.0 - 0.5)).abs() < 1e-15);
        let a = gae(&[1.0; 3], &[0.0; 4], &[false, false, true], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![3.0, 2.0, 1.0]);
        assert!(gae(&[1.0; 3], &[0.0; 3], &[false; 3], 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_resets_at_done() {
        let a = gae(&[1.0, 1.0], &[0.0, 5.0, 7.0], &[true, false], 1.0, 1.0).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 8.0 - 5.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_adv(&[3.0; 5]).unwrap(), vec![0.0; 5]);
        let n = normalize_adv(&[1.0, -1.0]).unwrap();
        assert!((n[0] - 1.0).abs() < 1e-7 && (n[1] + 1.0).abs() < 1e-7);
        assert!(normalize_adv(&[1.0]).is_err());
        let mut rng = seeded(1);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-50.0..80.0)).collect();
        let n = normalize_adv(&xs).unwrap();
        let mean = n.iter().sum::<f64>() / 1000.0;
        let sd = (n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_advantage(&[2.0], &[4.0], 0.5).unwrap(), vec![4.0]);
        assert_eq!(
            combined_advantage(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(),
            vec![4.0, 6.0]
        );
        let ext = vec![-0.0, 1.5];
        let out = combined_advantage(&ext, &[9.0, 9.0], 0.0).unwrap();
        assert_eq!(out[0].to_bits(), ext[0].to_bits());
        assert!(combined_advantage(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn sampling_and_log_probs() {
        let mut rng = seeded(2);
        let mut net = PolicyNet::new(16, 2, &mut rng).unwrap();
        for w in net.policy_head.params_mut() {
            *w = 0.0;
        }
        let obs = vec![1.0; OBS_DIM];
        let mut counts = [0usize; N_ACTIONS];
        for _ in 0..100_000 {
            let a = net.act(&obs, &mut rng).unwrap();
            counts[a.action] += 1;
            assert!((a.log_prob.exp() - 1.0 / N_ACTIONS as f64).abs() < 1e-9);
        }
        for c in counts {
            assert!((c as f64 / 4000.0 - 1.0).abs() < 0.1);
        }
        let g1 = net.act_greedy(&obs).unwrap();
        assert_eq!(g1, net.act_greedy(&obs).unwrap());
        let mut bad = obs.clone();
        bad[3] = f64::NAN;
        assert!(net.act(&bad, &mut rng).is_err());
    }

    #[test]
    fn softmax_is_distribution() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let lp = log_softmax(&[0.3, -1.2, 2.0]);
        let p = softmax(&[0.3, -1.2, 2.0]);
        for (a, b) in lp.iter().zip(&p) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_on_three_logits_matches_finite_differences() {
        let logits = [0.4, -0.2, 0.9];
        let old = log_softmax(&[0.1, 0.1, 0.5]);
        for (action, adv) in [(0usize, 1.3), (2, -0.7), (1, 2.0)] {
            let f = |z: &[f64]| clipped_surrogate(log_softmax(z)[action], old[action], adv, 0.2).0;
            let lp = log_softmax(&logits);
            let p = softmax(&logits);
            let (_, d, _) = clipped_surrogate(lp[action], old[action], adv, 0.2);
            for j in 0..3 {
                let analytic = d * (if j == action { 1.0 } else { 0.0 } - p[j]);
                let h = 1e-6;
                let mut up = logits;
                up[j] += h;
                let mut dn = logits;
                dn[j] -= h;
                let numeric = (f(&up) - f(&dn)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!((analytic - numeric).abs() / denom < 1e-4, "a{action} j{j}");
            }
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let net = toy_net(3, 4, 6, 3);
        let mut rng = seeded(4);
        let obs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<Sample<'_>> = obs
            .iter()
            .enumerate()
            .map(|(i, o)| Sample {
                observation: o,
                action: i % 3,
                old_log_prob: log_softmax(&net.evaluate(o).unwrap().logits)[i % 3] + rng.random_range(-0.1..0.1),
                advantage: rng.random_range(-2.0..2.0),
                return_ext: rng.random_range(-1.0..1.0),
                return_int: rng.random_range(-1.0..1.0),
            })
            .collect();
        let cfg = PpoConfig::default();
        let (_, grads) = loss_and_grad(&net, &batch, &cfg, true).unwrap();
        let loss = |n: &PolicyNet| loss_and_grad(n, &batch, &cfg, true).unwrap().0.total;
        let h = 1e-6;
        let parts: [(&str, &Vec<f64>, fn(&mut PolicyNet) -> &mut Mlp); 4] = [
            ("trunk", &grads.trunk, |n| &mut n.trunk),
            ("policy", &grads.policy_head, |n| &mut n.policy_head),
            ("value_ext", &grads.value_ext, |n| &mut n.value_ext),
            ("value_int", &grads.value_int, |n| &mut n.value_int),
        ];
        for (name, g, get) in parts {
            for i in 0..g.len() {
                let mut up = net.clone();
                get(&mut up).params_mut()[i] += h;
                let mut dn = net.clone();
                get(&mut dn).params_mut()[i] -= h;
                let numeric = (loss(&up) - loss(&dn)) / (2.0 * h);
                let denom = g[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (g[i] - numeric).abs() / denom < 1e-4,
                    "{name}[{i}]: {} vs {numeric}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn intrinsic_head_untouched_when_not_trained() {
        let net = toy_net(5, 4, 6, 3);
        let o = vec![0.1, 0.2, 0.3, 0.4];
        let batch = [Sample {
            observation: &o,
            action: 1,
            old_log_prob: -1.0,
            advantage: 1.0,
            return_ext: 1.0,
            return_int: 5.0,
        }];
        let (_, g) = loss_and_grad(&net, &batch, &PpoConfig::default(), false).unwrap();
        assert!(g.value_int.iter().all(|v| *v == 0.0));
    }

    fn bandit_buffer(net: &PolicyNet, rng: &mut impl Rng, cfg: &PpoConfig) -> RolloutBuffer {
        let mut buf = RolloutBuffer::new(64);
        let obs = vec![1.0];
        while !buf.is_full() {
            let s = net.act(&obs, rng).unwrap();
            buf.push(Transition {
                observation: obs.clone(),
                action: s.action,
                log_prob: s.log_prob,
                reward_ext: if s.action == 0 { 100.0 } else { 0.0 },
                reward_int: 0.0,
                v_ext: s.v_ext,
                v_int: s.v_int,
                done: true,
            })
            .unwrap();
        }
        buf.finalize((0.0, 0.0), cfg, 0.0).unwrap();
        buf
    }

    #[test]
    fn bandit_prefers_rewarded_action() {
        let mut rng = seeded(6);
        let mut net = PolicyNet::with_shape(vec![1.0], 8, 1, 2, &mut rng).unwrap();
        let mut opt = PolicyOptimizer::new(&net);
        let cfg = PpoConfig {
            mode: RndMode::Plain,
            epochs: 1,
            minibatch_size: 64,
            lr: 1e-2,
            ..PpoConfig::default()
        };
        let prob0 = |n: &PolicyNet| softmax(&n.evaluate(&[1.0]).unwrap().logits)[0];
        let mut last = prob0(&net);
        for _ in 0..50 {
            let buf = bandit_buffer(&net, &mut rng, &cfg);
            ppo_update(&mut net, &mut opt, &buf, &cfg, cfg.lr, &mut rng).unwrap();
            let p = prob0(&net);
            assert!(p >= last - 1e-12, "{p} < {last}");
            last = p;
        }
        assert!(last > 0.9, "{last}");
    }

    #[test]
    fn first_minibatch_is_unclipped() {
        let mut rng = seeded(7);
        let mut net = PolicyNet::with_shape(vec![1.0], 8, 1, 2, &mut rng).unwrap();
        let mut opt = PolicyOptimizer::new(&net);
        let cfg = PpoConfig {
            mode: RndMode::Plain,
            ..PpoConfig::default()
        };
        let buf = bandit_buffer(&net, &mut rng, &cfg);
        let stats = ppo_update(&mut net, &mut opt, &buf, &cfg, cfg.lr, &mut rng).unwrap();
        assert_eq!(stats.first_clip_fraction, 0.0);
        assert_eq!(stats.minibatches, cfg.epochs);
    }

    #[test]
    fn update_requires_finalized_buffer() {
        let mut rng = seeded(8);
        let mut net = PolicyNet::with_shape(vec![1.0], 4, 1, 2, &mut rng).unwrap();
        let mut opt = PolicyOptimizer::new(&net);
        let buf = RolloutBuffer::new(4);
        assert!(ppo_update(&mut net, &mut opt, &buf, &PpoConfig::default(), 1e-3, &mut rng).is_err());
    }

    #[test]
    fn buffer_modes() {
        let cfg = PpoConfig::default();
        let mut buf = RolloutBuffer::new(3);
        for k in 0..3 {
            buf.push(Transition {
                observation: vec![0.0],
                action: 0,
                log_prob: -0.5,
                reward_ext: 100.0 * k as f64,
                reward_int: 10.0,
                v_ext: 0.0,
                v_int: 0.0,
                done: k == 2,
            })
            .unwrap();
        }
        assert!(buf.push(buf.steps()[0].clone()).is_err());
        let mut coupled = buf.clone();
        coupled.finalize((0.0, 0.0), &cfg, 0.5).unwrap();
        let a = coupled.advantages().unwrap();
        assert!(a.int.iter().all(|v| *v > 0.0));
        assert_eq!(a.lambda_int, 0.5);

        let mut additive = buf.clone();
        additive
            .finalize(
                (0.0, 0.0),
                &PpoConfig {
                    mode: RndMode::Additive,
                    gae_lambda: 1.0,
                    gamma: 1.0,
                    reward_scale: 0.01,
                    intrinsic_reward_scale: 1.0,
                    ..cfg.clone()
                },
                0.5,
            )
            .unwrap();
        let a = additive.advantages().unwrap();
        // returns of (r_ext + 0.1 r_int) * 0.01 = [3.03, 3.02, 2.01]
        for (got, want) in a.return_ext.iter().zip([3.03, 3.02, 2.01]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(a.int.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = toy_net(9, 25, 8, 25);
        let mut bytes = Vec::new();
        net.save(&mut bytes).unwrap();
        let back = PolicyNet::load(&mut bytes.as_slice()).unwrap();
        let o: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        assert_eq!(net.evaluate(&o).unwrap(), back.evaluate(&o).unwrap());
        bytes[0] = b'X';
        assert!(PolicyNet::load(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn embedding_hook_applies() {
        let mut rng = seeded(10);
        let net = PolicyNet::with_shape(vec![2.0; 3], 4, 1, 2, &mut rng).unwrap();
        let doubled = net
            .clone()
            .with_embedding(Arc::new(|x: &[f64]| x.iter().map(|v| v * 2.0).collect()));
        assert_eq!(
            net.evaluate(&[2.0, 4.0, 6.0]).unwrap(),
            doubled.evaluate(&[1.0, 2.0, 3.0]).unwrap()
        );
    }

    proptest! {
        #[test]
        fn gae_matches_direct_sum(
            steps in proptest::collection::vec((-10.0f64..10.0, -5.0f64..5.0, proptest::bool::weighted(0.2)), 1..=10),
            last in -5.0f64..5.0,
            gamma in 0.5f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
            let mut v: Vec<f64> = steps.iter().map(|s| s.1).collect();
            v.push(last);
            let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
            let fast = gae(&r, &v, &d, gamma, lambda).unwrap();
            let slow = direct_gae(&r, &v, &d, gamma, lambda);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn surrogate_respects_clip_bound(logp in -5.0f64..0.0, old in -5.0f64..0.0, adv in -10.0f64..10.0) {
            let eps = 0.2;
            let (v, _, _) = clipped_surrogate(logp, old, adv, eps);
            prop_assert!(v <= ((1.0 + eps) * adv).max((1.0 - eps) * adv) + 1e-12);
        }
    }
}
