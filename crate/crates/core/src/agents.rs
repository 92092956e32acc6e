//! Control policies and their training loop.
//!
//! SHRL is A2C whose segment decisions pass through the environment's
//! hysteresis gate; SPRL swaps that gate for a fixed update period. A2C and
//! PPO see every segment decision executed. Random acts uniformly inside the
//! action box. Gating is part of the environment dynamics, so every learner
//! scores the raw sampled action with its own log-probability.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, make_scenario, ActionSpace, EnvAction, Protocol, SegmentGate, SwanEnv};
use crate::error::{Error, Result};
use crate::neural::{clip_grad_norm, gaussian_entropy, gaussian_log_prob, Adam, GaussianPolicy, Mlp};

pub use crate::env::{hysteresis_gate, sprl_gate, HysteresisMemory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "SHRL")]
    Shrl,
    #[serde(rename = "SPRL")]
    Sprl,
    #[serde(rename = "A2C")]
    A2c,
    #[serde(rename = "PPO")]
    Ppo,
    #[serde(rename = "Random")]
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Shrl, Algorithm::Sprl, Algorithm::A2c, Algorithm::Ppo, Algorithm::Random];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Shrl => "SHRL",
            Algorithm::Sprl => "SPRL",
            Algorithm::A2c => "A2C",
            Algorithm::Ppo => "PPO",
            Algorithm::Random => "Random",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownName {
                kind: "algorithm",
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub p_update: f64,
    pub sprl_period: usize,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub ppo_batch_episodes: usize,
    pub ppo_minibatch: usize,
    pub entropy_coef: f64,
    pub discount: f64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub log_std_lr: f64,
    pub initial_log_std: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub scale_rewards: bool,
    /// Steps per actor-critic update; 0 updates once per episode.
    pub rollout_steps: usize,
    pub logit_credit: LogitCredit,
}

/// Which steps' segment logits enter the policy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogitCredit {
    /// Every sampled action, including logits the gate overrode.
    Sampled,
    /// Only steps whose logits decided the executed activation.
    Executed,
}

impl fmt::Display for LogitCredit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogitCredit::Sampled => "sampled",
            LogitCredit::Executed => "executed",
        })
    }
}

impl FromStr for LogitCredit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sampled" => Ok(LogitCredit::Sampled),
            "executed" => Ok(LogitCredit::Executed),
            _ => Err(Error::UnknownName {
                kind: "logit credit",
                value: s.into(),
            }),
        }
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            algorithm: Algorithm::Shrl,
            p_update: 0.1,
            sprl_period: 5,
            ppo_clip: 0.2,
            ppo_epochs: 4,
            ppo_batch_episodes: 8,
            ppo_minibatch: 100,
            entropy_coef: 1e-3,
            discount: 0.0,
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            log_std_lr: 3e-3,
            initial_log_std: -1.5,
            max_grad_norm: 0.5,
            normalize_advantages: false,
            scale_rewards: true,
            rollout_steps: 10,
            logit_credit: LogitCredit::Executed,
        }
    }
}

impl AgentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        AgentConfig {
            algorithm,
            ..AgentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_update) {
            return Err(Error::Config(format!("p_update must lie in [0, 1], got {}", self.p_update)));
        }
        if self.sprl_period == 0 {
            return Err(Error::Config("sprl_period must be at least 1".into()));
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            return Err(Error::Config(format!("ppo_clip must lie in (0, 1), got {}", self.ppo_clip)));
        }
        if self.ppo_epochs == 0 || self.ppo_batch_episodes == 0 || self.ppo_minibatch == 0 {
            return Err(Error::Config("PPO epochs, batch and minibatch sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!("discount must lie in [0, 1], got {}", self.discount)));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("log_std_lr", self.log_std_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    /// Segment gate the environment applies for this algorithm.
    pub fn segment_gate(&self, segments: usize) -> Result<SegmentGate> {
        match self.algorithm {
            Algorithm::Shrl => SegmentGate::hysteresis(segments, self.p_update),
            Algorithm::Sprl => SegmentGate::periodic(segments, self.sprl_period),
            Algorithm::A2c | Algorithm::Ppo | Algorithm::Random => Ok(SegmentGate::Transparent),
        }
    }
}

/// Per-dimension running mean and variance (Welford), used to whiten
/// observations. Frozen statistics stop updating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    pub frozen: bool,
}

const NORM_CLIP: f64 = 10.0;

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen: false,
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        if self.frozen {
            return;
        }
        self.count += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn variance(&self, i: usize) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            self.m2[i] / self.count
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let var = self.variance(i);
                let z = if var > 0.0 { (v - self.mean[i]) / var.sqrt() } else { 0.0 };
                z.clamp(-NORM_CLIP, NORM_CLIP)
            })
            .collect()
    }
}

/// Divides rewards by the running standard deviation of the discounted
/// return so value targets stay of order one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    discount: f64,
    running_return: f64,
    stats: RunningNorm,
}

impl RewardScaler {
    pub fn new(discount: f64) -> Self {
        RewardScaler {
            discount,
            running_return: 0.0,
            stats: RunningNorm::new(1),
        }
    }

    pub fn scale(&mut self, reward: f64, done: bool) -> f64 {
        self.running_return = self.running_return * self.discount + reward;
        self.stats.update(&[self.running_return]);
        if done {
            self.running_return = 0.0;
        }
        reward / (self.stats.variance(0).sqrt() + 1e-8)
    }
}

/// One episode of experience. States are already normalized; actions are in
/// the policy's normalized coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Action dimensions left out of the policy gradient, per step.
    pub ignored: Vec<Option<Range<usize>>>,
    /// Value estimate of the state after the last step when the rollout was
    /// cut before the episode ended; zero otherwise.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, state: Vec<f64>, action: Vec<f64>, log_prob: f64, reward: f64, value: f64) {
        self.states.push(state);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.ignored.push(None);
    }

    /// Drops `dims` of the most recent action from the policy gradient.
    pub fn ignore_last(&mut self, dims: Range<usize>) {
        if let Some(slot) = self.ignored.last_mut() {
            *slot = Some(dims);
        }
    }

    /// Discounted returns to the end of the rollout, closed with
    /// `bootstrap` (Monte Carlo when the rollout ends the episode).
    pub fn returns(&self, discount: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut acc = self.bootstrap;
        for t in (0..self.len()).rev() {
            acc = self.rewards[t] + discount * acc;
            out[t] = acc;
        }
        out
    }

    /// `returns - value estimates`, element-wise.
    pub fn advantages(&self, returns: &[f64]) -> Vec<f64> {
        returns.iter().zip(&self.values).map(|(r, v)| r - v).collect()
    }
}

fn normalize_in_place(x: &mut [f64]) {
    if x.len() < 2 {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in x {
        *v = (*v - mean) / (std + 1e-8);
    }
}

/// Actor, critic and their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: GaussianPolicy,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub log_std_opt: Adam,
    pub critic_opt: Adam,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &AgentConfig, rng: &mut R) -> Self {
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(action_dim);
        let mut critic_sizes = vec![state_dim];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let mean = Mlp::new(&actor_sizes, rng).scale_output_layer(0.01);
        let critic = Mlp::new(&critic_sizes, rng);
        let actor = GaussianPolicy::new(mean, cfg.initial_log_std);
        ActorCritic {
            actor_opt: Adam::new(actor.mean.params().len(), cfg.actor_lr),
            log_std_opt: Adam::new(action_dim, cfg.log_std_lr),
            critic_opt: Adam::new(critic.params().len(), cfg.critic_lr),
            actor,
            critic,
        }
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(state)?[0])
    }

    /// Accumulates `mean_t (V(s_t) - target_t)^2` gradients, steps the
    /// critic, and returns the loss.
    fn critic_step(&mut self, states: &[&[f64]], targets: &[f64], max_grad_norm: f64) -> Result<f64> {
        let n = states.len() as f64;
        let mut grads = vec![0.0; self.critic.params().len()];
        let mut loss = 0.0;
        for (s, &target) in states.iter().zip(targets) {
            let cache = self.critic.forward_cached(s)?;
            let err = cache.output()[0] - target;
            loss += err * err / n;
            self.critic.accumulate_backward(&cache, &[2.0 * err / n], &mut grads);
        }
        clip_grad_norm(&mut grads, max_grad_norm);
        self.critic_opt.step(self.critic.params_mut(), &grads);
        Ok(loss)
    }

    /// Steps the actor on `sum_t weight_t * log pi(a_t|s_t) + entropy_coef * H`
    /// (maximized), where `weight_t` is computed from the fresh log-probability
    /// by `weight`. Returns the objective value.
    fn actor_step<F>(
        &mut self,
        states: &[&[f64]],
        actions: &[&[f64]],
        ignored: &[Option<Range<usize>>],
        entropy_coef: f64,
        max_grad_norm: f64,
        mut weight: F,
    ) -> Result<f64>
    where
        F: FnMut(usize, f64) -> (f64, f64),
    {
        let dim = self.actor.action_dim();
        let mut g_mean = vec![0.0; self.actor.mean.params().len()];
        let mut g_log_std = vec![0.0; dim];
        let mut objective = 0.0;
        for (t, (s, a)) in states.iter().zip(actions).enumerate() {
            let cache = self.actor.mean.forward_cached(s)?;
            let mu = cache.output();
            let skip = ignored.get(t).cloned().flatten();
            let mut lp = gaussian_log_prob(mu, &self.actor.log_std, a);
            if let Some(r) = &skip {
                lp -= gaussian_log_prob(&mu[r.clone()], &self.actor.log_std[r.clone()], &a[r.clone()]);
            }
            // (objective contribution, d contribution / d log pi)
            let (value, dlp) = weight(t, lp);
            objective += value;
            if dlp == 0.0 {
                continue;
            }
            let (mut dm, mut dl) = GaussianPolicy::log_prob_gradients(mu, &self.actor.log_std, a);
            if let Some(r) = skip {
                dm[r.clone()].fill(0.0);
                dl[r].fill(0.0);
            }
            // Descent direction on the negated objective.
            let out_grad: Vec<f64> = dm.iter().map(|d| -dlp * d).collect();
            self.actor.mean.accumulate_backward(&cache, &out_grad, &mut g_mean);
            for (g, d) in g_log_std.iter_mut().zip(&dl) {
                *g -= dlp * d;
            }
        }
        objective += entropy_coef * gaussian_entropy(&self.actor.log_std);
        for g in &mut g_log_std {
            *g -= entropy_coef;
        }
        clip_grad_norm(&mut g_mean, max_grad_norm);
        self.actor_opt.step(self.actor.mean.params_mut(), &g_mean);
        self.log_std_opt.step(&mut self.actor.log_std, &g_log_std);
        self.actor.clamp_log_std();
        Ok(objective)
    }

    pub fn is_finite(&self) -> bool {
        self.actor.mean.params().iter().all(|p| p.is_finite())
            && self.actor.log_std.iter().all(|p| p.is_finite())
            && self.critic.params().iter().all(|p| p.is_finite())
    }
}

/// Losses reported by an update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// One advantage actor-critic update on a finished episode.
///
/// The critic is stepped on `mean (V(s_t) - R_t)^2`; the actor on
/// `-mean(log pi(a_t|s_t) A_t) - entropy_coef H` with `A_t = R_t - V(s_t)`
/// held constant.
pub fn a2c_update(traj: &Trajectory, nets: &mut ActorCritic, cfg: &AgentConfig) -> Result<UpdateLosses> {
    if traj.is_empty() {
        return Ok(UpdateLosses {
            policy_loss: 0.0,
            value_loss: 0.0,
        });
    }
    let returns = traj.returns(cfg.discount);
    let mut adv = traj.advantages(&returns);
    if cfg.normalize_advantages {
        normalize_in_place(&mut adv);
    }
    let states: Vec<&[f64]> = traj.states.iter().map(Vec::as_slice).collect();
    let actions: Vec<&[f64]> = traj.actions.iter().map(Vec::as_slice).collect();
    let n = traj.len() as f64;

    let value_loss = nets.critic_step(&states, &returns, cfg.max_grad_norm)?;
    let objective = nets.actor_step(&states, &actions, &traj.ignored, cfg.entropy_coef, cfg.max_grad_norm, |t, lp| {
        (lp * adv[t] / n, adv[t] / n)
    })?;
    Ok(UpdateLosses {
        policy_loss: -objective,
        value_loss,
    })
}

/// Clipped surrogate `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
pub fn ppo_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Derivative of [`ppo_surrogate`] with respect to `log pi_new`; zero where
/// the clipped branch is the binding one.
pub fn ppo_surrogate_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let live = (advantage > 0.0 && ratio < 1.0 + clip) || (advantage < 0.0 && ratio > 1.0 - clip);
    if live {
        ratio * advantage
    } else {
        0.0
    }
}

/// PPO update over a batch of episodes: several epochs of minibatch steps on
/// the clipped surrogate, with old log-probabilities from collection time.
pub fn ppo_update(batch: &[Trajectory], nets: &mut ActorCritic, cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> Result<UpdateLosses> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut old_lp: Vec<f64> = Vec::new();
    let mut returns = Vec::new();
    let mut adv = Vec::new();
    for traj in batch {
        let r = traj.returns(cfg.discount);
        adv.extend(traj.advantages(&r));
        returns.extend(r);
        states.extend(traj.states.iter().map(Vec::as_slice));
        actions.extend(traj.actions.iter().map(Vec::as_slice));
        old_lp.extend(&traj.log_probs);
    }
    if states.is_empty() {
        return Ok(UpdateLosses {
            policy_loss: 0.0,
            value_loss: 0.0,
        });
    }
    if cfg.normalize_advantages {
        normalize_in_place(&mut adv);
    }

    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    for _ in 0..cfg.ppo_epochs {
        // Fisher-Yates with the learner's stream keeps runs reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.ppo_minibatch) {
            let s: Vec<&[f64]> = chunk.iter().map(|&i| states[i]).collect();
            let a: Vec<&[f64]> = chunk.iter().map(|&i| actions[i]).collect();
            let tgt: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
            let n = chunk.len() as f64;
            value_loss = nets.critic_step(&s, &tgt, cfg.max_grad_norm)?;
            let objective = nets.actor_step(&s, &a, &[], cfg.entropy_coef, cfg.max_grad_norm, |t: usize, lp: f64| {
                let i = chunk[t];
                let ratio = (lp - old_lp[i]).exp();
                (
                    ppo_surrogate(ratio, adv[i], cfg.ppo_clip) / n,
                    ppo_surrogate_grad(ratio, adv[i], cfg.ppo_clip) / n,
                )
            })?;
            policy_loss = -objective;
        }
    }
    Ok(UpdateLosses { policy_loss, value_loss })
}

/// Uniform draw per dimension inside `[low, high]`.
pub fn random_act<R: Rng + ?Sized>(space: &ActionSpace, rng: &mut R) -> Vec<f64> {
    space
        .low
        .iter()
        .zip(&space.high)
        .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

/// Everything needed to act: algorithm, networks and observation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub agent: AgentConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    /// `None` for the random agent.
    pub nets: Option<ActorCritic>,
    pub obs_norm: RunningNorm,
    pub reward_scaler: RewardScaler,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// A decision taken by an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Normalized observation the decision was based on.
    pub state: Vec<f64>,
    /// Normalized action coordinates (what the policy density is over).
    pub raw: Vec<f64>,
    pub action: EnvAction,
    pub log_prob: f64,
    pub value: f64,
}

/// An agent bound to one environment's dimensions.
#[derive(Debug, Clone)]
pub struct Agent {
    pub checkpoint: Checkpoint,
    space: ActionSpace,
    cfg_segments: usize,
    env_cfg: crate::config::SystemConfig,
}

impl Agent {
    /// Builds a fresh agent for `env`, initializing networks from `rng`.
    pub fn new(env: &SwanEnv, cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (state_dim, action_dim) = (env.state_dim(), env.action_dim());
        let nets = match cfg.algorithm {
            Algorithm::Random => None,
            _ => Some(ActorCritic::new(state_dim, action_dim, cfg, rng)),
        };
        Ok(Agent {
            checkpoint: Checkpoint {
                version: CHECKPOINT_VERSION,
                agent: cfg.clone(),
                state_dim,
                action_dim,
                nets,
                obs_norm: RunningNorm::new(state_dim),
                reward_scaler: RewardScaler::new(cfg.discount),
            },
            space: env.action_space(),
            cfg_segments: env.config().segment_count,
            env_cfg: env.config().clone(),
        })
    }

    /// Rebinds a stored checkpoint to `env`, checking dimensions.
    pub fn from_checkpoint(env: &SwanEnv, checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.state_dim != env.state_dim() {
            return Err(Error::Shape {
                expected: env.state_dim(),
                actual: checkpoint.state_dim,
            });
        }
        if checkpoint.action_dim != env.action_dim() {
            return Err(Error::Shape {
                expected: env.action_dim(),
                actual: checkpoint.action_dim,
            });
        }
        Ok(Agent {
            checkpoint,
            space: env.action_space(),
            cfg_segments: env.config().segment_count,
            env_cfg: env.config().clone(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.checkpoint.agent
    }

    pub fn segment_gate(&self) -> Result<SegmentGate> {
        self.checkpoint.agent.segment_gate(self.cfg_segments)
    }

    /// Samples (or, when `greedy`, takes the mean of) the policy at `state`.
    /// The random agent ignores `state` and `greedy`.
    pub fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng, greedy: bool, learn_stats: bool) -> Result<Decision> {
        if learn_stats {
            self.checkpoint.obs_norm.update(state);
        }
        let obs = self.checkpoint.obs_norm.normalize(state);
        let Some(nets) = &self.checkpoint.nets else {
            let flat = random_act(&self.space, rng);
            return Ok(Decision {
                state: obs,
                raw: flat.clone(),
                action: EnvAction::from_flat(&self.env_cfg, &flat)?,
                log_prob: 0.0,
                value: 0.0,
            });
        };
        let (raw, log_prob) = if greedy {
            let mu = nets.actor.mean.forward(&obs)?;
            let lp = gaussian_log_prob(&mu, &nets.actor.log_std, &mu);
            (mu, lp)
        } else {
            nets.actor.sample(&obs, rng)?
        };
        let value = if greedy { 0.0 } else { nets.value(&obs)? };
        let flat = self.space.denormalize(&raw);
        Ok(Decision {
            state: obs,
            raw,
            action: EnvAction::from_flat(&self.env_cfg, &flat)?,
            log_prob,
            value,
        })
    }
}

/// Stream tags for [`derive_seed`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const ACTIONS: u64 = 2;
    pub const SCENARIO: u64 = 3;
    pub const GATE: u64 = 4;
    pub const EVAL_SCENARIO: u64 = 5;
    pub const EVAL_GATE: u64 = 6;
    pub const EVAL_ACTIONS: u64 = 7;
    pub const PPO_SHUFFLE: u64 = 8;
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean per-step reward of each training episode.
    pub curve: Vec<f64>,
    pub value_losses: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Installs the algorithm's segment gate (HSSM only) and returns the env.
pub fn prepare_env(env: SwanEnv, cfg: &AgentConfig) -> Result<SwanEnv> {
    let gate = if env.settings().protocol == Protocol::Hssm {
        cfg.segment_gate(env.config().segment_count)?
    } else {
        SegmentGate::Transparent
    };
    Ok(env.with_gate(gate))
}

/// Runs the episode loop: reset on a fresh scenario, act, step, and update
/// once per episode (A2C family) or once per batch of episodes (PPO).
pub fn train(env: SwanEnv, cfg: &AgentConfig, episodes: usize, seed: u64) -> Result<TrainOutcome> {
    let mut env = prepare_env(env, cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::INIT, 0));
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::ACTIONS, 0));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::PPO_SHUFFLE, 0));
    let mut agent = Agent::new(&env, cfg, &mut init_rng)?;
    let kind = env.settings().scenario;
    let positions = env.config().segment_count * env.config().antennas_per_segment;
    let logit_dims = positions..positions + env.config().segment_count;

    let mut curve = Vec::with_capacity(episodes);
    let mut value_losses = Vec::new();
    let mut batch: Vec<Trajectory> = Vec::new();

    for episode in 0..episodes {
        let scenario = make_scenario(kind, env.config(), derive_seed(seed, streams::SCENARIO, episode as u64));
        let mut state = env.reset(scenario, derive_seed(seed, streams::GATE, episode as u64))?.to_vec();
        let mut traj = Trajectory::default();
        let (mut total, mut steps) = (0.0, 0usize);
        loop {
            let d = agent.act(&state, &mut act_rng, false, true)?;
            let out = env.step(&d.action)?;
            total += out.reward;
            steps += 1;
            let learn_reward = if cfg.scale_rewards {
                agent.checkpoint.reward_scaler.scale(out.reward, out.done)
            } else {
                out.reward
            };
            traj.push(d.state, d.raw, d.log_prob, learn_reward, d.value);
            if cfg.logit_credit == LogitCredit::Executed && cfg.algorithm != Algorithm::Ppo && !out.logits_used {
                traj.ignore_last(logit_dims.clone());
            }
            state = out.state.to_vec();
            if out.done {
                break;
            }
            let cut = cfg.algorithm != Algorithm::Ppo && cfg.rollout_steps > 0 && traj.len() == cfg.rollout_steps;
            if let (true, Some(nets)) = (cut, agent.checkpoint.nets.as_mut()) {
                traj.bootstrap = nets.value(&agent.checkpoint.obs_norm.normalize(&state))?;
                let losses = a2c_update(&traj, nets, cfg)?;
                check_finite(&losses, nets, episode)?;
                value_losses.push(losses.value_loss);
                traj = Trajectory::default();
            }
        }
        curve.push(total / steps as f64);

        let Some(nets) = agent.checkpoint.nets.as_mut() else {
            continue;
        };
        let losses = match cfg.algorithm {
            Algorithm::Ppo => {
                batch.push(traj);
                if batch.len() < cfg.ppo_batch_episodes && episode + 1 < episodes {
                    continue;
                }
                let losses = ppo_update(&batch, nets, cfg, &mut shuffle_rng)?;
                batch.clear();
                losses
            }
            _ => a2c_update(&traj, nets, cfg)?,
        };
        check_finite(&losses, nets, episode)?;
        value_losses.push(losses.value_loss);
    }

    agent.checkpoint.obs_norm.frozen = true;
    Ok(TrainOutcome {
        curve,
        value_losses,
        checkpoint: agent.checkpoint,
    })
}

fn check_finite(losses: &UpdateLosses, nets: &ActorCritic, episode: usize) -> Result<()> {
    let what = if !losses.policy_loss.is_finite() {
        "policy loss"
    } else if !losses.value_loss.is_finite() {
        "value loss"
    } else if !nets.is_finite() {
        "network parameters"
    } else {
        return Ok(());
    };
    Err(Error::Diverged { episode, what })
}

/// Averages over greedy evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_sum_rate: f64,
    pub mean_illumination: f64,
    pub mean_reward: f64,
    /// Every executed action met the power, activation and spacing constraints.
    pub all_feasible: bool,
}

/// Runs `episodes` deterministic (mean-action) episodes on freshly drawn
/// scenarios; the random agent keeps acting randomly.
pub fn evaluate(env: SwanEnv, checkpoint: &Checkpoint, episodes: usize, seed: u64) -> Result<Evaluation> {
    let mut env = prepare_env(env, &checkpoint.agent)?;
    let mut agent = Agent::from_checkpoint(&env, checkpoint.clone())?;
    agent.checkpoint.obs_norm.frozen = true;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::EVAL_ACTIONS, 0));
    let kind = env.settings().scenario;
    let (mut rate, mut illum, mut reward, mut steps) = (0.0, 0.0, 0.0, 0usize);
    let mut all_feasible = true;
    for episode in 0..episodes {
        let scenario = make_scenario(kind, env.config(), derive_seed(seed, streams::EVAL_SCENARIO, episode as u64));
        let mut state = env.reset(scenario, derive_seed(seed, streams::EVAL_GATE, episode as u64))?.to_vec();
        loop {
            let d = agent.act(&state, &mut rng, true, false)?;
            let out = env.step(&d.action)?;
            rate += out.report.sum_rate;
            illum += out.report.mean_illumination();
            reward += out.reward;
            steps += 1;
            all_feasible &= out.report.constraint_flags.hard_feasible();
            state = out.state.to_vec();
            if out.done {
                break;
            }
        }
    }
    let n = steps.max(1) as f64;
    Ok(Evaluation {
        mean_sum_rate: rate / n,
        mean_illumination: illum / n,
        mean_reward: reward / n,
        all_feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::env::EnvSettings;

    fn small_cfg() -> AgentConfig {
        AgentConfig {
            hidden: vec![16, 16],
            ..AgentConfig::default()
        }
    }

    fn env(protocol: Protocol, length: usize) -> SwanEnv {
        SwanEnv::new(
            &SystemConfig::default(),
            EnvSettings {
                protocol,
                episode_length: length,
                ..EnvSettings::default()
            },
        )
        .unwrap()
    }

    fn nets(state_dim: usize, action_dim: usize, cfg: &AgentConfig, seed: u64) -> ActorCritic {
        ActorCritic::new(state_dim, action_dim, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!("shrl".parse::<Algorithm>().unwrap(), Algorithm::Shrl);
        assert!("dqn".parse::<Algorithm>().is_err());
    }

    #[test]
    fn returns_and_advantages() {
        let mut t = Trajectory::default();
        for (r, v) in [(1.0, 0.5), (2.0, 1.0), (3.0, 0.0)] {
            t.push(vec![0.0], vec![0.0], 0.0, r, v);
        }
        let ret = t.returns(0.5);
        assert_eq!(ret, vec![1.0 + 0.5 * (2.0 + 0.5 * 3.0), 2.0 + 1.5, 3.0]);
        let adv = t.advantages(&ret);
        for i in 0..3 {
            assert_eq!(adv[i], ret[i] - t.values[i]);
        }
    }

    #[test]
    fn bootstrap_closes_truncated_returns() {
        let mut t = Trajectory::default();
        t.push(vec![0.0], vec![0.0], 0.0, 1.0, 0.0);
        t.push(vec![0.0], vec![0.0], 0.0, 2.0, 0.0);
        t.bootstrap = 4.0;
        assert_eq!(t.returns(0.5), vec![1.0 + 0.5 * 4.0, 2.0 + 0.5 * 4.0]);
        assert_eq!(t.returns(0.0), vec![1.0, 2.0]);
    }

    #[test]
    fn ignored_dimensions_get_no_policy_gradient() {
        let cfg = AgentConfig {
            entropy_coef: 0.0,
            max_grad_norm: f64::INFINITY,
            ..small_cfg()
        };
        let mut n = nets(3, 4, &cfg, 2);
        let before = n.clone();
        let mut t = Trajectory::default();
        for i in 0..5 {
            t.push(vec![0.2 * i as f64, -0.1, 0.3], vec![0.4, -0.2, 0.9, -1.1], 0.0, i as f64, 0.0);
            t.ignore_last(1..3);
        }
        a2c_update(&t, &mut n, &cfg).unwrap();
        assert_eq!(n.actor.log_std[1], before.actor.log_std[1]);
        assert_eq!(n.actor.log_std[2], before.actor.log_std[2]);
        assert_ne!(n.actor.log_std[0], before.actor.log_std[0]);
        assert_ne!(n.actor.log_std[3], before.actor.log_std[3]);
        // The output-layer rows of ignored dimensions stay put as well.
        let hidden = cfg.hidden[1];
        let last = n.actor.mean.params().len() - (hidden * 4 + 4);
        for d in 1..3 {
            let row = last + d * hidden..last + (d + 1) * hidden;
            assert_eq!(n.actor.mean.params()[row.clone()], before.actor.mean.params()[row]);
        }
    }

    #[test]
    fn zero_advantage_leaves_only_entropy_gradient() {
        let cfg = AgentConfig {
            normalize_advantages: false,
            max_grad_norm: f64::INFINITY,
            ..small_cfg()
        };
        let mut n = nets(3, 2, &cfg, 1);
        let before = n.clone();
        let mut t = Trajectory::default();
        for i in 0..4 {
            let s = vec![0.1 * i as f64, 0.2, -0.3];
            let v = n.value(&s).unwrap();
            // reward equal to the value estimate with zero discount => A = 0
            t.push(s, vec![0.5, -0.5], 0.0, v, v);
        }
        let cfg0 = AgentConfig { discount: 0.0, ..cfg };
        a2c_update(&t, &mut n, &cfg0).unwrap();
        assert_eq!(n.actor.mean.params(), before.actor.mean.params());
        // entropy ascent raises every log-std
        assert!(n.actor.log_std.iter().zip(&before.actor.log_std).all(|(a, b)| a > b));
    }

    #[test]
    fn perfect_critic_has_zero_value_loss() {
        let cfg = AgentConfig {
            discount: 0.0,
            ..small_cfg()
        };
        let mut n = nets(3, 2, &cfg, 2);
        let s = vec![0.3, -0.1, 0.7];
        let v = n.value(&s).unwrap();
        let mut t = Trajectory::default();
        t.push(s, vec![0.0, 0.0], 0.0, v, v);
        let losses = a2c_update(&t, &mut n, &cfg).unwrap();
        assert!(losses.value_loss.abs() < 1e-24);
    }

    #[test]
    fn single_step_losses_match_hand_formulas() {
        let cfg = AgentConfig {
            discount: 0.9,
            normalize_advantages: false,
            entropy_coef: 0.01,
            ..small_cfg()
        };
        let mut n = nets(2, 1, &cfg, 3);
        let s = vec![0.4, -0.2];
        let a = vec![0.3];
        let v = n.value(&s).unwrap();
        let mu = n.actor.mean.forward(&s).unwrap()[0];
        let ls = n.actor.log_std[0];
        let r = 2.5;
        let mut t = Trajectory::default();
        t.push(s, a.clone(), 0.0, r, v);
        let losses = a2c_update(&t, &mut n, &cfg).unwrap();

        let lp = -ls - 0.5 * (2.0 * std::f64::consts::PI).ln() - (a[0] - mu).powi(2) / (2.0 * (2.0 * ls).exp());
        let adv = r - v;
        let entropy = ls + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((losses.value_loss - (v - r).powi(2)).abs() < 1e-12);
        assert!((losses.policy_loss - (-(lp * adv) - 0.01 * entropy)).abs() < 1e-12);
    }

    #[test]
    fn critic_fits_a_constant_reward() {
        let cfg = AgentConfig {
            discount: 0.99,
            ..small_cfg()
        };
        let mut n = nets(4, 2, &cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = n.value(&s).unwrap();
            let mut t = Trajectory::default();
            t.push(s, vec![0.0, 0.0], 0.0, 1.0, v);
            last = a2c_update(&t, &mut n, &cfg).unwrap().value_loss;
        }
        assert!(last < 1e-3, "value loss {last}");
    }

    #[test]
    fn ppo_ratio_one_gives_mean_advantage() {
        let adv = [0.5, -1.0, 2.0];
        let mean: f64 = adv.iter().map(|&a| ppo_surrogate(1.0, a, 0.2)).sum::<f64>() / 3.0;
        assert!((mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ppo_clip_arithmetic() {
        assert!((ppo_surrogate(2.0, 1.5, 0.2) - 1.2 * 1.5).abs() < 1e-15);
        assert!((ppo_surrogate(0.1, -1.0, 0.2) - (-0.8)).abs() < 1e-15);
        assert_eq!(ppo_surrogate(0.1, 1.0, 0.2), 0.1);
    }

    #[test]
    fn ppo_gradient_vanishes_on_clipped_samples() {
        // One-parameter policy: N(theta, 1); objective of one sample.
        let (a, old_lp, adv, eps) = (0.0, gaussian_log_prob(&[0.0], &[0.0], &[0.0]), 1.0, 0.2);
        let objective = |theta: f64| {
            let lp = gaussian_log_prob(&[theta], &[0.0], &[a]);
            ppo_surrogate((lp - old_lp).exp(), adv, eps)
        };
        let h = 1e-6;
        // theta chosen so that rho = exp(theta^2/2... ) -> here rho < 1, unclipped
        for &theta in &[0.3, -0.4] {
            let lp = gaussian_log_prob(&[theta], &[0.0], &[a]);
            let ratio = (lp - old_lp).exp();
            let (dm, _) = GaussianPolicy::log_prob_gradients(&[theta], &[0.0], &[a]);
            let analytic = ppo_surrogate_grad(ratio, adv, eps) * dm[0];
            let fd = (objective(theta + h) - objective(theta - h)) / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-6, "theta {theta}");
        }
        // negative advantage with rho well below 1 - eps: clipped, zero gradient
        let adv = -1.0;
        let theta = 1.5;
        let lp = gaussian_log_prob(&[theta], &[0.0], &[a]);
        let ratio = (lp - old_lp).exp();
        assert!(ratio < 1.0 - eps);
        let objective = |theta: f64| {
            let lp = gaussian_log_prob(&[theta], &[0.0], &[a]);
            ppo_surrogate((lp - old_lp).exp(), adv, eps)
        };
        let fd = (objective(theta + h) - objective(theta - h)) / (2.0 * h);
        assert_eq!(ppo_surrogate_grad(ratio, adv, eps), 0.0);
        assert!(fd.abs() < 1e-9);
    }

    #[test]
    fn random_act_respects_bounds() {
        let space = ActionSpace {
            low: vec![0.0, -1.0, 5.0],
            high: vec![0.0, 1.0, 6.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let a = random_act(&space, &mut rng);
            assert_eq!(a[0], 0.0);
            for i in 0..3 {
                assert!(a[i] >= space.low[i] && a[i] <= space.high[i]);
                sums[i] += a[i];
            }
        }
        for i in 1..3 {
            let half = 0.5 * (space.high[i] - space.low[i]);
            let se = half / 3f64.sqrt() / (n as f64).sqrt();
            let mid = 0.5 * (space.high[i] + space.low[i]);
            assert!((sums[i] / n as f64 - mid).abs() <= 3.0 * se);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(random_act(&space, &mut r1), random_act(&space, &mut r2));
    }

    #[test]
    fn zero_episodes_give_empty_curve() {
        let out = train(env(Protocol::Hssm, 5), &small_cfg(), 0, 1).unwrap();
        assert!(out.curve.is_empty());
        assert!(out.checkpoint.nets.is_some());
    }

    #[test]
    fn training_is_deterministic() {
        for algo in Algorithm::ALL {
            let cfg = AgentConfig {
                ppo_batch_episodes: 2,
                ..AgentConfig::for_algorithm(algo)
            };
            let cfg = AgentConfig { hidden: vec![8], ..cfg };
            let a = train(env(Protocol::Hssm, 5), &cfg, 4, 9).unwrap();
            let b = train(env(Protocol::Hssm, 5), &cfg, 4, 9).unwrap();
            assert_eq!(a.curve, b.curve, "{algo}");
            assert_eq!(a.checkpoint, b.checkpoint, "{algo}");
        }
    }

    #[test]
    fn transparent_gates_reproduce_a2c() {
        let base = AgentConfig {
            hidden: vec![8],
            ..AgentConfig::default()
        };
        let a2c = train(env(Protocol::Hssm, 10), &AgentConfig { algorithm: Algorithm::A2c, ..base.clone() }, 6, 3).unwrap();
        let shrl = train(
            env(Protocol::Hssm, 10),
            &AgentConfig {
                algorithm: Algorithm::Shrl,
                p_update: 1.0,
                ..base.clone()
            },
            6,
            3,
        )
        .unwrap();
        let sprl = train(
            env(Protocol::Hssm, 10),
            &AgentConfig {
                algorithm: Algorithm::Sprl,
                sprl_period: 1,
                ..base.clone()
            },
            6,
            3,
        )
        .unwrap();
        assert_eq!(a2c.curve, shrl.curve);
        assert_eq!(a2c.curve, sprl.curve);
        assert_eq!(a2c.checkpoint.nets, shrl.checkpoint.nets);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let out = train(env(Protocol::Hssm, 5), &small_cfg(), 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            let n = c.nets.as_ref().unwrap();
            n.actor.mean.params().iter().chain(n.critic.params()).map(|p| p.to_bits()).collect()
        };
        assert_eq!(bits(&back), bits(&out.checkpoint));
    }

    #[test]
    fn checkpoint_dimension_mismatch_is_rejected() {
        let out = train(env(Protocol::Hssm, 5), &small_cfg(), 0, 4).unwrap();
        let pass = env(Protocol::Pass, 5);
        assert!(matches!(Agent::from_checkpoint(&pass, out.checkpoint), Err(Error::Shape { .. })));
    }

    #[test]
    fn evaluation_actions_are_feasible() {
        for algo in [Algorithm::Shrl, Algorithm::Random] {
            let cfg = AgentConfig {
                hidden: vec![8],
                ..AgentConfig::for_algorithm(algo)
            };
            let out = train(env(Protocol::Hssm, 5), &cfg, 2, 5).unwrap();
            let ev = evaluate(env(Protocol::Hssm, 5), &out.checkpoint, 3, 5).unwrap();
            assert!(ev.all_feasible);
            assert!(ev.mean_sum_rate >= 0.0 && ev.mean_illumination >= 0.0);
        }
    }

    #[test]
    fn frozen_hysteresis_fixes_executed_activation() {
        let cfg = AgentConfig {
            algorithm: Algorithm::Shrl,
            p_update: 0.0,
            hidden: vec![8],
            ..AgentConfig::default()
        };
        let mut e = prepare_env(env(Protocol::Hssm, 20), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agent = Agent::new(&e, &cfg, &mut rng).unwrap();
        let c = e.config().clone();
        let mut state = e.reset(make_scenario(crate::env::ScenarioKind::Sparse, &c, 1), 1).unwrap().to_vec();
        for _ in 0..20 {
            let d = agent.act(&state, &mut rng, false, true).unwrap();
            let out = e.step(&d.action).unwrap();
            assert_eq!(out.executed.activation, vec![1.0; 3]);
            state = out.state.to_vec();
        }
    }
}
