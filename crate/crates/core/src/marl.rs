//! Off-policy actor-critic training with centralized critic and
//! decentralized, role-shared actors.
//!
//! Every epoch runs a fixed number of episodes (optionally on several worker
//! threads), appends the resulting transitions to a staleness-bounded replay
//! buffer, samples a batch, fuses local and global rewards, normalizes them
//! per role, takes one critic step and then one actor step per policy.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, legal_mask, mask_from_observation, masked_softmax, sample_index, Action, AgentError, Observation, RoleMap,
    RoleTag, ADMIT,
};
use crate::metrics::{EpisodeRecord, MetricsError};
use crate::policy::{
    adam_step, forward_actor, forward_critic, grad_log_prob, grad_value, init_params, AdamState, LrSchedule,
    NetParams, PolicyError,
};
use crate::sim::{self, ClusterState, SimError};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("actor for {expected} received a {got} transition")]
    RoleMismatch { expected: RoleTag, got: RoleTag },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha_fusion: f64,
    pub eps_norm: f64,
    /// Transitions sampled per agent per update.
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub staleness_epochs: usize,
    pub total_epochs: usize,
    pub episodes_per_epoch: usize,
    pub updates_per_epoch: usize,
    pub workers: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub lr_initial: f64,
    pub lr_floor: f64,
    pub info_loss_rate: f64,
    pub per_role_policies: bool,
    pub normalize_rewards: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha_fusion: 0.5,
            eps_norm: 1e-8,
            batch_size: 64,
            buffer_capacity: 8192,
            staleness_epochs: 5,
            total_epochs: 500,
            episodes_per_epoch: 1,
            updates_per_epoch: 1,
            workers: 1,
            seed: 0,
            hidden: vec![64, 64],
            lr_initial: 1e-4,
            lr_floor: 1e-5,
            info_loss_rate: 0.0,
            per_role_policies: true,
            normalize_rewards: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MarlError> {
        let bad = |m: &str| Err(MarlError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha_fusion) {
            return bad("alpha_fusion must be in [0, 1]");
        }
        if self.eps_norm.is_nan() || self.eps_norm <= 0.0 {
            return bad("eps_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.info_loss_rate) {
            return bad("info_loss_rate must be in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.episodes_per_epoch == 0 {
            return bad("batch_size, buffer_capacity and episodes_per_epoch must be positive");
        }
        if self.staleness_epochs == 0 || self.updates_per_epoch == 0 || self.workers == 0 {
            return bad("staleness_epochs, updates_per_epoch and workers must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and positive");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return bad("need 0 < lr_floor <= lr_initial");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            floor: self.lr_floor,
            total_epochs: self.total_epochs.max(1),
        }
    }
}

pub fn shape_reward(local: f64, global_signal: f64, alpha_fusion: f64) -> f64 {
    alpha_fusion * local + (1.0 - alpha_fusion) * global_signal
}

/// `(r − μ)/(σ + ε)` with population mean and standard deviation.
pub fn normalize_rewards(rewards: &[f64], eps_norm: f64) -> Result<Vec<f64>, MarlError> {
    if rewards.is_empty() {
        return Err(MarlError::EmptyBatch);
    }
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let sigma = (rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mu) / (sigma + eps_norm)).collect())
}

pub fn advantage(r: f64, v_t: f64, v_t1: f64, gamma: f64, done: bool) -> f64 {
    let bootstrap = if done { 0.0 } else { gamma * v_t1 };
    r + bootstrap - v_t
}

/// Mixes a base seed with a path of indices (SplitMix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub agent_id: usize,
    pub role: RoleTag,
    /// Actor-layout input (features and staleness flags, padded for a
    /// shared policy).
    pub observation: Vec<f64>,
    pub global: Vec<f64>,
    /// Mask in actor layout.
    pub mask: Vec<bool>,
    /// Action index in actor layout.
    pub action: usize,
    pub log_prob: f64,
    pub local_reward: f64,
    pub global_signal: f64,
    pub next_observation: Vec<f64>,
    pub next_global: Vec<f64>,
    pub done: bool,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    staleness_epochs: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, staleness_epochs: usize) -> Self {
        Self {
            items: VecDeque::new(),
            capacity,
            staleness_epochs,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Drops transitions collected `staleness_epochs` or more epochs before
    /// `current_epoch`.
    pub fn evict_stale(&mut self, current_epoch: usize) {
        while self
            .items
            .front()
            .is_some_and(|t| current_epoch - t.epoch.min(current_epoch) >= self.staleness_epochs)
        {
            self.items.pop_front();
        }
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    HracOnly,
    LgrsOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::HracOnly, Variant::LgrsOnly, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "BASELINE",
            Variant::HracOnly => "+HRAC",
            Variant::LgrsOnly => "+LGRS",
            Variant::Full => "FULL",
        }
    }
}

/// Switches the role-partitioned policies and the reward shaping on or off.
pub fn ablation_variant(config: &TrainConfig, variant: Variant) -> TrainConfig {
    let mut c = config.clone();
    let (roles, shaping) = match variant {
        Variant::Baseline => (false, false),
        Variant::HracOnly => (true, false),
        Variant::LgrsOnly => (false, true),
        Variant::Full => return c,
    };
    c.per_role_policies = roles;
    if !shaping {
        c.alpha_fusion = 1.0;
        c.normalize_rewards = false;
    }
    c
}

/// How actor networks map onto roles. A shared actor sees zero-padded
/// inputs and acts in the union of the role action spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorLayout {
    pub shared: bool,
    pub role_inputs: [usize; 3],
    pub role_actions: [usize; 3],
    pub shared_input: usize,
    pub offsets: [usize; 3],
    pub shared_actions: usize,
}

impl ActorLayout {
    pub fn new(role_map: &RoleMap, shared: bool) -> Self {
        let role_inputs = RoleTag::ALL.map(|t| 2 * role_map.role(t).observation_size);
        let role_actions = RoleTag::ALL.map(|t| role_map.role(t).action_space_size);
        let mut offsets = [0; 3];
        let mut acc = 0;
        for (i, n) in role_actions.iter().enumerate() {
            offsets[i] = acc;
            acc += n;
        }
        Self {
            shared,
            role_inputs,
            role_actions,
            shared_input: *role_inputs.iter().max().expect("three roles"),
            offsets,
            shared_actions: acc,
        }
    }

    pub fn n_actors(&self) -> usize {
        if self.shared {
            1
        } else {
            3
        }
    }

    pub fn actor_index(&self, role: RoleTag) -> usize {
        if self.shared {
            0
        } else {
            role.index()
        }
    }

    pub fn actor_name(&self, k: usize) -> &'static str {
        if self.shared {
            "shared"
        } else {
            RoleTag::ALL[k].name()
        }
    }

    pub fn architecture(&self, k: usize, hidden: &[usize]) -> Vec<usize> {
        let (i, o) = if self.shared {
            (self.shared_input, self.shared_actions)
        } else {
            (self.role_inputs[k], self.role_actions[k])
        };
        let mut a = vec![i];
        a.extend_from_slice(hidden);
        a.push(o);
        a
    }

    pub fn input(&self, obs: &Observation) -> Vec<f64> {
        let mut v = obs.input();
        if self.shared {
            v.resize(self.shared_input, 0.0);
        }
        v
    }

    pub fn mask(&self, role: RoleTag, role_mask: &[bool]) -> Vec<bool> {
        if !self.shared {
            return role_mask.to_vec();
        }
        let mut m = vec![false; self.shared_actions];
        let off = self.offsets[role.index()];
        m[off..off + role_mask.len()].copy_from_slice(role_mask);
        m
    }

    pub fn role_action(&self, role: RoleTag, actor_action: usize) -> usize {
        if self.shared {
            actor_action - self.offsets[role.index()]
        } else {
            actor_action
        }
    }
}

/// Actor networks plus the centralized critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policies {
    pub layout: ActorLayout,
    pub actors: Vec<NetParams>,
    pub critic: NetParams,
}

impl Policies {
    pub fn new(config: &TrainConfig, role_map: &RoleMap, global_dim: usize) -> Result<Self, MarlError> {
        let layout = ActorLayout::new(role_map, !config.per_role_policies);
        let actors = (0..layout.n_actors())
            .map(|k| init_params(&layout.architecture(k, &config.hidden), derive_seed(config.seed, &[1, k as u64])))
            .collect::<Result<Vec<_>, _>>()?;
        let mut critic_arch = vec![global_dim];
        critic_arch.extend_from_slice(&config.hidden);
        critic_arch.push(1);
        let critic = init_params(&critic_arch, derive_seed(config.seed, &[2]))?;
        Ok(Self { layout, actors, critic })
    }

    pub fn actor(&self, role: RoleTag) -> &NetParams {
        &self.actors[self.layout.actor_index(role)]
    }
}

/// Who picks actions during a rollout.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Learned(&'a Policies),
    /// Uniform over the actions the agent believes legal.
    Random,
    /// First-fit placement, always admit, full-rate io.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeOutput {
    pub transitions: Vec<Transition>,
    pub record: EpisodeRecord,
    /// Event log CSV, when requested.
    pub log: Option<String>,
}

struct Chosen {
    action: Action,
    input: Vec<f64>,
    mask: Vec<bool>,
    actor_action: usize,
    log_prob: f64,
}

fn choose<R: Rng + ?Sized>(
    controller: &Controller,
    state: &ClusterState,
    role_map: &RoleMap,
    agent: agents::AgentId,
    obs: &Observation,
    rng: &mut R,
) -> Result<Chosen, MarlError> {
    let role = role_map.role_of(agent)?;
    match controller {
        Controller::Learned(p) => {
            let role_mask = mask_from_observation(&role, obs);
            let input = p.layout.input(obs);
            let mask = p.layout.mask(role.tag, &role_mask);
            let logits = forward_actor(p.actor(role.tag), &input)?;
            let probs = masked_softmax(&logits, &mask)?;
            let k = sample_index(&probs, rng);
            Ok(Chosen {
                action: Action {
                    role: role.tag,
                    index: p.layout.role_action(role.tag, k),
                },
                input,
                mask,
                actor_action: k,
                log_prob: probs[k].ln(),
            })
        }
        Controller::Random => {
            let mask = mask_from_observation(&role, obs);
            let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let index = legal[rng.random_range(0..legal.len())];
            Ok(Chosen {
                action: Action { role: role.tag, index },
                input: Vec::new(),
                mask: Vec::new(),
                actor_action: index,
                log_prob: -(legal.len() as f64).ln(),
            })
        }
        Controller::Greedy => {
            let index = match role.tag {
                RoleTag::Scheduler => {
                    let mask = legal_mask(state, agent, role_map)?;
                    mask.iter().position(|&ok| ok).expect("defer is always legal")
                }
                RoleTag::Compute => ADMIT,
                RoleTag::Storage => agents::THROTTLE_LEVELS.len() - 1,
            };
            Ok(Chosen {
                action: Action { role: role.tag, index },
                input: Vec::new(),
                mask: Vec::new(),
                actor_action: index,
                log_prob: 0.0,
            })
        }
    }
}

/// Runs one episode to completion. Transitions are only kept for learned
/// controllers when `collect` is set.
pub fn run_episode(
    trace: &Arc<Trace>,
    role_map: &Arc<RoleMap>,
    controller: &Controller,
    info_loss_rate: f64,
    seed: u64,
    epoch: usize,
    collect: bool,
) -> Result<EpisodeOutput, MarlError> {
    episode(trace, role_map, controller, info_loss_rate, seed, epoch, collect, false)
}

/// [`run_episode`] without transitions, keeping the simulator's event log.
pub fn run_logged_episode(
    trace: &Arc<Trace>,
    role_map: &Arc<RoleMap>,
    controller: &Controller,
    info_loss_rate: f64,
    seed: u64,
) -> Result<EpisodeOutput, MarlError> {
    episode(trace, role_map, controller, info_loss_rate, seed, 0, false, true)
}

#[allow(clippy::too_many_arguments)]
fn episode(
    trace: &Arc<Trace>,
    role_map: &Arc<RoleMap>,
    controller: &Controller,
    info_loss_rate: f64,
    seed: u64,
    epoch: usize,
    collect: bool,
    log: bool,
) -> Result<EpisodeOutput, MarlError> {
    let mut state = ClusterState::new(Arc::clone(trace), Arc::clone(role_map), derive_seed(seed, &[0]))?;
    if log {
        state.enable_log();
    }
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut obs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let collect = collect && matches!(controller, Controller::Learned(_));
    let layout = match controller {
        Controller::Learned(p) => Some(&p.layout),
        _ => None,
    };
    let agents: Vec<_> = role_map.agents().collect();
    let mut obs = agents
        .iter()
        .map(|&a| state.observe_local(a, info_loss_rate, &mut obs_rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut transitions = Vec::new();
    loop {
        let global = state.observe_global();
        let chosen = agents
            .iter()
            .map(|&a| choose(controller, &state, role_map, a, &obs[a.0], &mut act_rng))
            .collect::<Result<Vec<_>, _>>()?;
        let joint: Vec<Action> = chosen.iter().map(|c| c.action).collect();
        let out = state.step(&joint)?;
        let next_obs = agents
            .iter()
            .map(|&a| state.observe_local(a, info_loss_rate, &mut obs_rng))
            .collect::<Result<Vec<_>, _>>()?;
        if collect {
            let layout = layout.expect("learned");
            let next_global = state.observe_global();
            for (c, &a) in chosen.into_iter().zip(&agents) {
                transitions.push(Transition {
                    agent_id: a.0,
                    role: c.action.role,
                    observation: c.input,
                    global: global.clone(),
                    mask: c.mask,
                    action: c.actor_action,
                    log_prob: c.log_prob,
                    local_reward: out.local_rewards[a.0],
                    global_signal: out.global_signal,
                    next_observation: layout.input(&next_obs[a.0]),
                    next_global: next_global.clone(),
                    done: out.done,
                    epoch,
                });
            }
        }
        obs = next_obs;
        if out.done {
            break;
        }
    }
    let log = log.then(|| state.log_csv());
    Ok(EpisodeOutput {
        transitions,
        record: state.into_record(),
        log,
    })
}

/// One critic regression sample.
pub struct CriticSample<'a> {
    pub global: &'a [f64],
    pub reward: f64,
    pub next_global: &'a [f64],
    pub done: bool,
}

/// One Adam step on the mean squared TD error with a fixed bootstrap
/// target. Returns the loss before the step.
pub fn update_critic(
    critic: &mut NetParams,
    adam: &mut AdamState,
    batch: &[CriticSample],
    gamma: f64,
    lr: f64,
) -> Result<f64, MarlError> {
    if batch.is_empty() {
        return Err(MarlError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; critic.n_params()];
    let mut loss = 0.0;
    for s in batch {
        let target = s.reward
            + if s.done {
                0.0
            } else {
                gamma * forward_critic(critic, s.next_global)?
            };
        let (g, v) = grad_value(critic, s.global)?;
        let err = v - target;
        loss += err * err / n;
        let k = 2.0 * err / n;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += k * b);
    }
    if !loss.is_finite() {
        return Err(MarlError::NonFinite("critic loss"));
    }
    adam_step(critic, adam, &grad, lr)?;
    Ok(loss)
}

/// One policy-gradient sample.
pub struct ActorSample<'a> {
    pub role: RoleTag,
    pub input: &'a [f64],
    pub mask: &'a [bool],
    pub action: usize,
    pub advantage: f64,
}

/// One Adam ascent step on the mean of `A · ∇ log π`. `role` restricts the
/// batch to one role; `None` is used by a shared policy. Returns the
/// surrogate loss `−mean(A · log π)` before the step.
pub fn update_actor(
    role: Option<RoleTag>,
    actor: &mut NetParams,
    adam: &mut AdamState,
    batch: &[ActorSample],
    lr: f64,
) -> Result<f64, MarlError> {
    if batch.is_empty() {
        return Err(MarlError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; actor.n_params()];
    let mut loss = 0.0;
    for s in batch {
        if let Some(expected) = role {
            if s.role != expected {
                return Err(MarlError::RoleMismatch { expected, got: s.role });
            }
        }
        if s.advantage == 0.0 {
            continue;
        }
        let (g, lp) = grad_log_prob(actor, s.input, s.mask, s.action)?;
        loss -= s.advantage * lp / n;
        // descent on the negated objective
        let k = -s.advantage / n;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += k * b);
    }
    adam_step(actor, adam, &grad, lr)?;
    Ok(loss)
}

pub const CURVE_HEADER: &str = "epoch,lr,mean_utilization,mean_latency_s,actor_loss,critic_loss,episodes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub lr: f64,
    pub mean_utilization: f64,
    pub mean_latency_s: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub episodes: usize,
}

impl CurveRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.mean_utilization,
            opt(self.mean_latency_s),
            opt(self.actor_loss),
            opt(self.critic_loss),
            self.episodes
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<Self, String> {
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(format!("expected 7 fields, found {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let int = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            epoch: int(f[0])?,
            lr: num(f[1])?,
            mean_utilization: num(f[2])?,
            mean_latency_s: opt(f[3])?,
            actor_loss: opt(f[4])?,
            critic_loss: opt(f[5])?,
            episodes: int(f[6])?,
        })
    }
}

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in curve {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err("missing learning-curve header".into());
    }
    lines.filter(|l| !l.is_empty()).map(CurveRow::parse_csv_row).collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub architecture: Vec<usize>,
    pub weights: Vec<f64>,
}

impl NetCheckpoint {
    fn from_params(p: &NetParams) -> Self {
        Self {
            architecture: p.sizes.clone(),
            weights: p.flat(),
        }
    }

    fn to_params(&self) -> Result<NetParams, MarlError> {
        let mut p = init_params(&self.architecture, 0)?;
        p.set_flat(&self.weights)
            .map_err(|e| MarlError::Checkpoint(format!("weights do not fit {:?}: {e}", self.architecture)))?;
        if !p.is_finite() {
            return Err(MarlError::Checkpoint("non-finite weights".into()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub actors: BTreeMap<String, NetCheckpoint>,
    pub critic: NetCheckpoint,
    pub actor_adam: BTreeMap<String, AdamState>,
    pub critic_adam: AdamState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, MarlError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MarlError> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(MarlError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    /// Rebuilds policies and optimizer states, checking every shape against
    /// the layout implied by `config` and `role_map`.
    pub fn restore(
        &self,
        config: &TrainConfig,
        role_map: &RoleMap,
        global_dim: usize,
    ) -> Result<(Policies, Vec<AdamState>, AdamState), MarlError> {
        let mut p = Policies::new(config, role_map, global_dim)?;
        let mut adams = Vec::new();
        for k in 0..p.layout.n_actors() {
            let name = p.layout.actor_name(k);
            let net = self
                .actors
                .get(name)
                .ok_or_else(|| MarlError::Checkpoint(format!("missing actor {name}")))?;
            if net.architecture != p.actors[k].sizes {
                return Err(MarlError::Checkpoint(format!(
                    "actor {name} architecture {:?}, expected {:?}",
                    net.architecture, p.actors[k].sizes
                )));
            }
            p.actors[k] = net.to_params()?;
            let adam = self.actor_adam.get(name).cloned().unwrap_or_else(|| AdamState::new(p.actors[k].n_params()));
            check_adam(&adam, p.actors[k].n_params())?;
            adams.push(adam);
        }
        if self.critic.architecture != p.critic.sizes {
            return Err(MarlError::Checkpoint("critic architecture mismatch".into()));
        }
        p.critic = self.critic.to_params()?;
        check_adam(&self.critic_adam, p.critic.n_params())?;
        Ok((p, adams, self.critic_adam.clone()))
    }
}

fn check_adam(a: &AdamState, n: usize) -> Result<(), MarlError> {
    if a.m.len() != n || a.v.len() != n {
        return Err(MarlError::Checkpoint(format!("optimizer state has {} entries, expected {n}", a.m.len())));
    }
    Ok(())
}

/// Everything besides the checkpoint needed to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeState {
    pub buffer: ReplayBuffer,
    pub curve: Vec<CurveRow>,
    pub update_durations_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub checkpoint: Checkpoint,
    pub policies: Policies,
    pub curve: Vec<CurveRow>,
    pub update_durations_s: Vec<f64>,
}

pub struct Trainer {
    config: TrainConfig,
    trace: Arc<Trace>,
    role_map: Arc<RoleMap>,
    policies: Policies,
    actor_adam: Vec<AdamState>,
    critic_adam: AdamState,
    epoch: usize,
    buffer: ReplayBuffer,
    curve: Vec<CurveRow>,
    update_durations_s: Vec<f64>,
    pool: Option<rayon::ThreadPool>,
}

fn global_dim_of(trace: &Trace, role_map: &RoleMap) -> usize {
    sim::global_dim(role_map.machines().len(), trace.tenant_ids().len())
}

impl Trainer {
    pub fn new(config: TrainConfig, trace: Arc<Trace>, role_map: Arc<RoleMap>) -> Result<Self, MarlError> {
        config.validate()?;
        // fail early on traces the simulator cannot run
        ClusterState::new(Arc::clone(&trace), Arc::clone(&role_map), 0)?;
        let policies = Policies::new(&config, &role_map, global_dim_of(&trace, &role_map))?;
        let actor_adam = policies.actors.iter().map(|a| AdamState::new(a.n_params())).collect();
        let critic_adam = AdamState::new(policies.critic.n_params());
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| MarlError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity, config.staleness_epochs),
            config,
            trace,
            role_map,
            policies,
            actor_adam,
            critic_adam,
            epoch: 0,
            curve: Vec::new(),
            update_durations_s: Vec::new(),
            pool,
        })
    }

    /// Restores a trainer from a checkpoint and the matching resume state.
    pub fn resume(
        config: TrainConfig,
        trace: Arc<Trace>,
        role_map: Arc<RoleMap>,
        checkpoint: &Checkpoint,
        state: ResumeState,
    ) -> Result<Self, MarlError> {
        let mut t = Self::new(config, trace, role_map)?;
        let (p, a, c) = checkpoint.restore(&t.config, &t.role_map, global_dim_of(&t.trace, &t.role_map))?;
        if state.curve.len() != checkpoint.epoch {
            return Err(MarlError::Checkpoint("curve length does not match checkpoint epoch".into()));
        }
        t.policies = p;
        t.actor_adam = a;
        t.critic_adam = c;
        t.epoch = checkpoint.epoch;
        t.buffer = state.buffer;
        t.buffer.capacity = t.config.buffer_capacity;
        t.buffer.staleness_epochs = t.config.staleness_epochs;
        t.curve = state.curve;
        t.update_durations_s = state.update_durations_s;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policies(&self) -> &Policies {
        &self.policies
    }

    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn update_durations_s(&self) -> &[f64] {
        &self.update_durations_s
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let l = &self.policies.layout;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            actors: (0..l.n_actors())
                .map(|k| (l.actor_name(k).to_string(), NetCheckpoint::from_params(&self.policies.actors[k])))
                .collect(),
            critic: NetCheckpoint::from_params(&self.policies.critic),
            actor_adam: (0..l.n_actors())
                .map(|k| (l.actor_name(k).to_string(), self.actor_adam[k].clone()))
                .collect(),
            critic_adam: self.critic_adam.clone(),
        }
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            buffer: self.buffer.clone(),
            curve: self.curve.clone(),
            update_durations_s: self.update_durations_s.clone(),
        }
    }

    fn collect(&self, epoch: usize) -> Result<Vec<EpisodeOutput>, MarlError> {
        let controller = Controller::Learned(&self.policies);
        let run = |k: usize| {
            run_episode(
                &self.trace,
                &self.role_map,
                &controller,
                self.config.info_loss_rate,
                derive_seed(self.config.seed, &[3, epoch as u64, k as u64]),
                epoch,
                true,
            )
        };
        let n = self.config.episodes_per_epoch;
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(run).collect()),
            None => (0..n).map(run).collect(),
        }
    }

    /// Runs one epoch: collect, store, update, record.
    pub fn run_epoch(&mut self) -> Result<&CurveRow, MarlError> {
        let epoch = self.epoch;
        let lr = self.config.schedule().lr_at(epoch);
        let outputs = self.collect(epoch)?;

        let mut utils = Vec::with_capacity(outputs.len());
        let mut latencies = Vec::new();
        for o in outputs {
            let r = &o.record;
            if !r.utilization.is_empty() {
                utils.push(r.utilization.iter().sum::<f64>() / r.utilization.len() as f64);
            }
            latencies.extend_from_slice(&r.latencies_s);
            for t in o.transitions {
                self.buffer.push(t);
            }
        }
        self.buffer.evict_stale(epoch);

        let started = Instant::now();
        let mut losses = None;
        for u in 0..self.config.updates_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[4, epoch as u64, u as u64]));
            losses = self.update(lr, &mut rng)?.or(losses);
        }
        self.update_durations_s.push(started.elapsed().as_secs_f64());

        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.curve.push(CurveRow {
            epoch,
            lr,
            mean_utilization: mean(&utils).unwrap_or(0.0),
            mean_latency_s: mean(&latencies),
            actor_loss: losses.map(|l| l.0),
            critic_loss: losses.map(|l| l.1),
            episodes: self.config.episodes_per_epoch,
        });
        self.epoch += 1;
        Ok(self.curve.last().expect("just pushed"))
    }

    /// Critic step then one step per actor on a fresh batch. Returns
    /// (actor loss, critic loss).
    fn update(&mut self, lr: f64, rng: &mut ChaCha8Rng) -> Result<Option<(f64, f64)>, MarlError> {
        let n = self.config.batch_size * self.role_map.n_agents();
        let batch = self.buffer.sample(n, rng);
        if batch.is_empty() {
            return Ok(None);
        }
        let cfg = &self.config;
        let mut rewards: Vec<f64> = batch
            .iter()
            .map(|t| shape_reward(t.local_reward, t.global_signal, cfg.alpha_fusion))
            .collect();
        if cfg.normalize_rewards {
            for tag in RoleTag::ALL {
                let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].role == tag).collect();
                if idx.is_empty() {
                    continue;
                }
                let raw: Vec<f64> = idx.iter().map(|&i| rewards[i]).collect();
                for (&i, r) in idx.iter().zip(normalize_rewards(&raw, cfg.eps_norm)?) {
                    rewards[i] = r;
                }
            }
        }

        let critic_batch: Vec<CriticSample> = batch
            .iter()
            .zip(&rewards)
            .map(|(t, &r)| CriticSample {
                global: &t.global,
                reward: r,
                next_global: &t.next_global,
                done: t.done,
            })
            .collect();
        let critic_loss = update_critic(&mut self.policies.critic, &mut self.critic_adam, &critic_batch, cfg.gamma, lr)?;

        let critic = &self.policies.critic;
        let advantages = batch
            .iter()
            .zip(&rewards)
            .map(|(t, &r)| {
                let v_t = forward_critic(critic, &t.global)?;
                let v_t1 = if t.done { 0.0 } else { forward_critic(critic, &t.next_global)? };
                Ok(advantage(r, v_t, v_t1, cfg.gamma, t.done))
            })
            .collect::<Result<Vec<f64>, MarlError>>()?;

        let layout = self.policies.layout.clone();
        let mut actor_loss = 0.0;
        for k in 0..layout.n_actors() {
            let samples: Vec<ActorSample> = batch
                .iter()
                .zip(&advantages)
                .filter(|(t, _)| layout.actor_index(t.role) == k)
                .map(|(t, &a)| ActorSample {
                    role: t.role,
                    input: &t.observation,
                    mask: &t.mask,
                    action: t.action,
                    advantage: a,
                })
                .collect();
            if samples.is_empty() {
                continue;
            }
            let role = (!layout.shared).then(|| RoleTag::ALL[k]);
            let l = update_actor(role, &mut self.policies.actors[k], &mut self.actor_adam[k], &samples, lr)?;
            actor_loss += l * samples.len() as f64 / batch.len() as f64;
        }
        Ok(Some((actor_loss, critic_loss)))
    }

    /// Trains up to `epochs` more epochs (bounded by the configured total).
    pub fn run_for(&mut self, epochs: usize) -> Result<(), MarlError> {
        for _ in 0..epochs {
            if self.is_finished() {
                break;
            }
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn into_artifacts(self) -> RunArtifacts {
        RunArtifacts {
            checkpoint: self.checkpoint(),
            policies: self.policies,
            curve: self.curve,
            update_durations_s: self.update_durations_s,
        }
    }
}

pub fn train(config: &TrainConfig, trace: &Trace, role_map: &RoleMap) -> Result<RunArtifacts, MarlError> {
    let mut t = Trainer::new(config.clone(), Arc::new(trace.clone()), Arc::new(role_map.clone()))?;
    t.run_for(config.total_epochs)?;
    Ok(t.into_artifacts())
}

/// Runs `seeds.len()` evaluation episodes and returns their records in seed
/// order.
pub fn evaluate(
    controller: &Controller,
    trace: &Trace,
    role_map: &RoleMap,
    info_loss_rate: f64,
    seeds: &[u64],
) -> Result<Vec<EpisodeRecord>, MarlError> {
    let trace = Arc::new(trace.clone());
    let rm = Arc::new(role_map.clone());
    seeds
        .iter()
        .map(|&s| run_episode(&trace, &rm, controller, info_loss_rate, s, 0, false).map(|o| o.record))
        .collect()
}
