//! The four learners: DQN, DQN with reward shaping, Deep TAMER and DQN-TAMER.
//!
//! All of them share one step loop ([`Agent::run_step`]). What differs is
//! which value models exist and how feedback is consumed:
//!
//! | kind          | Q̂ (env reward) | Ĥ (human feedback) | feedback use              |
//! |---------------|----------------|---------------------|---------------------------|
//! | `dqn`         | yes            | no                  | ignored                   |
//! | `dqn-shaping` | yes            | no                  | added to the env reward   |
//! | `deep-tamer`  | no             | yes                 | credit window, Ĥ updates  |
//! | `dqn-tamer`   | yes            | yes                 | both, acting on αq·Q̂+αh·Ĥ |
//!
//! DQN-TAMER reduces to DQN when `alpha_h = 0` and to Deep TAMER when
//! `alpha_q = 0`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::nn::{Gradients, Network, RmsProp, Scratch};
use crate::observer::{DelayDistribution, FeedbackEvent, FeedbackSource, StepStamp, TransitionNotice};
use crate::rng::{derive_seed, stream_rng, SimRng, Stream};
use crate::{Error, Result};

pub type State = Arc<[f64]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Dqn,
    DqnShaping,
    DeepTamer,
    DqnTamer,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Dqn, AgentKind::DqnShaping, AgentKind::DeepTamer, AgentKind::DqnTamer];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::DqnShaping => "dqn-shaping",
            AgentKind::DeepTamer => "deep-tamer",
            AgentKind::DqnTamer => "dqn-tamer",
        }
    }

    pub fn uses_q(self) -> bool {
        self != AgentKind::DeepTamer
    }

    pub fn uses_h(self) -> bool {
        matches!(self, AgentKind::DeepTamer | AgentKind::DqnTamer)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub alpha_q: f64,
    pub alpha_h: f64,
    /// Multiplicative decay of `alpha_h` per environment step.
    pub alpha_h_decay: f64,
    pub epsilon_start: f64,
    /// Subtracted from epsilon every environment step.
    pub epsilon_decrement: f64,
    pub epsilon_floor: f64,
    /// Q and global-Ĥ minibatch updates happen every this many steps.
    pub update_interval: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Target network is synced every this many Q updates.
    pub target_sync_interval: u64,
    /// Weight of human feedback added to the env reward by the shaping agent.
    pub shaping_weight: f64,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    /// Weight each credited (s, a) by its assumed-delay probability instead of uniformly.
    pub weighted_credit: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.95,
            alpha_q: 1.0,
            alpha_h: 1.0,
            alpha_h_decay: 0.9999,
            epsilon_start: 0.3,
            epsilon_decrement: 0.001,
            epsilon_floor: 0.1,
            update_interval: 4,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync_interval: 100,
            shaping_weight: 1.0,
            hidden_dim: crate::nn::DEFAULT_HIDDEN,
            learning_rate: crate::nn::DEFAULT_LEARNING_RATE,
            rms_decay: crate::nn::DEFAULT_RMS_DECAY,
            rms_epsilon: crate::nn::DEFAULT_RMS_EPSILON,
            weighted_credit: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must be in [0,1), got {}", self.gamma));
        }
        if !(self.alpha_q >= 0.0 && self.alpha_h >= 0.0) {
            return fail("alpha_q and alpha_h must be nonnegative".into());
        }
        if !(self.alpha_h_decay > 0.0 && self.alpha_h_decay <= 1.0) {
            return fail(format!("alpha_h_decay must be in (0,1], got {}", self.alpha_h_decay));
        }
        if !(0.0 <= self.epsilon_floor && self.epsilon_floor <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return fail("need 0 <= epsilon_floor <= epsilon_start <= 1".into());
        }
        if self.epsilon_decrement < 0.0 {
            return fail("epsilon_decrement must be nonnegative".into());
        }
        if self.update_interval == 0 || self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_interval == 0 {
            return fail("intervals, batch size and replay capacity must be positive".into());
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub reward: f64,
    pub next_state: State,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    inserted: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            inserted: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = item;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R, n: usize) -> Vec<&'a T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

/// A human-labelled (state, action, feedback) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSample {
    pub state: State,
    pub action: usize,
    pub feedback: f64,
    /// Loss weight; 1 unless probability-weighted credit is enabled.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEntry {
    pub state: State,
    pub action: usize,
    pub step: u64,
}

/// The most recent (state, action) pairs of the current episode that a
/// delayed feedback may refer to.
#[derive(Debug, Clone)]
pub struct CreditWindow {
    entries: VecDeque<WindowEntry>,
    capacity: usize,
}

impl CreditWindow {
    pub fn for_delays(assumed: &DelayDistribution) -> Self {
        Self::with_capacity(assumed.max_delay() + 1)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        CreditWindow {
            entries: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, state: State, action: usize, step: u64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(WindowEntry { state, action, step });
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, step: u64) -> Option<&WindowEntry> {
        self.entries.iter().find(|e| e.step == step)
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One uniform draw decides exploration; a second picks the random action.
pub fn epsilon_greedy<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    if u < epsilon {
        rng.gen_range(0..values.len())
    } else {
        argmax(values)
    }
}

pub fn select_action_dqn<R: Rng + ?Sized>(qnet: &Network, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    Ok(epsilon_greedy(&qnet.forward(obs)?, epsilon, rng))
}

pub fn select_action_tamer<R: Rng + ?Sized>(hnet: &Network, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    Ok(epsilon_greedy(&hnet.forward(obs)?, epsilon, rng))
}

/// ε-greedy over `alpha_q * Q(s,·) + alpha_h * H(s,·)`.
pub fn select_action_dqntamer<R: Rng + ?Sized>(
    qnet: &Network,
    hnet: &Network,
    obs: &[f64],
    alpha_q: f64,
    alpha_h: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if alpha_q < 0.0 || alpha_h < 0.0 {
        return Err(Error::Contract("alpha weights must be nonnegative".into()));
    }
    let q = qnet.forward(obs)?;
    let h = hnet.forward(obs)?;
    if q.len() != h.len() {
        return Err(Error::Contract("Q and H networks disagree on the action count".into()));
    }
    let combined: Vec<f64> = q.iter().zip(&h).map(|(q, h)| alpha_q * q + alpha_h * h).collect();
    Ok(epsilon_greedy(&combined, epsilon, rng))
}

pub fn dqn_td_target(t: &Transition, target_net: &Network, gamma: f64) -> Result<f64> {
    if t.done {
        return Ok(t.reward);
    }
    let next = target_net.forward(&t.next_state)?;
    Ok(t.reward + gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn shaped_reward(env_reward: f64, feedback_sum: f64, weight: f64) -> f64 {
    env_reward + weight * feedback_sum
}

/// Attributes one feedback event to the window entries at
/// `arrival - d` for every `d` in the support of the assumed delay.
pub fn tamer_credit_assign(
    window: &CreditWindow,
    event: &FeedbackEvent,
    assumed: &DelayDistribution,
    weighted: bool,
) -> Vec<FeedbackSample> {
    let f = event.polarity.value();
    assumed
        .support()
        .into_iter()
        .filter_map(|d| {
            let step = event.arrival_step.checked_sub(d as u64)?;
            let entry = window.get(step)?;
            Some(FeedbackSample {
                state: entry.state.clone(),
                action: entry.action,
                feedback: f,
                weight: if weighted { assumed.probability(d) } else { 1.0 },
            })
        })
        .collect()
}

/// Sum of weighted squared-error gradients over `samples`, scaled by `scale`.
fn feedback_gradient(net: &Network, samples: &[&FeedbackSample], scale: f64, grads: &mut Gradients, scratch: &mut Scratch) -> Result<()> {
    grads.fill_zero();
    for s in samples {
        net.accumulate_squared_error(&s.state, s.action, s.feedback, s.weight * scale, grads, scratch)?;
    }
    Ok(())
}

/// One RMSProp step on `Σ (Ĥ(s,a) - f)^2` over a single event's samples.
pub fn tamer_update_local(hnet: &mut Network, opt: &mut RmsProp, d_local: &[FeedbackSample]) -> Result<()> {
    if d_local.is_empty() {
        return Ok(());
    }
    let mut grads = Gradients::zeros_like(hnet);
    let refs: Vec<&FeedbackSample> = d_local.iter().collect();
    feedback_gradient(hnet, &refs, 1.0, &mut grads, &mut Scratch::default())?;
    opt.step(hnet, &grads)
}

/// One RMSProp step on the minibatch-mean squared error; a no-op when
/// `d_global` is empty. Returns whether an update happened.
pub fn tamer_update_global<R: Rng + ?Sized>(
    hnet: &mut Network,
    opt: &mut RmsProp,
    d_global: &[FeedbackSample],
    batch_size: usize,
    rng: &mut R,
) -> Result<bool> {
    if d_global.is_empty() || batch_size == 0 {
        return Ok(false);
    }
    let batch: Vec<&FeedbackSample> = (0..batch_size).map(|_| &d_global[rng.gen_range(0..d_global.len())]).collect();
    let mut grads = Gradients::zeros_like(hnet);
    feedback_gradient(hnet, &batch, 1.0 / batch_size as f64, &mut grads, &mut Scratch::default())?;
    opt.step(hnet, &grads)?;
    Ok(true)
}

/// Exploration rate and feedback weight, both advanced once per env step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub epsilon: f64,
    pub alpha_q: f64,
    pub alpha_h: f64,
    pub steps: u64,
}

impl Schedules {
    pub fn new(cfg: &AgentConfig) -> Self {
        Schedules {
            epsilon: cfg.epsilon_start,
            alpha_q: cfg.alpha_q,
            alpha_h: cfg.alpha_h,
            steps: 0,
        }
    }

    pub fn decay(&mut self, cfg: &AgentConfig) {
        self.steps += 1;
        self.epsilon = (cfg.epsilon_start - cfg.epsilon_decrement * self.steps as f64).max(cfg.epsilon_floor);
        if self.alpha_h > 0.0 {
            self.alpha_h = (self.alpha_h * cfg.alpha_h_decay).max(f64::MIN_POSITIVE);
        }
    }
}

/// Online/target Q networks with experience replay.
#[derive(Debug, Clone)]
pub struct QLearner {
    pub online: Network,
    pub target: Network,
    pub opt: RmsProp,
    pub replay: ReplayBuffer<Transition>,
    pub updates: u64,
    grads: Gradients,
    scratch: Scratch,
}

impl QLearner {
    pub fn new(net: Network, cfg: &AgentConfig) -> Result<Self> {
        let opt = RmsProp::with_params(&net, cfg.learning_rate, cfg.rms_decay, cfg.rms_epsilon)?;
        Ok(QLearner {
            target: net.clone(),
            grads: Gradients::zeros_like(&net),
            online: net,
            opt,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            updates: 0,
            scratch: Scratch::default(),
        })
    }

    /// Minibatch TD regression step; syncs the target network every
    /// `target_sync_interval` updates. Returns the batch loss, or `None`
    /// when the buffer is empty.
    pub fn update<R: Rng + ?Sized>(&mut self, cfg: &AgentConfig, rng: &mut R) -> Result<Option<f64>> {
        if self.replay.is_empty() {
            return Ok(None);
        }
        self.grads.fill_zero();
        let batch = self.replay.sample(rng, cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for t in batch {
            let y = if t.done {
                t.reward
            } else {
                self.target.forward_into(&t.next_state, &mut self.scratch)?;
                let best = self.scratch.output().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + cfg.gamma * best
            };
            let pred = self
                .online
                .accumulate_squared_error(&t.state, t.action, y, scale, &mut self.grads, &mut self.scratch)?;
            loss += (pred - y) * (pred - y) * scale;
        }
        self.opt.step(&mut self.online, &self.grads)?;
        self.updates += 1;
        if self.updates.is_multiple_of(cfg.target_sync_interval) {
            self.target.clone_from(&self.online);
        }
        Ok(Some(loss))
    }
}

/// Ĥ network, its feedback memory and the credit window.
#[derive(Debug, Clone)]
pub struct HLearner {
    pub net: Network,
    pub opt: RmsProp,
    /// Every credited sample so far (the union of all per-event sets).
    pub memory: Vec<FeedbackSample>,
    pub window: CreditWindow,
    pub assumed: DelayDistribution,
    pub weighted: bool,
    grads: Gradients,
    scratch: Scratch,
}

impl HLearner {
    pub fn new(net: Network, cfg: &AgentConfig, assumed: DelayDistribution) -> Result<Self> {
        let opt = RmsProp::with_params(&net, cfg.learning_rate, cfg.rms_decay, cfg.rms_epsilon)?;
        Ok(HLearner {
            grads: Gradients::zeros_like(&net),
            window: CreditWindow::for_delays(&assumed),
            net,
            opt,
            memory: Vec::new(),
            assumed,
            weighted: cfg.weighted_credit,
            scratch: Scratch::default(),
        })
    }

    /// Credits one event, stores the new samples and takes a local update.
    /// Returns the number of samples created.
    pub fn absorb(&mut self, event: &FeedbackEvent) -> Result<usize> {
        let local = tamer_credit_assign(&self.window, event, &self.assumed, self.weighted);
        if local.is_empty() {
            return Ok(0);
        }
        let refs: Vec<&FeedbackSample> = local.iter().collect();
        feedback_gradient(&self.net, &refs, 1.0, &mut self.grads, &mut self.scratch)?;
        self.opt.step(&mut self.net, &self.grads)?;
        let n = local.len();
        self.memory.extend(local);
        Ok(n)
    }

    pub fn update_global<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<bool> {
        if self.memory.is_empty() {
            return Ok(false);
        }
        let batch: Vec<&FeedbackSample> = (0..batch_size).map(|_| &self.memory[rng.gen_range(0..self.memory.len())]).collect();
        feedback_gradient(&self.net, &batch, 1.0 / batch_size as f64, &mut self.grads, &mut self.scratch)?;
        self.opt.step(&mut self.net, &self.grads)?;
        Ok(true)
    }
}

/// Everything that happened in one agent step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub transition: Transition,
    /// Reward from the environment alone.
    pub env_reward: f64,
    pub delivered: Vec<FeedbackEvent>,
    /// Samples credited per delivered event (Ĥ agents only).
    pub credited: Vec<usize>,
}

/// Seeds for the agent's networks and its exploration/minibatch stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSeeds {
    pub q_init: u64,
    pub h_init: u64,
    pub agent: u64,
}

impl AgentSeeds {
    pub fn from_run_seed(seed: u64) -> Self {
        AgentSeeds {
            q_init: derive_seed(seed, &[Stream::QNetInit as u64]),
            h_init: derive_seed(seed, &[Stream::HNetInit as u64]),
            agent: seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    kind: AgentKind,
    cfg: AgentConfig,
    num_actions: usize,
    pub q: Option<QLearner>,
    pub h: Option<HLearner>,
    pub schedules: Schedules,
    rng: SimRng,
    global_step: u64,
}

impl Agent {
    pub fn new(
        kind: AgentKind,
        cfg: AgentConfig,
        observation_len: usize,
        num_actions: usize,
        assumed_delay: DelayDistribution,
        seeds: AgentSeeds,
    ) -> Result<Self> {
        cfg.validate()?;
        let q = if kind.uses_q() {
            let net = Network::new(observation_len, cfg.hidden_dim, num_actions, seeds.q_init)?;
            Some(QLearner::new(net, &cfg)?)
        } else {
            None
        };
        let h = if kind.uses_h() {
            let net = Network::new(observation_len, cfg.hidden_dim, num_actions, seeds.h_init)?;
            Some(HLearner::new(net, &cfg, assumed_delay)?)
        } else {
            None
        };
        Ok(Agent {
            kind,
            num_actions,
            q,
            h,
            schedules: Schedules::new(&cfg),
            rng: stream_rng(seeds.agent, Stream::Agent),
            global_step: 0,
            cfg,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn feedback_memory_len(&self) -> usize {
        self.h.as_ref().map_or(0, |h| h.memory.len())
    }

    /// Must be called before the first step of every episode.
    pub fn begin_episode(&mut self) {
        if let Some(h) = &mut self.h {
            h.window.clear();
        }
    }

    pub fn act(&mut self, obs: &[f64]) -> Result<usize> {
        let eps = self.schedules.epsilon;
        match (self.kind, &self.q, &self.h) {
            (AgentKind::DqnTamer, Some(q), Some(h)) => {
                select_action_dqntamer(&q.online, &h.net, obs, self.schedules.alpha_q, self.schedules.alpha_h, eps, &mut self.rng)
            }
            (AgentKind::DeepTamer, _, Some(h)) => select_action_tamer(&h.net, obs, eps, &mut self.rng),
            (_, Some(q), _) => select_action_dqn(&q.online, obs, eps, &mut self.rng),
            _ => Err(Error::Contract(format!("{} agent has no value model", self.kind))),
        }
    }

    /// observe → act → env step → notify observer → poll feedback → learn.
    pub fn run_step(
        &mut self,
        env: &mut dyn Environment,
        source: &mut dyn FeedbackSource,
        obs: State,
        stamp: StepStamp,
    ) -> Result<StepReport> {
        let action = self.act(&obs)?;
        let out = env.step(action)?;
        source.notify(&TransitionNotice {
            stamp,
            kind: env.kind(),
            info: out.info,
        });
        if let Some(h) = &mut self.h {
            h.window.push(obs.clone(), action, stamp.step);
        }
        let delivered = source.poll(stamp.step);

        let mut credited = Vec::new();
        if let Some(h) = &mut self.h {
            for e in &delivered {
                credited.push(h.absorb(e)?);
            }
        }

        let reward = if self.kind == AgentKind::DqnShaping {
            let sum: f64 = delivered.iter().map(|e| e.polarity.value()).sum();
            shaped_reward(out.reward, sum, self.cfg.shaping_weight)
        } else {
            out.reward
        };
        let transition = Transition {
            state: obs,
            action,
            reward,
            next_state: out.observation.into(),
            done: out.done,
        };
        if let Some(q) = &mut self.q {
            q.replay.push(transition.clone());
        }

        self.global_step += 1;
        if self.global_step.is_multiple_of(self.cfg.update_interval) {
            if let Some(q) = &mut self.q {
                q.update(&self.cfg, &mut self.rng)?;
            }
            if let Some(h) = &mut self.h {
                h.update_global(self.cfg.batch_size, &mut self.rng)?;
            }
        }
        self.schedules.decay(&self.cfg);

        Ok(StepReport {
            transition,
            env_reward: out.reward,
            delivered,
            credited,
        })
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            kind: self.kind,
            config: self.cfg.clone(),
            q_net: self.q.as_ref().map(|q| q.online.clone()),
            h_net: self.h.as_ref().map(|h| h.net.clone()),
            schedules: self.schedules,
            global_step: self.global_step,
        }
    }
}

/// Networks and schedules; replay memories are not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub kind: AgentKind,
    pub config: AgentConfig,
    pub q_net: Option<Network>,
    pub h_net: Option<Network>,
    pub schedules: Schedules,
    pub global_step: u64,
}

impl AgentCheckpoint {
    pub fn restore(self, assumed_delay: DelayDistribution, agent_seed: u64) -> Result<Agent> {
        self.config.validate()?;
        let missing = |what: &str| Error::Config(format!("{} checkpoint lacks the {what} network", self.kind));
        let q = match (self.kind.uses_q(), self.q_net) {
            (true, Some(net)) => Some(QLearner::new(net, &self.config)?),
            (true, None) => return Err(missing("Q")),
            (false, _) => None,
        };
        let h = match (self.kind.uses_h(), self.h_net) {
            (true, Some(net)) => Some(HLearner::new(net, &self.config, assumed_delay)?),
            (true, None) => return Err(missing("H")),
            (false, _) => None,
        };
        let num_actions = q
            .as_ref()
            .map(|q| q.online.output_dim())
            .or_else(|| h.as_ref().map(|h| h.net.output_dim()))
            .unwrap_or(0);
        Ok(Agent {
            kind: self.kind,
            num_actions,
            q,
            h,
            schedules: self.schedules,
            rng: stream_rng(agent_seed, Stream::Agent),
            global_step: self.global_step,
            cfg: self.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvKind, MazeEnv, MazeLayout, MazeObservation, ActionEffect, StepInfo};
    use crate::observer::{NoFeedback, ObserverConfig, Polarity, SimulatedHuman};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn net_with_outputs(values: &[f64]) -> Network {
        let mut n = Network::zeros(2, 3, values.len()).unwrap();
        n.tensors_mut()[3].copy_from_slice(values);
        n
    }

    fn state(v: f64) -> State {
        vec![v, 1.0 - v].into()
    }

    fn ev(arrival: u64, polarity: Polarity) -> FeedbackEvent {
        FeedbackEvent {
            polarity,
            generated_at_step: arrival,
            arrival_step: arrival,
            episode: 0,
        }
    }

    #[test]
    fn greedy_examples() {
        let mut rng = rng_from_seed(0);
        let q = net_with_outputs(&[0.1, 0.9, 0.2, 0.3]);
        assert_eq!(select_action_dqn(&q, &[0.0, 0.0], 0.0, &mut rng).unwrap(), 1);
        let tie = net_with_outputs(&[0.5, 0.5, 0.1, 0.1]);
        assert_eq!(select_action_dqn(&tie, &[0.0, 0.0], 0.0, &mut rng).unwrap(), 0);
        let h = net_with_outputs(&[-1.0, 1.0]);
        assert_eq!(select_action_tamer(&h, &[0.0, 0.0], 0.0, &mut rng).unwrap(), 1);
        let zero = Network::zeros(2, 3, 4).unwrap();
        assert_eq!(select_action_tamer(&zero, &[0.3, 0.1], 0.0, &mut rng).unwrap(), 0);
        let q = net_with_outputs(&[1.0, 0.0]);
        let h = net_with_outputs(&[0.0, 0.5]);
        assert_eq!(select_action_dqntamer(&q, &h, &[0.0, 0.0], 1.0, 1.0, 0.0, &mut rng).unwrap(), 0);
        assert!(select_action_dqntamer(&q, &h, &[0.0, 0.0], -1.0, 1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = rng_from_seed(1);
        let q = net_with_outputs(&[0.0, 3.0, 0.0, 0.0]);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[select_action_dqn(&q, &[0.0, 0.0], 1.0, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn nongreedy_rate_at_epsilon_point_one() {
        let mut rng = rng_from_seed(2);
        let h = net_with_outputs(&[0.0, 0.0, 1.0, 0.0]);
        let n = 10_000;
        let off = (0..n)
            .filter(|_| select_action_tamer(&h, &[0.0, 0.0], 0.1, &mut rng).unwrap() != 2)
            .count();
        assert!((off as f64 / n as f64 - 0.1 * 3.0 / 4.0).abs() < 0.02);
    }

    #[test]
    fn td_target_examples() {
        let target = net_with_outputs(&[0.2, 1.0, -0.5, 0.0]);
        let mut t = Transition {
            state: state(0.0),
            action: 0,
            reward: 0.99,
            next_state: state(1.0),
            done: true,
        };
        assert_eq!(dqn_td_target(&t, &target, 0.95).unwrap(), 0.99);
        t.done = false;
        t.reward = -0.01;
        assert!((dqn_td_target(&t, &target, 0.95).unwrap() - 0.94).abs() < 1e-12);
        assert_eq!(dqn_td_target(&t, &target, 0.0).unwrap(), -0.01);
    }

    #[test]
    fn shaping_examples() {
        assert_eq!(shaped_reward(-0.01, 0.0, 1.0), -0.01);
        assert!((shaped_reward(-0.01, 1.0, 1.0) - 0.99).abs() < 1e-15);
        assert_eq!(shaped_reward(-0.01, 1.0 + -1.0, 1.0), -0.01);
    }

    #[test]
    fn credit_window_enumeration() {
        let assumed = DelayDistribution::uniform(2);
        let mut w = CreditWindow::for_delays(&assumed);
        assert_eq!(w.capacity(), 3);
        for step in 0..=10 {
            w.push(state(step as f64 / 10.0), (step % 4) as usize, step);
        }
        let local = tamer_credit_assign(&w, &ev(10, Polarity::Positive), &assumed, false);
        let mut steps: Vec<u64> = local
            .iter()
            .map(|s| w.entries().find(|e| Arc::ptr_eq(&e.state, &s.state)).unwrap().step)
            .collect();
        steps.sort();
        assert_eq!(steps, vec![8, 9, 10]);
        assert!(local.iter().all(|s| s.feedback == 1.0 && s.weight == 1.0));

        let mut w0 = CreditWindow::for_delays(&assumed);
        w0.push(state(0.0), 1, 0);
        assert_eq!(tamer_credit_assign(&w0, &ev(0, Polarity::Negative), &assumed, false).len(), 1);
        let empty = CreditWindow::for_delays(&assumed);
        assert!(tamer_credit_assign(&empty, &ev(0, Polarity::Negative), &assumed, false).is_empty());
    }

    #[test]
    fn weighted_credit_uses_assumed_probabilities() {
        let assumed = DelayDistribution::new(vec![0.2, 0.8]).unwrap();
        let mut w = CreditWindow::for_delays(&assumed);
        w.push(state(0.1), 0, 4);
        w.push(state(0.2), 1, 5);
        let local = tamer_credit_assign(&w, &ev(5, Polarity::Positive), &assumed, true);
        let weights: Vec<f64> = local.iter().map(|s| s.weight).collect();
        assert_eq!(weights, vec![0.2, 0.8]);
    }

    #[test]
    fn local_update_examples() {
        let mut h = Network::new(2, 5, 3, 3).unwrap();
        let s = state(0.4);
        let current = h.forward(&s).unwrap()[1];
        // Shift b2 so the output is exactly the label.
        h.tensors_mut()[3][1] += 1.0 - current;
        let before = h.clone();
        let mut opt = RmsProp::new(&h, 1e-3).unwrap();
        let sample = FeedbackSample {
            state: s.clone(),
            action: 1,
            feedback: h.forward(&s).unwrap()[1],
            weight: 1.0,
        };
        tamer_update_local(&mut h, &mut opt, &[sample]).unwrap();
        assert_eq!(h, before);

        let mut h = Network::zeros(2, 5, 3).unwrap();
        let mut opt = RmsProp::new(&h, 1e-3).unwrap();
        let d_local = vec![FeedbackSample {
            state: s.clone(),
            action: 2,
            feedback: 1.0,
            weight: 1.0,
        }];
        tamer_update_local(&mut h, &mut opt, &d_local).unwrap();
        assert!(h.forward(&s).unwrap()[2] > 0.0);
    }

    #[test]
    fn local_gradient_is_sum_of_per_sample_gradients() {
        let h = Network::new(2, 6, 3, 8).unwrap();
        let samples: Vec<FeedbackSample> = (0..3)
            .map(|i| FeedbackSample {
                state: state(0.2 * i as f64),
                action: i,
                feedback: if i % 2 == 0 { 1.0 } else { -1.0 },
                weight: 1.0,
            })
            .collect();
        let mut expected = Gradients::zeros_like(&h);
        for s in &samples {
            expected.add_assign(&h.grad_squared_error(&s.state, s.action, s.feedback).unwrap());
        }
        let mut got = Gradients::zeros_like(&h);
        let refs: Vec<&FeedbackSample> = samples.iter().collect();
        feedback_gradient(&h, &refs, 1.0, &mut got, &mut Scratch::default()).unwrap();
        for (a, b) in got.tensors().iter().zip(expected.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_update_guard_and_single_sample_equivalence() {
        let mut rng = rng_from_seed(4);
        let mut h = Network::new(2, 5, 3, 3).unwrap();
        let before = h.clone();
        let mut opt = RmsProp::new(&h, 1e-3).unwrap();
        assert!(!tamer_update_global(&mut h, &mut opt, &[], 32, &mut rng).unwrap());
        assert_eq!(h, before);

        let sample = FeedbackSample {
            state: state(0.7),
            action: 0,
            feedback: -1.0,
            weight: 1.0,
        };
        let mut a = before.clone();
        let mut opt_a = RmsProp::new(&a, 1e-3).unwrap();
        tamer_update_global(&mut a, &mut opt_a, std::slice::from_ref(&sample), 32, &mut rng).unwrap();
        let mut b = before.clone();
        let mut opt_b = RmsProp::new(&b, 1e-3).unwrap();
        tamer_update_local(&mut b, &mut opt_b, &[sample]).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn global_updates_converge_to_labels() {
        let mut rng = rng_from_seed(5);
        let mut h = Network::new(2, 10, 2, 6).unwrap();
        let mut opt = RmsProp::new(&h, 1e-3).unwrap();
        let memory = vec![
            FeedbackSample { state: state(0.0), action: 0, feedback: 1.0, weight: 1.0 },
            FeedbackSample { state: state(1.0), action: 1, feedback: -1.0, weight: 1.0 },
        ];
        for _ in 0..2000 {
            tamer_update_global(&mut h, &mut opt, &memory, 32, &mut rng).unwrap();
        }
        for s in &memory {
            let y = h.forward(&s.state).unwrap()[s.action];
            assert!((y - s.feedback).abs() < 0.05, "{y} vs {}", s.feedback);
        }
    }

    #[test]
    fn dqn_update_on_repeated_transition_reduces_loss() {
        let cfg = AgentConfig::default();
        let mut q = QLearner::new(Network::new(2, 10, 4, 1).unwrap(), &cfg).unwrap();
        q.replay.push(Transition {
            state: state(0.3),
            action: 2,
            reward: 0.99,
            next_state: state(0.6),
            done: true,
        });
        let mut rng = rng_from_seed(0);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = q.update(&cfg, &mut rng).unwrap().unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn target_network_syncs_on_schedule() {
        let cfg = AgentConfig {
            target_sync_interval: 5,
            ..AgentConfig::default()
        };
        let mut q = QLearner::new(Network::new(2, 6, 4, 1).unwrap(), &cfg).unwrap();
        let empty_rng = &mut rng_from_seed(0);
        assert!(q.update(&cfg, empty_rng).unwrap().is_none());
        q.replay.push(Transition {
            state: state(0.3),
            action: 1,
            reward: -0.01,
            next_state: state(0.6),
            done: false,
        });
        let frozen = q.target.clone();
        for _ in 0..4 {
            q.update(&cfg, empty_rng).unwrap();
            assert_eq!(q.target, frozen);
            assert_ne!(q.online, frozen);
        }
        q.update(&cfg, empty_rng).unwrap();
        assert_eq!(q.target, q.online);
    }

    #[test]
    fn schedules_follow_decay_rules() {
        let cfg = AgentConfig::default();
        let mut s = Schedules::new(&cfg);
        s.decay(&cfg);
        assert_eq!(s.alpha_h, 0.9999);
        for _ in 1..200 {
            s.decay(&cfg);
        }
        assert!((s.epsilon - 0.1).abs() < 1e-12);
        for _ in 0..1000 {
            let prev = s.alpha_h;
            s.decay(&cfg);
            assert_eq!(s.epsilon, 0.1);
            assert!(s.alpha_h <= prev && s.alpha_h > 0.0);
        }
        let mut tiny = Schedules { alpha_h: f64::MIN_POSITIVE, ..s };
        tiny.decay(&cfg);
        assert!(tiny.alpha_h > 0.0);
    }

    #[test]
    fn replay_ring_buffer_keeps_recent_items() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        let mut items: Vec<i32> = b.iter().copied().collect();
        items.sort();
        assert_eq!(items, vec![2, 3, 4]);
        assert_eq!(b.inserted(), 5);
    }

    fn maze_agent(kind: AgentKind, cfg: AgentConfig) -> (Agent, MazeEnv) {
        let env = MazeEnv::new(MazeLayout::generate(1).unwrap(), MazeObservation::Mdp);
        let agent = Agent::new(kind, cfg, 64, 4, DelayDistribution::uniform(2), AgentSeeds::from_run_seed(77)).unwrap();
        (agent, env)
    }

    fn drive(agent: &mut Agent, env: &mut MazeEnv, source: &mut dyn FeedbackSource, steps: usize) -> Vec<StepReport> {
        let mut rng = rng_from_seed(0);
        let mut obs: State = env.reset(&mut rng).into();
        agent.begin_episode();
        let mut reports = Vec::new();
        let mut step = 0u64;
        let mut episode = 0u64;
        for g in 0..steps as u64 {
            let stamp = StepStamp { episode, step, global_step: g };
            let r = agent.run_step(env, source, obs, stamp).unwrap();
            obs = r.transition.next_state.clone();
            step += 1;
            if r.transition.done {
                source.end_episode();
                obs = env.reset(&mut rng).into();
                agent.begin_episode();
                episode += 1;
                step = 0;
            }
            reports.push(r);
        }
        reports
    }

    fn human(cfg: ObserverConfig) -> SimulatedHuman {
        SimulatedHuman::new(cfg, rng_from_seed(9)).unwrap()
    }

    #[test]
    fn dqn_never_builds_h_structures() {
        let (mut agent, mut env) = maze_agent(AgentKind::Dqn, AgentConfig::default());
        let mut src = human(ObserverConfig::default());
        drive(&mut agent, &mut env, &mut src, 300);
        assert!(agent.h.is_none());
        assert_eq!(agent.feedback_memory_len(), 0);
    }

    #[test]
    fn deep_tamer_ignores_env_reward_and_has_no_q() {
        let (mut agent, mut env) = maze_agent(AgentKind::DeepTamer, AgentConfig::default());
        let mut src = human(ObserverConfig::default());
        let reports = drive(&mut agent, &mut env, &mut src, 300);
        assert!(agent.q.is_none());
        assert!(agent.feedback_memory_len() > 0);
        let credited: usize = reports.iter().flat_map(|r| r.credited.iter()).sum();
        assert_eq!(credited, agent.feedback_memory_len());
    }

    #[test]
    fn dqn_tamer_without_feedback_matches_dqn() {
        let cfg = AgentConfig {
            alpha_h: 0.0,
            ..AgentConfig::default()
        };
        let (mut a, mut env_a) = maze_agent(AgentKind::Dqn, cfg.clone());
        let (mut b, mut env_b) = maze_agent(AgentKind::DqnTamer, cfg);
        let ra = drive(&mut a, &mut env_a, &mut NoFeedback::default(), 1500);
        let rb = drive(&mut b, &mut env_b, &mut NoFeedback::default(), 1500);
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.transition, y.transition);
        }
        assert_eq!(a.q.as_ref().unwrap().online, b.q.as_ref().unwrap().online);
    }

    #[test]
    fn shaping_adds_feedback_at_arrival() {
        let obs_cfg = ObserverConfig {
            p_delay_true: DelayDistribution::fixed(0),
            ..ObserverConfig::default()
        };
        let (mut agent, mut env) = maze_agent(AgentKind::DqnShaping, AgentConfig::default());
        let mut src = human(obs_cfg);
        for r in drive(&mut agent, &mut env, &mut src, 200) {
            let sum: f64 = r.delivered.iter().map(|e| e.polarity.value()).sum();
            assert_eq!(r.transition.reward, r.env_reward + sum);
            assert_eq!(r.delivered.len(), 1);
        }
    }

    #[test]
    fn undelayed_feedback_labels_own_transition() {
        // With no delay and an assumed support of {0}, every stored sample is
        // labelled with the judgment of its own transition.
        let obs_cfg = ObserverConfig {
            p_delay_true: DelayDistribution::fixed(0),
            p_delay_assumed: DelayDistribution::fixed(0),
            ..ObserverConfig::default()
        };
        let layout = MazeLayout::generate(1).unwrap();
        let mut env = MazeEnv::new(layout.clone(), MazeObservation::Mdp);
        let mut agent = Agent::new(
            AgentKind::DeepTamer,
            AgentConfig::default(),
            64,
            4,
            obs_cfg.p_delay_assumed.clone(),
            AgentSeeds::from_run_seed(3),
        )
        .unwrap();
        let mut src = human(obs_cfg);
        drive(&mut agent, &mut env, &mut src, 400);
        let probe = MazeEnv::new(layout.clone(), MazeObservation::Mdp);
        for s in &agent.h.as_ref().unwrap().memory {
            let cell = s.state.iter().position(|&v| v == 1.0).unwrap() as i32;
            let pos = crate::env::Pos::new(cell % 8, cell / 8);
            let mut e = probe.clone();
            e.set_position(pos).unwrap();
            let info = crate::env::Environment::step(&mut e, s.action).unwrap().info;
            let judged = crate::observer::judge(&info, EnvKind::Maze);
            assert_eq!(s.feedback, judged.value());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut agent, mut env) = maze_agent(AgentKind::DqnTamer, AgentConfig::default());
        let mut src = human(ObserverConfig::default());
        drive(&mut agent, &mut env, &mut src, 50);
        let ck = agent.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: AgentCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore(DelayDistribution::uniform(2), 1).unwrap();
        assert_eq!(restored.schedules, agent.schedules);
        assert_eq!(restored.q.unwrap().online, agent.q.unwrap().online);
    }

    #[test]
    fn agent_kind_names_round_trip() {
        for k in AgentKind::ALL {
            assert_eq!(k.name().parse::<AgentKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("ppo".parse::<AgentKind>().is_err());
    }

    #[test]
    fn info_shape_for_judge() {
        let info = StepInfo {
            distance_before: 2,
            distance_after: 1,
            effect: ActionEffect::Move,
        };
        assert_eq!(crate::observer::judge(&info, EnvKind::Maze), Polarity::Positive);
    }

    proptest! {
        #[test]
        fn replay_round_trips_transitions(reward in -20.0f64..20.0, action in 0usize..6, done: bool, v in 0.0f64..1.0) {
            let t = Transition { state: state(v), action, reward, next_state: state(1.0 - v), done };
            let mut b = ReplayBuffer::new(4);
            b.push(t.clone());
            let got = b.sample(&mut rng_from_seed(0), 1);
            prop_assert_eq!(got[0], &t);
        }

        #[test]
        fn alpha_reductions_hold(seed in 0u64..500, x0 in -1.0f64..1.0, x1 in -1.0f64..1.0, eps in 0.0f64..1.0) {
            let q = Network::new(2, 7, 4, seed).unwrap();
            let h = Network::new(2, 7, 4, seed + 1000).unwrap();
            let obs = [x0, x1];
            let a = select_action_dqntamer(&q, &h, &obs, 1.0, 0.0, eps, &mut rng_from_seed(seed)).unwrap();
            let b = select_action_dqn(&q, &obs, eps, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(a, b);
            let a = select_action_dqntamer(&q, &h, &obs, 0.0, 1.0, eps, &mut rng_from_seed(seed)).unwrap();
            let b = select_action_tamer(&h, &obs, eps, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn local_set_bounded_by_support(arrival in 0u64..20, filled in 0u64..20) {
            let assumed = DelayDistribution::uniform(2);
            let mut w = CreditWindow::for_delays(&assumed);
            for s in 0..=filled {
                w.push(state(0.5), 0, s);
            }
            let n = tamer_credit_assign(&w, &ev(arrival, Polarity::Positive), &assumed, false).len();
            prop_assert!(n <= assumed.support().len());
            prop_assert!(w.len() <= w.capacity());
        }
    }
}
