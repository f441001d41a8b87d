//! Human feedback channel.
//!
//! A simulated observer judges every transition with a fixed rule, then models
//! four properties of real human feedback: it is binary, it arrives after a
//! random delay, it is only given with probability `p_feedback`, and it stops
//! altogether after `t_stop`. Polarity flips with probability `p_flip` stand
//! in for recognition errors when feedback is read off facial expressions.
//!
//! The live service feeds real button presses through the same
//! [`FeedbackSource`] contract.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionEffect, EnvKind, StepInfo};
use crate::rng::SimRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn value(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

impl TryFrom<i64> for Polarity {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::Contract(format!("polarity must be +1 or -1, got {other}"))),
        }
    }
}

impl Serialize for Polarity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Polarity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Polarity::try_from(v).map_err(serde::de::Error::custom)
    }
}

/// Probability over delays `0, 1, ..., len-1` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DelayDistribution(Vec<f64>);

impl TryFrom<Vec<f64>> for DelayDistribution {
    type Error = Error;

    fn try_from(p: Vec<f64>) -> Result<Self> {
        DelayDistribution::new(p)
    }
}

impl From<DelayDistribution> for Vec<f64> {
    fn from(d: DelayDistribution) -> Self {
        d.0
    }
}

impl DelayDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Config("delay distribution is empty".into()));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("delay probabilities must be nonnegative: {p:?}")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("delay probabilities sum to {total}, not 1")));
        }
        Ok(DelayDistribution(p))
    }

    /// Delay of exactly `d` steps.
    pub fn fixed(d: usize) -> Self {
        let mut p = vec![0.0; d + 1];
        p[d] = 1.0;
        DelayDistribution(p)
    }

    pub fn uniform(max_delay: usize) -> Self {
        let n = max_delay + 1;
        DelayDistribution(vec![1.0 / n as f64; n])
    }

    /// The delay the simulated human actually exhibits: 0.3 / 0.6 / 0.1 over 0, 1, 2 steps.
    pub fn human() -> Self {
        DelayDistribution(vec![0.3, 0.6, 0.1])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn probability(&self, delay: usize) -> f64 {
        self.0.get(delay).copied().unwrap_or(0.0)
    }

    /// Delays with nonzero probability, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i).collect()
    }

    pub fn max_delay(&self) -> usize {
        self.support().last().copied().unwrap_or(0)
    }

    pub fn sample(&self, rng: &mut SimRng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (d, &p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return d;
            }
        }
        self.max_delay()
    }
}

/// Whether `t_stop` counts episodes or environment steps of the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopUnit {
    #[default]
    Episodes,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObserverConfig {
    /// Delay distribution the simulated human follows.
    pub p_delay_true: DelayDistribution,
    /// Delay distribution the agent assumes when assigning credit.
    pub p_delay_assumed: DelayDistribution,
    pub p_feedback: f64,
    /// No feedback once the episode (or global step) index reaches this; `None` never stops.
    pub t_stop: Option<u64>,
    pub t_stop_unit: StopUnit,
    pub p_flip: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            p_delay_true: DelayDistribution::human(),
            p_delay_assumed: DelayDistribution::uniform(2),
            p_feedback: 1.0,
            t_stop: None,
            t_stop_unit: StopUnit::Episodes,
            p_flip: 0.0,
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_feedback", self.p_feedback), ("p_flip", self.p_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        DelayDistribution::new(self.p_delay_true.0.clone())?;
        DelayDistribution::new(self.p_delay_assumed.0.clone())?;
        Ok(())
    }
}

/// Where in a run a transition happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepStamp {
    pub episode: u64,
    /// Step index within the episode, starting at 0.
    pub step: u64,
    /// Step index across the whole run.
    pub global_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub polarity: Polarity,
    pub generated_at_step: u64,
    pub arrival_step: u64,
    pub episode: u64,
}

impl FeedbackEvent {
    pub fn delay(&self) -> u64 {
        self.arrival_step - self.generated_at_step
    }
}

/// The simulated human's rule. Maze: +1 iff the Manhattan distance to the goal
/// shrank. Taxi: the same toward the passenger (then the destination), and
/// pickups/drops are +1 exactly when they are the correct ones.
pub fn judge(info: &StepInfo, kind: EnvKind) -> Polarity {
    let good = match (kind, info.effect) {
        (EnvKind::Taxi, ActionEffect::Pickup { correct }) | (EnvKind::Taxi, ActionEffect::Drop { correct }) => correct,
        _ => info.distance_after < info.distance_before,
    };
    if good {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

pub fn feedback_stopped(cfg: &ObserverConfig, at: StepStamp) -> bool {
    match (cfg.t_stop, cfg.t_stop_unit) {
        (None, _) => false,
        (Some(t), StopUnit::Episodes) => at.episode >= t,
        (Some(t), StopUnit::Steps) => at.global_step >= t,
    }
}

/// Turns a judgment into a (possibly absent, possibly flipped, delayed) event.
/// Draw order is fixed: keep/drop, then flip, then delay.
pub fn emit(polarity: Polarity, at: StepStamp, cfg: &ObserverConfig, rng: &mut SimRng) -> Option<FeedbackEvent> {
    if feedback_stopped(cfg, at) {
        return None;
    }
    if !(rng.gen::<f64>() < cfg.p_feedback) {
        return None;
    }
    let polarity = if rng.gen::<f64>() < cfg.p_flip {
        polarity.flipped()
    } else {
        polarity
    };
    let delay = cfg.p_delay_true.sample(rng) as u64;
    Some(FeedbackEvent {
        polarity,
        generated_at_step: at.step,
        arrival_step: at.step + delay,
        episode: at.episode,
    })
}

/// Events waiting for their arrival step, kept in arrival order with ties in
/// insertion order.
#[derive(Debug, Clone, Default)]
pub struct PendingFeedback {
    queue: VecDeque<FeedbackEvent>,
}

impl PendingFeedback {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: FeedbackEvent) {
        // Stable insert: after every event arriving at or before this one.
        let idx = self.queue.partition_point(|e| e.arrival_step <= event.arrival_step);
        self.queue.insert(idx, event);
    }

    /// Removes and returns every event with `arrival_step <= current_step`.
    pub fn poll(&mut self, current_step: u64) -> Vec<FeedbackEvent> {
        let n = self.queue.partition_point(|e| e.arrival_step <= current_step);
        self.queue.drain(..n).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Drops everything still pending and returns how many were dropped.
    pub fn clear(&mut self) -> usize {
        let n = self.queue.len();
        self.queue.clear();
        n
    }
}

/// What the agent loop tells a feedback source about each transition.
#[derive(Debug, Clone, Copy)]
pub struct TransitionNotice {
    pub stamp: StepStamp,
    pub kind: EnvKind,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackCounts {
    /// Judgments made (one per transition).
    pub emitted: u64,
    pub delivered: u64,
    /// Not given: stochastic drop or after `t_stop`.
    pub dropped: u64,
    /// Still in flight when the episode ended.
    pub discarded: u64,
}

pub trait FeedbackSource: Send {
    /// Called once per environment step, after the step.
    fn notify(&mut self, notice: &TransitionNotice);
    /// Returns events due at `current_step`, each exactly once, in arrival order.
    fn poll(&mut self, current_step: u64) -> Vec<FeedbackEvent>;
    /// Episode boundary: undelivered events are discarded.
    fn end_episode(&mut self);
    fn counts(&self) -> FeedbackCounts;
}

/// The rule-based observer.
#[derive(Debug, Clone)]
pub struct SimulatedHuman {
    cfg: ObserverConfig,
    rng: SimRng,
    pending: PendingFeedback,
    counts: FeedbackCounts,
}

impl SimulatedHuman {
    pub fn new(cfg: ObserverConfig, rng: SimRng) -> Result<Self> {
        cfg.validate()?;
        Ok(SimulatedHuman {
            cfg,
            rng,
            pending: PendingFeedback::new(),
            counts: FeedbackCounts::default(),
        })
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.cfg
    }
}

impl FeedbackSource for SimulatedHuman {
    fn notify(&mut self, notice: &TransitionNotice) {
        self.counts.emitted += 1;
        let polarity = judge(&notice.info, notice.kind);
        match emit(polarity, notice.stamp, &self.cfg, &mut self.rng) {
            Some(event) => self.pending.push(event),
            None => self.counts.dropped += 1,
        }
    }

    fn poll(&mut self, current_step: u64) -> Vec<FeedbackEvent> {
        let due = self.pending.poll(current_step);
        self.counts.delivered += due.len() as u64;
        due
    }

    fn end_episode(&mut self) {
        self.counts.discarded += self.pending.clear() as u64;
    }

    fn counts(&self) -> FeedbackCounts {
        self.counts
    }
}

/// A source that never gives feedback.
#[derive(Debug, Clone, Default)]
pub struct NoFeedback {
    counts: FeedbackCounts,
}

impl FeedbackSource for NoFeedback {
    fn notify(&mut self, _notice: &TransitionNotice) {
        self.counts.emitted += 1;
        self.counts.dropped += 1;
    }

    fn poll(&mut self, _current_step: u64) -> Vec<FeedbackEvent> {
        Vec::new()
    }

    fn end_episode(&mut self) {}

    fn counts(&self) -> FeedbackCounts {
        self.counts
    }
}

/// Where a live feedback message will be credited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CreditPoint {
    pub episode: u64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: u64,
    pub credit: CreditPoint,
}

#[derive(Debug, Clone, Copy)]
struct Submitted {
    id: u64,
    polarity: Polarity,
}

#[derive(Debug, Default)]
struct InboxState {
    pending: VecDeque<Submitted>,
    next_id: u64,
    next_credit: CreditPoint,
}

/// Single-producer/single-consumer queue between an I/O thread accepting
/// human feedback and the agent loop. The consumer holds the lock for the
/// whole tick (see [`FeedbackInbox::begin_tick`]), so the credit point quoted
/// to a producer is always the tick that will actually consume the event.
#[derive(Debug, Clone, Default)]
pub struct FeedbackInbox {
    inner: Arc<Mutex<InboxState>>,
}

impl FeedbackInbox {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, InboxState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn submit(&self, polarity: Polarity) -> Ticket {
        let mut s = self.lock();
        let id = s.next_id;
        s.next_id += 1;
        s.pending.push_back(Submitted { id, polarity });
        Ticket { id, credit: s.next_credit }
    }

    pub fn pending(&self) -> usize {
        self.lock().pending.len()
    }

    /// Sets where the next tick will credit feedback (used on reset/start).
    pub fn set_next_credit(&self, credit: CreditPoint) {
        self.lock().next_credit = credit;
    }

    /// Locks the inbox for one tick. Producers block until the returned guard
    /// is finished.
    pub fn begin_tick(&self) -> TickGuard<'_> {
        TickGuard { state: self.lock() }
    }
}

pub struct TickGuard<'a> {
    state: MutexGuard<'a, InboxState>,
}

impl TickGuard<'_> {
    /// Credit point quoted to producers for this tick.
    pub fn credit(&self) -> CreditPoint {
        self.state.next_credit
    }

    /// Takes every waiting message, stamped as arriving at `credit`.
    pub fn drain(&mut self) -> Vec<(u64, FeedbackEvent)> {
        let credit = self.state.next_credit;
        self.state
            .pending
            .drain(..)
            .map(|m| {
                (
                    m.id,
                    FeedbackEvent {
                        polarity: m.polarity,
                        generated_at_step: credit.step,
                        arrival_step: credit.step,
                        episode: credit.episode,
                    },
                )
            })
            .collect()
    }

    /// Publishes where the following tick will credit, then releases the inbox.
    pub fn finish(mut self, next: CreditPoint) {
        self.state.next_credit = next;
    }
}

/// Feedback source for the live loop: events are injected by the session
/// right before the agent step that consumes them.
#[derive(Debug, Clone, Default)]
pub struct InjectedFeedback {
    ready: Vec<FeedbackEvent>,
    counts: FeedbackCounts,
}

impl InjectedFeedback {
    pub fn inject(&mut self, events: impl IntoIterator<Item = FeedbackEvent>) {
        for e in events {
            self.counts.emitted += 1;
            self.ready.push(e);
        }
    }
}

impl FeedbackSource for InjectedFeedback {
    fn notify(&mut self, _notice: &TransitionNotice) {}

    fn poll(&mut self, current_step: u64) -> Vec<FeedbackEvent> {
        let (due, rest): (Vec<_>, Vec<_>) = self.ready.drain(..).partition(|e| e.arrival_step <= current_step);
        self.ready = rest;
        self.counts.delivered += due.len() as u64;
        due
    }

    fn end_episode(&mut self) {
        self.counts.discarded += self.ready.len() as u64;
        self.ready.clear();
    }

    fn counts(&self) -> FeedbackCounts {
        self.counts
    }
}
