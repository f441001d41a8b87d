//! One live training session: a maze, a DQN-TAMER agent and the queue of
//! human feedback waiting for the next tick.
//!
//! The session is synchronous; the server drives [`Session::tick`] from a
//! timer and forwards control commands. Learning state is only touched
//! inside `tick` and `control`.

use serde::{Deserialize, Serialize};
use tamer_core::agents::{Agent, AgentConfig, AgentKind, AgentSeeds, State};
use tamer_core::env::{Environment, MazeEnv, MazeLayout, MazeObservation};
use tamer_core::observer::{CreditPoint, DelayDistribution, FeedbackInbox, FeedbackSource, InjectedFeedback, StepStamp};
use tamer_core::rng::{derive_seed, stream_rng, SimRng, Stream};

use crate::protocol::{action_name, ControlAck, ControlCommand, CreditedFeedback, ErrorCode, RunStatus, WireError, WireSnapshot};

pub const DEFAULT_TICK_MS: u64 = 500;
pub const MIN_TICK_MS: u64 = 10;
pub const MAX_TICK_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub layout_seed: u64,
    pub observation: MazeObservation,
    pub agent: AgentConfig,
    pub assumed_delay: DelayDistribution,
    pub seed: u64,
    pub tick_ms: u64,
    /// Start ticking without waiting for a `start` command.
    pub autostart: bool,
    /// Stop after this many completed episodes (since the last reset).
    pub max_episodes: Option<u64>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            layout_seed: 0,
            observation: MazeObservation::Mdp,
            agent: AgentConfig::default(),
            assumed_delay: DelayDistribution::uniform(2),
            seed: 0,
            tick_ms: DEFAULT_TICK_MS,
            autostart: false,
            max_episodes: None,
        }
    }
}

fn check_tick(tick_ms: u64) -> Result<(), WireError> {
    if !(MIN_TICK_MS..=MAX_TICK_MS).contains(&tick_ms) {
        return Err(WireError::new(
            ErrorCode::InvalidArgument,
            format!("tick_ms must be in [{MIN_TICK_MS}, {MAX_TICK_MS}], got {tick_ms}"),
        ));
    }
    Ok(())
}

pub struct Session {
    id: String,
    cfg: SessionConfig,
    env: MazeEnv,
    env_rng: SimRng,
    agent: Agent,
    generation: u64,
    source: InjectedFeedback,
    inbox: FeedbackInbox,
    status: RunStatus,
    tick_ms: u64,
    episode: u64,
    step: u64,
    global_step: u64,
    episodes_completed: u64,
    obs: State,
    cumulative_return: f64,
    seq: u64,
}

impl Session {
    pub fn new(id: impl Into<String>, cfg: SessionConfig) -> tamer_core::Result<Self> {
        check_tick(cfg.tick_ms).map_err(|e| tamer_core::Error::Config(e.message))?;
        let layout = MazeLayout::generate(cfg.layout_seed)?;
        let mut env = MazeEnv::new(layout, cfg.observation);
        let mut env_rng = stream_rng(cfg.seed, Stream::Environment);
        let obs = env.reset(&mut env_rng).into();
        let agent = Self::fresh_agent(&cfg, &env, 0)?;
        Ok(Session {
            id: id.into(),
            status: if cfg.autostart { RunStatus::Running } else { RunStatus::Paused },
            tick_ms: cfg.tick_ms,
            env,
            env_rng,
            agent,
            generation: 0,
            source: InjectedFeedback::default(),
            inbox: FeedbackInbox::new(),
            episode: 0,
            step: 0,
            global_step: 0,
            episodes_completed: 0,
            obs,
            cumulative_return: 0.0,
            seq: 0,
            cfg,
        })
    }

    fn fresh_agent(cfg: &SessionConfig, env: &MazeEnv, generation: u64) -> tamer_core::Result<Agent> {
        let mut agent = Agent::new(
            AgentKind::DqnTamer,
            cfg.agent.clone(),
            env.observation_len(),
            env.num_actions(),
            cfg.assumed_delay.clone(),
            AgentSeeds::from_run_seed(derive_seed(cfg.seed, &[generation])),
        )?;
        agent.begin_episode();
        Ok(agent)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn tick_ms(&self) -> u64 {
        self.tick_ms
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn layout(&self) -> &MazeLayout {
        self.env.layout()
    }

    /// Handle for producers; cheap to clone and safe to use from any thread.
    pub fn inbox(&self) -> FeedbackInbox {
        self.inbox.clone()
    }

    /// Where feedback submitted now will be credited.
    pub fn next_credit(&self) -> CreditPoint {
        CreditPoint {
            episode: self.episode,
            step: self.step,
        }
    }

    /// Drains waiting feedback (arrival = this step), takes one agent step and
    /// returns the snapshot to broadcast. Returns `None` unless running.
    pub fn tick(&mut self) -> tamer_core::Result<Option<WireSnapshot>> {
        if self.status != RunStatus::Running {
            return Ok(None);
        }
        let inbox = self.inbox.clone();
        let mut guard = inbox.begin_tick();
        let drained = guard.drain();
        let tickets: Vec<u64> = drained.iter().map(|(id, _)| *id).collect();
        self.source.inject(drained.into_iter().map(|(_, e)| e));

        let stamp = StepStamp {
            episode: self.episode,
            step: self.step,
            global_step: self.global_step,
        };
        let report = self.agent.run_step(&mut self.env, &mut self.source, self.obs.clone(), stamp)?;
        self.cumulative_return += report.env_reward;

        let acks = tickets
            .iter()
            .enumerate()
            .map(|(i, &ticket)| CreditedFeedback {
                ticket,
                episode: self.episode,
                step: self.step,
                credited: report.credited.get(i).copied().unwrap_or(0),
            })
            .collect();
        let done = report.transition.done;
        let snapshot = WireSnapshot {
            session: self.id.clone(),
            seq: self.seq,
            status: self.status,
            episode: self.episode,
            step: self.step,
            global_step: self.global_step,
            grid: self.env.layout().rows(),
            agent: self.env.agent_position(),
            goal: self.env.layout().goal(),
            last_action: Some(action_name(report.transition.action).to_string()),
            last_reward: report.env_reward,
            cumulative_return: self.cumulative_return,
            episode_done: done,
            alpha_h: self.agent.schedules.alpha_h,
            epsilon: self.agent.schedules.epsilon,
            acks,
            h_samples: self.agent.feedback_memory_len(),
        };
        self.seq += 1;
        self.global_step += 1;

        if done {
            self.episodes_completed += 1;
            self.start_next_episode();
            if self.cfg.max_episodes.is_some_and(|m| self.episodes_completed >= m) {
                self.status = RunStatus::Finished;
            }
        } else {
            self.step += 1;
            self.obs = report.transition.next_state;
        }
        guard.finish(self.next_credit());
        Ok(Some(snapshot))
    }

    fn start_next_episode(&mut self) {
        self.source.end_episode();
        self.episode += 1;
        self.step = 0;
        self.cumulative_return = 0.0;
        self.obs = self.env.reset(&mut self.env_rng).into();
        self.agent.begin_episode();
    }

    pub fn control(&mut self, cmd: ControlCommand) -> Result<ControlAck, WireError> {
        match cmd {
            ControlCommand::Start => {
                if self.status == RunStatus::Finished {
                    return Err(WireError::new(
                        ErrorCode::InvalidArgument,
                        "session finished; reset before starting",
                    ));
                }
                self.status = RunStatus::Running;
            }
            ControlCommand::Pause => {
                if self.status == RunStatus::Running {
                    self.status = RunStatus::Paused;
                }
            }
            ControlCommand::Reset { keep_networks } => {
                if !keep_networks {
                    self.generation += 1;
                    self.agent = Self::fresh_agent(&self.cfg, &self.env, self.generation)
                        .map_err(|e| WireError::new(ErrorCode::InvalidArgument, e.to_string()))?;
                }
                if self.step > 0 {
                    self.start_next_episode();
                } else {
                    self.agent.begin_episode();
                }
                self.episodes_completed = 0;
                if self.status == RunStatus::Finished {
                    self.status = RunStatus::Paused;
                }
                self.inbox.set_next_credit(self.next_credit());
            }
            ControlCommand::SetSpeed { tick_ms } => {
                check_tick(tick_ms)?;
                self.tick_ms = tick_ms;
            }
        }
        Ok(ControlAck {
            command: cmd.name().to_string(),
            status: self.status,
            tick_ms: self.tick_ms,
        })
    }
}
