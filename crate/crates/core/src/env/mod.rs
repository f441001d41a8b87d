//! Episodic gridworlds: an 8x8 maze (fully or partially observed) and the 5x5 taxi task.

use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::Result;

pub mod maze;
pub mod taxi;

pub use maze::{MazeEnv, MazeLayout, MazeObservation};
pub use taxi::{Landmark, PassengerLocation, TaxiEnv, TaxiObservation, TaxiState};

/// Episodes are truncated after this many steps.
pub const MAX_STEPS: u32 = 1000;

pub const NORTH: usize = 0;
pub const EAST: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;

/// Grid coordinate; `x` is the column, `y` the row, and north is `y - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    pub fn manhattan(self, other: Pos) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// Neighbor in one of the four compass directions.
    pub fn moved(self, direction: usize) -> Pos {
        match direction {
            NORTH => Pos::new(self.x, self.y - 1),
            EAST => Pos::new(self.x + 1, self.y),
            SOUTH => Pos::new(self.x, self.y + 1),
            WEST => Pos::new(self.x - 1, self.y),
            _ => self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Maze,
    Taxi,
}

/// What a step did besides (possibly) moving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionEffect {
    Move,
    Pickup { correct: bool },
    Drop { correct: bool },
}

/// Side information for the simulated observer. Distances are Manhattan
/// distances (walls ignored) to the target that was current before the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    pub distance_before: u32,
    pub distance_after: u32,
    pub effect: ActionEffect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub trait Environment: Send {
    fn kind(&self) -> EnvKind;
    fn num_actions(&self) -> usize;
    fn observation_len(&self) -> usize;
    /// Starts a new episode and returns the first observation.
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepOutcome>;
    fn observe(&self) -> Vec<f64>;
    fn steps(&self) -> u32;
    fn is_done(&self) -> bool;
    /// Agent position, for logs and live snapshots.
    fn agent_position(&self) -> Pos;
    fn render(&self) -> String;
}

/// Which environment to build, and how the agent observes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Maze {
        #[serde(default)]
        observation: MazeObservation,
    },
    Taxi {
        #[serde(default)]
        observation: TaxiObservation,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Maze {
            observation: MazeObservation::Mdp,
        }
    }
}

impl EnvSpec {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::Maze { .. } => EnvKind::Maze,
            EnvSpec::Taxi { .. } => EnvKind::Taxi,
        }
    }

    /// Builds the environment for one set of initial conditions. For the maze
    /// `layout_seed` selects the generated layout; taxi ignores it (its
    /// randomness comes from the reset rng).
    pub fn build(&self, layout_seed: u64) -> Result<Box<dyn Environment>> {
        Ok(match *self {
            EnvSpec::Maze { observation } => Box::new(MazeEnv::new(MazeLayout::generate(layout_seed)?, observation)),
            EnvSpec::Taxi { observation } => Box::new(TaxiEnv::new(observation)),
        })
    }
}
