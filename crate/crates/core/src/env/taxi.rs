//! 5x5 taxi task on the classic layout:
//!
//! ```text
//! +---------+
//! |R: | : :G|
//! | : | : : |
//! | : : : : |
//! | | : | : |
//! |Y| : |B: |
//! +---------+
//! ```
//!
//! Every step costs -1. Picking up anywhere but the passenger's cell costs an
//! extra -10, dropping anywhere but the destination (or with an empty taxi)
//! an extra -10, and a correct drop pays +20 and ends the episode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionEffect, EnvKind, Environment, Pos, StepInfo, StepOutcome, EAST, MAX_STEPS, WEST};
use crate::rng::SimRng;
use crate::{Error, Result};

pub const SIZE: i32 = 5;
pub const PICKUP: usize = 4;
pub const DROP: usize = 5;
pub const STEP_REWARD: f64 = -1.0;
pub const ILLEGAL_PENALTY: f64 = -10.0;
pub const DELIVERY_REWARD: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Landmark {
    R,
    G,
    B,
    Y,
}

impl Landmark {
    pub const ALL: [Landmark; 4] = [Landmark::R, Landmark::G, Landmark::B, Landmark::Y];

    pub fn pos(self) -> Pos {
        match self {
            Landmark::R => Pos::new(0, 0),
            Landmark::G => Pos::new(4, 0),
            Landmark::B => Pos::new(3, 4),
            Landmark::Y => Pos::new(0, 4),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PassengerLocation {
    At(Landmark),
    InTaxi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxiObservation {
    /// Position one-hot plus an in-taxi bit (26 values).
    Compact,
    /// Adds passenger location and destination one-hots (35 values).
    #[default]
    Extended,
}

/// True when a wall segment separates `(x, y)` from `(x + 1, y)`.
pub fn wall_east_of(x: i32, y: i32) -> bool {
    matches!((x, y), (1, 0) | (1, 1) | (0, 3) | (0, 4) | (2, 3) | (2, 4))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaxiState {
    pub taxi: Pos,
    pub passenger: PassengerLocation,
    pub destination: Landmark,
    pub steps: u32,
    pub done: bool,
}

impl TaxiState {
    pub fn carrying(&self) -> bool {
        self.passenger == PassengerLocation::InTaxi
    }

    /// Where the taxi should head next: the passenger, or the destination once aboard.
    pub fn target(&self) -> Pos {
        match self.passenger {
            PassengerLocation::At(l) => l.pos(),
            PassengerLocation::InTaxi => self.destination.pos(),
        }
    }
}

/// Next taxi cell for a move, honoring borders and wall segments.
pub fn taxi_move(from: Pos, direction: usize) -> Pos {
    let to = from.moved(direction);
    if !(0..SIZE).contains(&to.x) || !(0..SIZE).contains(&to.y) {
        return from;
    }
    let blocked = match direction {
        EAST => wall_east_of(from.x, from.y),
        WEST => wall_east_of(to.x, to.y),
        _ => false,
    };
    if blocked {
        from
    } else {
        to
    }
}

#[derive(Debug, Clone)]
pub struct TaxiEnv {
    state: TaxiState,
    mode: TaxiObservation,
}

impl TaxiEnv {
    /// A taxi env in a fixed placeholder state; call `reset` before stepping.
    pub fn new(mode: TaxiObservation) -> Self {
        TaxiEnv {
            state: TaxiState {
                taxi: Pos::new(2, 2),
                passenger: PassengerLocation::At(Landmark::R),
                destination: Landmark::G,
                steps: 0,
                done: false,
            },
            mode,
        }
    }

    pub fn with_state(state: TaxiState, mode: TaxiObservation) -> Self {
        TaxiEnv { state, mode }
    }

    pub fn state(&self) -> TaxiState {
        self.state
    }

    pub fn observe_state(state: &TaxiState, mode: TaxiObservation) -> Vec<f64> {
        let len = match mode {
            TaxiObservation::Compact => 26,
            TaxiObservation::Extended => 35,
        };
        let mut v = vec![0.0; len];
        v[(state.taxi.y * SIZE + state.taxi.x) as usize] = 1.0;
        v[25] = if state.carrying() { 1.0 } else { 0.0 };
        if mode == TaxiObservation::Extended {
            let slot = match state.passenger {
                PassengerLocation::At(l) => l.index(),
                PassengerLocation::InTaxi => 4,
            };
            v[26 + slot] = 1.0;
            v[31 + state.destination.index()] = 1.0;
        }
        v
    }
}

impl Environment for TaxiEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Taxi
    }

    fn num_actions(&self) -> usize {
        6
    }

    fn observation_len(&self) -> usize {
        match self.mode {
            TaxiObservation::Compact => 26,
            TaxiObservation::Extended => 35,
        }
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        let taxi = Pos::new(rng.gen_range(0..SIZE), rng.gen_range(0..SIZE));
        let source = Landmark::ALL[rng.gen_range(0..4)];
        let others: Vec<Landmark> = Landmark::ALL.into_iter().filter(|&l| l != source).collect();
        let destination = others[rng.gen_range(0..3)];
        self.state = TaxiState {
            taxi,
            passenger: PassengerLocation::At(source),
            destination,
            steps: 0,
            done: false,
        };
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let s = &mut self.state;
        if s.done {
            return Err(Error::Contract("taxi step after episode end".into()));
        }
        if action > DROP {
            return Err(Error::Contract(format!("taxi action {action} out of range")));
        }
        let target = s.target();
        let distance_before = s.taxi.manhattan(target);
        let mut reward = STEP_REWARD;
        let effect = match action {
            PICKUP => {
                let correct = matches!(s.passenger, PassengerLocation::At(l) if l.pos() == s.taxi);
                if correct {
                    s.passenger = PassengerLocation::InTaxi;
                } else {
                    reward += ILLEGAL_PENALTY;
                }
                ActionEffect::Pickup { correct }
            }
            DROP => {
                let correct = s.carrying() && s.taxi == s.destination.pos();
                if correct {
                    s.passenger = PassengerLocation::At(s.destination);
                    reward += DELIVERY_REWARD;
                    s.done = true;
                } else {
                    reward += ILLEGAL_PENALTY;
                }
                ActionEffect::Drop { correct }
            }
            dir => {
                s.taxi = taxi_move(s.taxi, dir);
                ActionEffect::Move
            }
        };
        s.steps += 1;
        if s.steps >= MAX_STEPS {
            s.done = true;
        }
        let distance_after = s.taxi.manhattan(target);
        let done = s.done;
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done,
            info: StepInfo {
                distance_before,
                distance_after,
                effect,
            },
        })
    }

    fn observe(&self) -> Vec<f64> {
        Self::observe_state(&self.state, self.mode)
    }

    fn steps(&self) -> u32 {
        self.state.steps
    }

    fn is_done(&self) -> bool {
        self.state.done
    }

    fn agent_position(&self) -> Pos {
        self.state.taxi
    }

    fn render(&self) -> String {
        let mut out = String::from("+---------+\n");
        for y in 0..SIZE {
            out.push('|');
            for x in 0..SIZE {
                let p = Pos::new(x, y);
                let landmark = Landmark::ALL.into_iter().find(|l| l.pos() == p);
                let c = if p == self.state.taxi {
                    if self.state.carrying() {
                        'T'
                    } else {
                        't'
                    }
                } else if let Some(l) = landmark {
                    let name = format!("{l:?}").chars().next().unwrap_or('?');
                    if self.state.passenger == PassengerLocation::At(l) {
                        name.to_ascii_lowercase()
                    } else {
                        name
                    }
                } else {
                    ' '
                };
                out.push(c);
                if x < SIZE - 1 {
                    out.push(if wall_east_of(x, y) { '|' } else { ':' });
                }
            }
            out.push_str("|\n");
        }
        out.push_str("+---------+\n");
        out
    }
}
