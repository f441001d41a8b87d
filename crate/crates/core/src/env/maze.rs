//! 8x8 maze. Reward -0.01 per step, +1.0 on reaching the goal.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionEffect, EnvKind, Environment, Pos, StepInfo, StepOutcome, MAX_STEPS};
use crate::rng::{rng_from_seed, SimRng};
use crate::{Error, Result};

pub const SIZE: i32 = 8;
pub const CELLS: usize = (SIZE * SIZE) as usize;
pub const START_DISTANCE: u32 = 5;
pub const WALL_PROBABILITY: f64 = 0.2;
pub const GENERATION_RETRIES: usize = 10_000;
pub const STEP_REWARD: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;

/// Neighbor offsets for the partial observation: NW, N, NE, W, E, SW, S, SE.
pub const NEIGHBORHOOD: [(i32, i32); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MazeObservation {
    /// One-hot over the 64 cells.
    #[default]
    Mdp,
    /// Wall-or-border bits for the 8 surrounding cells.
    Pomdp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct MazeLayout {
    walls: Vec<bool>,
    start: Pos,
    goal: Pos,
    seed: u64,
}

/// JSON form: rows of `#` (wall) and `.` (space), top row first.
#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    grid: Vec<String>,
    start: Pos,
    goal: Pos,
    seed: u64,
}

impl TryFrom<LayoutRepr> for MazeLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        let rows: Vec<&str> = r.grid.iter().map(String::as_str).collect();
        MazeLayout::from_rows(&rows, r.start, r.goal, r.seed)
    }
}

impl From<MazeLayout> for LayoutRepr {
    fn from(l: MazeLayout) -> Self {
        LayoutRepr {
            grid: l.rows(),
            start: l.start,
            goal: l.goal,
            seed: l.seed,
        }
    }
}

pub fn in_bounds(p: Pos) -> bool {
    (0..SIZE).contains(&p.x) && (0..SIZE).contains(&p.y)
}

pub fn cell_index(p: Pos) -> usize {
    (p.y * SIZE + p.x) as usize
}

impl MazeLayout {
    /// Interior cells are walls with probability 0.2, the outer ring is always
    /// open. The goal is uniform over spaces and the start uniform over spaces
    /// at Manhattan distance exactly 5 from it; layouts without a connecting
    /// path are rejected and redrawn.
    pub fn generate(seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        for _ in 0..GENERATION_RETRIES {
            let walls: Vec<bool> = (0..CELLS)
                .map(|i| {
                    let (x, y) = (i as i32 % SIZE, i as i32 / SIZE);
                    let border = x == 0 || y == 0 || x == SIZE - 1 || y == SIZE - 1;
                    !border && rng.gen_bool(WALL_PROBABILITY)
                })
                .collect();
            let spaces: Vec<Pos> = all_cells().filter(|&p| !walls[cell_index(p)]).collect();
            let goal = spaces[rng.gen_range(0..spaces.len())];
            let candidates: Vec<Pos> = spaces
                .iter()
                .copied()
                .filter(|p| p.manhattan(goal) == START_DISTANCE)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let start = candidates[rng.gen_range(0..candidates.len())];
            let layout = MazeLayout { walls, start, goal, seed };
            if layout.shortest_path(start, goal).is_some() {
                return Ok(layout);
            }
        }
        Err(Error::Config(format!(
            "no solvable maze found for seed {seed} after {GENERATION_RETRIES} attempts"
        )))
    }

    pub fn from_rows(rows: &[&str], start: Pos, goal: Pos, seed: u64) -> Result<Self> {
        if rows.len() != SIZE as usize || rows.iter().any(|r| r.chars().count() != SIZE as usize) {
            return Err(Error::Config(format!("maze grid must be {SIZE}x{SIZE}")));
        }
        let mut walls = Vec::with_capacity(CELLS);
        for row in rows {
            for c in row.chars() {
                walls.push(match c {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::Config(format!("unknown maze cell '{other}'"))),
                });
            }
        }
        let layout = MazeLayout { walls, start, goal, seed };
        for (name, p) in [("start", start), ("goal", goal)] {
            if !layout.is_space(p) {
                return Err(Error::Config(format!("maze {name} {p:?} is not an open cell")));
            }
        }
        if start.manhattan(goal) != START_DISTANCE {
            return Err(Error::Config(format!(
                "maze start must be at distance {START_DISTANCE} from the goal"
            )));
        }
        if layout.shortest_path(start, goal).is_none() {
            return Err(Error::Config("maze goal unreachable from start".into()));
        }
        Ok(layout)
    }

    pub fn start(&self) -> Pos {
        self.start
    }

    pub fn goal(&self) -> Pos {
        self.goal
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_wall(&self, p: Pos) -> bool {
        in_bounds(p) && self.walls[cell_index(p)]
    }

    /// In bounds and not a wall.
    pub fn is_space(&self, p: Pos) -> bool {
        in_bounds(p) && !self.walls[cell_index(p)]
    }

    pub fn rows(&self) -> Vec<String> {
        self.walls
            .chunks(SIZE as usize)
            .map(|r| r.iter().map(|&w| if w { '#' } else { '.' }).collect())
            .collect()
    }

    /// BFS distance in moves, if reachable.
    pub fn shortest_path(&self, from: Pos, to: Pos) -> Option<u32> {
        if !self.is_space(from) || !self.is_space(to) {
            return None;
        }
        let mut dist = vec![u32::MAX; CELLS];
        let mut queue = VecDeque::from([from]);
        dist[cell_index(from)] = 0;
        while let Some(p) = queue.pop_front() {
            if p == to {
                return Some(dist[cell_index(p)]);
            }
            for d in 0..4 {
                let n = p.moved(d);
                if self.is_space(n) && dist[cell_index(n)] == u32::MAX {
                    dist[cell_index(n)] = dist[cell_index(p)] + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    pub fn spaces(&self) -> impl Iterator<Item = Pos> + '_ {
        all_cells().filter(|&p| self.is_space(p))
    }
}

pub fn all_cells() -> impl Iterator<Item = Pos> {
    (0..SIZE).flat_map(|y| (0..SIZE).map(move |x| Pos::new(x, y)))
}

#[derive(Debug, Clone)]
pub struct MazeEnv {
    layout: MazeLayout,
    mode: MazeObservation,
    pos: Pos,
    steps: u32,
    done: bool,
}

impl MazeEnv {
    pub fn new(layout: MazeLayout, mode: MazeObservation) -> Self {
        let pos = layout.start;
        MazeEnv {
            layout,
            mode,
            pos,
            steps: 0,
            done: false,
        }
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn mode(&self) -> MazeObservation {
        self.mode
    }

    /// Teleports the agent; used for exhaustive per-cell checks.
    pub fn set_position(&mut self, pos: Pos) -> Result<()> {
        if !self.layout.is_space(pos) {
            return Err(Error::Contract(format!("{pos:?} is not an open maze cell")));
        }
        self.pos = pos;
        self.done = false;
        Ok(())
    }

    pub fn observe_at(&self, pos: Pos) -> Vec<f64> {
        match self.mode {
            MazeObservation::Mdp => {
                let mut v = vec![0.0; CELLS];
                v[cell_index(pos)] = 1.0;
                v
            }
            MazeObservation::Pomdp => NEIGHBORHOOD
                .iter()
                .map(|&(dx, dy)| {
                    let n = Pos::new(pos.x + dx, pos.y + dy);
                    if self.layout.is_space(n) {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect(),
        }
    }
}

impl Environment for MazeEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Maze
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn observation_len(&self) -> usize {
        match self.mode {
            MazeObservation::Mdp => CELLS,
            MazeObservation::Pomdp => NEIGHBORHOOD.len(),
        }
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.pos = self.layout.start;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("maze step after episode end".into()));
        }
        if action >= 4 {
            return Err(Error::Contract(format!("maze action {action} out of range")));
        }
        let goal = self.layout.goal;
        let distance_before = self.pos.manhattan(goal);
        let next = self.pos.moved(action);
        if self.layout.is_space(next) {
            self.pos = next;
        }
        self.steps += 1;
        let mut reward = STEP_REWARD;
        if self.pos == goal {
            reward += GOAL_REWARD;
            self.done = true;
        }
        if self.steps >= MAX_STEPS {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                distance_before,
                distance_after: self.pos.manhattan(goal),
                effect: ActionEffect::Move,
            },
        })
    }

    fn observe(&self) -> Vec<f64> {
        self.observe_at(self.pos)
    }

    fn steps(&self) -> u32 {
        self.steps
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn agent_position(&self) -> Pos {
        self.pos
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for p in all_cells() {
            out.push(if p == self.pos {
                'A'
            } else if p == self.layout.goal {
                'G'
            } else if self.layout.is_wall(p) {
                '#'
            } else {
                '.'
            });
            if p.x == SIZE - 1 {
                out.push('\n');
            }
        }
        out
    }
}
