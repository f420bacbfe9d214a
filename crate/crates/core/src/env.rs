//! Small pixel environments with a reset/step interface.
//!
//! All randomness lives in `reset`; `step` is deterministic. Observations
//! are 4-channel 8-bit planes whose pixels are either 0 or 255.

use std::collections::VecDeque;

use thiserror::Error;

use crate::encoding::Observation;
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    StepAfterTerminal,
    #[error("step called before the first reset")]
    NotReset,
    #[error("action {action} is outside the action set of size {n_actions}")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("unknown environment `{0}` (expected catch or gridworld)")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Observation,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn n_actions(&self) -> usize;
    fn obs_shape(&self) -> [usize; 3];
    fn reset(&mut self, rng: &mut Rng) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;
}

pub fn make_env(name: &str) -> Result<Box<dyn Environment>, EnvError> {
    match name {
        "catch" => Ok(Box::new(CatchEnv::new())),
        "gridworld" => Ok(Box::new(GridWorldEnv::new())),
        other => Err(EnvError::Unknown(other.to_string())),
    }
}

const ON: u8 = 255;
const FRAME_STACK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Fresh,
    Running,
    Done,
}

/// Ball-catching game on a 24x24 board.
///
/// A ball starts in the top row at a random column with a random horizontal
/// drift in {-1, 0, 1}, bouncing off the side walls, and falls one row per
/// step. A 3-wide paddle on the bottom row moves left, stays, or moves
/// right. The episode ends when the ball reaches the bottom row: +1 if the
/// paddle is under it, -1 otherwise.
#[derive(Debug, Clone)]
pub struct CatchEnv {
    ball_row: usize,
    ball_col: i64,
    drift: i64,
    paddle: i64,
    frames: VecDeque<Vec<u8>>,
    phase: Phase,
}

impl CatchEnv {
    pub const SIZE: usize = 24;
    pub const PADDLE_HALF: i64 = 1;

    pub fn new() -> Self {
        Self {
            ball_row: 0,
            ball_col: 0,
            drift: 0,
            paddle: Self::SIZE as i64 / 2 - 1,
            frames: VecDeque::with_capacity(FRAME_STACK),
            phase: Phase::Fresh,
        }
    }

    pub fn ball(&self) -> (usize, i64) {
        (self.ball_row, self.ball_col)
    }

    pub fn drift(&self) -> i64 {
        self.drift
    }

    pub fn paddle(&self) -> i64 {
        self.paddle
    }

    fn advance_ball(row: usize, col: i64, drift: i64) -> (usize, i64, i64) {
        let last = Self::SIZE as i64 - 1;
        let mut col = col + drift;
        let mut drift = drift;
        if col < 0 {
            col = -col;
            drift = -drift;
        } else if col > last {
            col = 2 * last - col;
            drift = -drift;
        }
        (row + 1, col, drift)
    }

    /// Column where the ball will land, from the true state.
    pub fn landing_column(&self) -> i64 {
        let (mut row, mut col, mut drift) = (self.ball_row, self.ball_col, self.drift);
        while row < Self::SIZE - 1 {
            (row, col, drift) = Self::advance_ball(row, col, drift);
        }
        col
    }

    /// Action of a policy that tracks the landing column; it never misses.
    pub fn oracle_action(&self) -> usize {
        let target = self
            .landing_column()
            .clamp(Self::PADDLE_HALF, Self::SIZE as i64 - 1 - Self::PADDLE_HALF);
        match target.cmp(&self.paddle) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }

    fn render(&self) -> Vec<u8> {
        let n = Self::SIZE;
        let mut frame = vec![0u8; n * n];
        frame[self.ball_row * n + self.ball_col as usize] = ON;
        for c in (self.paddle - Self::PADDLE_HALF)..=(self.paddle + Self::PADDLE_HALF) {
            frame[(n - 1) * n + c as usize] = ON;
        }
        frame
    }

    fn observation(&self) -> Observation {
        let pixels = self.frames.iter().flatten().copied().collect();
        Observation::new(FRAME_STACK, Self::SIZE, Self::SIZE, pixels).expect("frame stack shape")
    }
}

impl Default for CatchEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for CatchEnv {
    fn name(&self) -> &'static str {
        "catch"
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn obs_shape(&self) -> [usize; 3] {
        [FRAME_STACK, Self::SIZE, Self::SIZE]
    }

    fn reset(&mut self, rng: &mut Rng) -> Observation {
        self.ball_row = 0;
        self.ball_col = rng.below(Self::SIZE) as i64;
        self.drift = rng.below(3) as i64 - 1;
        self.paddle = Self::SIZE as i64 / 2 - 1;
        self.phase = Phase::Running;
        let frame = self.render();
        self.frames.clear();
        for _ in 0..FRAME_STACK {
            self.frames.push_back(frame.clone());
        }
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        match self.phase {
            Phase::Fresh => return Err(EnvError::NotReset),
            Phase::Done => return Err(EnvError::StepAfterTerminal),
            Phase::Running => {}
        }
        if action >= 3 {
            return Err(EnvError::InvalidAction { action, n_actions: 3 });
        }
        let lo = Self::PADDLE_HALF;
        let hi = Self::SIZE as i64 - 1 - Self::PADDLE_HALF;
        self.paddle = (self.paddle + action as i64 - 1).clamp(lo, hi);
        (self.ball_row, self.ball_col, self.drift) =
            Self::advance_ball(self.ball_row, self.ball_col, self.drift);

        let terminal = self.ball_row == Self::SIZE - 1;
        let reward = if !terminal {
            0.0
        } else if (self.ball_col - self.paddle).abs() <= Self::PADDLE_HALF {
            1.0
        } else {
            -1.0
        };
        if terminal {
            self.phase = Phase::Done;
        }
        self.frames.pop_front();
        self.frames.push_back(self.render());
        Ok(StepResult {
            next_obs: self.observation(),
            reward,
            terminal,
        })
    }
}

/// 8x8 maze: start in the top-left corner, goal in the bottom-right, four
/// fixed wall cells. Every step costs 0.01 except the one reaching the goal,
/// which pays +1. Episodes are cut at 100 steps.
#[derive(Debug, Clone)]
pub struct GridWorldEnv {
    agent: (usize, usize),
    steps: usize,
    phase: Phase,
}

impl GridWorldEnv {
    pub const SIZE: usize = 8;
    pub const MAX_STEPS: usize = 100;
    pub const START: (usize, usize) = (0, 0);
    pub const GOAL: (usize, usize) = (7, 7);
    pub const WALLS: [(usize, usize); 4] = [(1, 2), (3, 4), (4, 1), (6, 5)];
    pub const STEP_COST: f64 = 0.01;

    pub fn new() -> Self {
        Self {
            agent: Self::START,
            steps: 0,
            phase: Phase::Fresh,
        }
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    fn is_wall(cell: (usize, usize)) -> bool {
        Self::WALLS.contains(&cell)
    }

    fn observation(&self) -> Observation {
        let n = Self::SIZE;
        let plane = n * n;
        let mut px = vec![0u8; 4 * plane];
        px[self.agent.0 * n + self.agent.1] = ON;
        px[plane + Self::GOAL.0 * n + Self::GOAL.1] = ON;
        for &(r, c) in &Self::WALLS {
            px[2 * plane + r * n + c] = ON;
        }
        // elapsed-time marker, one lit pixel moving through the plane
        let phase = (self.steps * plane / Self::MAX_STEPS).min(plane - 1);
        px[3 * plane + phase] = ON;
        Observation::new(4, n, n, px).expect("grid shape")
    }
}

impl Default for GridWorldEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for GridWorldEnv {
    fn name(&self) -> &'static str {
        "gridworld"
    }

    /// up, down, left, right
    fn n_actions(&self) -> usize {
        4
    }

    fn obs_shape(&self) -> [usize; 3] {
        [4, Self::SIZE, Self::SIZE]
    }

    fn reset(&mut self, _rng: &mut Rng) -> Observation {
        self.agent = Self::START;
        self.steps = 0;
        self.phase = Phase::Running;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        match self.phase {
            Phase::Fresh => return Err(EnvError::NotReset),
            Phase::Done => return Err(EnvError::StepAfterTerminal),
            Phase::Running => {}
        }
        let (r, c) = self.agent;
        let last = Self::SIZE - 1;
        let target = match action {
            0 => (r.saturating_sub(1), c),
            1 => ((r + 1).min(last), c),
            2 => (r, c.saturating_sub(1)),
            3 => (r, (c + 1).min(last)),
            _ => return Err(EnvError::InvalidAction { action, n_actions: 4 }),
        };
        if !Self::is_wall(target) {
            self.agent = target;
        }
        self.steps += 1;
        let (reward, terminal) = if self.agent == Self::GOAL {
            (1.0, true)
        } else {
            (-Self::STEP_COST, self.steps >= Self::MAX_STEPS)
        };
        if terminal {
            self.phase = Phase::Done;
        }
        Ok(StepResult {
            next_obs: self.observation(),
            reward,
            terminal,
        })
    }
}
