//! Task distributions and step dynamics: the Darkroom gridworld family and
//! Gaussian multi-armed bandits, plus exact optimal-action oracles.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const ACTION_UP: usize = 0;
pub const ACTION_DOWN: usize = 1;
pub const ACTION_LEFT: usize = 2;
pub const ACTION_RIGHT: usize = 3;
pub const ACTION_STAY: usize = 4;
pub const DARKROOM_ACTIONS: usize = 5;

/// Fixed seed for the canonical train/test goal partition, so split
/// membership is a pure function of (grid size, goal).
const GOAL_SPLIT_SEED: u64 = 0x6f61_6c73_706c_6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(&self, other: &GridPos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// Row-major cell index.
    pub fn cell_index(&self, width: usize) -> usize {
        self.y * width + self.x
    }

    pub fn from_cell_index(idx: usize, width: usize) -> Self {
        Self {
            x: idx % width,
            y: idx / width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartDist {
    /// Fixed start at (⌊W/2⌋, ⌊H/2⌋); the reproducible default.
    Center,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Darkroom,
    DarkroomHard,
    DarkroomStochastic,
    Bandit,
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "darkroom" => Ok(Self::Darkroom),
            "darkroom-hard" => Ok(Self::DarkroomHard),
            "darkroom-stochastic" => Ok(Self::DarkroomStochastic),
            "bandit" => Ok(Self::Bandit),
            other => Err(Error::Config(format!("unknown task family: {other}"))),
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Darkroom => "darkroom",
            Self::DarkroomHard => "darkroom-hard",
            Self::DarkroomStochastic => "darkroom-stochastic",
            Self::Bandit => "bandit",
        };
        f.write_str(s)
    }
}

/// Goal-reaching gridworld with binary reward. Reward is granted on every
/// step whose landing cell is the goal; episodes run a fixed horizon with no
/// termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarkroomTask {
    pub width: usize,
    pub height: usize,
    pub goal: GridPos,
    pub slip_prob: f32,
    pub horizon: usize,
    pub start: StartDist,
}

impl DarkroomTask {
    pub fn new(width: usize, height: usize, goal: GridPos, slip_prob: f32, horizon: usize) -> Self {
        assert!(goal.x < width && goal.y < height, "goal outside grid");
        assert!((0.0..1.0).contains(&slip_prob), "slip_prob in [0,1)");
        Self {
            width,
            height,
            goal,
            slip_prob,
            horizon,
            start: StartDist::Center,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn start_state(&self, rng: &mut impl Rng) -> GridPos {
        match self.start {
            StartDist::Center => GridPos::new(self.width / 2, self.height / 2),
            StartDist::Uniform => GridPos::new(
                rng.gen_range(0..self.width),
                rng.gen_range(0..self.height),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTask {
    pub arm_means: Vec<f32>,
    pub noise_std: f32,
}

impl BanditTask {
    pub fn new(arm_means: Vec<f32>, noise_std: f32) -> Self {
        assert!(noise_std > 0.0, "noise_std must be positive");
        Self {
            arm_means,
            noise_std,
        }
    }

    pub fn k(&self) -> usize {
        self.arm_means.len()
    }

    pub fn best_arm(&self) -> usize {
        crate::nn::tensor::argmax(&self.arm_means)
    }

    pub fn best_mean(&self) -> f32 {
        self.arm_means[self.best_arm()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Darkroom(DarkroomTask),
    Bandit(BanditTask),
}

/// Environment state: a grid cell, or the bandit's singleton state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum State {
    Cell(GridPos),
    Unit,
}

impl State {
    pub fn cell(&self) -> GridPos {
        match self {
            State::Cell(p) => *p,
            State::Unit => panic!("bandit state has no cell"),
        }
    }
}

/// One (s, a, r, s') tuple in raw environment coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub reward: f32,
    pub next_state: State,
}

fn apply_move(task: &DarkroomTask, state: GridPos, direction: usize) -> GridPos {
    let (mut x, mut y) = (state.x, state.y);
    match direction {
        ACTION_UP => y = y.saturating_sub(1),
        ACTION_DOWN => y = (y + 1).min(task.height - 1),
        ACTION_LEFT => x = x.saturating_sub(1),
        ACTION_RIGHT => x = (x + 1).min(task.width - 1),
        ACTION_STAY => {}
        _ => unreachable!(),
    }
    GridPos::new(x, y)
}

/// One environment step. Move actions slip with probability `slip_prob` to
/// one of the two perpendicular directions (each slip_prob/2); staying never
/// slips; moves off the grid clamp in place.
pub fn darkroom_step(
    task: &DarkroomTask,
    state: GridPos,
    action: usize,
    rng: &mut impl Rng,
) -> Result<(GridPos, f32)> {
    if action >= DARKROOM_ACTIONS {
        return Err(Error::IndexOutOfRange {
            context: "darkroom action",
            index: action,
            bound: DARKROOM_ACTIONS,
        });
    }
    let executed = if action != ACTION_STAY && task.slip_prob > 0.0 && rng.gen::<f32>() < task.slip_prob
    {
        let perpendicular = match action {
            ACTION_UP | ACTION_DOWN => [ACTION_LEFT, ACTION_RIGHT],
            _ => [ACTION_UP, ACTION_DOWN],
        };
        perpendicular[rng.gen_range(0..2)]
    } else {
        action
    };
    let next = apply_move(task, state, executed);
    let reward = if next == task.goal { 1.0 } else { 0.0 };
    Ok((next, reward))
}

/// Vertical-then-horizontal shortest path: move up/down until the y
/// coordinates match, then left/right, then stay.
pub fn darkroom_optimal_action(task: &DarkroomTask, state: GridPos) -> usize {
    if state.y != task.goal.y {
        if task.goal.y < state.y {
            ACTION_UP
        } else {
            ACTION_DOWN
        }
    } else if state.x != task.goal.x {
        if task.goal.x < state.x {
            ACTION_LEFT
        } else {
            ACTION_RIGHT
        }
    } else {
        ACTION_STAY
    }
}

/// Reward ~ N(arm_means[arm], noise_std²), unclipped.
pub fn bandit_pull(task: &BanditTask, arm: usize, rng: &mut impl Rng) -> Result<f32> {
    if arm >= task.k() {
        return Err(Error::IndexOutOfRange {
            context: "bandit arm",
            index: arm,
            bound: task.k(),
        });
    }
    let z: f32 = rng.sample(StandardNormal);
    Ok(task.arm_means[arm] + task.noise_std * z)
}

/// Canonical train/test goal partition for a grid: all cells shuffled under a
/// fixed seed, first 80% train. 10×10 yields 80/20; 40×40 yields 1280/320.
pub fn goal_partition(width: usize, height: usize) -> (Vec<GridPos>, Vec<GridPos>) {
    let mut cells: Vec<GridPos> = (0..width * height)
        .map(|i| GridPos::from_cell_index(i, width))
        .collect();
    let mut rng = crate::seed::rng(GOAL_SPLIT_SEED, "goal-partition", (width as u64) << 32 | height as u64);
    cells.shuffle(&mut rng);
    let train_count = width * height * 4 / 5;
    let test = cells.split_off(train_count);
    (cells, test)
}

pub fn goal_split_of(width: usize, height: usize, goal: GridPos) -> Split {
    let (train, _) = goal_partition(width, height);
    if train.contains(&goal) {
        Split::Train
    } else {
        Split::Test
    }
}

/// Environment defaults per family; grid/horizon/slip are overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: TaskFamily,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub slip_prob: f32,
    pub arms: usize,
    pub noise_std: f32,
}

impl EnvSpec {
    pub fn for_family(family: TaskFamily) -> Self {
        match family {
            TaskFamily::Darkroom => Self {
                family,
                width: 10,
                height: 10,
                horizon: 100,
                slip_prob: 0.0,
                arms: 5,
                noise_std: 0.3,
            },
            TaskFamily::DarkroomHard => Self {
                family,
                width: 40,
                height: 40,
                horizon: 400,
                slip_prob: 0.0,
                arms: 5,
                noise_std: 0.3,
            },
            TaskFamily::DarkroomStochastic => Self {
                family,
                width: 10,
                height: 10,
                horizon: 100,
                slip_prob: 0.2,
                arms: 5,
                noise_std: 0.3,
            },
            TaskFamily::Bandit => Self {
                family,
                width: 1,
                height: 1,
                horizon: 1,
                slip_prob: 0.0,
                arms: 5,
                noise_std: 0.3,
            },
        }
    }

    pub fn is_bandit(&self) -> bool {
        self.family == TaskFamily::Bandit
    }

    pub fn sample_task(&self, split: Split, rng: &mut impl Rng) -> Task {
        match self.family {
            TaskFamily::Bandit => {
                let means = (0..self.arms).map(|_| rng.gen::<f32>()).collect();
                Task::Bandit(BanditTask::new(means, self.noise_std))
            }
            _ => {
                let (train, test) = goal_partition(self.width, self.height);
                let goals = match split {
                    Split::Train => train,
                    Split::Test => test,
                };
                let goal = goals[rng.gen_range(0..goals.len())];
                Task::Darkroom(DarkroomTask::new(
                    self.width,
                    self.height,
                    goal,
                    self.slip_prob,
                    self.horizon,
                ))
            }
        }
    }
}

/// Family-default task sampling.
pub fn sample_task(family: TaskFamily, split: Split, rng: &mut impl Rng) -> Task {
    EnvSpec::for_family(family).sample_task(split, rng)
}
