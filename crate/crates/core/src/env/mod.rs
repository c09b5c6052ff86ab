//! Planar point-agent tasks with scripted experts.
//!
//! * `PointReach`: reach a static goal near the opposite corner.
//! * `DynamicTarget`: reach a goal that starts drifting along ±y at a fixed step.
//! * `ButtonSequence`: press four corner buttons in colour order; the colour
//!   layout is visible only in the first observation.

mod corpus;
mod demo;
mod dropout;
mod expert;

pub use corpus::{export_csv, read_corpus, write_corpus};
pub use demo::{collect_demonstrations, episode_seed, Demonstration, SETTLE_STEPS};
pub use dropout::DropoutEnv;
pub use expert::{expert_action, expert_speed};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// Workspace distance covered by a unit action component.
pub const MAX_STEP: f64 = 0.05;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const BUTTON_RADIUS: f64 = 0.05;
pub const DRIFT_SPEED: f64 = 0.005;
pub const DRIFT_ONSET: usize = 16;
/// Half-width of the uniform jitter on start and goal coordinates.
pub const LAYOUT_JITTER: f64 = 0.02;
/// Button centres indexed by corner: (low,low), (high,low), (high,high), (low,high).
pub const BUTTON_CORNERS: [[f64; 2]; 4] = [[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8]];
pub const ACTION_DIM: usize = 2;
pub const STATE_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(alias = "reach")]
    PointReach,
    #[serde(alias = "dynamic")]
    DynamicTarget,
    #[serde(alias = "button")]
    ButtonSequence,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::PointReach, TaskKind::DynamicTarget, TaskKind::ButtonSequence];

    pub fn horizon(self) -> usize {
        match self {
            TaskKind::PointReach | TaskKind::DynamicTarget => 64,
            TaskKind::ButtonSequence => 128,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            TaskKind::PointReach | TaskKind::DynamicTarget => 8,
            TaskKind::ButtonSequence => 2 + 16,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            TaskKind::PointReach => 0,
            TaskKind::DynamicTarget => 1,
            TaskKind::ButtonSequence => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PointReach => "point_reach",
            TaskKind::DynamicTarget => "dynamic_target",
            TaskKind::ButtonSequence => "button_sequence",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_reach" | "reach" => Ok(TaskKind::PointReach),
            "dynamic_target" | "dynamic" => Ok(TaskKind::DynamicTarget),
            "button_sequence" | "button" => Ok(TaskKind::ButtonSequence),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Observation vector plus availability; unavailable observations carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub vector: Vec<f64>,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

/// Full (privileged) environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub goal0: [f64; 2],
    /// +1 or −1: direction of the goal's y drift.
    pub drift_dir: f64,
    /// Corner holding each colour, colours ordered R, G, B, Y.
    pub corner_of_color: [usize; 4],
    pub pressed: usize,
    pub failed: bool,
    pub inside: [bool; 4],
    /// Whether the agent has passed through the centre of the button pressed last.
    pub centred: bool,
    pub step: usize,
}

/// All 24 colour-to-corner assignments in lexicographic order.
pub fn orderings() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    if p.iter().all(|&x| !std::mem::replace(&mut seen[x], true)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn jitter(rng: &mut RngStream, scale: f64) -> f64 {
    (rng.uniform() * 2.0 - 1.0) * scale
}

impl EnvState {
    pub fn sample(task: TaskKind, rng: &mut RngStream) -> Self {
        let mut s = EnvState {
            pos: [0.5, 0.5],
            goal0: [0.5, 0.5],
            drift_dir: 1.0,
            corner_of_color: [0, 1, 2, 3],
            pressed: 0,
            failed: false,
            inside: [false; 4],
            centred: false,
            step: 0,
        };
        match task {
            TaskKind::PointReach => {
                let corner = rng.below(4);
                let c = [[0.1, 0.1], [0.9, 0.1], [0.9, 0.9], [0.1, 0.9]];
                let start = c[corner];
                let goal = c[(corner + 2) % 4];
                s.pos = [
                    start[0] + jitter(rng, LAYOUT_JITTER),
                    start[1] + jitter(rng, LAYOUT_JITTER),
                ];
                s.goal0 = [
                    goal[0] + jitter(rng, LAYOUT_JITTER),
                    goal[1] + jitter(rng, LAYOUT_JITTER),
                ];
            }
            TaskKind::DynamicTarget => {
                s.pos = [0.15 + jitter(rng, LAYOUT_JITTER), 0.5 + jitter(rng, LAYOUT_JITTER)];
                s.goal0 = [0.85 + jitter(rng, LAYOUT_JITTER), 0.5 + jitter(rng, LAYOUT_JITTER)];
                s.drift_dir = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            }
            TaskKind::ButtonSequence => {
                let all = orderings();
                s.corner_of_color = all[rng.below(all.len())];
                s.pos = [0.5 + jitter(rng, LAYOUT_JITTER), 0.5 + jitter(rng, LAYOUT_JITTER)];
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    task: TaskKind,
    state: EnvState,
    clamped_actions: usize,
    success: bool,
}

impl ToyEnv {
    /// Episode whose initial state is drawn from `seed`.
    pub fn new(task: TaskKind, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 0);
        Self::from_state(task, EnvState::sample(task, &mut rng))
    }

    pub fn from_state(task: TaskKind, state: EnvState) -> Self {
        let mut env = ToyEnv {
            task,
            state,
            clamped_actions: 0,
            success: false,
        };
        env.success = env.check_success();
        env
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn step_count(&self) -> usize {
        self.state.step
    }

    pub fn horizon(&self) -> usize {
        self.task.horizon()
    }

    pub fn clamped_actions(&self) -> usize {
        self.clamped_actions
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    pub fn done(&self) -> bool {
        self.success || self.state.failed || self.state.step >= self.horizon()
    }

    /// Goal position at the current step.
    pub fn goal(&self) -> [f64; 2] {
        goal_at(self.task, &self.state, self.state.step)
    }

    pub fn robot_state(&self) -> Vec<f64> {
        self.state.pos.to_vec()
    }

    pub fn observe(&self) -> Observation {
        let [px, py] = self.state.pos;
        let vector = match self.task {
            TaskKind::PointReach | TaskKind::DynamicTarget => {
                let [gx, gy] = self.goal();
                let (dx, dy) = (gx - px, gy - py);
                vec![
                    px,
                    py,
                    gx,
                    gy,
                    dx,
                    dy,
                    (dx * dx + dy * dy).sqrt(),
                    self.state.step as f64 / self.horizon() as f64,
                ]
            }
            TaskKind::ButtonSequence => {
                let mut v = vec![0.0; 18];
                v[0] = px;
                v[1] = py;
                if self.state.step == 0 {
                    for (color, &corner) in self.state.corner_of_color.iter().enumerate() {
                        v[2 + corner * 4 + color] = 1.0;
                    }
                }
                v
            }
        };
        Observation {
            vector,
            available: true,
        }
    }

    fn check_success(&self) -> bool {
        match self.task {
            TaskKind::PointReach | TaskKind::DynamicTarget => {
                let g = self.goal();
                dist(self.state.pos, g) < SUCCESS_RADIUS
            }
            TaskKind::ButtonSequence => self.state.pressed == 4,
        }
    }

    /// Applies one action. Components outside [−1, 1] are clamped and counted.
    /// Stepping a finished episode keeps integrating motion but never changes
    /// the success flag.
    pub fn step(&mut self, action: [f64; 2]) -> StepOutcome {
        let mut a = action;
        for v in &mut a {
            if !v.is_finite() {
                *v = 0.0;
                self.clamped_actions += 1;
            } else if v.abs() > 1.0 {
                *v = v.clamp(-1.0, 1.0);
                self.clamped_actions += 1;
            }
        }
        let was_done = self.done();
        let s = &mut self.state;
        s.pos[0] = (s.pos[0] + a[0] * MAX_STEP).clamp(0.0, 1.0);
        s.pos[1] = (s.pos[1] + a[1] * MAX_STEP).clamp(0.0, 1.0);
        s.step += 1;
        if self.task == TaskKind::ButtonSequence && !was_done {
            for (corner, c) in BUTTON_CORNERS.iter().enumerate() {
                let now = dist(s.pos, *c) < BUTTON_RADIUS;
                if now && !s.inside[corner] {
                    if s.pressed < 4 && s.corner_of_color[s.pressed] == corner {
                        s.pressed += 1;
                        s.centred = false;
                    } else {
                        s.failed = true;
                    }
                }
                s.inside[corner] = now;
            }
            if s.pressed > 0 && dist(s.pos, BUTTON_CORNERS[s.corner_of_color[s.pressed - 1]]) < 1e-9 {
                s.centred = true;
            }
        }
        if !was_done {
            self.success = self.check_success();
        }
        StepOutcome {
            observation: self.observe(),
            done: self.done(),
            success: self.success,
        }
    }
}

fn goal_at(task: TaskKind, s: &EnvState, step: usize) -> [f64; 2] {
    match task {
        TaskKind::DynamicTarget => {
            let k = step.saturating_sub(DRIFT_ONSET) as f64;
            [s.goal0[0], (s.goal0[1] + s.drift_dir * DRIFT_SPEED * k).clamp(0.0, 1.0)]
        }
        _ => s.goal0,
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starting_on_goal_succeeds_at_first_step() {
        let mut s = EnvState::sample(TaskKind::PointReach, &mut RngStream::new(0, 0));
        s.pos = s.goal0;
        let mut env = ToyEnv::from_state(TaskKind::PointReach, s);
        let out = env.step([0.0, 0.0]);
        assert!(out.success && out.done);
    }

    #[test]
    fn zero_actions_time_out() {
        for task in TaskKind::ALL {
            let mut env = ToyEnv::new(task, 3);
            let mut steps = 0;
            loop {
                let out = env.step([0.0, 0.0]);
                steps += 1;
                if out.done {
                    assert!(!out.success);
                    break;
                }
            }
            assert_eq!(steps, task.horizon());
        }
    }

    #[test]
    fn out_of_range_actions_are_clamped_and_counted() {
        let mut env = ToyEnv::new(TaskKind::PointReach, 1);
        let p0 = env.state().pos;
        env.step([3.0, 0.0]);
        assert_eq!(env.clamped_actions(), 1);
        assert!((env.state().pos[0] - (p0[0] + MAX_STEP).min(1.0)).abs() < 1e-15);
    }

    #[test]
    fn drift_follows_closed_form() {
        let mut env = ToyEnv::new(TaskKind::DynamicTarget, 9);
        let g0 = env.state().goal0;
        let dir = env.state().drift_dir;
        for k in 1..=40 {
            env.step([0.0, 0.0]);
            let expect = g0[1] + dir * DRIFT_SPEED * (k as f64 - DRIFT_ONSET as f64).max(0.0);
            assert_eq!(env.goal()[1], expect);
            assert_eq!(env.goal()[0], g0[0]);
        }
    }

    #[test]
    fn button_observation_hides_progress() {
        let mut s = EnvState::sample(TaskKind::ButtonSequence, &mut RngStream::new(2, 0));
        s.step = 5;
        let a = ToyEnv::from_state(TaskKind::ButtonSequence, s.clone());
        s.pressed = 2;
        s.corner_of_color = [3, 2, 1, 0];
        let b = ToyEnv::from_state(TaskKind::ButtonSequence, s);
        assert_eq!(a.observe(), b.observe());
    }

    #[test]
    fn button_first_observation_encodes_layout() {
        let env = ToyEnv::new(TaskKind::ButtonSequence, 4);
        let v = env.observe().vector;
        assert_eq!(v.len(), 18);
        assert_eq!(v[2..].iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn wrong_button_fails_episode() {
        let mut s = EnvState::sample(TaskKind::ButtonSequence, &mut RngStream::new(0, 0));
        s.corner_of_color = [0, 1, 2, 3];
        s.pos = [0.8, 0.26];
        let mut env = ToyEnv::from_state(TaskKind::ButtonSequence, s);
        let out = env.step([0.0, -1.0]);
        assert!(out.done && !out.success);
        assert!(env.state().failed);
    }

    #[test]
    fn twenty_four_orderings() {
        let all = orderings();
        assert_eq!(all.len(), 24);
        let set: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), 24);
    }
}
