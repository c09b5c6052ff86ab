use rand::RngCore;

use super::{expert_action, orderings, EnvState, TaskKind, ToyEnv, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};

/// One expert episode padded to the task horizon. Row `t` of `observations`
/// and `states` is what the agent saw before taking `actions[t]`; after the
/// episode ends actions are zero and the environment keeps integrating.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: TaskKind,
    pub seed: u64,
    pub observations: Tensor,
    pub states: Tensor,
    pub actions: Tensor,
    /// Steps until the episode finished.
    pub length: usize,
    pub success: bool,
}

/// Steps the expert keeps acting after success, so recorded motion ends well
/// inside the goal region rather than on its boundary.
pub const SETTLE_STEPS: usize = 8;

impl Demonstration {
    pub fn horizon(&self) -> usize {
        self.actions.rows()
    }

    /// Steps with expert motion: time to success plus the settling tail.
    pub fn active_length(&self) -> usize {
        if self.success {
            (self.length + SETTLE_STEPS).min(self.horizon())
        } else {
            self.length
        }
    }

    /// A fresh environment in this demonstration's initial state. The colour
    /// layout of a Button episode is read back from the first observation.
    pub fn initial_env(&self) -> ToyEnv {
        let mut state = EnvState::sample(self.task, &mut RngStream::new(self.seed, 0));
        if self.task == TaskKind::ButtonSequence {
            let v = self.observations.row(0);
            for c in 0..4 {
                if let Some(k) = (0..4).find(|&k| v[2 + k * 4 + c] == 1.0) {
                    state.corner_of_color[c] = k;
                }
            }
        }
        ToyEnv::from_state(self.task, state)
    }

    /// Whether executing `actions` from the initial state succeeds.
    pub fn replay(&self, actions: &Tensor) -> bool {
        let mut env = self.initial_env();
        for t in 0..actions.rows() {
            if env.done() {
                break;
            }
            env.step([actions.get(t, 0), actions.get(t, 1)]);
        }
        env.succeeded()
    }

    /// Runs the expert from `env` to the horizon.
    pub fn record(mut env: ToyEnv, seed: u64) -> Self {
        let task = env.task();
        let h = task.horizon();
        let mut obs = Vec::with_capacity(h * task.obs_dim());
        let mut states = Vec::with_capacity(h * STATE_DIM);
        let mut actions = Vec::with_capacity(h * ACTION_DIM);
        let mut length = h;
        for t in 0..h {
            obs.extend(env.observe().vector);
            states.extend(env.robot_state());
            let settling = env.succeeded() && t < length + SETTLE_STEPS;
            let a = if !env.done() || settling {
                expert_action(&env)
            } else {
                [0.0, 0.0]
            };
            actions.extend_from_slice(&a);
            let out = env.step(a);
            if out.done && length == h {
                length = t + 1;
            }
        }
        Demonstration {
            task,
            seed,
            observations: Tensor::new(vec![h, task.obs_dim()], obs).expect("sized"),
            states: Tensor::new(vec![h, STATE_DIM], states).expect("sized"),
            actions: Tensor::new(vec![h, ACTION_DIM], actions).expect("sized"),
            length,
            success: env.succeeded(),
        }
    }
}

/// Per-episode environment seed derived from a collection seed.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    RngStream::new(seed, index).next_u64()
}

/// `count` successful expert demonstrations. Button-task demos cycle through
/// all 24 colour layouts starting at a seed-dependent offset.
pub fn collect_demonstrations(task: TaskKind, count: usize, seed: u64) -> Result<Vec<Demonstration>> {
    if count == 0 {
        return Err(Error::Parameter("demonstration count must be at least 1".into()));
    }
    let layouts = orderings();
    let offset = (episode_seed(seed, u64::MAX) % layouts.len() as u64) as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let ep_seed = episode_seed(seed, i as u64);
        let mut state = EnvState::sample(task, &mut RngStream::new(ep_seed, 0));
        if task == TaskKind::ButtonSequence {
            state.corner_of_color = layouts[(offset + i) % layouts.len()];
        }
        let demo = Demonstration::record(ToyEnv::from_state(task, state), ep_seed);
        if !demo.success {
            return Err(Error::Environment(format!(
                "expert failed on {task} episode {i} (seed {ep_seed})"
            )));
        }
        out.push(demo);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn expert_actions_replay_successfully() {
        for task in TaskKind::ALL {
            for d in collect_demonstrations(task, 6, 3).unwrap() {
                assert!(d.replay(&d.actions), "{task} seed {}", d.seed);
                assert_eq!(d.initial_env().observe().vector, d.observations.row(0));
            }
        }
    }

    #[test]
    fn ten_successful_reach_demos() {
        let demos = collect_demonstrations(TaskKind::PointReach, 10, 0).unwrap();
        assert_eq!(demos.len(), 10);
        assert!(demos.iter().all(|d| d.success && d.horizon() == 64));
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = collect_demonstrations(TaskKind::DynamicTarget, 5, 7).unwrap();
        let b = collect_demonstrations(TaskKind::DynamicTarget, 5, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn button_corpus_covers_all_layouts() {
        let demos = collect_demonstrations(TaskKind::ButtonSequence, 48, 3).unwrap();
        let layouts: BTreeSet<Vec<usize>> = demos
            .iter()
            .map(|d| {
                let v = d.observations.row(0);
                (0..4)
                    .map(|color| (0..4).find(|&c| v[2 + c * 4 + color] == 1.0).unwrap())
                    .collect()
            })
            .collect();
        assert_eq!(layouts.len(), 24);
    }

    #[test]
    fn padded_actions_are_zero() {
        let d = &collect_demonstrations(TaskKind::PointReach, 1, 0).unwrap()[0];
        assert!(d.active_length() < 64);
        for t in d.active_length()..64 {
            assert_eq!(d.actions.row(t), &[0.0, 0.0]);
        }
        assert_ne!(d.actions.row(d.length), &[0.0, 0.0]);
    }
}
