use super::{Observation, StepOutcome, ToyEnv};
use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// Withholds each step's observation independently with probability `p`.
/// The initial observation is kept when `keep_first` is set.
#[derive(Debug, Clone)]
pub struct DropoutEnv {
    env: ToyEnv,
    p: f64,
    keep_first: bool,
    rng: RngStream,
    dropped: usize,
    offered: usize,
}

impl DropoutEnv {
    pub fn new(env: ToyEnv, p: f64, keep_first: bool, rng: RngStream) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1]")));
        }
        Ok(DropoutEnv {
            env,
            p,
            keep_first,
            rng,
            dropped: 0,
            offered: 0,
        })
    }

    pub fn inner(&self) -> &ToyEnv {
        &self.env
    }

    fn filter(&mut self, obs: Observation) -> Observation {
        let first = self.env.step_count() == 0;
        self.offered += 1;
        // draw even when kept so the mask sequence does not depend on keep_first
        let drop = self.rng.bernoulli(self.p);
        if drop && !(first && self.keep_first) {
            self.dropped += 1;
            Observation {
                vector: vec![0.0; obs.vector.len()],
                available: false,
            }
        } else {
            obs
        }
    }

    pub fn observe(&mut self) -> Observation {
        let obs = self.env.observe();
        self.filter(obs)
    }

    pub fn step(&mut self, action: [f64; 2]) -> StepOutcome {
        let mut out = self.env.step(action);
        out.observation = self.filter(out.observation);
        out
    }

    /// (dropped, offered) observation counts.
    pub fn drop_counts(&self) -> (usize, usize) {
        (self.dropped, self.offered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskKind;

    #[test]
    fn zero_probability_is_transparent() {
        let base = ToyEnv::new(TaskKind::PointReach, 0);
        let mut plain = base.clone();
        let mut d = DropoutEnv::new(base, 0.0, true, RngStream::new(0, 0)).unwrap();
        assert_eq!(d.observe(), plain.observe());
        for _ in 0..10 {
            assert_eq!(d.step([0.3, 0.3]), plain.step([0.3, 0.3]));
        }
    }

    #[test]
    fn full_dropout_keeps_only_first() {
        let env = ToyEnv::new(TaskKind::ButtonSequence, 0);
        let mut d = DropoutEnv::new(env, 1.0, true, RngStream::new(0, 0)).unwrap();
        assert!(d.observe().available);
        for _ in 0..20 {
            assert!(!d.step([0.0, 0.0]).observation.available);
        }
    }

    #[test]
    fn rejects_bad_probability() {
        let env = ToyEnv::new(TaskKind::PointReach, 0);
        assert!(DropoutEnv::new(env, 1.5, true, RngStream::new(0, 0)).is_err());
    }
}
