//! Tree-navigation environment with procedurally generated vector
//! observations and a single sparse reward at one goal leaf.
//!
//! The tree has `branching^depth` leaves; each step descends one level by
//! choosing a branch, so every episode ends at a leaf after exactly `depth`
//! steps (the `max_steps` cutoff is a safety net). Observations are pure
//! functions of `(dataset_id, node path)`: a fixed 64-bit mixing hash mapped
//! coordinate-wise to [-1, 1], so two agents constructing the same spec see
//! bit-identical observations on any platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{bits_to_pm1, splitmix64};

/// Observation vector type. Policies consume f32; SAR batches upcast.
pub type Observation = Vec<f32>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("branch index {action} out of range (branching {branching})")]
    BadAction { action: u32, branching: u32 },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("node path longer than depth {depth}")]
    PathTooDeep { depth: u32 },
    #[error("invalid spec: {0}")]
    BadSpec(String),
}

/// Static description of one tree task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTaskSpec {
    /// Selects the observation generator family; distinct ids give
    /// statistically independent observation sets.
    pub dataset_id: u64,
    pub depth: u32,
    pub branching: u32,
    /// Index of the rewarded leaf in [0, branching^depth).
    pub goal_leaf: u64,
    /// Observation dimensionality d_s.
    pub obs_dim: usize,
    /// Episode cutoff; defaults to 2 * depth.
    pub max_steps: u32,
    /// Kept for config compatibility. The tree dynamics and observations
    /// are fully deterministic, so this seed does not enter them.
    pub env_seed: u64,
}

impl TreeTaskSpec {
    pub fn new(dataset_id: u64, depth: u32, branching: u32, goal_leaf: u64) -> Self {
        Self {
            dataset_id,
            depth,
            branching,
            goal_leaf,
            obs_dim: 64,
            max_steps: 2 * depth,
            env_seed: 0,
        }
    }

    pub fn leaf_count(&self) -> u64 {
        (self.branching as u64).pow(self.depth)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.depth < 1 {
            return Err(EnvError::BadSpec("depth must be >= 1".into()));
        }
        if self.branching < 2 {
            return Err(EnvError::BadSpec("branching must be >= 2".into()));
        }
        if self.depth > 32 {
            return Err(EnvError::BadSpec("depth above 32 unsupported".into()));
        }
        if self.goal_leaf >= self.leaf_count() {
            return Err(EnvError::BadSpec(format!(
                "goal_leaf {} out of range ({} leaves)",
                self.goal_leaf,
                self.leaf_count()
            )));
        }
        if self.obs_dim == 0 {
            return Err(EnvError::BadSpec("obs_dim must be positive".into()));
        }
        Ok(())
    }

    /// Branch sequence of the goal leaf, most significant level first.
    pub fn goal_path(&self) -> Vec<u8> {
        let mut path = vec![0u8; self.depth as usize];
        let mut rem = self.goal_leaf;
        for level in (0..self.depth as usize).rev() {
            path[level] = (rem % self.branching as u64) as u8;
            rem /= self.branching as u64;
        }
        path
    }
}

/// Leaf index of a full-depth path.
pub fn leaf_index(branching: u32, path: &[u8]) -> u64 {
    path.iter()
        .fold(0u64, |acc, &b| acc * branching as u64 + b as u64)
}

/// Mutable episode state: the path from the root plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub path: Vec<u8>,
    pub steps_taken: u32,
    pub done: bool,
}

fn node_key(dataset_id: u64, path: &[u8]) -> u64 {
    let mut h = splitmix64(dataset_id ^ 0xD6E8_FEB8_6659_FD93);
    for (level, &branch) in path.iter().enumerate() {
        h = splitmix64(h ^ (((level as u64 + 1) << 32) | (branch as u64 + 1)));
    }
    h
}

/// Deterministic observation for a node, uniform-like in [-1, 1].
pub fn observation_for_node(spec: &TreeTaskSpec, path: &[u8]) -> Result<Observation, EnvError> {
    if path.len() > spec.depth as usize {
        return Err(EnvError::PathTooDeep { depth: spec.depth });
    }
    for &b in path {
        if u32::from(b) >= spec.branching {
            return Err(EnvError::BadAction {
                action: u32::from(b),
                branching: spec.branching,
            });
        }
    }
    let key = node_key(spec.dataset_id, path);
    Ok((0..spec.obs_dim)
        .map(|k| {
            let bits = splitmix64(key ^ (k as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            bits_to_pm1(bits) as f32
        })
        .collect())
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Single-owner environment instance.
#[derive(Debug, Clone)]
pub struct TreeEnv {
    spec: TreeTaskSpec,
}

impl TreeEnv {
    pub fn new(spec: TreeTaskSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &TreeTaskSpec {
        &self.spec
    }

    pub fn action_count(&self) -> usize {
        self.spec.branching as usize
    }

    /// Starts a fresh episode at the root. The episode seed is accepted for
    /// interface stability; the dynamics are deterministic.
    pub fn reset(&self, _episode_seed: u64) -> (EnvState, Observation) {
        let state = EnvState {
            path: Vec::with_capacity(self.spec.depth as usize),
            steps_taken: 0,
            done: false,
        };
        let obs = observation_for_node(&self.spec, &state.path)
            .expect("root observation is always valid");
        (state, obs)
    }

    /// Descends to the chosen child; reward 1.0 only at the goal leaf.
    pub fn step(&self, state: &mut EnvState, action: u32) -> Result<StepOutcome, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeDone);
        }
        if action >= self.spec.branching {
            return Err(EnvError::BadAction {
                action,
                branching: self.spec.branching,
            });
        }
        state.path.push(action as u8);
        state.steps_taken += 1;
        let at_leaf = state.path.len() == self.spec.depth as usize;
        let cutoff = state.steps_taken >= self.spec.max_steps;
        state.done = at_leaf || cutoff;
        let reward = if at_leaf && leaf_index(self.spec.branching, &state.path) == self.spec.goal_leaf
        {
            1.0
        } else {
            0.0
        };
        let obs = observation_for_node(&self.spec, &state.path)?;
        Ok(StepOutcome {
            obs,
            reward,
            done: state.done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_d2b2() -> TreeTaskSpec {
        TreeTaskSpec::new(0, 2, 2, 3)
    }

    #[test]
    fn observations_are_deterministic() {
        let spec = TreeTaskSpec::new(5, 3, 2, 0);
        let a = observation_for_node(&spec, &[1, 0]).unwrap();
        let b = observation_for_node(&spec, &[1, 0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn root_observation_is_valid() {
        let spec = spec_d2b2();
        let obs = observation_for_node(&spec, &[]).unwrap();
        assert_eq!(obs.len(), spec.obs_dim);
        assert!(obs.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn invalid_branch_rejected() {
        let spec = spec_d2b2();
        assert!(matches!(
            observation_for_node(&spec, &[2]),
            Err(EnvError::BadAction { .. })
        ));
    }

    #[test]
    fn datasets_produce_uncorrelated_observations() {
        // Sample 1000 node pairs and check the empirical cosine distribution:
        // for independent 64-dim uniform vectors cos concentrates near 0.
        let mut below_half = 0usize;
        let mut paths: Vec<Vec<u8>> = Vec::new();
        for i in 0..1000u64 {
            let mut p = Vec::new();
            let mut h = splitmix64(i);
            for _ in 0..(1 + (i % 4)) {
                h = splitmix64(h);
                p.push((h % 2) as u8);
            }
            paths.push(p);
        }
        for p in &paths {
            let s0 = TreeTaskSpec::new(0, 5, 2, 0);
            let s1 = TreeTaskSpec::new(1, 5, 2, 0);
            let a = observation_for_node(&s0, p).unwrap();
            let b = observation_for_node(&s1, p).unwrap();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if (dot / (na * nb)).abs() < 0.5 {
                below_half += 1;
            }
        }
        assert!(below_half >= 990, "only {below_half}/1000 pairs below 0.5");
    }

    #[test]
    fn reset_is_reproducible_and_reaches_leaf() {
        let env = TreeEnv::new(spec_d2b2()).unwrap();
        let (_, o1) = env.reset(9);
        let (_, o2) = env.reset(9);
        assert_eq!(o1, o2);

        let (mut state, _) = env.reset(0);
        env.step(&mut state, 0).unwrap();
        let out = env.step(&mut state, 1).unwrap();
        assert!(out.done);
        assert!(state.done);
    }

    #[test]
    fn depth_one_terminates_in_one_step_for_all_actions() {
        let spec = TreeTaskSpec::new(0, 1, 2, 1);
        let env = TreeEnv::new(spec).unwrap();
        for action in 0..2 {
            let (mut state, _) = env.reset(0);
            let out = env.step(&mut state, action).unwrap();
            assert!(out.done);
            assert!(state.steps_taken <= 2);
        }
    }

    #[test]
    fn goal_leaf_pays_exactly_once() {
        // depth=2, branching=2, goal_leaf=3 -> actions (1,1)
        let env = TreeEnv::new(spec_d2b2()).unwrap();
        let mut rewards = Vec::new();
        for a0 in 0..2u32 {
            for a1 in 0..2u32 {
                let (mut state, _) = env.reset(0);
                let r0 = env.step(&mut state, a0).unwrap().reward;
                let out = env.step(&mut state, a1).unwrap();
                assert!(out.done);
                rewards.push(r0 + out.reward);
            }
        }
        assert_eq!(rewards, vec![0.0, 0.0, 0.0, 1.0]);
        // uniform-random policy success probability is 1/4 by enumeration
        let successes: f64 = rewards.iter().sum();
        assert!((successes / 4.0 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn exactly_one_rewarded_action_sequence_small_trees() {
        for (depth, branching, goal) in [(3u32, 2u32, 5u64), (2, 3, 7), (4, 2, 11)] {
            let spec = TreeTaskSpec::new(2, depth, branching, goal);
            let env = TreeEnv::new(spec).unwrap();
            let mut rewarded = 0usize;
            let total = (branching as u64).pow(depth);
            for leaf in 0..total {
                let mut rem = leaf;
                let mut actions = vec![0u32; depth as usize];
                for level in (0..depth as usize).rev() {
                    actions[level] = (rem % branching as u64) as u32;
                    rem /= branching as u64;
                }
                let (mut state, _) = env.reset(0);
                let mut ret = 0.0;
                for &a in &actions {
                    ret += env.step(&mut state, a).unwrap().reward;
                }
                assert!(state.done);
                assert!(ret == 0.0 || ret == 1.0);
                if ret == 1.0 {
                    rewarded += 1;
                }
            }
            assert_eq!(rewarded, 1);
        }
    }

    #[test]
    fn step_after_done_is_an_error() {
        let env = TreeEnv::new(TreeTaskSpec::new(0, 1, 2, 0)).unwrap();
        let (mut state, _) = env.reset(0);
        env.step(&mut state, 0).unwrap();
        assert_eq!(env.step(&mut state, 0), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn goal_path_round_trips() {
        let spec = TreeTaskSpec::new(0, 4, 3, 50);
        let path = spec.goal_path();
        assert_eq!(leaf_index(3, &path), 50);
    }
}
