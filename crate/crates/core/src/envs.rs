//! Built-in desk-scale environments.
//!
//! Two environments are provided:
//!
//! * `chain1d`: a point on a line. `s' = s + clip(a)`, reward is the position
//!   increment, fixed start at `0.0`, horizon 20.
//! * `bridge2d`: a point in the unit square split by a river along the
//!   anti-diagonal `x + y = 1` (the main diagonal when the square is drawn with
//!   the origin at the top-left). The river band has width 0.1 and is crossable
//!   only at two bridges centred on `(0.35, 0.65)` and `(0.85, 0.15)`, each
//!   0.2 long along the river. Episodes start uniformly in `[0.05, 0.2]^2`
//!   and terminate on entering the goal disk of radius 0.1 around `(0.9, 0.9)`.
//!   Each step costs 0.01; reaching the goal pays 1.0 instead. Actions in
//!   `[-1, 1]^2` move at most 0.1 per axis, with Gaussian noise `σ = 0.01`.
//!   Moves are resolved x first, then y; an axis move that would land in the
//!   river off-bridge is cancelled.
//!
//! Interaction goes through two views. [`StateOnlyEnv`] never computes or
//! returns rewards; [`Env::step_full`] does, and counts every reward query.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Behavior, Dataset, Source, Trajectory, Transition};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode (step {step_count})")]
    Protocol { step_count: usize },
    #[error("action has dimension {got}, expected {expected}")]
    ActionDim { got: usize, expected: usize },
    #[error("unknown environment {0:?}")]
    Unknown(String),
    #[error("unknown policy tier {0:?}")]
    UnknownTier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Bridge2d,
    Chain1d,
}

impl std::str::FromStr for EnvName {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bridge2d" => Ok(EnvName::Bridge2d),
            "chain1d" => Ok(EnvName::Chain1d),
            other => Err(EnvError::Unknown(other.to_string())),
        }
    }
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvName::Bridge2d => "bridge2d",
            EnvName::Chain1d => "chain1d",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_episode_len: usize,
    pub action_bound: f64,
    /// Mean return of the uniform-random policy (10k episodes, seed 0).
    pub random_score: f64,
    /// Mean return of the scripted expert (10k episodes, seed 0).
    pub expert_score: f64,
}

pub mod bridge {
    //! bridge2d geometry.

    pub const RIVER_HALF_WIDTH: f64 = 0.05;
    pub const BRIDGE_CENTERS: [[f64; 2]; 2] = [[0.35, 0.65], [0.85, 0.15]];
    pub const BRIDGE_HALF_LENGTH: f64 = 0.1;
    pub const GOAL: [f64; 2] = [0.9, 0.9];
    pub const GOAL_RADIUS: f64 = 0.1;
    pub const START_LO: f64 = 0.05;
    pub const START_HI: f64 = 0.2;
    pub const STEP_SCALE: f64 = 0.1;
    pub const NOISE_STD: f64 = 0.01;
    pub const STEP_COST: f64 = -0.01;
    pub const GOAL_BONUS: f64 = 1.0;
    pub const HORIZON: usize = 100;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    /// Signed perpendicular distance to the river centre line.
    pub fn river_offset(x: f64, y: f64) -> f64 {
        (x + y - 1.0) / SQRT2
    }

    /// Coordinate along the river.
    pub fn along_river(x: f64, y: f64) -> f64 {
        (x - y) / SQRT2
    }

    pub fn in_river(x: f64, y: f64) -> bool {
        river_offset(x, y).abs() < RIVER_HALF_WIDTH
    }

    pub fn on_bridge(x: f64, y: f64) -> bool {
        let u = along_river(x, y);
        BRIDGE_CENTERS
            .iter()
            .any(|c| (u - along_river(c[0], c[1])).abs() < BRIDGE_HALF_LENGTH)
    }

    /// True for river cells that are not part of a bridge.
    pub fn blocked(x: f64, y: f64) -> bool {
        in_river(x, y) && !on_bridge(x, y)
    }

    pub fn in_goal(x: f64, y: f64) -> bool {
        ((x - GOAL[0]).powi(2) + (y - GOAL[1]).powi(2)).sqrt() < GOAL_RADIUS
    }

    pub fn in_start_region(x: f64, y: f64) -> bool {
        (START_LO..=START_HI).contains(&x) && (START_LO..=START_HI).contains(&y)
    }
}

pub mod chain {
    pub const HORIZON: usize = 20;
    pub const BOUND: f64 = 25.0;
}

impl EnvSpec {
    pub fn for_name(name: EnvName) -> Self {
        match name {
            EnvName::Bridge2d => EnvSpec {
                name,
                state_dim: 2,
                action_dim: 2,
                max_episode_len: bridge::HORIZON,
                action_bound: 1.0,
                random_score: BRIDGE_RANDOM_SCORE,
                expert_score: BRIDGE_EXPERT_SCORE,
            },
            EnvName::Chain1d => EnvSpec {
                name,
                state_dim: 1,
                action_dim: 1,
                max_episode_len: chain::HORIZON,
                action_bound: 1.0,
                random_score: CHAIN_RANDOM_SCORE,
                expert_score: CHAIN_EXPERT_SCORE,
            },
        }
    }
}

// Reference scores, produced by `reference_score(name, tier, 10_000, 0)`.
pub const BRIDGE_RANDOM_SCORE: f64 = -0.964447;
pub const BRIDGE_EXPERT_SCORE: f64 = 0.899781;
pub const CHAIN_RANDOM_SCORE: f64 = 0.000934;
pub const CHAIN_EXPERT_SCORE: f64 = 20.0;

/// Action noise of the medium policies, chosen so that the medium mean return
/// sits near the midpoint of the random and expert scores.
pub const BRIDGE_MEDIUM_NOISE: f64 = 0.6;
pub const CHAIN_MEDIUM_NOISE: f64 = 1.35;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Episode over, either by termination or by the time limit.
    pub done: bool,
    /// Episode reached a terminal state.
    pub terminated: bool,
}

/// Mutable state of one environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    noise_std: f64,
    state: Vec<f64>,
    step_count: usize,
    terminated: bool,
    rng: Rng,
    reward_queries: usize,
}

impl Env {
    pub fn new(name: EnvName) -> Self {
        let noise = match name {
            EnvName::Bridge2d => bridge::NOISE_STD,
            EnvName::Chain1d => 0.0,
        };
        Self::with_noise(name, noise)
    }

    pub fn with_noise(name: EnvName, noise_std: f64) -> Self {
        let spec = EnvSpec::for_name(name);
        let dim = spec.state_dim;
        Self {
            spec,
            noise_std,
            state: vec![0.0; dim],
            step_count: 0,
            terminated: false,
            rng: rng_from(0, 0),
            reward_queries: 0,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn is_done(&self) -> bool {
        self.terminated || self.step_count >= self.spec.max_episode_len
    }

    /// Number of reward evaluations performed through [`Env::step_full`].
    pub fn reward_queries(&self) -> usize {
        self.reward_queries
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = rng_from(seed, 0);
        self.step_count = 0;
        self.terminated = false;
        self.state = match self.spec.name {
            EnvName::Chain1d => vec![0.0],
            EnvName::Bridge2d => vec![
                self.rng.random_range(bridge::START_LO..bridge::START_HI),
                self.rng.random_range(bridge::START_LO..bridge::START_HI),
            ],
        };
        self.state.clone()
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        let b = self.spec.action_bound;
        a.iter().map(|v| v.clamp(-b, b)).collect()
    }

    fn noise(&mut self) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        let n: f64 = Normal::new(0.0, self.noise_std).unwrap().sample(&mut self.rng);
        n.clamp(-3.0 * self.noise_std, 3.0 * self.noise_std)
    }

    fn advance(&mut self, action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if self.is_done() {
            return Err(EnvError::Protocol {
                step_count: self.step_count,
            });
        }
        if action.len() != self.spec.action_dim {
            return Err(EnvError::ActionDim {
                got: action.len(),
                expected: self.spec.action_dim,
            });
        }
        let a = self.clip_action(action);
        let next = match self.spec.name {
            EnvName::Chain1d => {
                let n = self.noise();
                vec![(self.state[0] + a[0] + n).clamp(-chain::BOUND, chain::BOUND)]
            }
            EnvName::Bridge2d => {
                let dx = a[0] * bridge::STEP_SCALE + self.noise();
                let dy = a[1] * bridge::STEP_SCALE + self.noise();
                let (mut x, mut y) = (self.state[0], self.state[1]);
                let nx = (x + dx).clamp(0.0, 1.0);
                if !bridge::blocked(nx, y) {
                    x = nx;
                }
                let ny = (y + dy).clamp(0.0, 1.0);
                if !bridge::blocked(x, ny) {
                    y = ny;
                }
                vec![x, y]
            }
        };
        self.step_count += 1;
        if self.spec.name == EnvName::Bridge2d && bridge::in_goal(next[0], next[1]) {
            self.terminated = true;
        }
        self.state = next.clone();
        Ok(next)
    }

    fn reward(&mut self, s: &[f64], s_next: &[f64]) -> f64 {
        self.reward_queries += 1;
        match self.spec.name {
            EnvName::Chain1d => s_next[0] - s[0],
            EnvName::Bridge2d => {
                if bridge::in_goal(s_next[0], s_next[1]) {
                    bridge::GOAL_BONUS
                } else {
                    bridge::STEP_COST
                }
            }
        }
    }

    /// Full interaction: next state, true reward and termination.
    pub fn step_full(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let s = self.state.clone();
        let next_state = self.advance(action)?;
        let reward = self.reward(&s, &next_state);
        Ok(StepOutcome {
            next_state,
            reward,
            done: self.is_done(),
            terminated: self.terminated,
        })
    }
}

/// Reward-free view of an environment.
#[derive(Debug, Clone)]
pub struct StateOnlyEnv {
    inner: Env,
}

impl StateOnlyEnv {
    pub fn new(env: Env) -> Self {
        Self { inner: env }
    }

    pub fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    pub fn step_state(&mut self, action: &[f64]) -> Result<Vec<f64>, EnvError> {
        self.inner.advance(action)
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        self.inner.clip_action(a)
    }

    pub fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    pub fn is_terminated(&self) -> bool {
        self.inner.is_terminated()
    }

    pub fn step_count(&self) -> usize {
        self.inner.step_count()
    }

    /// Reward queries made on the wrapped environment; stays zero unless the
    /// environment was used through its full view before wrapping.
    pub fn reward_queries(&self) -> usize {
        self.inner.reward_queries()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Random,
    Medium,
    Expert,
    MediumReplayMix,
    MediumExpertMix,
}

impl std::str::FromStr for Tier {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "random" => Tier::Random,
            "medium" => Tier::Medium,
            "expert" => Tier::Expert,
            "medium_replay" | "medium_replay_mix" => Tier::MediumReplayMix,
            "medium_expert" | "medium_expert_mix" => Tier::MediumExpertMix,
            other => return Err(EnvError::UnknownTier(other.to_string())),
        })
    }
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::Expert => "expert",
            Tier::MediumReplayMix => "medium_replay_mix",
            Tier::MediumExpertMix => "medium_expert_mix",
        }
    }
}

/// A behaviour policy tier with its action-noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyTier {
    pub tier: Tier,
    pub noise_scale: f64,
}

impl PolicyTier {
    /// Tier with the environment's default medium noise.
    pub fn standard(tier: Tier, env: EnvName) -> Self {
        Self {
            tier,
            noise_scale: medium_noise(env),
        }
    }

    /// Component behaviours and their weights; weights sum to one.
    pub fn mixture(&self) -> Vec<(Behavior, f64)> {
        match self.tier {
            Tier::Random => vec![(Behavior::Random, 1.0)],
            Tier::Medium => vec![(Behavior::Medium, 1.0)],
            Tier::Expert => vec![(Behavior::Expert, 1.0)],
            Tier::MediumReplayMix => vec![(Behavior::Random, 0.5), (Behavior::Medium, 0.5)],
            Tier::MediumExpertMix => vec![(Behavior::Medium, 0.5), (Behavior::Expert, 0.5)],
        }
    }
}

pub fn medium_noise(env: EnvName) -> f64 {
    match env {
        EnvName::Bridge2d => BRIDGE_MEDIUM_NOISE,
        EnvName::Chain1d => CHAIN_MEDIUM_NOISE,
    }
}

fn toward(target: [f64; 2], s: &[f64]) -> [f64; 2] {
    [
        ((target[0] - s[0]) / bridge::STEP_SCALE).clamp(-1.0, 1.0),
        ((target[1] - s[1]) / bridge::STEP_SCALE).clamp(-1.0, 1.0),
    ]
}

/// Scripted expert: heads for the nearer bridge, crosses it, then goes to the goal.
pub fn expert_action(env: EnvName, s: &[f64]) -> Vec<f64> {
    match env {
        EnvName::Chain1d => vec![1.0],
        EnvName::Bridge2d => {
            let (x, y) = (s[0], s[1]);
            if bridge::river_offset(x, y) >= bridge::RIVER_HALF_WIDTH {
                return toward(bridge::GOAL, s).to_vec();
            }
            let u = bridge::along_river(x, y);
            let c = *bridge::BRIDGE_CENTERS
                .iter()
                .min_by(|a, b| {
                    let da = (bridge::along_river(a[0], a[1]) - u).abs();
                    let db = (bridge::along_river(b[0], b[1]) - u).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            let uc = bridge::along_river(c[0], c[1]);
            let diag = std::f64::consts::FRAC_1_SQRT_2;
            if (u - uc).abs() > 0.02 {
                let entry = [c[0] - 0.1 * diag, c[1] - 0.1 * diag];
                toward(entry, s).to_vec()
            } else {
                let exit = [c[0] + 0.12 * diag, c[1] + 0.12 * diag];
                toward(exit, s).to_vec()
            }
        }
    }
}

/// Action of a behaviour policy at state `s`.
pub fn behavior_action(env: EnvName, behavior: Behavior, noise: f64, s: &[f64], rng: &mut Rng) -> Vec<f64> {
    let dim = EnvSpec::for_name(env).action_dim;
    match behavior {
        Behavior::Random => (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Behavior::Expert => expert_action(env, s),
        Behavior::Medium => {
            let base = match env {
                EnvName::Chain1d => vec![1.0],
                // Goal-greedy: ignores the river and relies on noise to slide
                // along the bank until a bridge is found.
                EnvName::Bridge2d => toward(bridge::GOAL, s).to_vec(),
            };
            let normal = Normal::new(0.0, noise.max(0.0)).unwrap();
            base.iter()
                .map(|b| (b + normal.sample(rng)).clamp(-1.0, 1.0))
                .collect()
        }
    }
}

/// One episode of `behavior`, recorded with true rewards.
pub fn rollout_behavior(env_name: EnvName, behavior: Behavior, noise: f64, seed: u64) -> Trajectory {
    let mut env = Env::new(env_name);
    let mut policy_rng = rng_from(seed, 1);
    let mut s = env.reset(seed);
    let mut transitions = Vec::new();
    loop {
        let a = env.clip_action(&behavior_action(env_name, behavior, noise, &s, &mut policy_rng));
        let out = env.step_full(&a).expect("episode still running");
        transitions.push(Transition::new(
            to_f32(&s),
            to_f32(&a),
            out.reward as f32,
            to_f32(&out.next_state),
        ));
        s = out.next_state;
        if out.done {
            let mut traj = Trajectory::new(transitions, out.terminated, Source::Offline);
            traj.behavior = Some(behavior);
            return traj;
        }
    }
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Offline dataset of `n_traj` episodes from `tier`.
///
/// Mixture tiers allocate `round(w * n)` episodes to each component and
/// shuffle the episode order.
pub fn synthesize_offline_dataset(env: EnvName, tier: PolicyTier, n_traj: usize, seed: u64) -> Dataset {
    let spec = EnvSpec::for_name(env);
    let mix = tier.mixture();
    let mut plan: Vec<Behavior> = Vec::with_capacity(n_traj);
    let mut assigned = 0usize;
    for (i, (b, w)) in mix.iter().enumerate() {
        let count = if i + 1 == mix.len() {
            n_traj - assigned
        } else {
            ((w * n_traj as f64).round() as usize).min(n_traj - assigned)
        };
        plan.extend(std::iter::repeat_n(*b, count));
        assigned += count;
    }
    let mut shuffle_rng = rng_from(seed, u64::MAX);
    plan.shuffle(&mut shuffle_rng);
    let trajectories = plan
        .iter()
        .enumerate()
        .map(|(i, &b)| rollout_behavior(env, b, tier.noise_scale, crate::rng::derive_seed(seed, i as u64)))
        .collect();
    Dataset::with_trajectories(spec.state_dim, spec.action_dim, trajectories)
}

/// Mean and standard deviation of the return of `behavior` over `episodes`.
pub fn reference_score(env: EnvName, behavior: Behavior, noise: f64, episodes: usize, seed: u64) -> (f64, f64) {
    let returns: Vec<f64> = (0..episodes)
        .map(|i| rollout_behavior(env, behavior, noise, crate::rng::derive_seed(seed, i as u64)).reward_sum())
        .collect();
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_starts_at_origin() {
        let mut env = Env::new(EnvName::Chain1d);
        for seed in 0..5 {
            assert_eq!(env.reset(seed), vec![0.0]);
            assert_eq!(env.step_count(), 0);
        }
    }

    #[test]
    fn bridge_reset_is_deterministic_and_in_start_region() {
        let mut env = Env::new(EnvName::Bridge2d);
        let a = env.reset(11);
        let b = env.reset(11);
        assert_eq!(a, b);
        for seed in [3, 4] {
            let s = env.reset(seed);
            assert!(bridge::in_start_region(s[0], s[1]), "{s:?}");
        }
    }

    #[test]
    fn chain_step_is_additive_and_clipped() {
        let mut env = Env::new(EnvName::Chain1d);
        env.reset(0);
        env.state = vec![0.3];
        let mut view = StateOnlyEnv::new(env);
        let s = view.step_state(&[0.1]).unwrap();
        assert!((s[0] - 0.4).abs() < 1e-12);
        let s2 = view.step_state(&[10.0]).unwrap();
        assert!((s2[0] - 1.4).abs() < 1e-12);
        assert_eq!(view.reward_queries(), 0);
    }

    #[test]
    fn chain_reward_is_increment() {
        let mut env = Env::new(EnvName::Chain1d);
        env.reset(0);
        let out = env.step_full(&[0.1]).unwrap();
        assert!((out.reward - 0.1).abs() < 1e-12);
        assert_eq!(env.reward_queries(), 1);
    }

    #[test]
    fn river_blocks_off_bridge() {
        // (0.4, 0.5): one x-step of 0.1 lands on x + y = 1, inside the band
        // and away from both bridges.
        let (x, y) = (0.4, 0.5);
        assert!(!bridge::blocked(x, y));
        assert!(bridge::blocked(x + 0.1, y));
        let mut env = Env::with_noise(EnvName::Bridge2d, 0.0);
        env.reset(0);
        env.state = vec![x, y];
        let out = env.step_full(&[1.0, 0.0]).unwrap();
        assert_eq!(out.next_state, vec![x, y]);
        assert_eq!(out.reward, bridge::STEP_COST);
        assert!(!out.done);
    }

    #[test]
    fn bridge_allows_crossing() {
        let c = bridge::BRIDGE_CENTERS[0];
        assert!(bridge::in_river(c[0], c[1]));
        assert!(!bridge::blocked(c[0], c[1]));
    }

    #[test]
    fn goal_terminates_with_bonus() {
        let mut env = Env::with_noise(EnvName::Bridge2d, 0.0);
        env.reset(0);
        env.state = vec![0.75, 0.75];
        let out = env.step_full(&[1.0, 1.0]).unwrap();
        assert!(out.done && out.terminated);
        assert_eq!(out.reward, bridge::GOAL_BONUS);
        assert!(matches!(env.step_full(&[0.0, 0.0]), Err(EnvError::Protocol { .. })));
    }

    #[test]
    fn time_limit_ends_episode() {
        let mut env = Env::new(EnvName::Chain1d);
        env.reset(0);
        for _ in 0..chain::HORIZON {
            env.step_full(&[0.0]).unwrap();
        }
        assert!(env.is_done() && !env.is_terminated());
        assert!(env.step_full(&[0.0]).is_err());
    }

    #[test]
    fn same_seed_same_states() {
        let a = rollout_behavior(EnvName::Bridge2d, Behavior::Random, 0.0, 9);
        let b = rollout_behavior(EnvName::Bridge2d, Behavior::Random, 0.0, 9);
        assert_eq!(a, b);
        assert!(a.is_chained());
    }

    #[test]
    fn expert_reaches_goal() {
        for seed in 0..20 {
            let t = rollout_behavior(EnvName::Bridge2d, Behavior::Expert, 0.0, seed);
            assert!(t.terminated, "seed {seed} len {}", t.len());
        }
    }

    #[test]
    fn mixture_proportions_are_exact() {
        let tier = PolicyTier::standard(Tier::MediumExpertMix, EnvName::Chain1d);
        let d = synthesize_offline_dataset(EnvName::Chain1d, tier, 60, 2);
        let experts = d
            .trajectories
            .iter()
            .filter(|t| t.behavior == Some(Behavior::Expert))
            .count();
        assert_eq!(experts, 30);
    }
}
