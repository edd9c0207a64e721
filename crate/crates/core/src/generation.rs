//! Receding-horizon trajectory generation through state-only interaction.
//!
//! At every environment step the recent state history is clamped into the
//! leading blocks of a fresh window, a window is sampled, the reward and the
//! planned next state are read off it, the inverse dynamics model turns the
//! plan into an action and the environment supplies the true next state.

use std::collections::VecDeque;

use ndarray::Array2;
use thiserror::Error;

use crate::data::{Dataset, NormStats, Source, Trajectory, Transition};
use crate::diffusion::{
    sample_windows, ClampSpec, Condition, DiffusionError, Diffuser, EpsilonModel, Field, NoiseSchedule, SamplerParams,
    WindowShape,
};
use crate::envs::{to_f32, Env, EnvError, EnvName, StateOnlyEnv};
use crate::models::{InverseDynamics, ModelError};
use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("rollout {rollout}: {source}")]
    Env {
        rollout: usize,
        #[source]
        source: EnvError,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid generation config: {0}")]
    Config(String),
}

/// Bounded FIFO of the most recent states, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryQueue {
    capacity: usize,
    states: VecDeque<Vec<f64>>,
}

impl HistoryQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            states: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, s: Vec<f64>) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.states.iter()
    }

    /// Exactly `capacity` states: the history left-padded with its oldest entry.
    pub fn padded(&self) -> Vec<Vec<f64>> {
        let first = self.states.front().expect("history is empty");
        let pad = self.capacity - self.states.len();
        std::iter::repeat_n(first, pad).chain(self.states.iter()).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub context: usize,
    pub horizon: usize,
    pub omega: f64,
    pub alpha_temp: f64,
    pub target_y: f64,
    pub n_traj: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Predicted clean windows are clipped to this multiple of the largest
    /// training value; `None` disables clipping.
    pub clip_margin: Option<f64>,
    /// Feed the planned next state back instead of stepping the environment.
    pub autoregressive: bool,
}

impl GenerationConfig {
    pub fn validate(&self, shape: &WindowShape, max_episode_len: usize) -> Result<(), GenerationError> {
        if self.context == 0 || self.context >= self.horizon {
            return Err(GenerationError::Config(format!(
                "need 1 <= C < H, got C={} H={}",
                self.context, self.horizon
            )));
        }
        if self.horizon != shape.horizon {
            return Err(GenerationError::Config(format!(
                "horizon {} differs from the diffuser's {}",
                self.horizon, shape.horizon
            )));
        }
        if self.max_steps == 0 || self.max_steps > max_episode_len {
            return Err(GenerationError::Config(format!(
                "max_steps {} outside 1..={max_episode_len}",
                self.max_steps
            )));
        }
        Ok(())
    }
}

/// A window model with the statistics to move between raw and model units.
pub struct Planner<'a, M: EpsilonModel + ?Sized> {
    pub model: &'a M,
    pub schedule: &'a NoiseSchedule,
    pub norm: &'a NormStats,
    pub params: SamplerParams,
}

impl<'a> Planner<'a, Diffuser> {
    pub fn from_diffuser(d: &'a Diffuser, omega: f64, alpha_temp: f64, target_y: f64, clip_margin: Option<f64>) -> Self {
        Self {
            model: d,
            schedule: &d.schedule,
            norm: &d.norm,
            params: SamplerParams {
                omega,
                alpha_temp,
                target_y,
                clip: clip_margin.map(|c| d.clip_bound(c)),
            },
        }
    }
}

impl<M: EpsilonModel + ?Sized> Planner<'_, M> {
    pub fn shape(&self) -> WindowShape {
        self.model.shape()
    }

    /// Samples one window per clamp set, all conditioned on `target_y`.
    pub fn sample(&self, clamps: &[ClampSpec], rngs: &mut [Rng]) -> Result<Array2<f64>, DiffusionError> {
        let conds = vec![Condition::Value(self.params.target_y); clamps.len()];
        sample_windows(self.model, self.schedule, clamps, &conds, &self.params, rngs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationStats {
    pub env_steps: usize,
    /// Reward evaluations made by the environments; always zero.
    pub reward_queries: usize,
}

struct Rollout {
    env: StateOnlyEnv,
    rng: Rng,
    history: HistoryQueue,
    state: Vec<f64>,
    transitions: Vec<Transition>,
    done: bool,
    terminated: bool,
}

/// Runs rollouts in lockstep until each is done. `envs` must already be reset
/// and `starts[i]` must be the state returned by that reset.
pub fn generate_rollouts<M: EpsilonModel + ?Sized>(
    envs: Vec<StateOnlyEnv>,
    starts: Vec<Vec<f64>>,
    rngs: Vec<Rng>,
    planner: &Planner<'_, M>,
    idm: &InverseDynamics,
    cfg: &GenerationConfig,
) -> Result<(Vec<Trajectory>, GenerationStats), GenerationError> {
    let shape = planner.shape();
    if let Some(env) = envs.first() {
        cfg.validate(&shape, env.spec().max_episode_len)?;
    }
    let c = cfg.context;
    let m = shape.state_dim;
    let mut rollouts: Vec<Rollout> = envs
        .into_iter()
        .zip(starts)
        .zip(rngs)
        .map(|((env, s0), rng)| Rollout {
            env,
            rng,
            history: HistoryQueue::new(c),
            state: s0,
            transitions: Vec::new(),
            done: false,
            terminated: false,
        })
        .collect();
    let mut stats = GenerationStats::default();
    loop {
        let active: Vec<usize> = (0..rollouts.len()).filter(|&i| !rollouts[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut clamps = Vec::with_capacity(active.len());
        for &i in &active {
            let r = &mut rollouts[i];
            r.history.push(r.state.clone());
            let mut spec = ClampSpec::new();
            for (j, s) in r.history.padded().iter().enumerate() {
                spec = spec.with(j, Field::State, planner.norm.normalize_state(s));
            }
            clamps.push(spec);
        }
        let mut rngs: Vec<Rng> = active.iter().map(|&i| rollouts[i].rng.clone()).collect();
        let windows = planner.sample(&clamps, &mut rngs)?;
        let reward_slot = shape.slot(c - 1, Field::Reward).start;
        let next_slot = shape.slot(c, Field::State);
        let mut cur = Array2::zeros((active.len(), m));
        let mut planned = Array2::zeros((active.len(), m));
        let mut rewards = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            rollouts[i].rng = rngs[row].clone();
            let w = windows.row(row);
            rewards.push(planner.norm.denormalize_reward(w[reward_slot]));
            let next: Vec<f64> = w.slice(ndarray::s![next_slot.clone()]).to_vec();
            let next = planner.norm.denormalize_state(&next);
            for j in 0..m {
                cur[[row, j]] = rollouts[i].state[j];
                planned[[row, j]] = next[j];
            }
        }
        let actions = idm.predict_batch(cur.view(), planned.view())?;
        for (row, &i) in active.iter().enumerate() {
            let r = &mut rollouts[i];
            let a = r.env.clip_action(actions.row(row).as_slice().unwrap());
            let s_next = if cfg.autoregressive {
                planned.row(row).to_vec()
            } else {
                let s = r
                    .env
                    .step_state(&a)
                    .map_err(|source| GenerationError::Env { rollout: i, source })?;
                stats.env_steps += 1;
                s
            };
            r.transitions.push(
                Transition::new(to_f32(&r.state), to_f32(&a), rewards[row] as f32, to_f32(&s_next))
                    .with_origin(Source::Generated),
            );
            // Store exactly what was recorded so the chain stays bit-exact.
            r.state = s_next.iter().map(|&v| v as f32 as f64).collect();
            r.terminated = !cfg.autoregressive && r.env.is_terminated();
            r.done = r.terminated || r.transitions.len() >= cfg.max_steps || (!cfg.autoregressive && r.env.is_done());
        }
    }
    let mut out = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        stats.reward_queries += r.env.reward_queries();
        out.push(Trajectory::new(r.transitions, r.terminated, Source::Generated));
    }
    Ok((out, stats))
}

/// One rollout from an environment that has just been reset to `start`.
pub fn generate_trajectory<M: EpsilonModel + ?Sized>(
    env: StateOnlyEnv,
    start: Vec<f64>,
    planner: &Planner<'_, M>,
    idm: &InverseDynamics,
    cfg: &GenerationConfig,
    rng: Rng,
) -> Result<(Trajectory, GenerationStats), GenerationError> {
    let (mut trajs, stats) = generate_rollouts(vec![env], vec![start], vec![rng], planner, idm, cfg)?;
    Ok((trajs.pop().unwrap(), stats))
}

/// `cfg.n_traj` rollouts; rollout `i` resets its environment with
/// `derive_seed(cfg.seed, i)` and samples from its own stream.
pub fn generate_batch<M: EpsilonModel + ?Sized>(
    env_name: EnvName,
    planner: &Planner<'_, M>,
    idm: &InverseDynamics,
    cfg: &GenerationConfig,
) -> Result<(Dataset, GenerationStats), GenerationError> {
    let spec = crate::envs::EnvSpec::for_name(env_name);
    let mut envs = Vec::with_capacity(cfg.n_traj);
    let mut starts = Vec::with_capacity(cfg.n_traj);
    let mut rngs = Vec::with_capacity(cfg.n_traj);
    for i in 0..cfg.n_traj {
        let seed = derive_seed(cfg.seed, i as u64);
        let mut env = StateOnlyEnv::new(Env::new(env_name));
        starts.push(env.reset(seed).iter().map(|&v| v as f32 as f64).collect());
        envs.push(env);
        rngs.push(rng_from(seed, 1));
    }
    let (trajs, stats) = generate_rollouts(envs, starts, rngs, planner, idm, cfg)?;
    Ok((Dataset::with_trajectories(spec.state_dim, spec.action_dim, trajs), stats))
}
