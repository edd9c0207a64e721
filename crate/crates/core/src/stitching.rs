//! Blending generated trajectories into an offline dataset by stitching.
//!
//! A walk follows a trajectory transition by transition. At each observed
//! next state it looks for nearby states anywhere in the dataset, picks the
//! one with the highest value and, if the dynamics ensemble finds it at least
//! as plausible as the observed next state and its value is higher, jumps to
//! it and continues along the trajectory that owns it. Rewards of the new
//! transitions come from the diffusion model.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, Source, Trajectory, Transition};
use crate::diffusion::{ClampSpec, DiffusionError, EpsilonModel, Field};
use crate::envs::{to_f32, to_f64};
use crate::generation::Planner;
use crate::models::{log_mean_exp, DynamicsEnsemble, InverseDynamics, ModelError, ValuePair};
use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("invalid stitching config: {0}")]
    Config(String),
    #[error("no trajectory survives the return filter (lambda = {lambda}); increase kappa")]
    EmptyAfterFilter { lambda: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchConfig {
    pub epochs: usize,
    /// New generated trajectories per epoch.
    pub n_new: usize,
    /// Neighbourhood radius in raw state units.
    pub rho: f64,
    pub p_tilde: f64,
    /// Final filter margin as a fraction of the reward-sum spread.
    pub kappa: f64,
    pub max_episode_len: usize,
    pub seed: u64,
}

impl StitchConfig {
    pub fn validate(&self) -> Result<(), StitchError> {
        if self.epochs == 0 {
            return Err(StitchError::Config("at least one stitching epoch is required".into()));
        }
        if !(self.rho > 0.0) {
            return Err(StitchError::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.p_tilde >= 0.0) {
            return Err(StitchError::Config(format!("p_tilde must be non-negative, got {}", self.p_tilde)));
        }
        if !(self.kappa >= 0.0) {
            return Err(StitchError::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if self.max_episode_len == 0 {
            return Err(StitchError::Config("max_episode_len must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Index

/// Position of a state: step `step` of trajectory `traj`, where
/// `step == len` denotes the final next state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct StatePos {
    pub traj: usize,
    pub step: usize,
}

/// Every state of a dataset with an exact radius lookup.
#[derive(Debug, Clone)]
pub struct StateIndex {
    pub positions: Vec<StatePos>,
    pub states: Vec<Vec<f64>>,
    lookup: HashMap<StatePos, usize>,
    cell: f64,
    grid: HashMap<Vec<i64>, Vec<usize>>,
}

impl StateIndex {
    /// `cell` is the grid spacing; queries with a radius up to `cell` touch
    /// only neighbouring cells, larger radii fall back to a full scan.
    pub fn build(dataset: &Dataset, cell: f64) -> Self {
        let mut positions = Vec::new();
        let mut states = Vec::new();
        for (ti, traj) in dataset.trajectories.iter().enumerate() {
            for step in 0..=traj.len() {
                positions.push(StatePos { traj: ti, step });
                states.push(to_f64(traj.state_at(step)));
            }
        }
        Self::from_states(positions, states, cell)
    }

    pub fn from_states(positions: Vec<StatePos>, states: Vec<Vec<f64>>, cell: f64) -> Self {
        let cell = if cell > 0.0 && cell.is_finite() { cell } else { 1.0 };
        let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, s) in states.iter().enumerate() {
            grid.entry(Self::key(s, cell)).or_default().push(i);
        }
        let lookup = positions.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        Self {
            positions,
            states,
            lookup,
            cell,
            grid,
        }
    }

    fn key(s: &[f64], cell: f64) -> Vec<i64> {
        s.iter().map(|v| (v / cell).floor() as i64).collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn id_of(&self, pos: StatePos) -> Option<usize> {
        self.lookup.get(&pos).copied()
    }

    /// Entry ids with `||state - s|| < rho`, in ascending id order.
    pub fn query(&self, s: &[f64], rho: f64) -> Vec<usize> {
        let within = |i: usize| dist(&self.states[i], s) < rho;
        let mut out: Vec<usize> = if rho <= self.cell && s.len() <= 6 {
            let base = Self::key(s, self.cell);
            let mut hits = Vec::new();
            let n_offsets = 3usize.pow(s.len() as u32);
            let mut key = base.clone();
            for code in 0..n_offsets {
                let mut c = code;
                for (d, k) in key.iter_mut().enumerate() {
                    *k = base[d] + (c % 3) as i64 - 1;
                    c /= 3;
                }
                if let Some(ids) = self.grid.get(&key) {
                    hits.extend(ids.iter().copied().filter(|&i| within(i)));
                }
            }
            hits
        } else {
            (0..self.len()).filter(|&i| within(i)).collect()
        };
        out.sort_unstable();
        out
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// States within the open ball of radius `rho` around the state at `query`,
/// excluding that occurrence itself.
pub fn neighborhood(index: &StateIndex, query: StatePos, rho: f64) -> Vec<usize> {
    let Some(qid) = index.id_of(query) else {
        return Vec::new();
    };
    index
        .query(&index.states[qid], rho)
        .into_iter()
        .filter(|&i| i != qid)
        .collect()
}

/// Highest-value candidate; ties go to the smallest `(traj, step)`.
pub fn select_candidate(candidates: &[usize], index: &StateIndex, values: &[f64]) -> Option<usize> {
    candidates.iter().copied().reduce(|best, c| {
        let (vb, vc) = (values[best], values[c]);
        if vc > vb || (vc == vb && index.positions[c] < index.positions[best]) {
            c
        } else {
            best
        }
    })
}

/// `min_i log p_i(s_hat | s) > log mean_i p_i(s_obs | s)`.
pub fn dynamics_criterion(logp_candidate: &[f64], logp_observed: &[f64]) -> bool {
    let min_c = logp_candidate.iter().cloned().fold(f64::INFINITY, f64::min);
    min_c > log_mean_exp(logp_observed)
}

// ---------------------------------------------------------------------------
// Model hooks

/// Everything a walk needs from learned models.
pub trait StitchModels {
    /// Values of raw states, one per row.
    fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>, StitchError>;
    /// Per-member log-densities of `s_next` given `s`.
    fn logdensities(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, StitchError>;
    fn action(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, StitchError>;
    /// Rewards of the transitions `pairs[i] = (s, s')`, drawing from `rngs[i]`.
    fn rewards(&self, pairs: &[(Vec<f64>, Vec<f64>)], rngs: &mut [Rng]) -> Result<Vec<f64>, StitchError>;
}

/// Reward imputation by clamping `s` and `s'` into the first two blocks of an
/// interleaved window and reading the first reward slot.
pub fn impute_rewards<M: EpsilonModel + ?Sized>(
    planner: &Planner<'_, M>,
    pairs: &[(Vec<f64>, Vec<f64>)],
    rngs: &mut [Rng],
) -> Result<Vec<f64>, DiffusionError> {
    let clamps: Vec<ClampSpec> = pairs
        .iter()
        .map(|(s, sn)| {
            ClampSpec::new()
                .with(0, Field::State, planner.norm.normalize_state(s))
                .with(1, Field::State, planner.norm.normalize_state(sn))
        })
        .collect();
    read_rewards(planner, &clamps, rngs)
}

/// Reward imputation with a pair-layout model: the first block's state and
/// next-state slots are clamped.
pub fn impute_rewards_pair<M: EpsilonModel + ?Sized>(
    planner: &Planner<'_, M>,
    pairs: &[(Vec<f64>, Vec<f64>)],
    rngs: &mut [Rng],
) -> Result<Vec<f64>, DiffusionError> {
    let clamps: Vec<ClampSpec> = pairs
        .iter()
        .map(|(s, sn)| {
            ClampSpec::new()
                .with(0, Field::State, planner.norm.normalize_state(s))
                .with(0, Field::NextState, planner.norm.normalize_state(sn))
        })
        .collect();
    read_rewards(planner, &clamps, rngs)
}

fn read_rewards<M: EpsilonModel + ?Sized>(
    planner: &Planner<'_, M>,
    clamps: &[ClampSpec],
    rngs: &mut [Rng],
) -> Result<Vec<f64>, DiffusionError> {
    if clamps.is_empty() {
        return Ok(Vec::new());
    }
    let windows = planner.sample(clamps, rngs)?;
    let slot = planner.shape().slot(0, Field::Reward).start;
    Ok(windows
        .rows()
        .into_iter()
        .map(|w| planner.norm.denormalize_reward(w[slot]))
        .collect())
}

/// Learned models behind [`StitchModels`].
pub struct LearnedModels<'a, M: EpsilonModel + ?Sized> {
    pub value: &'a ValuePair,
    pub dynamics: &'a DynamicsEnsemble,
    pub idm: &'a InverseDynamics,
    pub planner: Planner<'a, M>,
    pub pair_layout: bool,
}

impl<M: EpsilonModel + ?Sized> StitchModels for LearnedModels<'_, M> {
    fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>, StitchError> {
        Ok(self.value.value_batch(states.view())?)
    }

    fn logdensities(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, StitchError> {
        Ok(self.dynamics.selected_logdensities(s, s_next)?)
    }

    fn action(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, StitchError> {
        Ok(self.idm.predict(s, s_next)?)
    }

    fn rewards(&self, pairs: &[(Vec<f64>, Vec<f64>)], rngs: &mut [Rng]) -> Result<Vec<f64>, StitchError> {
        Ok(if self.pair_layout {
            impute_rewards_pair(&self.planner, pairs, rngs)?
        } else {
            impute_rewards(&self.planner, pairs, rngs)?
        })
    }
}

// ---------------------------------------------------------------------------
// Walks

/// Evidence behind one stitched transition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StitchEvent {
    pub epoch: usize,
    /// Trajectory being walked (index into the merged dataset).
    pub walk: usize,
    /// Index of the new transition inside the walk's output.
    pub out_step: usize,
    pub from: StatePos,
    /// Position the observed next state was replaced with.
    pub to: StatePos,
    pub observed: StatePos,
    pub from_source: Source,
    pub to_source: Source,
    pub distance: f64,
    pub logp_candidate_min: f64,
    pub logp_observed_logmeanexp: f64,
    pub value_candidate: f64,
    pub value_observed: f64,
    pub reward: f64,
}

/// A walk before reward imputation: transitions to copy or create.
#[derive(Debug, Clone, PartialEq)]
pub struct Walk {
    pub transitions: Vec<Transition>,
    /// Indices of transitions whose reward still has to be imputed.
    pub pending: Vec<usize>,
    pub events: Vec<StitchEvent>,
    pub terminated: bool,
}

/// Context shared by all walks of one epoch.
pub struct WalkContext<'a> {
    pub dataset: &'a Dataset,
    pub index: &'a StateIndex,
    /// Value of every index entry.
    pub values: &'a [f64],
    pub rho: f64,
    pub max_len: usize,
    pub epoch: usize,
}

/// Walks trajectory `start` of the context dataset.
pub fn stitch_walk<S: StitchModels + ?Sized>(ctx: &WalkContext<'_>, start: usize, models: &S) -> Result<Walk, StitchError> {
    let data = ctx.dataset;
    let mut walk = Walk {
        transitions: Vec::new(),
        pending: Vec::new(),
        events: Vec::new(),
        terminated: false,
    };
    let mut cur = StatePos { traj: start, step: 0 };
    let mut visited = HashSet::from([cur]);
    while walk.transitions.len() < ctx.max_len {
        let traj = &data.trajectories[cur.traj];
        if cur.step >= traj.len() {
            walk.terminated = traj.terminated;
            break;
        }
        let tr = &traj.transitions[cur.step];
        let observed = StatePos {
            traj: cur.traj,
            step: cur.step + 1,
        };
        let obs_id = ctx.index.id_of(observed).expect("index covers the dataset");
        let candidates: Vec<usize> = neighborhood(ctx.index, observed, ctx.rho)
            .into_iter()
            .filter(|&i| !visited.contains(&ctx.index.positions[i]))
            .collect();
        let mut jumped = None;
        if let Some(best) = select_candidate(&candidates, ctx.index, ctx.values) {
            let s = to_f64(&tr.state);
            let s_obs = &ctx.index.states[obs_id];
            let s_hat = &ctx.index.states[best];
            let (v_hat, v_obs) = (ctx.values[best], ctx.values[obs_id]);
            if v_hat > v_obs {
                let lp_hat = models.logdensities(&s, s_hat)?;
                let lp_obs = models.logdensities(&s, s_obs)?;
                if dynamics_criterion(&lp_hat, &lp_obs) {
                    let to = ctx.index.positions[best];
                    let a = models.action(&s, s_hat)?;
                    walk.pending.push(walk.transitions.len());
                    walk.events.push(StitchEvent {
                        epoch: ctx.epoch,
                        walk: start,
                        out_step: walk.transitions.len(),
                        from: cur,
                        to,
                        observed,
                        from_source: tr.origin,
                        to_source: data.trajectories[to.traj].source,
                        distance: dist(s_obs, s_hat),
                        logp_candidate_min: lp_hat.iter().cloned().fold(f64::INFINITY, f64::min),
                        logp_observed_logmeanexp: log_mean_exp(&lp_obs),
                        value_candidate: v_hat,
                        value_observed: v_obs,
                        reward: f64::NAN,
                    });
                    walk.transitions.push(
                        Transition::new(tr.state.clone(), to_f32(&a), 0.0, data.trajectories[to.traj].state_at(to.step).to_vec())
                            .with_origin(Source::Stitched),
                    );
                    jumped = Some(to);
                }
            }
        }
        let next = match jumped {
            Some(to) => to,
            None => {
                walk.transitions.push(tr.clone());
                observed
            }
        };
        if !visited.insert(next) {
            break;
        }
        cur = next;
    }
    Ok(walk)
}

/// Fills in the pending rewards of `walks` with one batched imputation call.
/// Pair `j` (in walk order) draws from `rng_from(seed, j)`.
pub fn impute_walk_rewards<S: StitchModels + ?Sized>(walks: &mut [Walk], models: &S, seed: u64) -> Result<(), StitchError> {
    let mut pairs = Vec::new();
    for w in walks.iter() {
        for &i in &w.pending {
            let t = &w.transitions[i];
            pairs.push((to_f64(&t.state), to_f64(&t.next_state)));
        }
    }
    let mut rngs: Vec<Rng> = (0..pairs.len()).map(|j| rng_from(seed, j as u64)).collect();
    let rewards = models.rewards(&pairs, &mut rngs)?;
    let mut k = 0;
    for w in walks.iter_mut() {
        for (e, &i) in w.events.iter_mut().zip(&w.pending) {
            w.transitions[i].reward = rewards[k] as f32;
            e.reward = rewards[k];
            k += 1;
        }
    }
    Ok(())
}

/// `candidate > original + p_tilde * |original|`.
pub fn accept(candidate_sum: f64, original_sum: f64, p_tilde: f64) -> bool {
    candidate_sum > original_sum + p_tilde * original_sum.abs()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub merged_trajectories: usize,
    pub walks_with_stitches: usize,
    pub accepted: usize,
    pub kept: usize,
    pub accepted_events: Vec<StitchEvent>,
}

/// One stitching pass over `merged` (the current dataset with this epoch's
/// generated trajectories appended): walk every trajectory, impute rewards,
/// keep accepted walks, then return the `keep` trajectories with the largest
/// undiscounted reward sums (ties keep the earlier trajectory).
pub fn stitch_epoch<S: StitchModels + ?Sized>(
    merged: &Dataset,
    models: &S,
    cfg: &StitchConfig,
    epoch: usize,
    keep: usize,
) -> Result<(Dataset, EpochReport), StitchError> {
    let index = StateIndex::build(merged, cfg.rho);
    let states = Array2::from_shape_fn((index.len(), merged.state_dim), |(i, j)| index.states[i][j]);
    let values = models.values(&states)?;
    let ctx = WalkContext {
        dataset: merged,
        index: &index,
        values: &values,
        rho: cfg.rho,
        max_len: cfg.max_episode_len,
        epoch,
    };
    let mut walks = (0..merged.len())
        .map(|t| stitch_walk(&ctx, t, models))
        .collect::<Result<Vec<_>, _>>()?;
    impute_walk_rewards(&mut walks, models, derive_seed(cfg.seed, 1000 + epoch as u64))?;

    let mut report = EpochReport {
        epoch,
        merged_trajectories: merged.len(),
        ..Default::default()
    };
    let mut out: Vec<Trajectory> = Vec::with_capacity(merged.len());
    for (orig, walk) in merged.trajectories.iter().zip(walks) {
        if walk.events.is_empty() {
            out.push(orig.clone());
            continue;
        }
        report.walks_with_stitches += 1;
        let mut cand = Trajectory::new(walk.transitions, walk.terminated, Source::Stitched);
        cand.behavior = orig.behavior;
        if accept(cand.reward_sum(), orig.reward_sum(), cfg.p_tilde) {
            report.accepted += 1;
            report.accepted_events.extend(walk.events);
            out.push(cand);
        } else {
            out.push(orig.clone());
        }
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    let sums: Vec<f64> = out.iter().map(Trajectory::reward_sum).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    order.truncate(keep);
    let mut next = merged.clone();
    next.trajectories = order.iter().map(|&i| out[i].clone()).collect();
    report.kept = next.len();
    Ok((next, report))
}

/// Keeps trajectories whose reward sum is at least `max - kappa * (max - min)`.
pub fn lambda_filter(dataset: &Dataset, kappa: f64) -> (Dataset, f64) {
    let sums: Vec<f64> = dataset.trajectories.iter().map(Trajectory::reward_sum).collect();
    let max = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda = max - kappa * (max - min);
    let mut out = dataset.clone();
    out.trajectories = dataset
        .trajectories
        .iter()
        .zip(&sums)
        .filter(|(_, &s)| s >= lambda)
        .map(|(t, _)| t.clone())
        .collect();
    (out, lambda)
}

/// Transition counts of a dataset by origin, plus the stitch events that
/// produced it.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Provenance {
    pub trajectories: usize,
    pub offline_transitions: usize,
    pub generated_transitions: usize,
    pub stitched_transitions: usize,
    /// Accepted stitches that jumped from an offline state onto a generated trajectory.
    pub offline_to_generated: usize,
    pub lambda: f64,
    pub epochs: Vec<EpochReport>,
}

impl Provenance {
    pub fn count(dataset: &Dataset) -> Self {
        let mut p = Provenance {
            trajectories: dataset.len(),
            ..Default::default()
        };
        for t in dataset.transitions() {
            match t.origin {
                Source::Offline => p.offline_transitions += 1,
                Source::Generated => p.generated_transitions += 1,
                Source::Stitched => p.stitched_transitions += 1,
            }
        }
        p
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("provenance serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_uses_signed_margin() {
        assert!(!accept(10.5, 10.0, 0.1));
        assert!(accept(11.01, 10.0, 0.1));
        assert!(!accept(11.0, 10.0, 0.1));
        assert!(accept(-0.8, -1.0, 0.1));
        assert!(!accept(-0.95, -1.0, 0.1));
    }

    #[test]
    fn neighborhood_excludes_the_query_only() {
        let positions = (0..4).map(|i| StatePos { traj: i, step: 0 }).collect();
        let states = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 0.0]];
        let idx = StateIndex::from_states(positions, states, 1.5);
        assert_eq!(neighborhood(&idx, StatePos { traj: 0, step: 0 }, 1.5), vec![1, 3]);
        assert!(neighborhood(&idx, StatePos { traj: 2, step: 0 }, 1e-9).is_empty());
    }

    #[test]
    fn candidate_ties_prefer_lowest_position() {
        let positions = vec![
            StatePos { traj: 2, step: 0 },
            StatePos { traj: 1, step: 4 },
            StatePos { traj: 1, step: 3 },
        ];
        let idx = StateIndex::from_states(positions, vec![vec![0.0]; 3], 1.0);
        assert_eq!(select_candidate(&[0, 1, 2], &idx, &[1.0, 5.0, 3.0]), Some(1));
        assert_eq!(select_candidate(&[0, 1, 2], &idx, &[2.0, 2.0, 2.0]), Some(2));
        assert_eq!(select_candidate(&[], &idx, &[]), None);
    }
}
