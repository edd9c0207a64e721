//! End-to-end runs: offline data, model training, generation pools, the
//! stitching loop and the ablation variants built on top of them.

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::config::DitsConfig;
use crate::data::{DataError, Dataset, Source, Trajectory, WindowSpec};
use crate::diffusion::{
    sample_windows, train_denoiser, ClampSpec, Condition, DiffusionError, Diffuser, Field, SamplerParams,
};
use crate::envs::{synthesize_offline_dataset, PolicyTier, Tier};
use crate::eval::{evaluate_policy, mean_std, similarity, train_bc, transition_features, EvalReport, SimilarityReport};
use crate::generation::{generate_batch, GenerationError, Planner};
use crate::models::{train_dynamics_ensemble, train_idm, train_value, DynamicsEnsemble, InverseDynamics, ModelError};
use crate::rng::{derive_seed, rng_from, stream};
use crate::stitching::{lambda_filter, stitch_epoch, LearnedModels, Provenance, StitchError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error("{0}")]
    Config(String),
}

/// Offline dataset for `cfg.env`/`cfg.tier` with fitted statistics.
pub fn offline_dataset(cfg: &DitsConfig, tier: Tier, n_traj: usize, seed: u64) -> Result<Dataset, PipelineError> {
    let mut ds = synthesize_offline_dataset(
        cfg.env,
        PolicyTier::standard(tier, cfg.env),
        n_traj,
        derive_seed(seed, stream::DATA),
    );
    ds.fit_normalization(WindowSpec {
        horizon: cfg.horizon,
        gamma: cfg.gamma,
    })?;
    Ok(ds)
}

/// Models trained once on the offline dataset.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub diffuser: Diffuser,
    /// Reward model over `(s, s', r)` blocks, present when `pair_reward` is set.
    pub pair: Option<Diffuser>,
    pub idm: InverseDynamics,
    pub dynamics: DynamicsEnsemble,
}

pub fn train_models(d0: &Dataset, cfg: &DitsConfig, seed: u64) -> Result<TrainedModels, PipelineError> {
    let (diffuser, _) = train_denoiser(d0, &cfg.denoiser(seed))?;
    let pair = if cfg.pair_reward {
        let mut d = d0.clone();
        d.fit_normalization(WindowSpec {
            horizon: 2,
            gamma: cfg.gamma,
        })?;
        Some(train_denoiser(&d, &cfg.pair_denoiser(seed))?.0)
    } else {
        None
    };
    let (idm, _) = train_idm(d0, &cfg.idm(seed))?;
    let (dynamics, _) = train_dynamics_ensemble(d0, &cfg.dynamics(seed), cfg.ensemble_size, cfg.ensemble_best)?;
    Ok(TrainedModels {
        diffuser,
        pair,
        idm,
        dynamics,
    })
}

pub fn planner<'a>(d: &'a Diffuser, cfg: &DitsConfig) -> Planner<'a, Diffuser> {
    Planner::from_diffuser(d, cfg.omega, cfg.alpha_temp, cfg.target_y, cfg.clip())
}

/// Seed of the generation pool for `epoch` (1-based).
pub fn pool_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(derive_seed(seed, stream::GENERATE), epoch as u64)
}

/// `n` generated trajectories for one epoch.
pub fn generate_pool(
    models: &TrainedModels,
    cfg: &DitsConfig,
    n: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Trajectory>, PipelineError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let gcfg = cfg.generation(n, pool_seed(seed, epoch));
    let (ds, _) = generate_batch(cfg.env, &planner(&models.diffuser, cfg), &models.idm, &gcfg)?;
    Ok(ds.trajectories)
}

/// One pool per stitching epoch. Rollout `i` of a pool does not depend on the
/// pool size, so a prefix of a pool equals a smaller pool.
pub fn generate_pools(
    models: &TrainedModels,
    cfg: &DitsConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<Trajectory>>, PipelineError> {
    (1..=cfg.stitch_epochs).map(|e| generate_pool(models, cfg, n, seed, e)).collect()
}

#[derive(Debug, Clone)]
pub struct DitsOutput {
    pub dataset: Dataset,
    pub provenance: Provenance,
}

/// The stitching loop: each epoch appends the first `n` trajectories of its
/// pool, refits the value function, stitches, keeps the best `|D_0|` and the
/// final dataset is passed through the return filter.
pub fn run_dits(
    d0: &Dataset,
    models: &TrainedModels,
    pools: &[Vec<Trajectory>],
    n: usize,
    cfg: &DitsConfig,
    seed: u64,
) -> Result<DitsOutput, PipelineError> {
    let scfg = cfg.stitch(seed);
    scfg.validate()?;
    if pools.len() < scfg.epochs {
        return Err(PipelineError::Config(format!(
            "{} generation pools for {} epochs",
            pools.len(),
            scfg.epochs
        )));
    }
    let keep = d0.len();
    let mut current = d0.clone();
    let mut reports = Vec::with_capacity(scfg.epochs);
    for epoch in 1..=scfg.epochs {
        let pool = &pools[epoch - 1];
        if pool.len() < n {
            return Err(PipelineError::Config(format!("pool of {} for n = {n}", pool.len())));
        }
        let mut merged = current;
        merged.extend_from(&pool[..n]);
        let (value, _) = train_value(&merged, &d0.norm, cfg.gamma, &cfg.value(seed, epoch))?;
        let (next, report) = match &models.pair {
            Some(pair) => {
                let lm = LearnedModels {
                    value: &value,
                    dynamics: &models.dynamics,
                    idm: &models.idm,
                    planner: planner(pair, cfg),
                    pair_layout: true,
                };
                stitch_epoch(&merged, &lm, &scfg, epoch, keep)?
            }
            None => {
                let lm = LearnedModels {
                    value: &value,
                    dynamics: &models.dynamics,
                    idm: &models.idm,
                    planner: planner(&models.diffuser, cfg),
                    pair_layout: false,
                };
                stitch_epoch(&merged, &lm, &scfg, epoch, keep)?
            }
        };
        reports.push(report);
        current = next;
    }
    let (dataset, lambda) = lambda_filter(&current, scfg.kappa);
    if dataset.is_empty() {
        return Err(StitchError::EmptyAfterFilter { lambda }.into());
    }
    let mut provenance = Provenance::count(&dataset);
    provenance.lambda = lambda;
    provenance.offline_to_generated = reports
        .iter()
        .flat_map(|r| &r.accepted_events)
        .filter(|e| e.from_source == Source::Offline && e.to_source == Source::Generated)
        .count();
    provenance.epochs = reports;
    Ok(DitsOutput { dataset, provenance })
}

/// `D_0` with the first `n` trajectories of every pool appended.
pub fn union_with_generated(d0: &Dataset, pools: &[Vec<Trajectory>], n: usize) -> Dataset {
    let mut out = d0.clone();
    for pool in pools {
        out.extend_from(&pool[..n.min(pool.len())]);
    }
    out
}

/// Trains BC on `dataset` and evaluates it online.
pub fn bc_score(dataset: &Dataset, cfg: &DitsConfig, seed: u64) -> Result<EvalReport, PipelineError> {
    let (policy, _) = train_bc(dataset, &cfg.bc(seed))?;
    let scores = evaluate_policy(cfg.env, &policy, cfg.eval_episodes, derive_seed(seed, stream::EVAL));
    Ok(EvalReport::new(cfg.env, seed, scores, config_hash(cfg)))
}

/// FNV-1a of the configuration text.
pub fn config_hash(cfg: &DitsConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in cfg.to_text().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// Free sampling for the similarity analysis

/// Transitions read off unclamped windows sampled under `cond`. Actions come
/// from the inverse dynamics model; features are `(s, a, r, s')` in raw units.
pub fn sample_transitions(
    diffuser: &Diffuser,
    idm: &InverseDynamics,
    cond: Condition,
    params: &SamplerParams,
    n_transitions: usize,
    seed: u64,
) -> Result<Array2<f64>, PipelineError> {
    let shape = diffuser.shape();
    let per_window = shape.horizon - 1;
    let n_windows = n_transitions.div_ceil(per_window);
    let m = shape.state_dim;
    let batch = 256;
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0;
    for start in (0..n_windows).step_by(batch) {
        let len = batch.min(n_windows - start);
        let clamps = vec![ClampSpec::new(); len];
        let conds = vec![cond; len];
        let mut rngs: Vec<_> = (start..start + len).map(|i| rng_from(seed, i as u64)).collect();
        let windows = sample_windows(diffuser, &diffuser.schedule, &clamps, &conds, params, &mut rngs)?;
        let mut s = Array2::zeros((len * per_window, m));
        let mut sn = Array2::zeros((len * per_window, m));
        let mut r = Vec::with_capacity(len * per_window);
        for (w, row) in windows.rows().into_iter().enumerate() {
            for b in 0..per_window {
                let cur = diffuser.norm.denormalize_state(&row.slice(ndarray::s![shape.slot(b, Field::State)]).to_vec());
                let next = diffuser
                    .norm
                    .denormalize_state(&row.slice(ndarray::s![shape.slot(b + 1, Field::State)]).to_vec());
                let k = w * per_window + b;
                for j in 0..m {
                    s[[k, j]] = cur[j];
                    sn[[k, j]] = next[j];
                }
                r.push(diffuser.norm.denormalize_reward(row[shape.slot(b, Field::Reward).start]));
            }
        }
        let a = idm.predict_batch(s.view(), sn.view())?;
        for k in 0..s.nrows() {
            if count == n_transitions {
                break;
            }
            rows.extend(s.row(k).iter());
            rows.extend(a.row(k).iter());
            rows.push(r[k]);
            rows.extend(sn.row(k).iter());
            count += 1;
        }
    }
    let width = 2 * m + idm.net.arch.sizes.last().copied().unwrap_or(0) + 1;
    Ok(Array2::from_shape_vec((count, width), rows).expect("rows are complete"))
}

/// Similarity of conditioned and unconditioned samples to a reference sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditioningReport {
    pub conditioned: SimilarityReport,
    pub unconditioned: SimilarityReport,
}

pub fn conditioning_effect(
    models: &TrainedModels,
    reference: &Dataset,
    cfg: &DitsConfig,
    n_transitions: usize,
    seed: u64,
) -> Result<ConditioningReport, PipelineError> {
    let params = SamplerParams {
        omega: cfg.omega,
        alpha_temp: cfg.alpha_temp,
        target_y: cfg.target_y,
        clip: cfg.clip().map(|c| models.diffuser.clip_bound(c)),
    };
    let reference = transition_features(reference);
    let cond = sample_transitions(
        &models.diffuser,
        &models.idm,
        Condition::Value(cfg.target_y),
        &params,
        n_transitions,
        seed,
    )?;
    let uncond = sample_transitions(&models.diffuser, &models.idm, Condition::Null, &params, n_transitions, seed)?;
    Ok(ConditioningReport {
        conditioned: similarity(cond.view(), reference.view()),
        unconditioned: similarity(uncond.view(), reference.view()),
    })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    NoStitcher,
    NoGenerator,
    NTrajSweep,
    OmegaSweep,
}

impl std::str::FromStr for AblationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "no_stitcher" => AblationKind::NoStitcher,
            "no_generator" => AblationKind::NoGenerator,
            "n_traj_sweep" => AblationKind::NTrajSweep,
            "omega_sweep" => AblationKind::OmegaSweep,
            _ => return Err(format!("unknown ablation kind {s:?}")),
        })
    }
}

/// One plotted point: `x` is the swept value (or 0 for single variants) and
/// `values` holds one entry per seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl AblationRow {
    pub fn new(label: impl Into<String>, x: f64, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            label: label.into(),
            x,
            mean,
            std,
            values,
        }
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,x,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.label, r.x, r.mean, r.std));
    }
    out
}

pub fn rows_to_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<14} {:>8} {:>10} {:>10}\n", "variant", "x", "mean", "std");
    for r in rows {
        out.push_str(&format!("{:<14} {:>8} {:>10.3} {:>10.3}\n", r.label, r.x, r.mean, r.std));
    }
    out
}

/// Normalized BC scores of every variant for one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStudy {
    pub seed: u64,
    pub offline: f64,
    pub full: f64,
    pub no_stitcher: f64,
    pub no_generator: f64,
    /// `(n, score, per-episode normalized std)` for every swept trajectory count.
    pub sweep: Vec<(usize, f64, f64)>,
    pub provenance: Provenance,
}

/// Which variants [`run_seed_study`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyPlan {
    pub ablations: bool,
    pub sweep: bool,
}

/// Trains the shared models once, generates pools of `max(n_new, sweep)` and
/// scores each requested variant with BC.
pub fn run_seed_study(cfg: &DitsConfig, seed: u64, plan: StudyPlan) -> Result<SeedStudy, PipelineError> {
    let d0 = offline_dataset(cfg, cfg.tier, cfg.n_offline, seed)?;
    let models = train_models(&d0, cfg, seed)?;
    let mut n_max = cfg.n_new;
    if plan.sweep {
        n_max = n_max.max(cfg.n_sweep.iter().copied().max().unwrap_or(0));
    }
    let pools = generate_pools(&models, cfg, n_max, seed)?;
    let full = run_dits(&d0, &models, &pools, cfg.n_new, cfg, seed)?;
    let mut study = SeedStudy {
        seed,
        offline: bc_score(&d0, cfg, seed)?.normalized_mean,
        full: bc_score(&full.dataset, cfg, seed)?.normalized_mean,
        no_stitcher: f64::NAN,
        no_generator: f64::NAN,
        sweep: Vec::new(),
        provenance: full.provenance,
    };
    if plan.ablations {
        study.no_stitcher = bc_score(&union_with_generated(&d0, &pools, cfg.n_new), cfg, seed)?.normalized_mean;
        let none = run_dits(&d0, &models, &pools, 0, cfg, seed)?;
        study.no_generator = bc_score(&none.dataset, cfg, seed)?.normalized_mean;
    }
    if plan.sweep {
        for &n in &cfg.n_sweep {
            let report = bc_score(&run_dits(&d0, &models, &pools, n, cfg, seed)?.dataset, cfg, seed)?;
            study.sweep.push((n, report.normalized_mean, report.normalized_std));
        }
    }
    Ok(study)
}

/// Rows of an ablation table over `cfg.seeds` seeds starting at `base_seed`.
pub fn run_ablation(kind: AblationKind, cfg: &DitsConfig, base_seed: u64) -> Result<Vec<AblationRow>, PipelineError> {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| base_seed + i).collect();
    match kind {
        AblationKind::NoStitcher | AblationKind::NoGenerator => {
            let plan = StudyPlan {
                ablations: true,
                sweep: false,
            };
            let studies = seeds
                .iter()
                .map(|&s| run_seed_study(cfg, s, plan))
                .collect::<Result<Vec<_>, _>>()?;
            let pick = |f: fn(&SeedStudy) -> f64| studies.iter().map(f).collect::<Vec<_>>();
            let variant = if kind == AblationKind::NoStitcher {
                AblationRow::new("no_stitcher", 0.0, pick(|s| s.no_stitcher))
            } else {
                AblationRow::new("no_generator", 0.0, pick(|s| s.no_generator))
            };
            Ok(vec![
                AblationRow::new("offline", 0.0, pick(|s| s.offline)),
                AblationRow::new("full", 0.0, pick(|s| s.full)),
                variant,
            ])
        }
        AblationKind::NTrajSweep => {
            let plan = StudyPlan {
                ablations: false,
                sweep: true,
            };
            let studies = seeds
                .iter()
                .map(|&s| run_seed_study(cfg, s, plan))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(cfg
                .n_sweep
                .iter()
                .enumerate()
                .map(|(i, &n)| AblationRow::new("n_traj", n as f64, studies.iter().map(|s| s.sweep[i].1).collect()))
                .collect())
        }
        AblationKind::OmegaSweep => {
            let mut per_omega: Vec<Vec<f64>> = vec![Vec::new(); cfg.omega_sweep.len()];
            for &seed in &seeds {
                let d0 = offline_dataset(cfg, cfg.tier, cfg.n_offline, seed)?;
                let models = train_models(&d0, cfg, seed)?;
                let expert = offline_dataset(cfg, Tier::Expert, cfg.n_offline, derive_seed(seed, 77))?;
                for (i, &omega) in cfg.omega_sweep.iter().enumerate() {
                    let mut c = cfg.clone();
                    c.omega = omega;
                    let rep = conditioning_effect(&models, &expert, &c, 2000, derive_seed(seed, stream::EVAL))?;
                    per_omega[i].push(rep.conditioned.correlation);
                }
            }
            Ok(cfg
                .omega_sweep
                .iter()
                .zip(per_omega)
                .map(|(&w, v)| AblationRow::new("omega", w, v))
                .collect())
        }
    }
}
