//! Behavioural cloning, online evaluation and distribution-similarity metrics.

use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::data::{Dataset, NormStats};
use crate::envs::{Env, EnvName, EnvSpec};
use crate::models::{fit_params, mlp_from_entry, regression_loss, split_indices, FitConfig, ModelError, TrainReport, TransitionTable};
use crate::checkpoint::Checkpoint;
use crate::nn::{Activation, Mlp, MlpArch};
use crate::rng::{derive_seed, rng_from};

/// Anything that maps a raw state to an action.
pub trait Policy {
    fn act(&self, s: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64>> Policy for F {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        self(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcPolicy {
    pub net: Mlp,
    pub norm: NormStats,
}

impl Policy for BcPolicy {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        self.net.forward_one(&self.norm.normalize_state(s)).expect("state dimension checked at training")
    }
}

pub const BC_KIND: &str = "bc_policy";

impl BcPolicy {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(BC_KIND);
        ck.set_norm(&self.norm);
        ck.push("policy", self.net.arch.describe(), &self.net.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.expect_kind(BC_KIND)?;
        Ok(Self {
            norm: ck.norm()?,
            net: mlp_from_entry(ck, "policy")?,
        })
    }
}

/// Regresses actions on normalized states with a ReLU MLP. The dataset's own
/// statistics are refit when they are still the identity placeholder.
pub fn train_bc(dataset: &Dataset, cfg: &FitConfig) -> Result<(BcPolicy, TrainReport), ModelError> {
    if dataset.num_transitions() == 0 {
        return Err(ModelError::EmptyDataset("behaviour cloning".into()));
    }
    let norm = crate::data::compute_norm_stats(dataset).map_err(|e| ModelError::Dimension(e.to_string()))?;
    let table = TransitionTable::from_dataset(dataset, &norm);
    let mut sizes = vec![dataset.state_dim];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(dataset.action_dim);
    let arch = MlpArch::new(&sizes, Activation::Relu);
    let mut params = arch.init_params(&mut rng_from(cfg.seed, 0));
    let (train, hold) = split_indices(table.len(), cfg.seed);
    let mut rng = rng_from(cfg.seed, 1);
    let (x, y) = (&table.states, &table.actions);
    let report = fit_params(
        "behaviour cloning",
        &mut params,
        &train,
        &hold,
        cfg,
        &mut rng,
        |p, b| regression_loss(&arch, p, x.select(Axis(0), b).view(), y.select(Axis(0), b).view()),
        |p, r| regression_loss(&arch, p, x.select(Axis(0), r).view(), y.select(Axis(0), r).view()).0,
    )?;
    Ok((
        BcPolicy {
            net: Mlp { arch, params },
            norm,
        },
        report,
    ))
}

/// Undiscounted return of `episodes` online episodes; episode `i` resets
/// with `derive_seed(seed, i)`. Actions are clipped to the action bound.
pub fn evaluate_policy<P: Policy + ?Sized>(env_name: EnvName, policy: &P, episodes: usize, seed: u64) -> Vec<f64> {
    (0..episodes)
        .map(|i| {
            let mut env = Env::new(env_name);
            let mut s = env.reset(derive_seed(seed, i as u64));
            let mut total = 0.0;
            while !env.is_done() {
                let a = env.clip_action(&policy.act(&s));
                let out = env.step_full(&a).expect("episode still running");
                total += out.reward;
                s = out.next_state;
            }
            total
        })
        .collect()
}

/// `100 * (score - random) / (expert - random)`.
pub fn normalized_score(score: f64, random_score: f64, expert_score: f64) -> f64 {
    100.0 * (score - random_score) / (expert_score - random_score)
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub env: String,
    pub seed: u64,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(env: EnvName, seed: u64, scores: Vec<f64>, config_hash: String) -> Self {
        let spec = EnvSpec::for_name(env);
        let (mean, std) = mean_std(&scores);
        let normalized: Vec<f64> = scores
            .iter()
            .map(|s| normalized_score(*s, spec.random_score, spec.expert_score))
            .collect();
        let (normalized_mean, normalized_std) = mean_std(&normalized);
        Self {
            env: env.to_string(),
            seed,
            scores,
            mean,
            std,
            normalized_mean,
            normalized_std,
            config_hash,
        }
    }
}

// ---------------------------------------------------------------------------
// Similarity metrics

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// `1 - mean_d KS(a[:, d], b[:, d])`.
pub fn ks_marginal(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let dims = a.ncols();
    let total: f64 = (0..dims)
        .map(|d| ks_statistic(&a.column(d).to_vec(), &b.column(d).to_vec()))
        .sum();
    1.0 - total / dims as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Feature correlation matrix; constant features correlate 0 with everything.
pub fn correlation_matrix(x: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let cols: Vec<Vec<f64>> = (0..d).map(|j| x.column(j).to_vec()).collect();
    Array2::from_shape_fn((d, d), |(i, j)| {
        if i == j {
            1.0
        } else {
            let r = pearson(&cols[i], &cols[j]);
            if r.is_nan() {
                0.0
            } else {
                r
            }
        }
    })
}

fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in i + 1..d {
            out.push(m[[i, j]]);
        }
    }
    out
}

/// Pearson correlation between the upper triangles of the two feature
/// correlation matrices. Degenerate triangles score 1 when equal and 0
/// otherwise.
pub fn correlation_similarity(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let ua = upper_triangle(&correlation_matrix(a));
    let ub = upper_triangle(&correlation_matrix(b));
    let r = pearson(&ua, &ub);
    if r.is_nan() {
        if ua == ub {
            1.0
        } else {
            0.0
        }
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub marginal: f64,
    pub correlation: f64,
}

pub fn similarity(a: ArrayView2<f64>, b: ArrayView2<f64>) -> SimilarityReport {
    SimilarityReport {
        marginal: ks_marginal(a, b),
        correlation: correlation_similarity(a, b),
    }
}

/// Rows of `(s, a, r, s')` for every transition.
pub fn transition_features(dataset: &Dataset) -> Array2<f64> {
    let width = 2 * dataset.state_dim + dataset.action_dim + 1;
    let mut out = Vec::with_capacity(dataset.num_transitions() * width);
    for t in dataset.transitions() {
        out.extend(t.state.iter().map(|&v| v as f64));
        out.extend(t.action.iter().map(|&v| v as f64));
        out.push(t.reward as f64);
        out.extend(t.next_state.iter().map(|&v| v as f64));
    }
    Array2::from_shape_vec((dataset.num_transitions(), width), out).unwrap()
}

/// Average ranks (ties share the mean rank), starting at 1.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let r = pearson(&ranks(x), &ranks(y));
    if r.is_nan() {
        0.0
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_score_endpoints() {
        assert_eq!(normalized_score(3.0, 1.0, 3.0), 100.0);
        assert_eq!(normalized_score(1.0, 1.0, 3.0), 0.0);
        assert_eq!(normalized_score(2.0, 1.0, 3.0), 50.0);
    }

    #[test]
    fn ks_extremes() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[5.0, 6.0, 7.0]), 1.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }
}
