//! Non-diffusion learners: inverse dynamics, a Gaussian forward-dynamics
//! ensemble and a pair of state-value functions.
//!
//! All networks consume normalized states. Public prediction methods take raw
//! states and normalize internally with the statistics captured at training
//! time.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{Dataset, NormStats};
use crate::nn::{self, sigmoid, Activation, Adam, Mlp, MlpArch, NnError};
use crate::rng::{derive_seed, rng_from, Rng};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;
pub const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{model} training diverged at step {step}: loss {loss}, parameter norm {param_norm}")]
    Diverged {
        model: String,
        step: usize,
        loss: f64,
        param_norm: f64,
    },
    #[error("cannot train {0} on an empty dataset")]
    EmptyDataset(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Optimization settings shared by every regressor in this module.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Held-out loss is recorded every `eval_every` steps.
    pub eval_every: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(hidden: &[usize], lr: f64, batch_size: usize, steps: usize, seed: u64) -> Self {
        Self {
            hidden: hidden.to_vec(),
            lr,
            batch_size,
            steps,
            eval_every: (steps / 20).max(1),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Loss over the full training split after the last step.
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub curve: Vec<CurvePoint>,
}

/// Flattened transitions of a dataset in model units.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1 where the transition enters a terminal state.
    pub terminal: Array1<f64>,
}

impl TransitionTable {
    /// States are normalized with `norm`; actions and rewards stay raw.
    pub fn from_dataset(dataset: &Dataset, norm: &NormStats) -> Self {
        let n = dataset.num_transitions();
        let (m, d) = (dataset.state_dim, dataset.action_dim);
        let mut states = Array2::zeros((n, m));
        let mut next_states = Array2::zeros((n, m));
        let mut actions = Array2::zeros((n, d));
        let mut rewards = Array1::zeros(n);
        let mut terminal = Array1::zeros(n);
        let mut row = 0;
        for traj in &dataset.trajectories {
            let last = traj.len() - 1;
            for (i, tr) in traj.transitions.iter().enumerate() {
                for (j, v) in norm.normalize_state(&tr.state).into_iter().enumerate() {
                    states[[row, j]] = v;
                }
                for (j, v) in norm.normalize_state(&tr.next_state).into_iter().enumerate() {
                    next_states[[row, j]] = v;
                }
                for (j, &v) in tr.action.iter().enumerate() {
                    actions[[row, j]] = v as f64;
                }
                rewards[row] = tr.reward as f64;
                terminal[row] = if traj.terminated && i == last { 1.0 } else { 0.0 };
                row += 1;
            }
        }
        Self {
            states,
            actions,
            rewards,
            next_states,
            terminal,
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic train/held-out split; the held-out part is 10% (at least one
/// row when there are two or more rows).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, 0x5917));
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_hold = ((n as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, n - 1);
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

fn param_norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Generic minibatch loop. `loss_grad(params, batch)` returns the loss and
/// gradient on a batch of row indices; `eval(params, rows)` returns the mean
/// loss on a set of rows.
pub(crate) fn fit_params(
    model: &str,
    params: &mut [f64],
    train: &[usize],
    heldout: &[usize],
    cfg: &FitConfig,
    rng: &mut Rng,
    mut loss_grad: impl FnMut(&[f64], &[usize]) -> (f64, Vec<f64>),
    mut eval: impl FnMut(&[f64], &[usize]) -> f64,
) -> Result<TrainReport, ModelError> {
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut report = TrainReport::default();
    let mut batch = vec![0usize; cfg.batch_size.min(train.len()).max(1)];
    for step in 1..=cfg.steps {
        for b in batch.iter_mut() {
            *b = train[rng.random_range(0..train.len())];
        }
        let (loss, grad) = loss_grad(params, &batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::Diverged {
                model: model.to_string(),
                step,
                loss,
                param_norm: param_norm(params),
            });
        }
        opt.step(params, &grad);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            report.curve.push(CurvePoint {
                step,
                train_loss: loss,
                heldout_loss: eval(params, heldout),
            });
        }
    }
    nn::round_to_f32(params);
    report.train_loss = eval(params, train);
    report.heldout_loss = eval(params, heldout);
    if !report.train_loss.is_finite() || !report.heldout_loss.is_finite() {
        return Err(ModelError::Diverged {
            model: model.to_string(),
            step: cfg.steps,
            loss: report.train_loss,
            param_norm: param_norm(params),
        });
    }
    Ok(report)
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn check_dim(what: &str, got: usize, expected: usize) -> Result<(), ModelError> {
    if got != expected {
        return Err(ModelError::Dimension(format!("{what}: got {got}, expected {expected}")));
    }
    Ok(())
}

fn hidden_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

// ---------------------------------------------------------------------------
// Inverse dynamics

/// Mean squared action error of an MLP regressor and its gradient.
pub fn regression_loss(arch: &MlpArch, p: &[f64], x: ArrayView2<f64>, y: ArrayView2<f64>) -> (f64, Vec<f64>) {
    let (out, cache) = arch.forward_train(p, x);
    let (loss, dout) = nn::mse(out.view(), y);
    let mut g = vec![0.0; p.len()];
    arch.backward(p, &cache, dout.view(), &mut g);
    (loss, g)
}

/// `a = f(s, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDynamics {
    pub net: Mlp,
    pub norm: NormStats,
}

impl InverseDynamics {
    /// An untrained model whose output layer is zero, so it predicts `0`.
    pub fn untrained(norm: NormStats, action_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let m = norm.state_dim();
        let mut net = Mlp::new(&hidden_sizes(2 * m, hidden, action_dim), Activation::Relu, &mut rng_from(seed, 0));
        net.zero_last_layer();
        Self { net, norm }
    }

    pub fn state_dim(&self) -> usize {
        self.norm.state_dim()
    }

    pub fn features(norm: &NormStats, s: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Array2<f64> {
        let n = s.nrows();
        let m = norm.state_dim();
        Array2::from_shape_fn((n, 2 * m), |(i, j)| {
            let (src, k) = if j < m { (&s, j) } else { (&s_next, j - m) };
            (src[[i, k]] - norm.state_mean[k]) / norm.state_std[k]
        })
    }

    /// Raw states in, unclipped actions out.
    pub fn predict(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_dim("state", s.len(), self.state_dim())?;
        check_dim("next state", s_next.len(), self.state_dim())?;
        let sv = ArrayView2::from_shape((1, s.len()), s).unwrap();
        let nv = ArrayView2::from_shape((1, s_next.len()), s_next).unwrap();
        Ok(self.predict_batch(sv, nv)?.row(0).to_vec())
    }

    pub fn predict_batch(&self, s: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        check_dim("state", s.ncols(), self.state_dim())?;
        check_dim("next state", s_next.ncols(), self.state_dim())?;
        Ok(self.net.forward(Self::features(&self.norm, s, s_next).view())?)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push(&format!("{prefix}idm"), self.net.arch.describe(), &self.net.params);
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, norm: NormStats) -> Result<Self, ModelError> {
        Ok(Self {
            net: mlp_from_entry(ck, &format!("{prefix}idm"))?,
            norm,
        })
    }
}

pub(crate) fn mlp_from_entry(ck: &Checkpoint, name: &str) -> Result<Mlp, ModelError> {
    let e = ck.entry(name)?;
    let arch = MlpArch::parse(&e.arch)
        .ok_or_else(|| CheckpointError::MalformedHeader(format!("bad architecture {:?}", e.arch)))?;
    if arch.num_params() != e.params.len() {
        return Err(CheckpointError::MalformedHeader(format!("{name}: parameter count does not match architecture")).into());
    }
    Ok(Mlp {
        arch,
        params: e.params.clone(),
    })
}

pub fn train_idm(dataset: &Dataset, cfg: &FitConfig) -> Result<(InverseDynamics, TrainReport), ModelError> {
    if dataset.num_transitions() == 0 {
        return Err(ModelError::EmptyDataset("inverse dynamics".into()));
    }
    let table = TransitionTable::from_dataset(dataset, &dataset.norm);
    let x = ndarray::concatenate(Axis(1), &[table.states.view(), table.next_states.view()]).unwrap();
    let y = table.actions;
    let mut idm = InverseDynamics::untrained(dataset.norm.clone(), dataset.action_dim, &cfg.hidden, cfg.seed);
    let arch = idm.net.arch.clone();
    let (train, hold) = split_indices(table.states.nrows(), cfg.seed);
    let mut rng = rng_from(cfg.seed, 1);
    let report = fit_params(
        "inverse dynamics",
        &mut idm.net.params,
        &train,
        &hold,
        cfg,
        &mut rng,
        |p, b| regression_loss(&arch, p, rows(&x, b).view(), rows(&y, b).view()),
        |p, r| regression_loss(&arch, p, rows(&x, r).view(), rows(&y, r).view()).0,
    )?;
    Ok((idm, report))
}

// ---------------------------------------------------------------------------
// Forward dynamics ensemble

/// Squashes `raw` into `(LOGVAR_MIN, LOGVAR_MAX)` with a shifted logistic
/// that maps 0 to 0; returns the value and its derivative.
pub fn soft_clamp_logvar(raw: f64) -> (f64, f64) {
    let span = LOGVAR_MAX - LOGVAR_MIN;
    let shift = (-LOGVAR_MIN / LOGVAR_MAX).ln();
    let sg = sigmoid(raw + shift);
    (LOGVAR_MIN + span * sg, span * sg * (1.0 - sg))
}

/// Gaussian negative log-likelihood without constants,
/// `mean_b Σ_j (μ - s')² / σ² + log σ²`, for a member whose output is
/// `[Δμ, raw log-variance]` with `μ = s + Δμ`.
pub fn dynamics_nll(arch: &MlpArch, p: &[f64], s: ArrayView2<f64>, s_next: ArrayView2<f64>) -> (f64, Vec<f64>) {
    let (out, cache) = arch.forward_train(p, s);
    let (b, m) = (s.nrows(), s.ncols());
    let mut dout = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for i in 0..b {
        for j in 0..m {
            let mu = s[[i, j]] + out[[i, j]];
            let (lv, dlv) = soft_clamp_logvar(out[[i, m + j]]);
            let inv = (-lv).exp();
            let diff = mu - s_next[[i, j]];
            loss += diff * diff * inv + lv;
            dout[[i, j]] = 2.0 * diff * inv / b as f64;
            dout[[i, m + j]] = (1.0 - diff * diff * inv) * dlv / b as f64;
        }
    }
    let mut g = vec![0.0; p.len()];
    arch.backward(p, &cache, dout.view(), &mut g);
    (loss / b as f64, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    pub members: Vec<Mlp>,
    /// Indices into `members` used for density queries, best first.
    pub selected: Vec<usize>,
    pub norm: NormStats,
}

/// Exact log-density of a diagonal Gaussian.
pub fn diag_gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (ln2pi + v.ln() + (x - m).powi(2) / v))
        .sum()
}

/// Stable `log(mean(exp(v)))`.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + (v.iter().map(|x| (x - mx).exp()).sum::<f64>() / v.len() as f64).ln()
}

impl DynamicsEnsemble {
    pub fn state_dim(&self) -> usize {
        self.norm.state_dim()
    }

    /// Predicted mean and variance of the next state in raw units.
    pub fn member_gaussian(&self, member: usize, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        check_dim("state", s.len(), self.state_dim())?;
        let sn = self.norm.normalize_state(s);
        let out = self.members[member].forward_one(&sn)?;
        let m = sn.len();
        let mut mean = Vec::with_capacity(m);
        let mut var = Vec::with_capacity(m);
        for j in 0..m {
            let sd = self.norm.state_std[j];
            mean.push((sn[j] + out[j]) * sd + self.norm.state_mean[j]);
            var.push(soft_clamp_logvar(out[m + j]).0.exp() * sd * sd);
        }
        Ok((mean, var))
    }

    /// `log p_i(s_next | s)` in raw units.
    pub fn logdensity(&self, member: usize, s: &[f64], s_next: &[f64]) -> Result<f64, ModelError> {
        check_dim("next state", s_next.len(), self.state_dim())?;
        let (mean, var) = self.member_gaussian(member, s)?;
        Ok(diag_gaussian_logpdf(s_next, &mean, &var))
    }

    /// Log-densities of `s_next` under every selected member.
    pub fn selected_logdensities(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.selected.iter().map(|&i| self.logdensity(i, s, s_next)).collect()
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set(
            &format!("{prefix}dynamics.selected"),
            self.selected.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        );
        ck.set(&format!("{prefix}dynamics.members"), self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            ck.push(&format!("{prefix}dynamics.{i}"), m.arch.describe(), &m.params);
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, norm: NormStats) -> Result<Self, ModelError> {
        let n: usize = ck.get_parsed(&format!("{prefix}dynamics.members"))?;
        let members = (0..n)
            .map(|i| mlp_from_entry(ck, &format!("{prefix}dynamics.{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let selected = ck
            .get(&format!("{prefix}dynamics.selected"))?
            .split(',')
            .map(|t| t.parse::<usize>().ok().filter(|&i| i < n))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CheckpointError::MalformedHeader("bad selected member list".into()))?;
        Ok(Self {
            members,
            selected,
            norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub members: Vec<TrainReport>,
    pub selected: Vec<usize>,
}

/// Trains `n_members` members from distinct seeds and keeps the `n_best`
/// with the lowest held-out NLL (ties go to the lower index).
pub fn train_dynamics_ensemble(
    dataset: &Dataset,
    cfg: &FitConfig,
    n_members: usize,
    n_best: usize,
) -> Result<(DynamicsEnsemble, EnsembleReport), ModelError> {
    if dataset.num_transitions() == 0 {
        return Err(ModelError::EmptyDataset("dynamics ensemble".into()));
    }
    let table = TransitionTable::from_dataset(dataset, &dataset.norm);
    let m = dataset.state_dim;
    let (train, hold) = split_indices(table.len(), cfg.seed);
    let arch = MlpArch::new(&hidden_sizes(m, &cfg.hidden, 2 * m), Activation::Relu);
    let mut members = Vec::with_capacity(n_members);
    let mut reports = Vec::with_capacity(n_members);
    for i in 0..n_members {
        let member_seed = derive_seed(cfg.seed, i as u64 + 1);
        let mut params = arch.init_params(&mut rng_from(member_seed, 0));
        let mut rng = rng_from(member_seed, 1);
        let report = fit_params(
            &format!("dynamics member {i}"),
            &mut params,
            &train,
            &hold,
            cfg,
            &mut rng,
            |p, b| dynamics_nll(&arch, p, rows(&table.states, b).view(), rows(&table.next_states, b).view()),
            |p, r| dynamics_nll(&arch, p, rows(&table.states, r).view(), rows(&table.next_states, r).view()).0,
        )?;
        members.push(Mlp {
            arch: arch.clone(),
            params,
        });
        reports.push(report);
    }
    let mut order: Vec<usize> = (0..n_members).collect();
    order.sort_by(|&a, &b| reports[a].heldout_loss.total_cmp(&reports[b].heldout_loss).then(a.cmp(&b)));
    order.truncate(n_best.clamp(1, n_members));
    Ok((
        DynamicsEnsemble {
            members,
            selected: order.clone(),
            norm: dataset.norm.clone(),
        },
        EnsembleReport {
            members: reports,
            selected: order,
        },
    ))
}

// ---------------------------------------------------------------------------
// Value functions

/// Squared TD error `mean (r + γ (1 - done) V_target(s') - V(s))²` and its
/// gradient with respect to the online parameters.
pub fn value_td_loss(
    arch: &MlpArch,
    p: &[f64],
    target: &[f64],
    s: ArrayView2<f64>,
    r: ArrayView1<f64>,
    s_next: ArrayView2<f64>,
    terminal: ArrayView1<f64>,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let v_next = arch.forward(target, s_next);
    let (v, cache) = arch.forward_train(p, s);
    let b = s.nrows() as f64;
    let mut dout = Array2::zeros(v.raw_dim());
    let mut loss = 0.0;
    for i in 0..s.nrows() {
        let y = r[i] + gamma * (1.0 - terminal[i]) * v_next[[i, 0]];
        let diff = v[[i, 0]] - y;
        loss += diff * diff;
        dout[[i, 0]] = 2.0 * diff / b;
    }
    let mut g = vec![0.0; p.len()];
    arch.backward(p, &cache, dout.view(), &mut g);
    (loss / b, g)
}

/// Two independently initialized value heads; queries return their minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePair {
    pub heads: [Mlp; 2],
    pub gamma: f64,
    pub norm: NormStats,
}

impl ValuePair {
    /// Per-head values of a raw state.
    pub fn head_values(&self, s: &[f64]) -> Result<[f64; 2], ModelError> {
        check_dim("state", s.len(), self.norm.state_dim())?;
        let sn = self.norm.normalize_state(s);
        Ok([self.heads[0].forward_one(&sn)?[0], self.heads[1].forward_one(&sn)?[0]])
    }

    pub fn value(&self, s: &[f64]) -> Result<f64, ModelError> {
        let [a, b] = self.head_values(s)?;
        Ok(a.min(b))
    }

    /// Values of many raw states (one per row).
    pub fn value_batch(&self, s: ArrayView2<f64>) -> Result<Vec<f64>, ModelError> {
        check_dim("state", s.ncols(), self.norm.state_dim())?;
        let sn = Array2::from_shape_fn(s.raw_dim(), |(i, j)| {
            (s[[i, j]] - self.norm.state_mean[j]) / self.norm.state_std[j]
        });
        let a = self.heads[0].forward(sn.view())?;
        let b = self.heads[1].forward(sn.view())?;
        Ok(a.column(0).iter().zip(b.column(0)).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set(&format!("{prefix}value.gamma"), format!("{:?}", self.gamma));
        for (i, h) in self.heads.iter().enumerate() {
            ck.push(&format!("{prefix}value.{i}"), h.arch.describe(), &h.params);
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, norm: NormStats) -> Result<Self, ModelError> {
        Ok(Self {
            heads: [
                mlp_from_entry(ck, &format!("{prefix}value.0"))?,
                mlp_from_entry(ck, &format!("{prefix}value.1"))?,
            ],
            gamma: ck.get_parsed(&format!("{prefix}value.gamma"))?,
            norm,
        })
    }
}

/// Polyak rate of the target networks.
pub const TARGET_TAU: f64 = 0.005;

/// Fits both heads by TD regression on raw rewards with slowly tracking
/// target networks. States are normalized with `norm`.
pub fn train_value(
    dataset: &Dataset,
    norm: &NormStats,
    gamma: f64,
    cfg: &FitConfig,
) -> Result<(ValuePair, [TrainReport; 2]), ModelError> {
    if dataset.num_transitions() == 0 {
        return Err(ModelError::EmptyDataset("value function".into()));
    }
    let t = TransitionTable::from_dataset(dataset, norm);
    let m = dataset.state_dim;
    let arch = MlpArch::new(&hidden_sizes(m, &cfg.hidden, 1), Activation::Relu);
    let (train, hold) = split_indices(t.len(), cfg.seed);
    let mut heads = Vec::new();
    let mut reports = Vec::new();
    for h in 0..2u64 {
        let head_seed = derive_seed(cfg.seed, 100 + h);
        let mut params = arch.init_params(&mut rng_from(head_seed, 0));
        let mut target = params.clone();
        let mut rng = rng_from(head_seed, 1);
        let report = {
            let target_cell = std::cell::RefCell::new(&mut target);
            fit_params(
                &format!("value head {h}"),
                &mut params,
                &train,
                &hold,
                cfg,
                &mut rng,
                |p, b| {
                    let mut tgt = target_cell.borrow_mut();
                    let out = value_td_loss(
                        &arch,
                        p,
                        tgt.as_slice(),
                        rows(&t.states, b).view(),
                        t.rewards.select(Axis(0), b).view(),
                        rows(&t.next_states, b).view(),
                        t.terminal.select(Axis(0), b).view(),
                        gamma,
                    );
                    for (tv, pv) in tgt.iter_mut().zip(p) {
                        *tv += TARGET_TAU * (pv - *tv);
                    }
                    out
                },
                |p, r| {
                    value_td_loss(
                        &arch,
                        p,
                        p,
                        rows(&t.states, r).view(),
                        t.rewards.select(Axis(0), r).view(),
                        rows(&t.next_states, r).view(),
                        t.terminal.select(Axis(0), r).view(),
                        gamma,
                    )
                    .0
                },
            )?
        };
        heads.push(Mlp {
            arch: arch.clone(),
            params,
        });
        reports.push(report);
    }
    let b = heads.pop().unwrap();
    let a = heads.pop().unwrap();
    let r1 = reports.pop().unwrap();
    let r0 = reports.pop().unwrap();
    Ok((
        ValuePair {
            heads: [a, b],
            gamma,
            norm: norm.clone(),
        },
        [r0, r1],
    ))
}

// ---------------------------------------------------------------------------
// Bundle

/// Inverse dynamics, dynamics ensemble and value pair trained on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub idm: InverseDynamics,
    pub dynamics: DynamicsEnsemble,
    pub value: ValuePair,
}

pub const BUNDLE_KIND: &str = "model_bundle";

impl ModelBundle {
    pub fn norm(&self) -> &NormStats {
        &self.idm.norm
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(BUNDLE_KIND);
        ck.set_norm(self.norm());
        self.idm.to_checkpoint(&mut ck, "");
        self.dynamics.to_checkpoint(&mut ck, "");
        self.value.to_checkpoint(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.expect_kind(BUNDLE_KIND)?;
        let norm = ck.norm()?;
        Ok(Self {
            idm: InverseDynamics::from_checkpoint(ck, "", norm.clone())?,
            dynamics: DynamicsEnsemble::from_checkpoint(ck, "", norm.clone())?,
            value: ValuePair::from_checkpoint(ck, "", norm)?,
        })
    }
}
