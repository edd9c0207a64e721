//! Conditional DDPM over windows of interleaved (state, reward) blocks.
//!
//! A window of horizon `H` over an `m`-dimensional state space is stored as a
//! flat row of `H * (m + 1)` normalized values: block `j` holds the state at
//! offset `j * (m + 1)` followed by the reward. The pair layout used for
//! reward imputation stores `(s, s', r)` blocks of width `2m + 1` instead.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::checkpoint::{fmt_floats, parse_floats, Checkpoint, CheckpointError};
use crate::data::{padded_window_return, window_starts, Dataset, NormStats, Trajectory};
use crate::models::{CurvePoint, TrainReport};
use crate::nn::{self, Activation, Adam, Dense, ParamLayout};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion needs at least one step")]
    ZeroSteps,
    #[error("diffusion step {k} outside 1..={big_k}")]
    StepOutOfRange { k: usize, big_k: usize },
    #[error("clamp block {block} outside horizon {horizon}")]
    ClampOutOfRange { block: usize, horizon: usize },
    #[error("clamp value has {got} entries, field has {expected}")]
    ClampWidth { got: usize, expected: usize },
    #[error("no training windows: every trajectory is shorter than the horizon {0}")]
    NoWindows(usize),
    #[error("denoiser training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid sampler parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ---------------------------------------------------------------------------
// Schedule

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            _ => Err(format!("unknown schedule {s:?}")),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

const MAX_BETA: f64 = 0.999;

/// Per-step noise levels. Vectors are indexed by `k - 1` for `k` in `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alphabars: Vec<f64>,
}

pub fn make_schedule(k: usize, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if k == 0 {
        return Err(DiffusionError::ZeroSteps);
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / k as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=k)
                .map(|i| (1.0 - f(i as f64) / f((i - 1) as f64)).clamp(1e-8, MAX_BETA))
                .collect()
        }
        ScheduleKind::Linear => {
            let scale = 1000.0 / k as f64;
            let (lo, hi) = (1e-4 * scale, 2e-2 * scale);
            (1..=k)
                .map(|i| {
                    let frac = if k == 1 { 1.0 } else { (i - 1) as f64 / (k - 1) as f64 };
                    (lo + frac * (hi - lo)).min(MAX_BETA)
                })
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alphabars = Vec::with_capacity(k);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alphabars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alphabars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<(), DiffusionError> {
        if k == 0 || k > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                k,
                big_k: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// `alphabar_k`, with `alphabar_0 = 1`.
    pub fn alphabar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alphabars[k - 1]
        }
    }

    /// Variance of `q(x_{k-1} | x_k, x_0)`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        (1.0 - self.alphabar(k - 1)) / (1.0 - self.alphabar(k)) * self.beta(k)
    }

    /// Coefficients `(c0, ck)` of the posterior mean `c0 * x0 + ck * x_k`.
    pub fn posterior_coefficients(&self, k: usize) -> (f64, f64) {
        let denom = 1.0 - self.alphabar(k);
        (
            self.alphabar(k - 1).sqrt() * self.beta(k) / denom,
            self.alpha(k).sqrt() * (1.0 - self.alphabar(k - 1)) / denom,
        )
    }
}

/// `x_k = sqrt(alphabar_k) x0 + sqrt(1 - alphabar_k) noise`.
pub fn forward_sample(x0: &[f64], k: usize, schedule: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(k)?;
    let ab = schedule.alphabar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

// ---------------------------------------------------------------------------
// Conditions and windows

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Value(f64),
    Null,
}

impl Condition {
    /// `[y, 1]` for a value and `[0, 0]` for the null token.
    pub fn features(self) -> [f64; 2] {
        match self {
            Condition::Value(y) => [y, 1.0],
            Condition::Null => [0.0, 0.0],
        }
    }
}

/// How a window row is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Blocks of `(s, r)`.
    Interleaved,
    /// Blocks of `(s, s', r)`.
    Pair,
}

impl Layout {
    pub fn block_width(self, m: usize) -> usize {
        match self {
            Layout::Interleaved => m + 1,
            Layout::Pair => 2 * m + 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Layout::Interleaved => "interleaved",
            Layout::Pair => "pair",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "interleaved" => Some(Layout::Interleaved),
            "pair" => Some(Layout::Pair),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    State,
    /// Second state of a pair block.
    NextState,
    Reward,
}

/// Geometry of a window row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub horizon: usize,
    pub state_dim: usize,
    pub layout: Layout,
}

impl WindowShape {
    pub fn block_width(&self) -> usize {
        self.layout.block_width(self.state_dim)
    }

    pub fn dim(&self) -> usize {
        self.horizon * self.block_width()
    }

    /// Column range of `field` inside block `block`.
    pub fn slot(&self, block: usize, field: Field) -> std::ops::Range<usize> {
        let base = block * self.block_width();
        let m = self.state_dim;
        match (self.layout, field) {
            (_, Field::State) => base..base + m,
            (Layout::Pair, Field::NextState) => base + m..base + 2 * m,
            (Layout::Interleaved, Field::NextState) => panic!("interleaved blocks have no next-state slot"),
            (Layout::Interleaved, Field::Reward) => base + m..base + m + 1,
            (Layout::Pair, Field::Reward) => base + 2 * m..base + 2 * m + 1,
        }
    }
}

/// Values to overwrite at every reverse step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClampSpec {
    pub entries: Vec<(usize, Field, Vec<f64>)>,
}

impl ClampSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, block: usize, field: Field, value: Vec<f64>) -> Self {
        self.entries.push((block, field, value));
        self
    }

    pub fn validate(&self, shape: &WindowShape) -> Result<(), DiffusionError> {
        for (block, field, v) in &self.entries {
            if *block >= shape.horizon {
                return Err(DiffusionError::ClampOutOfRange {
                    block: *block,
                    horizon: shape.horizon,
                });
            }
            let width = if *field == Field::Reward { 1 } else { shape.state_dim };
            if v.len() != width {
                return Err(DiffusionError::ClampWidth {
                    got: v.len(),
                    expected: width,
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, shape: &WindowShape, row: &mut [f64]) {
        for (block, field, v) in &self.entries {
            row[shape.slot(*block, *field)].copy_from_slice(v);
        }
    }
}

/// Normalized window row starting at step `t` of `traj`, absorbing-padded
/// past the end of terminated trajectories.
pub fn window_row(traj: &Trajectory, t: usize, shape: &WindowShape, norm: &NormStats) -> Vec<f64> {
    let len = traj.len();
    let mut row = Vec::with_capacity(shape.dim());
    for j in t..t + shape.horizon {
        let (s, s_next, r) = if j < len {
            let tr = &traj.transitions[j];
            (&tr.state, &tr.next_state, tr.reward)
        } else {
            let last = &traj.transitions[len - 1].next_state;
            (last, last, 0.0)
        };
        row.extend(norm.normalize_state(s));
        if shape.layout == Layout::Pair {
            row.extend(norm.normalize_state(s_next));
        }
        row.push(norm.normalize_reward(r as f64));
    }
    row
}

/// Maps a raw window return into `[0, 1]` using `bounds`.
pub fn normalize_condition(ret: f64, bounds: (f64, f64)) -> f64 {
    let span = bounds.1 - bounds.0;
    if span <= 0.0 {
        return 0.5;
    }
    ((ret - bounds.0) / span).clamp(0.0, 1.0)
}

/// Every training window of `dataset` with its normalized condition.
pub fn training_windows(dataset: &Dataset, shape: &WindowShape, gamma: f64) -> (Array2<f64>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for traj in &dataset.trajectories {
        for t in window_starts(traj, shape.horizon) {
            rows.extend(window_row(traj, t, shape, &dataset.norm));
            let ret = padded_window_return(traj, t, shape.horizon, gamma);
            ys.push(normalize_condition(ret, dataset.return_bounds));
        }
    }
    let n = ys.len();
    (Array2::from_shape_vec((n, shape.dim()), rows).unwrap(), ys)
}

// ---------------------------------------------------------------------------
// Denoiser network

/// Anything that predicts the noise in a batch of windows.
pub trait EpsilonModel {
    fn shape(&self) -> WindowShape;
    /// `x` has one window per row; `steps[i]` and `conds[i]` belong to row `i`.
    fn epsilon(&self, x: ArrayView2<f64>, steps: &[usize], conds: &[Condition]) -> Array2<f64>;
}

/// Size of the temporal residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserArch {
    pub shape: WindowShape,
    pub channels: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub embed_hidden: usize,
    pub kernel: usize,
}

/// One-dimensional convolution over the horizon with zero "same" padding,
/// implemented as a dense layer over unfolded neighbourhoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv1d {
    dense: Dense,
    kernel: usize,
    c_in: usize,
}

impl Conv1d {
    fn new(layout: &mut ParamLayout, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            dense: layout.dense(kernel * c_in, c_out),
            kernel,
            c_in,
        }
    }

    /// `x` is `(batch * horizon, c_in)`, rows ordered by batch then time.
    fn unfold(&self, x: ArrayView2<f64>, horizon: usize) -> Array2<f64> {
        let rows = x.nrows();
        let half = (self.kernel / 2) as isize;
        let mut cols = Array2::zeros((rows, self.kernel * self.c_in));
        for r in 0..rows {
            let t = (r % horizon) as isize;
            let base = r as isize - t;
            for o in 0..self.kernel {
                let tt = t + o as isize - half;
                if tt < 0 || tt >= horizon as isize {
                    continue;
                }
                let src = x.row((base + tt) as usize);
                cols.slice_mut(s![r, o * self.c_in..(o + 1) * self.c_in]).assign(&src);
            }
        }
        cols
    }

    fn fold(&self, dcols: ArrayView2<f64>, horizon: usize) -> Array2<f64> {
        let rows = dcols.nrows();
        let half = (self.kernel / 2) as isize;
        let mut dx = Array2::zeros((rows, self.c_in));
        for r in 0..rows {
            let t = (r % horizon) as isize;
            let base = r as isize - t;
            for o in 0..self.kernel {
                let tt = t + o as isize - half;
                if tt < 0 || tt >= horizon as isize {
                    continue;
                }
                let mut dst = dx.row_mut((base + tt) as usize);
                dst += &dcols.slice(s![r, o * self.c_in..(o + 1) * self.c_in]);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    time1: Dense,
    time2: Dense,
    cond1: Dense,
    cond2: Dense,
    conv_in: Conv1d,
    block_emb: Vec<Dense>,
    block_conv1: Vec<Conv1d>,
    block_conv2: Vec<Conv1d>,
    out: Dense,
    total: usize,
}

impl Layers {
    fn new(a: &DenoiserArch) -> Self {
        let f = a.shape.block_width();
        let (c, e) = (a.channels, a.embed_dim);
        let mut l = ParamLayout::default();
        let time1 = l.dense(e, a.embed_hidden);
        let time2 = l.dense(a.embed_hidden, e);
        let cond1 = l.dense(2, a.embed_hidden);
        let cond2 = l.dense(a.embed_hidden, e);
        let conv_in = Conv1d::new(&mut l, f, c, a.kernel);
        let mut block_emb = Vec::new();
        let mut block_conv1 = Vec::new();
        let mut block_conv2 = Vec::new();
        for _ in 0..a.blocks {
            block_emb.push(l.dense(2 * e, c));
            block_conv1.push(Conv1d::new(&mut l, c, c, a.kernel));
            block_conv2.push(Conv1d::new(&mut l, c, c, a.kernel));
        }
        let out = l.dense(c, f);
        Self {
            time1,
            time2,
            cond1,
            cond2,
            conv_in,
            block_emb,
            block_conv1,
            block_conv2,
            out,
            total: l.total(),
        }
    }
}

fn mish(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| Activation::Mish.apply(v))
}

fn mish_back(dy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut d = dy.clone();
    ndarray::Zip::from(&mut d)
        .and(pre)
        .for_each(|dv, &z| *dv *= Activation::Mish.derivative(z));
    d
}

/// Repeats each of `b` rows `h` times.
fn repeat_rows(x: &Array2<f64>, h: usize) -> Array2<f64> {
    let (b, c) = x.dim();
    Array2::from_shape_fn((b * h, c), |(r, j)| x[[r / h, j]])
}

fn sum_groups(x: &Array2<f64>, h: usize) -> Array2<f64> {
    let (bh, c) = x.dim();
    let mut out = Array2::zeros((bh / h, c));
    for r in 0..bh {
        let mut dst = out.row_mut(r / h);
        dst += &x.row(r);
    }
    out
}

struct BlockCache {
    cols1: Array2<f64>,
    pre1: Array2<f64>,
    cols2: Array2<f64>,
    pre2: Array2<f64>,
}

struct Cache {
    temb_in: Array2<f64>,
    t1: Array2<f64>,
    t1a: Array2<f64>,
    cond_in: Array2<f64>,
    c1: Array2<f64>,
    c1a: Array2<f64>,
    e: Array2<f64>,
    ea: Array2<f64>,
    cols_in: Array2<f64>,
    z0: Array2<f64>,
    blocks: Vec<BlockCache>,
    h_final: Array2<f64>,
}

/// Temporal residual network predicting the noise of a window.
///
/// The step and condition are embedded by two small MLPs; their concatenation
/// is projected and added to the first convolution of every residual block.
/// The first layer of the condition MLP starts at zero weight, so a model
/// that never sees a condition ignores it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub params: Vec<f64>,
    layers: Layers,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, seed: u64) -> Self {
        let layers = Layers::new(&arch);
        let mut params = vec![0.0; layers.total];
        let mut rng = rng_from(seed, 0);
        for d in [layers.time1, layers.time2, layers.cond1, layers.cond2, layers.conv_in.dense] {
            d.init(&mut params, &mut rng);
        }
        for i in 0..arch.blocks {
            layers.block_emb[i].init(&mut params, &mut rng);
            layers.block_conv1[i].dense.init(&mut params, &mut rng);
            layers.block_conv2[i].dense.init(&mut params, &mut rng);
        }
        layers.out.init(&mut params, &mut rng);
        layers.cond1.zero_weights(&mut params);
        Self { arch, params, layers }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn inputs(&self, steps: &[usize], conds: &[Condition]) -> (Array2<f64>, Array2<f64>) {
        let temb = nn::sinusoidal_embedding(steps, self.arch.embed_dim);
        let cond = Array2::from_shape_fn((conds.len(), 2), |(i, j)| conds[i].features()[j]);
        (temb, cond)
    }

    fn forward_cache(&self, p: &[f64], x: ArrayView2<f64>, steps: &[usize], conds: &[Condition]) -> (Array2<f64>, Cache) {
        let l = &self.layers;
        let h = self.arch.shape.horizon;
        let f = self.arch.shape.block_width();
        let b = x.nrows();
        let (temb_in, cond_in) = self.inputs(steps, conds);
        let t1 = l.time1.forward(p, temb_in.view());
        let t1a = mish(&t1);
        let t2 = l.time2.forward(p, t1a.view());
        let c1 = l.cond1.forward(p, cond_in.view());
        let c1a = mish(&c1);
        let c2 = l.cond2.forward(p, c1a.view());
        let e = ndarray::concatenate(Axis(1), &[t2.view(), c2.view()]).unwrap();
        let ea = mish(&e);

        let xr = x.to_shape((b * h, f)).unwrap().to_owned();
        let cols_in = l.conv_in.unfold(xr.view(), h);
        let z0 = l.conv_in.dense.forward(p, cols_in.view());
        let mut hcur = mish(&z0);
        let mut blocks = Vec::with_capacity(self.arch.blocks);
        for i in 0..self.arch.blocks {
            let proj = l.block_emb[i].forward(p, ea.view());
            let cols1 = l.block_conv1[i].unfold(hcur.view(), h);
            let pre1 = l.block_conv1[i].dense.forward(p, cols1.view()) + repeat_rows(&proj, h);
            let act1 = mish(&pre1);
            let cols2 = l.block_conv2[i].unfold(act1.view(), h);
            let pre2 = l.block_conv2[i].dense.forward(p, cols2.view());
            hcur = hcur + mish(&pre2);
            blocks.push(BlockCache {
                cols1,
                pre1,
                cols2,
                pre2,
            });
        }
        let out = l.out.forward(p, hcur.view());
        let out = out.into_shape_with_order((b, h * f)).unwrap();
        (
            out,
            Cache {
                temb_in,
                t1,
                t1a,
                cond_in,
                c1,
                c1a,
                e,
                ea,
                cols_in,
                z0,
                blocks,
                h_final: hcur,
            },
        )
    }

    /// Forward pass with explicit parameters.
    pub fn forward_with(&self, p: &[f64], x: ArrayView2<f64>, steps: &[usize], conds: &[Condition]) -> Array2<f64> {
        self.forward_cache(p, x, steps, conds).0
    }

    /// Accumulates the parameter gradient of `<dout, output>` into `g`.
    fn backward(&self, p: &[f64], cache: &Cache, dout: ArrayView2<f64>, g: &mut [f64]) {
        let l = &self.layers;
        let h = self.arch.shape.horizon;
        let f = self.arch.shape.block_width();
        let b = dout.nrows();
        let dout = dout.to_shape((b * h, f)).unwrap().to_owned();
        let mut dh = l.out.backward(p, cache.h_final.view(), dout.view(), g, true).unwrap();
        let mut dea = Array2::zeros(cache.ea.raw_dim());
        for i in (0..self.arch.blocks).rev() {
            let bc = &cache.blocks[i];
            let dpre2 = mish_back(&dh, &bc.pre2);
            let dcols2 = l.block_conv2[i].dense.backward(p, bc.cols2.view(), dpre2.view(), g, true).unwrap();
            let dact1 = l.block_conv2[i].fold(dcols2.view(), h);
            let dpre1 = mish_back(&dact1, &bc.pre1);
            let dproj = sum_groups(&dpre1, h);
            dea += &l.block_emb[i].backward(p, cache.ea.view(), dproj.view(), g, true).unwrap();
            let dcols1 = l.block_conv1[i].dense.backward(p, bc.cols1.view(), dpre1.view(), g, true).unwrap();
            dh += &l.block_conv1[i].fold(dcols1.view(), h);
        }
        let dz0 = mish_back(&dh, &cache.z0);
        l.conv_in.dense.backward(p, cache.cols_in.view(), dz0.view(), g, false);

        let de = mish_back(&dea, &cache.e);
        let e = self.arch.embed_dim;
        let dt2 = de.slice(s![.., ..e]).to_owned();
        let dc2 = de.slice(s![.., e..]).to_owned();
        let dt1a = l.time2.backward(p, cache.t1a.view(), dt2.view(), g, true).unwrap();
        let dt1 = mish_back(&dt1a, &cache.t1);
        l.time1.backward(p, cache.temb_in.view(), dt1.view(), g, false);
        let dc1a = l.cond2.backward(p, cache.c1a.view(), dc2.view(), g, true).unwrap();
        let dc1 = mish_back(&dc1a, &cache.c1);
        l.cond1.backward(p, cache.cond_in.view(), dc1.view(), g, false);
    }

    /// Denoising loss `mean ||eps - eps_theta(x_k, cond, k)||²` over all
    /// entries, and its gradient.
    pub fn loss_and_grad(
        &self,
        p: &[f64],
        x_k: ArrayView2<f64>,
        steps: &[usize],
        conds: &[Condition],
        noise: ArrayView2<f64>,
    ) -> (f64, Vec<f64>) {
        let (out, cache) = self.forward_cache(p, x_k, steps, conds);
        let (loss, dout) = nn::mse(out.view(), noise);
        let mut g = vec![0.0; p.len()];
        self.backward(p, &cache, dout.view(), &mut g);
        (loss, g)
    }

    fn describe(&self) -> String {
        let a = &self.arch;
        format!(
            "denoiser:{}:{}:{}:{}:{}:{}:{}:{}",
            a.shape.layout.name(),
            a.shape.horizon,
            a.shape.state_dim,
            a.channels,
            a.blocks,
            a.embed_dim,
            a.embed_hidden,
            a.kernel
        )
    }

    fn parse_arch(desc: &str) -> Option<DenoiserArch> {
        let parts: Vec<&str> = desc.split(':').collect();
        if parts.len() != 9 || parts[0] != "denoiser" {
            return None;
        }
        let n = |i: usize| parts[i].parse::<usize>().ok();
        Some(DenoiserArch {
            shape: WindowShape {
                layout: Layout::from_name(parts[1])?,
                horizon: n(2)?,
                state_dim: n(3)?,
            },
            channels: n(4)?,
            blocks: n(5)?,
            embed_dim: n(6)?,
            embed_hidden: n(7)?,
            kernel: n(8)?,
        })
    }
}

impl EpsilonModel for Denoiser {
    fn shape(&self) -> WindowShape {
        self.arch.shape
    }

    fn epsilon(&self, x: ArrayView2<f64>, steps: &[usize], conds: &[Condition]) -> Array2<f64> {
        self.forward_with(&self.params, x, steps, conds)
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Classifier-free guidance `(1 - ω) ε(∅) + ω ε(y)`, i.e.
/// `ε(∅) + ω (ε(y) - ε(∅))`, written so that ω = 0 and ω = 1 reproduce the
/// unconditional and conditional outputs bit for bit.
pub fn guided_epsilon<M: EpsilonModel + ?Sized>(
    model: &M,
    x_k: ArrayView2<f64>,
    conds: &[Condition],
    steps: &[usize],
    omega: f64,
) -> Array2<f64> {
    let b = x_k.nrows();
    let stacked = ndarray::concatenate(Axis(0), &[x_k, x_k]).unwrap();
    let mut all_steps = steps.to_vec();
    all_steps.extend_from_slice(steps);
    let mut all_conds = conds.to_vec();
    all_conds.extend(std::iter::repeat_n(Condition::Null, b));
    let eps = model.epsilon(stacked.view(), &all_steps, &all_conds);
    let cond = eps.slice(s![..b, ..]);
    let uncond = eps.slice(s![b.., ..]);
    let mut out = Array2::zeros((b, x_k.ncols()));
    ndarray::Zip::from(&mut out)
        .and(&uncond)
        .and(&cond)
        .for_each(|o, &u, &c| *o = (1.0 - omega) * u + omega * c);
    out
}

/// One reverse step. The posterior mean is formed through the predicted
/// `x0`, optionally clipped to `[-clip, clip]`; the variance is `alpha_temp`
/// times the posterior variance, and the final step (`k = 1`) adds no noise.
pub fn denoise_step(
    x_k: &[f64],
    eps: &[f64],
    k: usize,
    schedule: &NoiseSchedule,
    alpha_temp: f64,
    clip: Option<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(k)?;
    let ab = schedule.alphabar(k);
    let (c0, ck) = schedule.posterior_coefficients(k);
    let sd = if k > 1 {
        (alpha_temp * schedule.posterior_variance(k)).sqrt()
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(x_k.len());
    for (&x, &e) in x_k.iter().zip(eps) {
        let mut x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
        if let Some(c) = clip {
            x0 = x0.clamp(-c, c);
        }
        let mean = c0 * x0 + ck * x;
        let z: f64 = if sd > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
        out.push(mean + sd * z);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerParams {
    pub omega: f64,
    pub alpha_temp: f64,
    pub target_y: f64,
    /// Bound on the predicted clean window, in normalized units.
    pub clip: Option<f64>,
}

impl SamplerParams {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.omega >= 0.0) {
            return Err(DiffusionError::BadParams(format!("omega {} < 0", self.omega)));
        }
        if !(self.alpha_temp >= 0.0 && self.alpha_temp <= 1.0) {
            return Err(DiffusionError::BadParams(format!("alpha_temp {} outside [0, 1]", self.alpha_temp)));
        }
        Ok(())
    }
}

/// Draws one window per entry of `clamps`, each with its own generator, so a
/// row's result does not depend on what else is in the batch.
pub fn sample_windows<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    clamps: &[ClampSpec],
    conds: &[Condition],
    params: &SamplerParams,
    rngs: &mut [Rng],
) -> Result<Array2<f64>, DiffusionError> {
    params.validate()?;
    let shape = model.shape();
    for c in clamps {
        c.validate(&shape)?;
    }
    let b = clamps.len();
    let dim = shape.dim();
    let init_sd = params.alpha_temp.sqrt();
    let mut x = Array2::zeros((b, dim));
    for (i, rng) in rngs.iter_mut().enumerate().take(b) {
        for v in x.row_mut(i).iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = init_sd * z;
        }
    }
    for k in (1..=schedule.steps()).rev() {
        for (i, c) in clamps.iter().enumerate() {
            c.apply(&shape, x.row_mut(i).as_slice_mut().unwrap());
        }
        let steps = vec![k; b];
        let eps = guided_epsilon(model, x.view(), conds, &steps, params.omega);
        for i in 0..b {
            let next = denoise_step(
                x.row(i).as_slice().unwrap(),
                eps.row(i).as_slice().unwrap(),
                k,
                schedule,
                params.alpha_temp,
                params.clip,
                &mut rngs[i],
            )?;
            x.row_mut(i).assign(&ndarray::Array1::from(next));
        }
    }
    for (i, c) in clamps.iter().enumerate() {
        c.apply(&shape, x.row_mut(i).as_slice_mut().unwrap());
    }
    Ok(x)
}

/// Single-window convenience wrapper around [`sample_windows`].
pub fn sample_window<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    clamps: &ClampSpec,
    cond: Condition,
    params: &SamplerParams,
    rng: &mut Rng,
) -> Result<Vec<f64>, DiffusionError> {
    let mut rngs = [rng.clone()];
    let out = sample_windows(model, schedule, std::slice::from_ref(clamps), &[cond], params, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.row(0).to_vec())
}

// ---------------------------------------------------------------------------
// Trained model

/// A denoiser together with everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffuser {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub return_bounds: (f64, f64),
    pub gamma: f64,
    /// Largest absolute value seen in the training windows.
    pub data_bound: f64,
}

pub const DIFFUSER_KIND: &str = "diffuser";

impl Diffuser {
    pub fn shape(&self) -> WindowShape {
        self.denoiser.arch.shape
    }

    /// Clip bound for predicted clean windows.
    pub fn clip_bound(&self, margin: f64) -> f64 {
        self.data_bound * margin
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(DIFFUSER_KIND);
        ck.set_norm(&self.norm);
        ck.set("schedule.kind", self.schedule.kind);
        ck.set("schedule.steps", self.schedule.steps());
        ck.set("return_bounds", fmt_floats(&[self.return_bounds.0, self.return_bounds.1]));
        ck.set("gamma", format!("{:?}", self.gamma));
        ck.set("data_bound", format!("{:?}", self.data_bound));
        ck.push("denoiser", self.denoiser.describe(), &self.denoiser.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        ck.expect_kind(DIFFUSER_KIND)?;
        let norm = ck.norm()?;
        let kind: ScheduleKind = ck
            .get("schedule.kind")?
            .parse()
            .map_err(CheckpointError::MalformedHeader)?;
        let schedule = make_schedule(ck.get_parsed("schedule.steps")?, kind)?;
        let bounds = parse_floats(ck.get("return_bounds")?)
            .filter(|v| v.len() == 2)
            .ok_or_else(|| CheckpointError::MalformedHeader("bad return_bounds".into()))?;
        let entry = ck.entry("denoiser")?;
        let arch = Denoiser::parse_arch(&entry.arch)
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("bad denoiser arch {:?}", entry.arch)))?;
        let mut denoiser = Denoiser::new(arch, 0);
        if denoiser.params.len() != entry.params.len() {
            return Err(CheckpointError::MalformedHeader("denoiser parameter count mismatch".into()).into());
        }
        denoiser.params = entry.params.clone();
        Ok(Self {
            denoiser,
            schedule,
            norm,
            return_bounds: (bounds[0], bounds[1]),
            gamma: ck.get_parsed("gamma")?,
            data_bound: ck.get_parsed("data_bound")?,
        })
    }
}

impl EpsilonModel for Diffuser {
    fn shape(&self) -> WindowShape {
        self.denoiser.shape()
    }

    fn epsilon(&self, x: ArrayView2<f64>, steps: &[usize], conds: &[Condition]) -> Array2<f64> {
        self.denoiser.epsilon(x, steps, conds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub horizon: usize,
    pub layout: Layout,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub channels: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub embed_hidden: usize,
    pub kernel: usize,
    /// Probability of replacing the condition with the null token.
    pub cond_dropout: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Fits a denoiser on every window of `dataset` (normalized with the
/// dataset's statistics, conditions mapped through its return bounds).
pub fn train_denoiser(dataset: &Dataset, cfg: &DenoiserConfig) -> Result<(Diffuser, TrainReport), DiffusionError> {
    let schedule = make_schedule(cfg.diffusion_steps, cfg.schedule)?;
    let shape = WindowShape {
        horizon: cfg.horizon,
        state_dim: dataset.state_dim,
        layout: cfg.layout,
    };
    let (windows, ys) = training_windows(dataset, &shape, cfg.gamma);
    if windows.nrows() == 0 {
        return Err(DiffusionError::NoWindows(cfg.horizon));
    }
    let arch = DenoiserArch {
        shape,
        channels: cfg.channels,
        blocks: cfg.blocks,
        embed_dim: cfg.embed_dim,
        embed_hidden: cfg.embed_hidden,
        kernel: cfg.kernel,
    };
    let mut denoiser = Denoiser::new(arch, cfg.seed);
    let mut params = std::mem::take(&mut denoiser.params);
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut rng = rng_from(cfg.seed, 1);
    let n = windows.nrows();
    let dim = shape.dim();
    let bsz = cfg.batch_size.max(1);
    let log_every = (cfg.steps / 20).max(1);
    let mut report = TrainReport::default();
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut idx = vec![0usize; bsz];
    let mut steps = vec![0usize; bsz];
    let mut conds = vec![Condition::Null; bsz];
    for step in 1..=cfg.steps {
        for i in 0..bsz {
            idx[i] = rng.random_range(0..n);
            steps[i] = rng.random_range(1..=schedule.steps());
            conds[i] = if rng.random::<f64>() < cfg.cond_dropout {
                Condition::Null
            } else {
                Condition::Value(ys[idx[i]])
            };
        }
        let x0 = windows.select(Axis(0), &idx);
        let noise = Array2::from_shape_simple_fn((bsz, dim), || StandardNormal.sample(&mut rng));
        let mut x_k = Array2::zeros((bsz, dim));
        for i in 0..bsz {
            let ab = schedule.alphabar(steps[i]);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..dim {
                x_k[[i, j]] = a * x0[[i, j]] + b * noise[[i, j]];
            }
        }
        let (loss, grad) = denoiser.loss_and_grad(&params, x_k.view(), &steps, &conds, noise.view());
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffusionError::Diverged { step, loss });
        }
        opt.step(&mut params, &grad);
        running += loss;
        running_n += 1;
        if step % log_every == 0 || step == cfg.steps {
            report.curve.push(CurvePoint {
                step,
                train_loss: running / running_n as f64,
                heldout_loss: f64::NAN,
            });
            running = 0.0;
            running_n = 0;
        }
    }
    nn::round_to_f32(&mut params);
    denoiser.params = params;
    report.train_loss = report.curve.last().map_or(f64::NAN, |c| c.train_loss);
    report.heldout_loss = f64::NAN;
    let data_bound = windows.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((
        Diffuser {
            denoiser,
            schedule,
            norm: dataset.norm.clone(),
            return_bounds: dataset.return_bounds,
            gamma: cfg.gamma,
            data_bound,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> DenoiserArch {
        DenoiserArch {
            shape: WindowShape {
                horizon: 3,
                state_dim: 1,
                layout: Layout::Interleaved,
            },
            channels: 3,
            blocks: 1,
            embed_dim: 4,
            embed_hidden: 3,
            kernel: 3,
        }
    }

    #[test]
    fn schedule_rejects_zero_steps() {
        assert!(matches!(make_schedule(0, ScheduleKind::Cosine), Err(DiffusionError::ZeroSteps)));
    }

    #[test]
    fn conv_fold_is_adjoint_of_unfold() {
        let mut l = ParamLayout::default();
        let conv = Conv1d::new(&mut l, 2, 1, 3);
        let x = Array2::from_shape_fn((8, 2), |(i, j)| (i * 2 + j) as f64 * 0.1 - 0.3);
        let y = Array2::from_shape_fn((8, 6), |(i, j)| ((i + 3 * j) as f64).sin());
        let lhs = (&conv.unfold(x.view(), 4) * &y).sum();
        let rhs = (&x * &conv.fold(y.view(), 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let d = Denoiser::new(tiny_arch(), 5);
        let mut p = d.params.clone();
        // Give the zero-initialized condition weights some value.
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 0.7).sin();
        }
        let x = Array2::from_shape_fn((2, 6), |(i, j)| ((i * 6 + j) as f64 * 0.45).cos());
        let noise = Array2::from_shape_fn((2, 6), |(i, j)| ((i + j) as f64 * 0.3).sin());
        let steps = [3, 7];
        let conds = [Condition::Value(0.4), Condition::Null];
        let (_, g) = d.loss_and_grad(&p, x.view(), &steps, &conds, noise.view());
        let loss = |q: &[f64]| d.loss_and_grad(q, x.view(), &steps, &conds, noise.view()).0;
        assert!(p.len() <= 1000, "{}", p.len());
        let err = nn::grad_check(loss, &p, &g, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ds = Dataset::new(1, 1);
        ds.trajectories.push(Trajectory::new(
            (0..6)
                .map(|i| crate::data::Transition::new(vec![i as f32], vec![1.0], 1.0, vec![i as f32 + 1.0]))
                .collect(),
            false,
            crate::data::Source::Offline,
        ));
        ds.fit_normalization(crate::data::WindowSpec { horizon: 3, gamma: 0.9 }).unwrap();
        let cfg = DenoiserConfig {
            horizon: 3,
            layout: Layout::Interleaved,
            diffusion_steps: 5,
            schedule: ScheduleKind::Cosine,
            channels: 4,
            blocks: 1,
            embed_dim: 4,
            embed_hidden: 4,
            kernel: 3,
            cond_dropout: 0.25,
            gamma: 0.9,
            lr: 1e-3,
            batch_size: 4,
            steps: 3,
            seed: 1,
        };
        let (diff, _) = train_denoiser(&ds, &cfg).unwrap();
        let back = Diffuser::from_checkpoint(&Checkpoint::decode(&diff.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back, diff);
    }
}
