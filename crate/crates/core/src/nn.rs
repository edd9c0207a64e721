//! Differentiable function approximators with hand-written backward passes.
//!
//! Every network keeps its parameters in one flat `Vec<f64>`; layers are
//! views into it at fixed offsets. That keeps the optimizer, the gradient
//! checker and the checkpoint format independent of architecture.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("gradient has {got} entries, parameters have {expected}")]
    GradientLength { got: usize, expected: usize },
    #[error("input has {got} columns, network expects {expected}")]
    InputDim { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Mish,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Mish => x * softplus(x).tanh(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Mish => {
                let sp = softplus(x);
                let t = sp.tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Mish => "mish",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "relu" => Activation::Relu,
            "mish" => Activation::Mish,
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            _ => return None,
        })
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A fully connected layer stored at `offset`: an `n_in x n_out` weight
/// matrix (row-major) followed by `n_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub offset: usize,
}

impl Dense {
    pub fn num_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.n_in * self.n_out;
        ArrayView2::from_shape((self.n_in, self.n_out), &p[self.offset..self.offset + n]).unwrap()
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.n_in * self.n_out;
        ArrayView1::from(&p[start..start + self.n_out])
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.n_out));
        y += &self.bias(p);
        general_mat_mul(1.0, &x, &self.weight(p), 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient
    /// when `want_dx`.
    pub fn backward(
        &self,
        p: &[f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        g: &mut [f64],
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let n = self.n_in * self.n_out;
        {
            let mut gw =
                ArrayViewMut2::from_shape((self.n_in, self.n_out), &mut g[self.offset..self.offset + n]).unwrap();
            general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut gw);
        }
        let gb = &mut g[self.offset + n..self.offset + n + self.n_out];
        for row in dy.rows() {
            for (acc, v) in gb.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
        want_dx.then(|| dy.dot(&self.weight(p).t()))
    }

    /// Uniform `±1/sqrt(n_in)` initialization for weights and biases.
    pub fn init(&self, p: &mut [f64], rng: &mut Rng) {
        let bound = 1.0 / (self.n_in as f64).sqrt();
        for v in &mut p[self.offset..self.offset + self.num_params()] {
            *v = rng.random_range(-bound..bound);
        }
    }

    pub fn zero(&self, p: &mut [f64]) {
        p[self.offset..self.offset + self.num_params()].fill(0.0);
    }

    pub fn zero_weights(&self, p: &mut [f64]) {
        p[self.offset..self.offset + self.n_in * self.n_out].fill(0.0);
    }
}

/// Hands out consecutive parameter ranges.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    total: usize,
}

impl ParamLayout {
    pub fn dense(&mut self, n_in: usize, n_out: usize) -> Dense {
        let d = Dense {
            n_in,
            n_out,
            offset: self.total,
        };
        self.total += d.num_params();
        d
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Architecture of a multilayer perceptron: hidden layers use `activation`,
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    layers: Vec<Dense>,
    num_params: usize,
}

pub struct MlpCache {
    /// Inputs to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
}

impl MlpArch {
    pub fn new(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut layout = ParamLayout::default();
        let layers = sizes.windows(2).map(|w| layout.dense(w[0], w[1])).collect();
        Self {
            sizes: sizes.to_vec(),
            activation,
            layers,
            num_params: layout.total(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params];
        for l in &self.layers {
            l.init(&mut p, rng);
        }
        p
    }

    pub fn last_layer(&self) -> Dense {
        *self.layers.last().unwrap()
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, h.view());
            if i != last {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        h
    }

    pub fn forward_train(&self, p: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        let mut out = None;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(p, inputs[i].view());
            if i == last {
                out = Some(z);
            } else {
                let act = self.activation;
                inputs.push(z.mapv(|v| act.apply(v)));
                pre.push(z);
            }
        }
        (out.unwrap(), MlpCache { inputs, pre })
    }

    /// Backpropagates `dout`; accumulates into `g` and returns the input gradient.
    pub fn backward(&self, p: &[f64], cache: &MlpCache, dout: ArrayView2<f64>, g: &mut [f64]) -> Array2<f64> {
        let mut d = dout.to_owned();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i]
                .backward(p, cache.inputs[i].view(), d.view(), g, true)
                .unwrap();
            d = dx;
            if i > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut d)
                    .and(&cache.pre[i - 1])
                    .for_each(|dv, &z| *dv *= act.derivative(z));
            }
        }
        d
    }

    pub fn describe(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        format!("mlp:{}:{}", sizes.join("x"), self.activation.name())
    }

    pub fn parse(desc: &str) -> Option<Self> {
        let mut parts = desc.split(':');
        if parts.next()? != "mlp" {
            return None;
        }
        let sizes: Vec<usize> = parts.next()?.split('x').map(|s| s.parse().ok()).collect::<Option<_>>()?;
        let act = Activation::from_name(parts.next()?)?;
        (sizes.len() >= 2).then(|| Self::new(&sizes, act))
    }
}

/// An MLP together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: MlpArch,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        let arch = MlpArch::new(sizes, activation);
        let params = arch.init_params(rng);
        Self { arch, params }
    }

    pub fn zero_last_layer(&mut self) {
        self.arch.last_layer().zero(&mut self.params);
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.arch.input_dim() {
            return Err(NnError::InputDim {
                got: x.ncols(),
                expected: self.arch.input_dim(),
            });
        }
        Ok(self.arch.forward(&self.params, x))
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let v = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward(v)?.into_raw_vec_and_offset().0)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

/// Rounds every entry to the nearest `f32` so that checkpoints reproduce
/// trained parameters exactly.
pub fn round_to_f32(p: &mut [f64]) {
    for v in p {
        *v = *v as f32 as f64;
    }
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Scales `g` so that its L2 norm is at most `max_norm`.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Largest relative error between `analytic` and central differences of `loss`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64, NnError> {
    if !(eps > 0.0) {
        return Err(NnError::BadStep(eps));
    }
    if analytic.len() != params.len() {
        return Err(NnError::GradientLength {
            got: analytic.len(),
            expected: params.len(),
        });
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Mean squared error over all entries and its gradient with respect to `pred`.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Deterministic row subset helper used by the training loops.
pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Sinusoidal embedding of integer steps, `dim` must be even.
pub fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((steps.len(), dim));
    let scale = if half > 1 { (10000f64).ln() / (half - 1) as f64 } else { 0.0 };
    for (r, &k) in steps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * scale).exp();
            let a = k as f64 * freq;
            out[[r, j]] = a.sin();
            out[[r, half + j]] = a.cos();
        }
    }
    out
}

/// Sums rows into a vector (used for bias-like broadcasts).
pub fn column_sums(x: ArrayView2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn quadratic_grad_check_is_tight() {
        let params = vec![0.3, -1.2, 2.0];
        let loss = |p: &[f64]| p.iter().map(|v| 3.0 * v * v).sum::<f64>();
        let grad: Vec<f64> = params.iter().map(|v| 6.0 * v).collect();
        let err = grad_check(loss, &params, &grad, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        assert!(matches!(grad_check(|_| 0.0, &[1.0], &[0.0], 0.0), Err(NnError::BadStep(_))));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        for act in [Activation::Relu, Activation::Mish, Activation::Tanh] {
            let arch = MlpArch::new(&[3, 5, 4, 2], act);
            let p = arch.init_params(&mut rng);
            let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
            let y = Array2::from_shape_fn((6, 2), |(i, j)| ((i + j) as f64 * 0.21).cos());
            let loss = |p: &[f64]| mse(arch.forward(p, x.view()).view(), y.view()).0;
            let (out, cache) = arch.forward_train(&p, x.view());
            let (_, dout) = mse(out.view(), y.view());
            let mut g = vec![0.0; p.len()];
            arch.backward(&p, &cache, dout.view(), &mut g);
            let err = grad_check(loss, &p, &g, 1e-6).unwrap();
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[4, 8, 2], Activation::Relu, &mut rng);
        net.zero_last_layer();
        assert_eq!(net.forward_one(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(net.forward_one(&[1.0]).is_err());
    }

    #[test]
    fn arch_description_round_trips() {
        let arch = MlpArch::new(&[4, 16, 16, 2], Activation::Mish);
        assert_eq!(MlpArch::parse(&arch.describe()), Some(arch));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
    }
}
