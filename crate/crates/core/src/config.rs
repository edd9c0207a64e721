//! Run configuration as flat `key = value` text.
//!
//! Every hyperparameter has a desk-scale default; `DitsConfig::paper()`
//! restores the published settings where they are meaningful for the
//! built-in environments.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::diffusion::{DenoiserConfig, Layout, ScheduleKind};
use crate::envs::{EnvName, EnvSpec, Tier};
use crate::generation::GenerationConfig;
use crate::models::FitConfig;
use crate::rng::{derive_seed, stream};
use crate::stitching::StitchConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> { s.parse().ok() }
            fn show(&self) -> String { self.to_string() }
        }
    )*};
}
plain_value!(usize, u64, bool, EnvName, ScheduleKind);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Tier {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Option<Self> {
        s.split(',').map(|t| t.trim().parse().ok()).collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Option<Self> {
        s.split(',').map(|t| t.trim().parse().ok()).collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_struct {
    ($( $field:ident : $ty:ty = $desk:expr, $paper:expr, $note:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct DitsConfig {
            $( pub $field: $ty, )*
        }

        impl Default for DitsConfig {
            fn default() -> Self {
                Self { $( $field: $desk, )* }
            }
        }

        impl DitsConfig {
            pub fn paper() -> Self {
                Self { $( $field: $paper, )* }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                    } )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Serializes every key, annotated with the published value.
            pub fn to_text(&self) -> String {
                let paper = Self::paper();
                let mut out = String::new();
                $(
                    let _ = writeln!(
                        out,
                        "{} = {}  # {}; paper: {}",
                        stringify!($field),
                        <$ty as ConfigValue>::show(&self.$field),
                        $note,
                        <$ty as ConfigValue>::show(&paper.$field),
                    );
                )*
                out
            }
        }
    };
}

config_struct! {
    env: EnvName = EnvName::Bridge2d, EnvName::Bridge2d, "built-in environment";
    tier: Tier = Tier::Medium, Tier::Medium, "offline data tier";
    n_offline: usize = 200, 200, "offline trajectories";
    gamma: f64 = 0.99, 0.99, "discount";

    horizon: usize = 16, 120, "planning horizon H";
    context: usize = 2, 20, "context length C";
    diffusion_steps: usize = 20, 200, "diffusion steps K";
    schedule: ScheduleKind = ScheduleKind::Cosine, ScheduleKind::Cosine, "noise schedule";
    channels: usize = 32, 128, "denoiser width";
    blocks: usize = 2, 6, "residual blocks";
    embed_dim: usize = 32, 128, "step/condition embedding size";
    embed_hidden: usize = 64, 256, "embedding MLP hidden units";
    kernel: usize = 3, 5, "temporal convolution kernel";
    cond_dropout: f64 = 0.25, 0.25, "condition dropout p";
    diffuser_lr: f64 = 1e-3, 2e-4, "denoiser learning rate";
    diffuser_batch: usize = 32, 32, "denoiser batch size";
    diffuser_steps: usize = 8000, 1_000_000, "denoiser training steps";
    pair_reward: bool = false, false, "impute rewards with the (s, s', r) model";

    idm_hidden: Vec<usize> = vec![128, 128], vec![512, 512], "inverse dynamics hidden layers";
    idm_lr: f64 = 1e-3, 2e-4, "inverse dynamics learning rate";
    idm_batch: usize = 256, 32, "inverse dynamics batch size";
    idm_steps: usize = 3000, 1_000_000, "inverse dynamics training steps";

    dyn_hidden: Vec<usize> = vec![64, 64, 64], vec![300, 300, 300], "dynamics member hidden layers";
    dyn_lr: f64 = 1e-3, 3e-4, "dynamics learning rate";
    dyn_batch: usize = 256, 256, "dynamics batch size";
    dyn_steps: usize = 1500, 20_000, "dynamics training steps";
    ensemble_size: usize = 7, 7, "dynamics ensemble size";
    ensemble_best: usize = 3, 3, "members used by the criterion";

    value_hidden: Vec<usize> = vec![64, 64], vec![256, 256], "value hidden layers";
    value_lr: f64 = 1e-3, 3e-4, "value learning rate";
    value_batch: usize = 256, 256, "value batch size";
    value_steps: usize = 2000, 20_000, "value training steps";

    bc_hidden: Vec<usize> = vec![64, 64], vec![256, 256], "behaviour cloning hidden layers";
    bc_lr: f64 = 1e-3, 3e-4, "behaviour cloning learning rate";
    bc_batch: usize = 256, 256, "behaviour cloning batch size";
    bc_steps: usize = 3000, 20_000, "behaviour cloning training steps";

    omega: f64 = 1.5, 1.4, "guidance scale";
    alpha_temp: f64 = 0.5, 0.5, "low-temperature covariance scale";
    target_y: f64 = 0.9, 0.9, "normalized return condition";
    clip_margin: f64 = 1.1, 0.0, "x0 clip as a multiple of the data bound (0 disables)";

    stitch_epochs: usize = 2, 2, "stitching epochs";
    n_new: usize = 300, 300, "generated trajectories per epoch";
    rho: f64 = 0.05, 0.1, "neighbourhood radius (raw units)";
    p_tilde: f64 = 0.1, 0.1, "acceptance threshold";
    kappa: f64 = 0.75, 0.5, "final filter margin (fraction of return spread)";

    eval_episodes: usize = 50, 10, "evaluation episodes per seed";
    seeds: usize = 5, 5, "independent seeds";
    n_sweep: Vec<usize> = vec![10, 50, 150, 300], vec![10, 50, 150, 300], "trajectory-count sweep";
    omega_sweep: Vec<f64> = vec![0.0, 0.5, 1.0, 1.5, 2.0], vec![1.2, 1.4, 1.6, 1.8], "guidance sweep";
}

impl DitsConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec::for_name(self.env)
    }

    pub fn clip(&self) -> Option<f64> {
        (self.clip_margin > 0.0).then_some(self.clip_margin)
    }

    pub fn denoiser(&self, seed: u64) -> DenoiserConfig {
        DenoiserConfig {
            horizon: self.horizon,
            layout: Layout::Interleaved,
            diffusion_steps: self.diffusion_steps,
            schedule: self.schedule,
            channels: self.channels,
            blocks: self.blocks,
            embed_dim: self.embed_dim,
            embed_hidden: self.embed_hidden,
            kernel: self.kernel,
            cond_dropout: self.cond_dropout,
            gamma: self.gamma,
            lr: self.diffuser_lr,
            batch_size: self.diffuser_batch,
            steps: self.diffuser_steps,
            seed: derive_seed(seed, stream::DIFFUSER),
        }
    }

    /// Pair-layout reward model: two-block windows.
    pub fn pair_denoiser(&self, seed: u64) -> DenoiserConfig {
        DenoiserConfig {
            horizon: 2,
            layout: Layout::Pair,
            seed: derive_seed(seed, stream::PAIR_DIFFUSER),
            ..self.denoiser(seed)
        }
    }

    pub fn idm(&self, seed: u64) -> FitConfig {
        FitConfig::new(&self.idm_hidden, self.idm_lr, self.idm_batch, self.idm_steps, derive_seed(seed, stream::IDM))
    }

    pub fn dynamics(&self, seed: u64) -> FitConfig {
        FitConfig::new(&self.dyn_hidden, self.dyn_lr, self.dyn_batch, self.dyn_steps, derive_seed(seed, stream::DYNAMICS))
    }

    pub fn value(&self, seed: u64, epoch: usize) -> FitConfig {
        FitConfig::new(
            &self.value_hidden,
            self.value_lr,
            self.value_batch,
            self.value_steps,
            derive_seed(derive_seed(seed, stream::VALUE), epoch as u64),
        )
    }

    pub fn bc(&self, seed: u64) -> FitConfig {
        FitConfig::new(&self.bc_hidden, self.bc_lr, self.bc_batch, self.bc_steps, derive_seed(seed, stream::BC))
    }

    pub fn generation(&self, n_traj: usize, seed: u64) -> GenerationConfig {
        GenerationConfig {
            context: self.context,
            horizon: self.horizon,
            omega: self.omega,
            alpha_temp: self.alpha_temp,
            target_y: self.target_y,
            n_traj,
            max_steps: self.env_spec().max_episode_len,
            seed,
            clip_margin: self.clip(),
            autoregressive: false,
        }
    }

    pub fn stitch(&self, seed: u64) -> StitchConfig {
        StitchConfig {
            epochs: self.stitch_epochs,
            n_new: self.n_new,
            rho: self.rho,
            p_tilde: self.p_tilde,
            kappa: self.kappa,
            max_episode_len: self.env_spec().max_episode_len,
            seed: derive_seed(seed, stream::STITCH),
        }
    }
}
