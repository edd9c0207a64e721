use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dits::checkpoint::Checkpoint;
use dits::config::DitsConfig;
use dits::data::{load_dataset, save_dataset, Dataset, WindowSpec};
use dits::diffusion::{train_denoiser, Diffuser};
use dits::envs::Tier;
use dits::eval::{evaluate_policy, similarity, train_bc, transition_features, BcPolicy, EvalReport};
use dits::models::{train_dynamics_ensemble, train_idm, train_value, ModelBundle};
use dits::pipeline::{
    config_hash, generate_pool, generate_pools, offline_dataset, run_ablation, run_dits, rows_to_csv, rows_to_table,
    AblationKind, TrainedModels,
};
use dits::rng::{derive_seed, stream};

#[derive(Parser)]
#[command(name = "dits", version, about = "Diffusion-based trajectory generation and stitching")]
struct Cli {
    /// Run seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an offline dataset.
    GenData {
        #[arg(long)]
        tier: Option<Tier>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the inverse dynamics model, dynamics ensemble and value function.
    TrainModels {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the window diffuser (or the pair-layout reward model).
    TrainDiffuser {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pair: bool,
    },
    /// Generate trajectories through state-only interaction.
    Generate {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the stitching loop and write the augmented dataset.
    Stitch {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        p_tilde: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Provenance JSON; defaults to `<out>.provenance.json`.
        #[arg(long)]
        provenance: Option<PathBuf>,
    },
    /// Behavioural cloning on a dataset.
    TrainBc {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online evaluation of a BC policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distribution similarity of two datasets' transitions.
    Analyze {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        marginal: bool,
        #[arg(long)]
        correlation: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation table over `seeds` seeds.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        /// CSV of the rows; the aligned table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    diffuser: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Pair-layout reward model used for imputation.
    #[arg(long)]
    pair: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<TrainedModels> {
        let diffuser = load_diffuser(&self.diffuser)?;
        let bundle = ModelBundle::from_checkpoint(&Checkpoint::load(&self.bundle)?)?;
        let pair = self.pair.as_deref().map(load_diffuser).transpose()?;
        Ok(TrainedModels {
            diffuser,
            pair,
            idm: bundle.idm,
            dynamics: bundle.dynamics,
        })
    }
}

fn load_diffuser(path: &Path) -> Result<Diffuser> {
    Ok(Diffuser::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_fitted(path: &Path, cfg: &DitsConfig) -> Result<Dataset> {
    let mut ds = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    ds.fit_normalization(WindowSpec {
        horizon: cfg.horizon,
        gamma: cfg.gamma,
    })?;
    Ok(ds)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => DitsConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => DitsConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenData { tier, n, out } => {
            let ds = offline_dataset(&cfg, tier.unwrap_or(cfg.tier), n.unwrap_or(cfg.n_offline), seed)?;
            save_dataset(&ds, &out)?;
        }
        Command::TrainModels { dataset, out } => {
            let ds = load_fitted(&dataset, &cfg)?;
            let (idm, _) = train_idm(&ds, &cfg.idm(seed))?;
            let (dynamics, _) = train_dynamics_ensemble(&ds, &cfg.dynamics(seed), cfg.ensemble_size, cfg.ensemble_best)?;
            let (value, _) = train_value(&ds, &ds.norm, cfg.gamma, &cfg.value(seed, 0))?;
            ModelBundle { idm, dynamics, value }.to_checkpoint().save(&out)?;
        }
        Command::TrainDiffuser { dataset, out, pair } => {
            let mut ds = load_fitted(&dataset, &cfg)?;
            let dcfg = if pair {
                ds.fit_normalization(WindowSpec {
                    horizon: 2,
                    gamma: cfg.gamma,
                })?;
                cfg.pair_denoiser(seed)
            } else {
                cfg.denoiser(seed)
            };
            let (diffuser, _) = train_denoiser(&ds, &dcfg)?;
            diffuser.to_checkpoint().save(&out)?;
        }
        Command::Generate { models, n, omega, out } => {
            if let Some(w) = omega {
                cfg.omega = w;
            }
            let models = models.load()?;
            let spec = cfg.env_spec();
            let trajs = generate_pool(&models, &cfg, n.unwrap_or(cfg.n_new), seed, 1)?;
            save_dataset(&Dataset::with_trajectories(spec.state_dim, spec.action_dim, trajs), &out)?;
        }
        Command::Stitch {
            dataset,
            models,
            epochs,
            rho,
            p_tilde,
            kappa,
            n,
            out,
            provenance,
        } => {
            if let Some(v) = epochs {
                cfg.stitch_epochs = v;
            }
            if let Some(v) = rho {
                cfg.rho = v;
            }
            if let Some(v) = p_tilde {
                cfg.p_tilde = v;
            }
            if let Some(v) = kappa {
                cfg.kappa = v;
            }
            if let Some(v) = n {
                cfg.n_new = v;
            }
            let d0 = load_fitted(&dataset, &cfg)?;
            let models = models.load()?;
            let pools = generate_pools(&models, &cfg, cfg.n_new, seed)?;
            let result = run_dits(&d0, &models, &pools, cfg.n_new, &cfg, seed)?;
            save_dataset(&result.dataset, &out)?;
            let prov = provenance.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".provenance.json");
                p.into()
            });
            write(&prov, &result.provenance.to_json())?;
        }
        Command::TrainBc { dataset, out } => {
            let ds = load_dataset(&dataset)?;
            let (policy, _) = train_bc(&ds, &cfg.bc(seed))?;
            policy.to_checkpoint().save(&out)?;
        }
        Command::Eval { policy, episodes, out } => {
            let policy = BcPolicy::from_checkpoint(&Checkpoint::load(&policy)?)?;
            let scores = evaluate_policy(
                cfg.env,
                &policy,
                episodes.unwrap_or(cfg.eval_episodes),
                derive_seed(seed, stream::EVAL),
            );
            let report = EvalReport::new(cfg.env, seed, scores, config_hash(&cfg));
            let json = serde_json::to_string(&report)?;
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
            eprintln!(
                "{}: mean {:.4} normalized {:.2} +- {:.2}",
                report.env, report.mean, report.normalized_mean, report.normalized_std
            );
        }
        Command::Analyze {
            a,
            b,
            marginal,
            correlation,
            out,
        } => {
            let fa = transition_features(&load_dataset(&a)?);
            let fb = transition_features(&load_dataset(&b)?);
            if fa.ncols() != fb.ncols() {
                bail!("feature widths differ: {} vs {}", fa.ncols(), fb.ncols());
            }
            let rep = similarity(fa.view(), fb.view());
            let both = !marginal && !correlation;
            let mut obj = serde_json::Map::new();
            if marginal || both {
                obj.insert("marginal".into(), rep.marginal.into());
            }
            if correlation || both {
                obj.insert("correlation".into(), rep.correlation.into());
            }
            let json = serde_json::Value::Object(obj).to_string();
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Ablate { kind, out } => {
            let rows = run_ablation(kind, &cfg, seed)?;
            print!("{}", rows_to_table(&rows));
            if let Some(p) = out {
                write(&p, &rows_to_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
