//! Run configuration and named presets.
//!
//! A config file is flat TOML with exactly the keys of [`RunConfig`]; every
//! key except the counts is optional and falls back to the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::data::{SyntheticSpec, TargetKind};
use crate::ridge::{Hyperparams, SolverRoute};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain mean-field Langevin dynamics.
    Mfld,
    /// Dynamics with fresh label noise in the inner solve.
    LabelNoise,
    /// Particles frozen at initialization; ridge regression on the initial kernel.
    Frozen,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Mfld => "mfld",
            Mode::LabelNoise => "label_noise",
            Mode::Frozen => "frozen",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_run_id() -> String {
    "run".into()
}
fn default_d() -> usize {
    15
}
fn default_n_train() -> usize {
    1000
}
fn default_n_test() -> usize {
    2000
}
fn default_particles() -> usize {
    500
}
fn default_steps() -> u64 {
    2000
}
fn default_eval_every() -> u64 {
    25
}
fn default_kappa() -> f64 {
    2.0
}
fn default_mc() -> usize {
    20_000
}
fn default_target() -> TargetKind {
    TargetKind::Product12
}
fn default_mode() -> Mode {
    Mode::Mfld
}
fn paper() -> Hyperparams {
    Hyperparams::paper()
}
fn default_eta() -> f64 {
    paper().eta
}
fn default_lambda() -> f64 {
    paper().lambda
}
fn default_lambda_a() -> f64 {
    paper().lambda_a
}
fn default_lambda_w() -> f64 {
    paper().lambda_w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lambda_a")]
    pub lambda_a: f64,
    #[serde(default = "default_lambda_w")]
    pub lambda_w: f64,
    /// Half-width of the observation noise of the training labels.
    #[serde(default)]
    pub sigma: f64,
    /// Half-width of the label-noise procedure (used in `label_noise` mode).
    #[serde(default)]
    pub tilde_sigma: f64,
    #[serde(default = "default_target")]
    pub target: TargetKind,
    /// Slope of the single-index target.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Monte-Carlo pairs for the population alignment; 0 disables it.
    #[serde(default = "default_mc")]
    pub mc_samples_alignment: usize,
    #[serde(default)]
    pub solver: SolverRoute,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all keys have defaults")
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hyper(&self) -> Hyperparams {
        Hyperparams {
            lambda: self.lambda,
            lambda_a: self.lambda_a,
            lambda_w: self.lambda_w,
            eta: self.eta,
            tilde_sigma: if self.mode == Mode::LabelNoise { self.tilde_sigma } else { 0.0 },
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            d: self.d,
            n_train: self.n_train,
            n_test: self.n_test,
            target: self.target,
            kappa: self.kappa,
            sigma: self.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_train == 0 || self.n_test == 0 || self.particles == 0 {
            return bad("d, n_train, n_test and particles must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        for (name, v) in [
            ("eta", self.eta),
            ("lambda", self.lambda),
            ("lambda_a", self.lambda_a),
            ("lambda_w", self.lambda_w),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [("sigma", self.sigma), ("tilde_sigma", self.tilde_sigma), ("kappa", self.kappa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0 and finite, got {v}"));
            }
        }
        if self.mc_samples_alignment != 0 && self.mc_samples_alignment < 100 {
            return bad("mc_samples_alignment must be 0 or >= 100".into());
        }
        if self.target == TargetKind::Product12 && self.d < 2 {
            return bad("product12 target needs d >= 2".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\', ',', '"', '\n']) {
            return bad(format!("run_id {:?} must be non-empty and free of / \\ , \" and newlines", self.run_id));
        }
        Ok(())
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "desk",
    "paper-fig1",
    "paper-fig1-full",
    "paper-fig2",
    "paper-fig2-full",
    "separation",
];

/// Observation-noise sweep of the alignment/dof figure.
pub const FIG1_SIGMAS: [f64; 3] = [0.0, 0.5, 1.0];
/// Label-noise sweep of the dof/test-error figure (at `sigma = 0.5`).
pub const FIG2_TILDE_SIGMAS: [f64; 3] = [0.0, 0.5, 1.0];
pub const PRESET_SEEDS: u64 = 5;

/// `d = 15`, `f = x1 x2`, `n = 500`, `N = 500`, 2000 steps, default hyperparameters.
pub fn desk() -> RunConfig {
    RunConfig {
        run_id: "desk".into(),
        n_train: 500,
        ..RunConfig::default()
    }
}

fn full_scale(mut c: RunConfig) -> RunConfig {
    c.n_train = 1000;
    c.particles = 2000;
    c.steps = 10_000;
    c.eval_every = 100;
    c
}

fn fmt_level(v: f64) -> String {
    format!("{v}")
}

/// Expands a named preset into its runs. `base_seed` offsets the seed range.
pub fn preset(name: &str, base_seed: u64) -> Result<Vec<RunConfig>> {
    let seeds = base_seed..base_seed + PRESET_SEEDS;
    let fig1 = |base: RunConfig, tag: &str| -> Vec<RunConfig> {
        FIG1_SIGMAS
            .iter()
            .flat_map(|&sigma| {
                let base = base.clone();
                seeds.clone().map(move |seed| RunConfig {
                    run_id: format!("{tag}-sigma{}-seed{seed}", fmt_level(sigma)),
                    sigma,
                    seed,
                    mode: Mode::Mfld,
                    ..base.clone()
                })
            })
            .collect()
    };
    let fig2 = |base: RunConfig, tag: &str| -> Vec<RunConfig> {
        FIG2_TILDE_SIGMAS
            .iter()
            .flat_map(|&tilde_sigma| {
                let base = base.clone();
                seeds.clone().map(move |seed| RunConfig {
                    run_id: format!("{tag}-tsigma{}-seed{seed}", fmt_level(tilde_sigma)),
                    sigma: 0.5,
                    tilde_sigma,
                    seed,
                    mode: Mode::LabelNoise,
                    ..base.clone()
                })
            })
            .collect()
    };
    Ok(match name {
        "desk" => vec![RunConfig { seed: base_seed, ..desk() }],
        "paper-fig1" => fig1(desk(), "fig1"),
        "paper-fig1-full" => fig1(full_scale(desk()), "fig1full"),
        "paper-fig2" => fig2(desk(), "fig2"),
        "paper-fig2-full" => fig2(full_scale(desk()), "fig2full"),
        "separation" => seeds
            .map(|seed| RunConfig {
                run_id: format!("sep-seed{seed}"),
                d: 30,
                target: TargetKind::SingleIndexTanh,
                seed,
                ..desk()
            })
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    })
}
