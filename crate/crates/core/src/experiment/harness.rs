//! Training loop, frozen-feature baseline and on-disk run artifacts.
//!
//! Output layout of [`run_batch`] in `out_dir`:
//! `metrics.csv` (all runs), `summary.json` (one entry per run),
//! `config-<run_id>.toml` and `checkpoint-<run_id>.txt` (final state).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{evaluate, EvalOptions, MetricsRecord};
use crate::dynamics::{advance, lsi_log_alpha, prepare, Checkpoint, MeasureState};
use crate::error::{Error, Result};
use crate::experiment::config::{Mode, RunConfig};
use crate::experiment::data::{gen_synthetic, Dataset};
use crate::experiment::metrics_csv::MetricsWriter;
use crate::feature_map::FeatureModel;
use crate::label_noise::{noise_terms, sample_label_noise, sigma_condition, SigmaCondition};
use crate::particle_measure::{init_cloud, ParticleCloud};

/// Step-by-step driver over one configuration.
pub struct Trainer {
    config: RunConfig,
    model: FeatureModel,
    data: Dataset,
    cloud: ParticleCloud,
    step: u64,
    /// The final row has been emitted.
    done: bool,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = gen_synthetic(&config.synthetic(), config.seed)?;
        let model = FeatureModel::tanh_affine(config.d);
        let cloud = init_cloud(config.particles, model.param_dim(), config.lambda_w, config.seed)?;
        Ok(Self {
            config,
            model,
            data,
            cloud,
            step: 0,
            done: false,
        })
    }

    /// Continues from a checkpoint; the data set is regenerated from the seed.
    /// A checkpoint at the final step belongs to a finished run and yields no rows.
    pub fn resume(config: RunConfig, checkpoint: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        if checkpoint.seed != t.config.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} differs from config seed {}",
                checkpoint.seed, t.config.seed
            )));
        }
        if checkpoint.cloud.len() != t.cloud.len() || checkpoint.cloud.dim() != t.cloud.dim() {
            return Err(Error::dim("checkpoint cloud", t.cloud.len() * t.cloud.dim(), checkpoint.cloud.len() * checkpoint.cloud.dim()));
        }
        if checkpoint.step > t.config.steps {
            return Err(Error::Config(format!(
                "checkpoint is at step {} beyond the configured {} steps",
                checkpoint.step, t.config.steps
            )));
        }
        t.cloud = checkpoint.cloud;
        t.step = checkpoint.step;
        t.done = t.step == t.config.steps;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }
    pub fn data(&self) -> &Dataset {
        &self.data
    }
    pub fn model(&self) -> &FeatureModel {
        &self.model
    }
    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.config.seed,
            step: self.step,
            cloud: self.cloud.clone(),
        }
    }

    fn is_eval_step(&self, k: u64) -> bool {
        k.is_multiple_of(self.config.eval_every) || k == self.config.steps
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            mc_samples: self.config.mc_samples_alignment,
            seed: self.config.seed,
        }
    }

    fn eval(&self, state: &MeasureState) -> Result<MetricsRecord> {
        // Diagnostics use the clean labels in every mode.
        let mut hyper = self.config.hyper();
        let tilde = hyper.tilde_sigma;
        hyper.tilde_sigma = 0.0;
        let mut rec = evaluate(&self.model, &self.cloud, &self.data, state, &hyper, self.step, &self.eval_options())?;
        rec.tilde_sigma = tilde;
        Ok(rec)
    }

    /// Runs until `until` (clamped to the configured number of steps),
    /// passing every evaluation row to `sink`. Rows are computed on the
    /// measure before the update of that step. A row is emitted at step 0,
    /// every `eval_every` steps and at the final step, each exactly once
    /// across resumes.
    pub fn run_until<F>(&mut self, until: u64, mut sink: F) -> Result<()>
    where
        F: FnMut(&MetricsRecord) -> Result<()>,
    {
        if self.done {
            return Ok(());
        }
        let until = until.min(self.config.steps);
        let start = Instant::now();
        let hyper = self.config.hyper();
        let route = self.config.solver;
        let mut frozen_row: Option<MetricsRecord> = None;
        loop {
            let k = self.step;
            let eval_here = self.is_eval_step(k);
            let at_end = k == until;
            if self.config.mode == Mode::Frozen {
                if eval_here && !(at_end && until < self.config.steps) {
                    if frozen_row.is_none() {
                        let state = prepare(&self.model, &self.cloud, &self.data, &hyper, route)?;
                        frozen_row = Some(self.eval(&state)?);
                    }
                    let mut rec = frozen_row.clone().expect("computed above");
                    rec.step = k;
                    rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                    sink(&rec)?;
                }
                if at_end {
                    self.done = until == self.config.steps;
                    return Ok(());
                }
                // Nothing moves; jump to the next row.
                let next = (k / self.config.eval_every + 1) * self.config.eval_every;
                self.step = next.min(until);
                continue;
            }
            // A pause before the final step leaves its row to the resumed run.
            if at_end && until < self.config.steps {
                return Ok(());
            }
            let state = prepare(&self.model, &self.cloud, &self.data, &hyper, route)?;
            if eval_here {
                let mut rec = self.eval(&state)?;
                rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                sink(&rec)?;
            }
            if at_end {
                self.done = true;
                return Ok(());
            }
            let noise = if self.config.mode == Mode::LabelNoise {
                let draw = sample_label_noise(self.data.n(), self.data.tasks(), hyper.tilde_sigma, self.config.seed, k)?;
                Some(noise_terms(&state, &draw)?)
            } else {
                None
            };
            let (next, _) = advance(&self.model, &self.cloud, &self.data, &hyper, &state, noise.as_ref(), self.config.seed, k)?;
            self.cloud = next;
            self.step += 1;
        }
    }

    /// Runs to the configured number of steps and collects the rows.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut rows = Vec::new();
        self.run_until(self.config.steps, |r| {
            rows.push(r.clone());
            Ok(())
        })?;
        Ok(rows)
    }
}

/// Full trajectory of the configured dynamics (`mfld` or `label_noise`).
pub fn run_mfld(config: &RunConfig) -> Result<Vec<MetricsRecord>> {
    if config.mode == Mode::Frozen {
        return Err(Error::Config("run_mfld needs mode mfld or label_noise".into()));
    }
    Trainer::new(config.clone())?.run()
}

/// Ridge regression on the features of the initial particles, which never move.
pub fn baseline_frozen_features(config: &RunConfig) -> Result<Vec<MetricsRecord>> {
    let cfg = RunConfig {
        mode: Mode::Frozen,
        ..config.clone()
    };
    Trainer::new(cfg)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    pub steps: u64,
    pub rows: usize,
    pub runtime_s: f64,
    /// Final row; `None` when a resumed run had nothing left to do.
    pub last: Option<MetricsRecord>,
    /// Log of the log-Sobolev constant for the observed label bound;
    /// the convergence rate of the continuous dynamics is `2 lambda alpha`.
    pub lsi_log_alpha: f64,
    pub label_bound: f64,
    /// Only meaningful in label-noise mode.
    pub sigma_condition: Option<SigmaCondition>,
}

fn run_one<W: Write>(config: &RunConfig, out_dir: &Path, csv: &mut MetricsWriter<W>) -> Result<RunSummary> {
    std::fs::write(out_dir.join(format!("config-{}.toml", config.run_id)), config.to_toml_string())?;
    finish(Trainer::new(config.clone())?, out_dir, csv)
}

fn finish<W: Write>(mut trainer: Trainer, out_dir: &Path, csv: &mut MetricsWriter<W>) -> Result<RunSummary> {
    let start = Instant::now();
    let config = trainer.config().clone();
    let config = &config;
    let mut last = None;
    let mut rows = 0;
    let mode = config.mode.as_str();
    trainer.run_until(config.steps, |r| {
        csv.write(&config.run_id, config.seed, mode, r)?;
        rows += 1;
        last = Some(r.clone());
        Ok(())
    })?;
    csv.flush()?;
    let ckpt = BufWriter::new(File::create(out_dir.join(format!("checkpoint-{}.txt", config.run_id)))?);
    trainer.checkpoint().write(ckpt)?;
    let label_bound = trainer.data().y.amax();
    Ok(RunSummary {
        run_id: config.run_id.clone(),
        seed: config.seed,
        mode: config.mode,
        steps: config.steps,
        rows,
        runtime_s: start.elapsed().as_secs_f64(),
        last,
        lsi_log_alpha: lsi_log_alpha(&config.hyper(), label_bound),
        label_bound,
        sigma_condition: (config.mode == Mode::LabelNoise)
            .then(|| sigma_condition(&trainer.data().y, config.tilde_sigma)),
    })
}

/// Runs every configuration into one metrics file and one summary.
/// Returns the summaries in input order.
pub fn run_batch(configs: &[RunConfig], out_dir: &Path) -> Result<Vec<RunSummary>> {
    let mut ids: Vec<&str> = configs.iter().map(|c| c.run_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("run ids in a batch must be unique".into()));
    }
    for c in configs {
        c.validate()?;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut csv = MetricsWriter::new(BufWriter::new(File::create(out_dir.join("metrics.csv"))?))?;
    let mut summaries = Vec::with_capacity(configs.len());
    for c in configs {
        summaries.push(run_one(c, out_dir, &mut csv)?);
    }
    write_summary(out_dir, &summaries)?;
    Ok(summaries)
}

/// Single-run convenience wrapper over [`run_batch`]; writes to `config.output`
/// or `out_dir` when given.
pub fn run_experiment(config: &RunConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    let dir: PathBuf = out_dir
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    Ok(run_batch(std::slice::from_ref(config), &dir)?.remove(0))
}

/// Continues a run from `checkpoint`, appending its remaining rows to
/// `out_dir/metrics.csv` (created when missing) and rewriting `summary.json`
/// with this run only.
pub fn resume_experiment(config: &RunConfig, checkpoint: Checkpoint, out_dir: &Path) -> Result<RunSummary> {
    let trainer = Trainer::resume(config.clone(), checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("metrics.csv");
    let summary = if path.exists() {
        let file = std::fs::OpenOptions::new().append(true).open(&path)?;
        finish(trainer, out_dir, &mut MetricsWriter::append(BufWriter::new(file)))?
    } else {
        finish(trainer, out_dir, &mut MetricsWriter::new(BufWriter::new(File::create(&path)?))?)?
    };
    write_summary(out_dir, std::slice::from_ref(&summary))?;
    Ok(summary)
}

fn write_summary(out_dir: &Path, summaries: &[RunSummary]) -> Result<()> {
    let json = serde_json::to_string_pretty(summaries).map_err(|e| Error::Malformed {
        what: "summary",
        detail: e.to_string(),
    })?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(BufReader::new(File::open(path)?))
}
