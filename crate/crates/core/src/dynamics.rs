//! Discretized mean-field Langevin dynamics on the first-layer particles.
//!
//! Each step solves the inner ridge problem once for the current measure,
//! then moves every particle along the negative gradient of the first
//! variation
//!
//! ```text
//! dG/dmu (w) = lambda * ( -(lambda_a / 2T) |a(w)|^2 + (lambda_w / 2) |w|^2 )
//! ```
//!
//! with `alpha` held fixed, plus Gaussian noise of scale `sqrt(2 eta lambda)`.

use std::io::{BufRead, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::experiment::data::Dataset;
use crate::feature_map::{FeatureModel, Features};
use crate::linalg::col;
use crate::particle_measure::{read_snapshot_body, ParticleCloud};
use crate::ridge::{fit_with_route, objectives, second_layer_values, Hyperparams, Objectives, RidgeSolution, SolverRoute};
use crate::rng::{stream, TAG_MFLD};

/// Mean `|w|^2` above `DIVERGENCE_FACTOR * d' / lambda_w` aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Summary of one particle update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean over particles of the drift norm.
    pub mean_grad_norm: f64,
    /// Mean `|w|^2` after the update.
    pub mean_w_sq: f64,
    /// Objectives at the pre-update measure; `None` when the data term is
    /// switched off (`lambda * lambda_a = 0`).
    pub objectives: Option<Objectives>,
    pub wall_ms: f64,
}

/// `lambda * (-(lambda_a / 2T) |a|^2 + (lambda_w / 2) |w|^2)` with `T = a.len()`.
pub fn first_variation(a_at_w: &[f64], w: &[f64], hyper: &Hyperparams) -> f64 {
    let a_sq: f64 = a_at_w.iter().map(|v| v * v).sum();
    let w_sq: f64 = w.iter().map(|v| v * v).sum();
    let tasks = a_at_w.len().max(1) as f64;
    hyper.lambda * (-0.5 * hyper.lambda_a / tasks * a_sq + 0.5 * hyper.lambda_w * w_sq)
}

/// Gradient in `w` of the first variation at particle `j`, with the ridge
/// coefficients frozen. `grads_j[i] = grad_w h(x_i; w_j)`.
pub fn grad_first_variation(
    j: usize,
    h: &DMatrix<f64>,
    grads_j: &DMatrix<f64>,
    sol: &RidgeSolution,
    w_j: &[f64],
    hyper: &Hyperparams,
) -> Result<DVector<f64>> {
    check_dim("gradient features", sol.n(), h.nrows())?;
    check_dim("gradient jacobian", sol.n(), grads_j.nrows())?;
    check_dim("gradient parameter", grads_j.ncols(), w_j.len())?;
    if j >= h.ncols() {
        return Err(Error::dim("particle index", h.ncols(), j));
    }
    let alpha = sol.alpha();
    let tasks = alpha.ncols() as f64;
    let mut data = DVector::zeros(w_j.len());
    for t in 0..alpha.ncols() {
        let a_t = h.column(j).dot(&alpha.column(t));
        data += grads_j.tr_mul(&alpha.column(t)) * a_t;
    }
    let w = DVector::from_column_slice(w_j);
    Ok((data * (-hyper.lambda_a / tasks) + w * hyper.lambda_w) * hyper.lambda)
}

/// Log-Sobolev constant `lambda_w exp(-2 lambda_a c_l^2 / bar_lambda_a^2)`
/// of the proximal Gibbs measure for labels bounded by `c_l`.
pub fn lsi_alpha(hyper: &Hyperparams, c_l: f64) -> f64 {
    let bla = hyper.bar_lambda_a();
    hyper.lambda_w * (-2.0 * hyper.lambda_a * c_l * c_l / (bla * bla)).exp()
}

/// Natural log of [`lsi_alpha`]; stays finite where the constant underflows.
pub fn lsi_log_alpha(hyper: &Hyperparams, c_l: f64) -> f64 {
    let bla = hyper.bar_lambda_a();
    hyper.lambda_w.ln() - 2.0 * hyper.lambda_a * c_l * c_l / (bla * bla)
}

/// Quantities computed once per step from the current measure.
pub struct MeasureState {
    pub features: Features,
    pub solution: Option<RidgeSolution>,
    /// `N x T` second-layer values `a_t(w_j)`.
    pub second_layer: Option<DMatrix<f64>>,
}

impl MeasureState {
    pub fn objectives(&self, data: &Dataset, cloud: &ParticleCloud, hyper: &Hyperparams) -> Result<Option<Objectives>> {
        self.solution
            .as_ref()
            .map(|sol| objectives(sol, &data.y, cloud, hyper))
            .transpose()
    }
}

/// Features, ridge solution and second layer at the current measure.
pub fn prepare(
    model: &FeatureModel,
    cloud: &ParticleCloud,
    data: &Dataset,
    hyper: &Hyperparams,
    route: SolverRoute,
) -> Result<MeasureState> {
    let features = model.features(&data.x, cloud.params())?;
    let bla = hyper.bar_lambda_a();
    if bla > 0.0 {
        let sol = fit_with_route(&features.values, cloud.weights(), &data.y, bla, route)?;
        let a = second_layer_values(&features.values, &sol)?;
        Ok(MeasureState {
            features,
            solution: Some(sol),
            second_layer: Some(a),
        })
    } else {
        Ok(MeasureState {
            features,
            solution: None,
            second_layer: None,
        })
    }
}

/// Ridge solution of a label perturbation, sharing the clean factorization.
pub struct NoiseTerms {
    /// `M^{-1} eps`, `n x T`.
    pub beta: DMatrix<f64>,
    /// `e_t(w_j) = H[:, j]^T beta_t`, `N x T`.
    pub values: DMatrix<f64>,
}

/// Drift of every particle as an `N x d'` matrix.
///
/// Without `noise` row `j` is the gradient of the first variation. With
/// `noise` the label-noise term is subtracted:
/// `lambda * (-(lambda_a / T) sum_t [a_t J^T alpha_t - e_t J^T beta_t] + lambda_w w)`.
pub fn particle_drifts(
    model: &FeatureModel,
    x: &DMatrix<f64>,
    cloud: &ParticleCloud,
    state: &MeasureState,
    hyper: &Hyperparams,
    noise: Option<&NoiseTerms>,
) -> Result<DMatrix<f64>> {
    let (n_particles, dp) = (cloud.len(), cloud.dim());
    let n = x.nrows();
    check_dim("drift features", n_particles, state.features.values.ncols())?;
    let xt = x.transpose();
    let params_t = cloud.params().transpose();
    let mut drift_t = DMatrix::zeros(dp, n_particles);
    let mut coeffs = vec![0.0; n];
    let mut acc = vec![0.0; dp];
    let data_term = state.solution.as_ref().zip(state.second_layer.as_ref());
    let tasks = data_term.map_or(1, |(sol, _)| sol.tasks()) as f64;

    for j in 0..n_particles {
        acc.iter_mut().for_each(|v| *v = 0.0);
        if let Some((sol, a)) = data_term {
            let alpha = sol.alpha();
            coeffs.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..alpha.ncols() {
                let a_jt = a[(j, t)];
                for (c, al) in coeffs.iter_mut().zip(col(alpha, t)) {
                    *c += a_jt * al;
                }
            }
            if let Some(nt) = noise {
                for t in 0..alpha.ncols() {
                    let e_jt = nt.values[(j, t)];
                    for (c, b) in coeffs.iter_mut().zip(col(&nt.beta, t)) {
                        *c -= e_jt * b;
                    }
                }
            }
            model.contract_gradients(&xt, col(&state.features.slopes, j), &coeffs, &mut acc);
        }
        let wj = col(&params_t, j);
        let out = &mut drift_t.as_mut_slice()[j * dp..(j + 1) * dp];
        for k in 0..dp {
            out[k] = hyper.lambda * (-hyper.lambda_a / tasks * acc[k] + hyper.lambda_w * wj[k]);
        }
    }
    Ok(drift_t.transpose())
}

/// Applies `w <- w - eta * drift + sqrt(2 eta lambda) xi` with `xi` drawn
/// from the `(seed, "mfld", step, j)` streams.
pub(crate) fn langevin_update(
    cloud: &ParticleCloud,
    drift: &DMatrix<f64>,
    hyper: &Hyperparams,
    seed: u64,
    step: u64,
) -> Result<ParticleCloud> {
    let scale = hyper.noise_scale();
    let mut params = cloud.params() - drift * hyper.eta;
    if scale > 0.0 {
        for j in 0..cloud.len() {
            let mut rng = stream(seed, TAG_MFLD, step, j as u64);
            for k in 0..cloud.dim() {
                params[(j, k)] += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut next = cloud.clone();
    next.replace_params(params);
    let mean_w_sq = next.mean_sq_norm();
    let limit = DIVERGENCE_FACTOR * cloud.dim() as f64 / hyper.lambda_w;
    if !mean_w_sq.is_finite() || mean_w_sq > limit {
        return Err(Error::Diverged {
            step,
            mean_w_sq,
            limit,
        });
    }
    Ok(next)
}

/// One update from an already prepared measure state.
#[allow(clippy::too_many_arguments)]
pub fn advance(
    model: &FeatureModel,
    cloud: &ParticleCloud,
    data: &Dataset,
    hyper: &Hyperparams,
    state: &MeasureState,
    noise: Option<&NoiseTerms>,
    seed: u64,
    step: u64,
) -> Result<(ParticleCloud, StepReport)> {
    let start = Instant::now();
    if !cloud.is_uniform() {
        return Err(Error::InvalidParameter("training requires uniform particle weights".into()));
    }
    let drift = particle_drifts(model, &data.x, cloud, state, hyper, noise)?;
    let mean_grad_norm = drift.row_iter().map(|r| r.norm()).sum::<f64>() / cloud.len() as f64;
    let objectives = state.objectives(data, cloud, hyper)?;
    let next = langevin_update(cloud, &drift, hyper, seed, step)?;
    let report = StepReport {
        step,
        mean_grad_norm,
        mean_w_sq: next.mean_sq_norm(),
        objectives,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((next, report))
}

/// One step of the dynamics with the dense/Woodbury choice left to `Auto`.
pub fn mfld_step(
    cloud: &ParticleCloud,
    data: &Dataset,
    model: &FeatureModel,
    hyper: &Hyperparams,
    seed: u64,
    step: u64,
) -> Result<(ParticleCloud, StepReport)> {
    let state = prepare(model, cloud, data, hyper, SolverRoute::Auto)?;
    advance(model, cloud, data, hyper, &state, None, seed, step)
}

/// Resumable training state: the cloud and the number of completed steps.
///
/// All noise is keyed by `(seed, step)`, so the step counter is the whole
/// random-stream cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub cloud: ParticleCloud,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "mfld-checkpoint v1")?;
        writeln!(out, "seed {}", self.seed)?;
        writeln!(out, "step {}", self.step)?;
        self.cloud.write_snapshot(out)
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let bad = |detail: String| Error::Malformed {
            what: "checkpoint",
            detail,
        };
        let mut lines = input.lines();
        let mut next = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))??;
            Ok(line)
        };
        let magic = next("header")?;
        if magic.trim() != "mfld-checkpoint v1" {
            return Err(bad(format!("bad header {magic:?}")));
        }
        let field = |line: String, key: &str| -> Result<u64> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <int>`, got {line:?}")))
        };
        let seed = field(next("seed")?, "seed")?;
        let step = field(next("step")?, "step")?;
        let cloud = read_snapshot_body(&mut lines)?;
        Ok(Self { seed, step, cloud })
    }
}
