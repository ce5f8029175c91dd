//! Label-noise procedure: fresh uniform noise is added to the labels of the
//! inner solve at every step, which in expectation penalizes the degrees of
//! freedom of the learned kernel.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::degrees_of_freedom;
use crate::dynamics::{advance, prepare, MeasureState, NoiseTerms, StepReport};
use crate::error::{Error, Result};
use crate::experiment::data::Dataset;
use crate::feature_map::FeatureModel;
use crate::linalg::{col, symmetric_eigenvalues};
use crate::particle_measure::ParticleCloud;
use crate::ridge::{fit_with_route, objectives, Hyperparams, RidgeSolution, SolverRoute};
use crate::rng::{stream, TAG_LABEL_NOISE};

/// Stream tag of the Monte-Carlo draws in [`noise_expectation_check`].
pub const TAG_NOISE_CHECK: &str = "label-noise-check";

/// One draw of label noise, entries i.i.d. uniform on `[-tilde_sigma, tilde_sigma]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps: DMatrix<f64>,
    pub step: u64,
}

fn check_half_width(tilde_sigma: f64) -> Result<()> {
    if tilde_sigma >= 0.0 && tilde_sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("tilde_sigma must be >= 0, got {tilde_sigma}")))
    }
}

fn draw_uniform(n: usize, tasks: usize, half_width: f64, seed: u64, tag: &'static str, step: u64) -> DMatrix<f64> {
    let mut eps = DMatrix::zeros(n, tasks);
    if half_width == 0.0 {
        return eps;
    }
    for t in 0..tasks {
        let mut rng = stream(seed, tag, step, t as u64);
        for v in eps.column_mut(t).iter_mut() {
            *v = rng.random_range(-half_width..=half_width);
        }
    }
    eps
}

/// Noise for training step `step`, task `t` drawn from `(seed, "label-noise", step, t)`.
pub fn sample_label_noise(n: usize, tasks: usize, tilde_sigma: f64, seed: u64, step: u64) -> Result<NoiseDraw> {
    check_half_width(tilde_sigma)?;
    Ok(NoiseDraw {
        eps: draw_uniform(n, tasks, tilde_sigma, seed, TAG_LABEL_NOISE, step),
        step,
    })
}

/// Solves for the noise with the factorization of the clean system.
pub fn noise_terms(state: &MeasureState, draw: &NoiseDraw) -> Result<NoiseTerms> {
    let sol = state
        .solution
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("label noise needs a positive ridge regularization".into()))?;
    let beta = sol.solve(&draw.eps)?;
    let values = state.features.values.tr_mul(&beta);
    Ok(NoiseTerms { beta, values })
}

/// `lambda * (-(lambda_a / 2T) sum_t (a_t^2 - e_t^2) + (lambda_w / 2) |w|^2)`.
pub fn noisy_first_variation(a_at_w: &[f64], e_at_w: &[f64], w: &[f64], hyper: &Hyperparams) -> f64 {
    let tasks = a_at_w.len().max(1) as f64;
    let diff: f64 = a_at_w.iter().zip(e_at_w).map(|(a, e)| a * a - e * e).sum();
    let w_sq: f64 = w.iter().map(|v| v * v).sum();
    hyper.lambda * (-0.5 * hyper.lambda_a / tasks * diff + 0.5 * hyper.lambda_w * w_sq)
}

/// One step of the label-noise dynamics. With `tilde_sigma = 0` the result is
/// bit-identical to [`crate::dynamics::mfld_step`].
pub fn noisy_mfld_step(
    cloud: &ParticleCloud,
    data: &Dataset,
    model: &FeatureModel,
    hyper: &Hyperparams,
    seed: u64,
    step: u64,
) -> Result<(ParticleCloud, StepReport)> {
    let state = prepare(model, cloud, data, hyper, SolverRoute::Auto)?;
    let draw = sample_label_noise(data.n(), data.tasks(), hyper.tilde_sigma, seed, step)?;
    let terms = noise_terms(&state, &draw)?;
    advance(model, cloud, data, hyper, &state, Some(&terms), seed, step)
}

/// `G + (bar_lambda_a tilde_sigma^2 / 6n) d_{bar_lambda_a}`, entropy omitted.
pub fn regularized_objective(
    sol: &RidgeSolution,
    y: &DMatrix<f64>,
    cloud: &ParticleCloud,
    hyper: &Hyperparams,
) -> Result<f64> {
    let g = objectives(sol, y, cloud, hyper)?.g;
    let dof = degrees_of_freedom(sol.sigma(), sol.bar_lambda_a())?;
    let n = sol.n() as f64;
    Ok(g + sol.bar_lambda_a() * hyper.tilde_sigma.powi(2) / (6.0 * n) * dof)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaCondition {
    pub ok: bool,
    /// `lambda_min((1/T) sum_t Y_t Y_t^T) - tilde_sigma^2 / 3`.
    pub margin: f64,
}

/// Admissibility of the noise level for the convexity of the expected objective.
/// With fewer tasks than samples the label Gram matrix is singular and only
/// `tilde_sigma = 0` passes.
pub fn sigma_condition(y: &DMatrix<f64>, tilde_sigma: f64) -> SigmaCondition {
    let (n, tasks) = y.shape();
    let lambda_min = if tasks < n {
        0.0
    } else {
        let gram = y * y.transpose() / tasks as f64;
        symmetric_eigenvalues(&gram)[0]
    };
    let margin = lambda_min - tilde_sigma * tilde_sigma / 3.0;
    SigmaCondition {
        ok: margin >= 0.0,
        margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseExpectation {
    pub mc_mean: f64,
    pub closed_form: f64,
    pub rel_err: f64,
    /// Clean `U = (bar_lambda_a / 2T) sum_t Y_t^T M^{-1} Y_t`.
    pub clean_u: f64,
    pub trace_inverse: f64,
}

/// Compares the Monte-Carlo mean of the noisy inner objective over `k` draws
/// with its closed-form expectation
/// `U - (bar_lambda_a tilde_sigma^2 / 6) tr(M^{-1}) + tilde_sigma^2 / 6`.
pub fn noise_expectation_check(
    cloud: &ParticleCloud,
    data: &Dataset,
    model: &FeatureModel,
    hyper: &Hyperparams,
    k: usize,
    seed: u64,
) -> Result<NoiseExpectation> {
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one noise draw".into()));
    }
    check_half_width(hyper.tilde_sigma)?;
    let h = model.feature_matrix(&data.x, cloud.params())?;
    let bla = hyper.bar_lambda_a();
    let sol = fit_with_route(&h, cloud.weights(), &data.y, bla, SolverRoute::Dense)?;
    let (n, tasks) = data.y.shape();
    let tf = tasks as f64;
    let clean_u = (0..tasks)
        .map(|t| col(&data.y, t).iter().zip(col(sol.alpha(), t)).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        * 0.5
        * bla
        / tf;
    let ts2 = hyper.tilde_sigma.powi(2);
    let trace_inverse = sol.trace_inverse();
    let closed_form = clean_u - bla * ts2 / 6.0 * trace_inverse + ts2 / 6.0;

    const BATCH: usize = 256;
    let mut total = 0.0;
    let mut done = 0;
    while done < k {
        let len = BATCH.min(k - done);
        let mut eps = DMatrix::zeros(n, len * tasks);
        for c in 0..len {
            let draw = draw_uniform(n, tasks, hyper.tilde_sigma, seed, TAG_NOISE_CHECK, (done + c) as u64);
            for t in 0..tasks {
                eps.column_mut(c * tasks + t).copy_from(&draw.column(t));
            }
        }
        let solved = sol.solve(&eps)?;
        for c in 0..(len * tasks) {
            let e = col(&eps, c);
            let quad: f64 = e.iter().zip(col(&solved, c)).map(|(a, b)| a * b).sum();
            let sq: f64 = e.iter().map(|v| v * v).sum();
            total += (-0.5 * bla * quad + sq / (2.0 * n as f64)) / tf;
        }
        done += len;
    }
    let mc_mean = clean_u + total / k as f64;
    Ok(NoiseExpectation {
        mc_mean,
        closed_form,
        rel_err: (mc_mean - closed_form).abs() / closed_form.abs(),
        clean_u,
        trace_inverse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{mfld_step, particle_drifts};
    use crate::experiment::data::{gen_synthetic, SyntheticSpec, TargetKind};
    use crate::particle_measure::init_cloud;
    use nalgebra::DVector;

    fn data(n: usize, d: usize, sigma: f64, seed: u64) -> Dataset {
        gen_synthetic(
            &SyntheticSpec {
                d,
                n_train: n,
                n_test: 20,
                target: TargetKind::Product12,
                kappa: 2.0,
                sigma,
            },
            seed,
        )
        .unwrap()
    }

    fn hyper(tilde_sigma: f64) -> Hyperparams {
        Hyperparams {
            lambda: 0.1,
            lambda_a: 0.5,
            lambda_w: 0.25,
            eta: 0.1,
            tilde_sigma,
        }
    }

    #[test]
    fn zero_width_noise_is_zero() {
        let d = sample_label_noise(10, 2, 0.0, 1, 0).unwrap();
        assert!(d.eps.iter().all(|&v| v == 0.0));
        assert!(sample_label_noise(10, 1, -0.1, 1, 0).is_err());
    }

    #[test]
    fn noise_variance_and_determinism() {
        let ts = 0.7;
        let d = sample_label_noise(200_000, 1, ts, 5, 3).unwrap();
        assert!(d.eps.iter().all(|v| v.abs() <= ts));
        let m = d.eps.len() as f64;
        let var = d.eps.iter().map(|v| v * v).sum::<f64>() / m;
        // Var(eps^2) = ts^4 (1/5 - 1/9)
        let se = (ts.powi(4) * (1.0 / 5.0 - 1.0 / 9.0) / m).sqrt();
        assert!((var - ts * ts / 3.0).abs() < 3.0 * se, "{var}");
        assert_eq!(d, sample_label_noise(200_000, 1, ts, 5, 3).unwrap());
        assert_ne!(d.eps, sample_label_noise(200_000, 1, ts, 5, 4).unwrap().eps);
    }

    #[test]
    fn zero_noise_step_is_bit_identical_to_plain_step() {
        let ds = data(25, 4, 0.3, 1);
        let model = FeatureModel::tanh_affine(4);
        let h = hyper(0.0);
        let cloud = init_cloud(9, 5, h.lambda_w, 1).unwrap();
        let (a, ra) = mfld_step(&cloud, &ds, &model, &h, 7, 2).unwrap();
        let (b, rb) = noisy_mfld_step(&cloud, &ds, &model, &h, 7, 2).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(ra.objectives, rb.objectives);
        assert_eq!(ra.mean_grad_norm.to_bits(), rb.mean_grad_norm.to_bits());
    }

    #[test]
    fn noisy_drift_matches_finite_differences() {
        let ds = data(20, 5, 0.3, 2);
        let model = FeatureModel::tanh_affine(5);
        let h = hyper(0.8);
        let cloud = init_cloud(8, 6, h.lambda_w, 2).unwrap();
        let state = prepare(&model, &cloud, &ds, &h, SolverRoute::Dense).unwrap();
        let draw = sample_label_noise(20, 1, h.tilde_sigma, 3, 0).unwrap();
        let terms = noise_terms(&state, &draw).unwrap();
        let drift = particle_drifts(&model, &ds.x, &cloud, &state, &h, Some(&terms)).unwrap();
        let alpha = state.solution.as_ref().unwrap().alpha().clone();
        let fv = |w: &[f64]| {
            let hw = model.feature_matrix(&ds.x, &DMatrix::from_row_slice(1, 6, w)).unwrap();
            let a: Vec<f64> = hw.tr_mul(&alpha).iter().copied().collect();
            let e: Vec<f64> = hw.tr_mul(&terms.beta).iter().copied().collect();
            noisy_first_variation(&a, &e, w, &h)
        };
        let step = 1e-4;
        for j in 0..8 {
            let w = cloud.particle(j);
            let fd = DVector::from_fn(6, |k, _| {
                let (mut p, mut m) = (w.clone(), w.clone());
                p[k] += step;
                m[k] -= step;
                (fv(&p) - fv(&m)) / (2.0 * step)
            });
            let g = drift.row(j).transpose();
            let rel = (&g - &fd).norm() / g.norm();
            assert!(rel <= 1e-5, "particle {j}: {rel:e}");
        }
    }

    #[test]
    fn with_zero_labels_the_drift_shrinks_noise_fit() {
        let mut ds = data(30, 3, 0.0, 4);
        ds.y.fill(0.0);
        let model = FeatureModel::tanh_affine(3);
        let h = Hyperparams { lambda_w: 1e-6, ..hyper(1.0) };
        let cloud = init_cloud(10, 4, 0.25, 4).unwrap();
        let state = prepare(&model, &cloud, &ds, &h, SolverRoute::Dense).unwrap();
        let draw = sample_label_noise(30, 1, 1.0, 4, 0).unwrap();
        let terms = noise_terms(&state, &draw).unwrap();
        let drift = particle_drifts(&model, &ds.x, &cloud, &state, &h, Some(&terms)).unwrap();
        let moved = cloud.params() - &drift * 1e-2;
        let e_before = terms.values.norm_squared();
        let h_after = model.feature_matrix(&ds.x, &moved).unwrap();
        let e_after = h_after.tr_mul(&terms.beta).norm_squared();
        assert!(e_after < e_before, "{e_after} >= {e_before}");
        // the plain dynamics has no data drift at all here
        let plain = particle_drifts(&model, &ds.x, &cloud, &state, &h, None).unwrap();
        let prior = cloud.params() * (h.lambda * h.lambda_w);
        assert!((plain - prior).abs().max() < 1e-15);
    }

    #[test]
    fn regularized_objective_cases() {
        let ds = data(15, 3, 0.2, 5);
        let model = FeatureModel::tanh_affine(3);
        let cloud = init_cloud(6, 4, 0.25, 5).unwrap();
        let hf = model.feature_matrix(&ds.x, cloud.params()).unwrap();
        for ts in [0.0, 0.5, 1.3] {
            let h = hyper(ts);
            let sol = fit_with_route(&hf, cloud.weights(), &ds.y, h.bar_lambda_a(), SolverRoute::Dense).unwrap();
            let g = objectives(&sol, &ds.y, &cloud, &h).unwrap().g;
            let eig = symmetric_eigenvalues(sol.sigma().matrix());
            let nl = 15.0 * h.bar_lambda_a();
            let dof: f64 = eig.iter().map(|&s| s.max(0.0) / (s.max(0.0) + nl)).sum();
            let expected = g + h.bar_lambda_a() * ts * ts / 90.0 * dof;
            let r = regularized_objective(&sol, &ds.y, &cloud, &h).unwrap();
            if ts == 0.0 {
                assert_eq!(r, g);
            }
            assert!((r - expected).abs() < 1e-14 * expected.abs());
        }
        // zero kernel: no degrees of freedom
        let zero = ParticleCloud::uniform(DMatrix::zeros(2, 4)).unwrap();
        let hz = model.feature_matrix(&ds.x, zero.params()).unwrap();
        let h = hyper(1.0);
        let sol = fit_with_route(&hz, zero.weights(), &ds.y, h.bar_lambda_a(), SolverRoute::Dense).unwrap();
        let g = objectives(&sol, &ds.y, &zero, &h).unwrap().g;
        assert_eq!(regularized_objective(&sol, &ds.y, &zero, &h).unwrap(), g);
    }

    #[test]
    fn sigma_condition_cases() {
        let y = DMatrix::from_column_slice(4, 1, &[1.0, -0.5, 0.2, 0.9]);
        let c = sigma_condition(&y, 0.0);
        assert!(c.ok && c.margin == 0.0);
        let c = sigma_condition(&y, 0.6);
        assert!(!c.ok);
        assert!((c.margin + 0.12).abs() < 1e-15);

        // full rank with T = n: margin is the smallest eigenvalue of Y Y^T / T
        let mut rng = stream(3, "test", 0, 0);
        let y = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let gram = &y * y.transpose() / 5.0;
        let lmin = gram.clone().symmetric_eigenvalues().min();
        let c = sigma_condition(&y, 0.1);
        assert!((c.margin - (lmin - 0.01 / 3.0)).abs() < 1e-12);
        assert_eq!(c.ok, lmin >= 0.01 / 3.0);
    }

    #[test]
    fn expectation_check_zero_noise_is_exact() {
        let ds = data(40, 3, 0.3, 6);
        let model = FeatureModel::tanh_affine(3);
        let h = hyper(0.0);
        let cloud = init_cloud(12, 4, h.lambda_w, 6).unwrap();
        let r = noise_expectation_check(&cloud, &ds, &model, &h, 1000, 1).unwrap();
        assert_eq!(r.mc_mean, r.closed_form);
        assert_eq!(r.rel_err, 0.0);
    }

    #[test]
    fn expectation_check_converges_and_links_to_dof() {
        let ds = data(60, 3, 0.3, 7);
        let model = FeatureModel::tanh_affine(3);
        let h = hyper(1.0);
        let cloud = init_cloud(20, 4, h.lambda_w, 7).unwrap();
        let small = noise_expectation_check(&cloud, &ds, &model, &h, 1000, 2).unwrap();
        let large = noise_expectation_check(&cloud, &ds, &model, &h, 20_000, 2).unwrap();
        assert!(large.rel_err < 1e-2);
        assert!(large.rel_err <= small.rel_err * 1.5 + 1e-4);

        // closed form minus clean objective equals tilde_sigma^2 dof / 6n
        let hf = model.feature_matrix(&ds.x, cloud.params()).unwrap();
        let sol = fit_with_route(&hf, cloud.weights(), &ds.y, h.bar_lambda_a(), SolverRoute::Dense).unwrap();
        let dof = degrees_of_freedom(sol.sigma(), h.bar_lambda_a()).unwrap();
        let n = 60.0;
        assert!((large.trace_inverse * n * h.bar_lambda_a() + dof - n).abs() < 1e-8);
        let gap = large.closed_form - large.clean_u;
        assert!((gap - h.tilde_sigma.powi(2) * dof / (6.0 * n)).abs() < 1e-10);
    }
}
