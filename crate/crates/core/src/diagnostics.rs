//! Kernel alignment, parameter alignment, degrees of freedom and test loss
//! of the kernel induced by the first layer.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::MeasureState;
use crate::error::{check_dim, Error, Result};
use crate::experiment::data::{Dataset, Target};
use crate::feature_map::FeatureModel;
use crate::linalg::{col, symmetric_eigenvalues};
use crate::particle_measure::{GramMatrix, ParticleCloud};
use crate::ridge::{predict, Hyperparams};
use crate::rng::{stream, TAG_ALIGN_MC};

/// One evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub g: f64,
    pub u: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub align_emp: f64,
    pub align_pop: f64,
    pub align_pop_stderr: f64,
    pub param_align: f64,
    pub dof: f64,
    pub mean_w_sq: f64,
    pub mean_a_sq: f64,
    pub sigma: f64,
    pub tilde_sigma: f64,
    pub wall_ms: f64,
}

/// `k(x, x') = sum_j p_j h(x; w_j) h(x'; w_j)`.
pub fn kernel_eval(model: &FeatureModel, cloud: &ParticleCloud, x: &[f64], x2: &[f64]) -> Result<f64> {
    let mut k = 0.0;
    for j in 0..cloud.len() {
        let w = cloud.particle(j);
        k += cloud.weights()[j] * (model.value(x, &w)? * model.value(x2, &w)?);
    }
    Ok(k)
}

/// `f^T Sigma f / (|f|^2 |Sigma|_F)`.
pub fn empirical_alignment(sigma: &GramMatrix, f_targets: &[f64]) -> Result<f64> {
    check_dim("alignment targets", sigma.n(), f_targets.len())?;
    let f_sq: f64 = f_targets.iter().map(|v| v * v).sum();
    if f_sq == 0.0 {
        return Err(Error::UndefinedAlignment("zero target vector"));
    }
    let fro = sigma.frobenius();
    if fro == 0.0 {
        return Err(Error::UndefinedAlignment("zero kernel"));
    }
    let m = sigma.matrix();
    let mut quad = 0.0;
    for b in 0..sigma.n() {
        let cb = col(m, b);
        let inner: f64 = cb.iter().zip(f_targets).map(|(s, f)| s * f).sum();
        quad += inner * f_targets[b];
    }
    Ok(quad / (f_sq * fro))
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

const MC_BATCHES: usize = 20;
const MC_CHUNK: usize = 1000;

/// Population kernel alignment under `x ~ N(0, I)` from `n_mc` independent
/// pairs. The standard error comes from 20 batch means of the ratio.
pub fn population_alignment(
    model: &FeatureModel,
    cloud: &ParticleCloud,
    target: &Target,
    n_mc: usize,
    seed: u64,
    step: u64,
) -> Result<McEstimate> {
    if n_mc < 100 {
        return Err(Error::InvalidParameter(format!("n_mc must be >= 100, got {n_mc}")));
    }
    let d = model.input_dim();
    // per-pair (f(x) k f(x'), (f(x)^2 + f(x')^2) / 2, k^2)
    let mut terms = Vec::with_capacity(n_mc);
    for (chunk, start) in (0..n_mc).step_by(MC_CHUNK).enumerate() {
        let len = MC_CHUNK.min(n_mc - start);
        let mut rng = stream(seed, TAG_ALIGN_MC, step, chunk as u64);
        let mut draw = || DMatrix::from_fn(len, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x1 = draw();
        let x2 = draw();
        let h1 = model.feature_matrix(&x1, cloud.params())?;
        let h2 = model.feature_matrix(&x2, cloud.params())?;
        let f1 = target.eval_rows(&x1);
        let f2 = target.eval_rows(&x2);
        for p in 0..len {
            let k: f64 = (0..cloud.len())
                .map(|j| cloud.weights()[j] * h1[(p, j)] * h2[(p, j)])
                .sum();
            terms.push((f1[p] * k * f2[p], 0.5 * (f1[p] * f1[p] + f2[p] * f2[p]), k * k));
        }
    }
    let ratio = |slice: &[(f64, f64, f64)]| -> Result<f64> {
        let m = slice.len() as f64;
        let (num, fsq, ksq) = slice
            .iter()
            .fold((0.0, 0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2));
        if fsq == 0.0 {
            return Err(Error::UndefinedAlignment("target vanishes on the sample"));
        }
        if ksq == 0.0 {
            return Err(Error::UndefinedAlignment("kernel vanishes on the sample"));
        }
        Ok((num / m) / ((fsq / m) * (ksq / m).sqrt()))
    };
    let estimate = ratio(&terms)?;
    let batch = n_mc / MC_BATCHES;
    let batch_ratios = (0..MC_BATCHES)
        .map(|b| ratio(&terms[b * batch..(b + 1) * batch]))
        .collect::<Result<Vec<_>>>()?;
    let mean = batch_ratios.iter().sum::<f64>() / MC_BATCHES as f64;
    let var = batch_ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (MC_BATCHES - 1) as f64;
    Ok(McEstimate {
        estimate,
        stderr: (var / MC_BATCHES as f64).sqrt(),
    })
}

/// `sum_j p_j (u_j . u)^2 / |u_j|^2` over the input part `u_j` of each
/// particle (bias excluded); particles with `u_j = 0` contribute zero.
pub fn parameter_alignment(cloud: &ParticleCloud, u_circ: &[f64]) -> Result<f64> {
    let norm = u_circ.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidParameter("zero reference direction".into()));
    }
    let unit: Vec<f64> = u_circ.iter().map(|v| v / norm).collect();
    subspace_alignment(cloud, &[unit])
}

/// Generalization of [`parameter_alignment`] to an orthonormal `basis`:
/// the weighted mean of `|P u_j|^2 / |u_j|^2` with `P` the projector on the span.
pub fn subspace_alignment(cloud: &ParticleCloud, basis: &[Vec<f64>]) -> Result<f64> {
    let d = cloud.dim() - 1;
    for b in basis {
        check_dim("alignment direction", d, b.len())?;
    }
    let params = cloud.params();
    let mut total = 0.0;
    for j in 0..cloud.len() {
        let u = params.row(j).columns(0, d).into_owned();
        let u_sq = u.norm_squared();
        if u_sq == 0.0 {
            continue;
        }
        let proj: f64 = basis
            .iter()
            .map(|b| u.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().powi(2))
            .sum();
        total += cloud.weights()[j] * proj / u_sq;
    }
    Ok(total)
}

/// `tr[Sigma (Sigma + n lambda I)^{-1}] = sum_i s_i / (s_i + n lambda)` from
/// the eigenvalues of `Sigma`.
pub fn degrees_of_freedom(sigma: &GramMatrix, lambda_reg: f64) -> Result<f64> {
    if !(lambda_reg > 0.0 && lambda_reg.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda_reg}")));
    }
    let shift = sigma.n() as f64 * lambda_reg;
    Ok(symmetric_eigenvalues(sigma.matrix())
        .iter()
        .map(|&s| {
            let s = s.max(0.0);
            s / (s + shift)
        })
        .sum())
}

/// `bar_lambda_a |f|^2 / (2 U n) - bar_lambda_a`, a lower bound on the
/// empirical alignment when the labels are noiseless.
pub fn alignment_lower_bound(u: f64, f_targets: &[f64], bar_lambda_a: f64, n: usize) -> f64 {
    let f_sq: f64 = f_targets.iter().map(|v| v * v).sum();
    bar_lambda_a * f_sq / (2.0 * u * n as f64) - bar_lambda_a
}

/// Mean squared prediction error on held-out pairs, averaged over tasks.
pub fn test_loss(
    model: &FeatureModel,
    cloud: &ParticleCloud,
    second_layer: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    test_y: &DMatrix<f64>,
) -> Result<f64> {
    if test_x.nrows() == 0 {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    check_dim("test labels", test_x.nrows(), test_y.nrows())?;
    let pred = predict(model, test_x, cloud, second_layer)?;
    check_dim("test tasks", pred.ncols(), test_y.ncols())?;
    Ok((pred - test_y).norm_squared() / test_y.len() as f64)
}

/// Settings of the per-row diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Monte-Carlo pairs for the population alignment; 0 disables it (NaN columns).
    pub mc_samples: usize,
    pub seed: u64,
}

/// Full metrics row for the measure described by `state`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &FeatureModel,
    cloud: &ParticleCloud,
    data: &Dataset,
    state: &MeasureState,
    hyper: &Hyperparams,
    step: u64,
    opts: &EvalOptions,
) -> Result<MetricsRecord> {
    let (sol, a) = state
        .solution
        .as_ref()
        .zip(state.second_layer.as_ref())
        .ok_or_else(|| Error::InvalidParameter("diagnostics need a positive ridge regularization".into()))?;
    let obj = crate::ridge::objectives(sol, &data.y, cloud, hyper)?;
    let test_mse = if data.test_x.nrows() > 0 {
        test_loss(model, cloud, a, &data.test_x, &data.test_y)?
    } else {
        f64::NAN
    };
    let tasks = data.f_clean.ncols();
    let mut align_emp = 0.0;
    for t in 0..tasks {
        align_emp += empirical_alignment(sol.sigma(), col(&data.f_clean, t))?;
    }
    align_emp /= tasks as f64;
    let pop = if opts.mc_samples > 0 {
        population_alignment(model, cloud, &data.target, opts.mc_samples, opts.seed, step)?
    } else {
        McEstimate {
            estimate: f64::NAN,
            stderr: f64::NAN,
        }
    };
    let param_align = subspace_alignment(cloud, &data.target.relevant_subspace(data.d()))?;
    Ok(MetricsRecord {
        step,
        g: obj.g,
        u: obj.u,
        train_mse: obj.train_mse,
        test_mse,
        align_emp,
        align_pop: pop.estimate,
        align_pop_stderr: pop.stderr,
        param_align,
        dof: degrees_of_freedom(sol.sigma(), sol.bar_lambda_a())?,
        mean_w_sq: obj.w_sq_norm,
        mean_a_sq: obj.a_sq_norm,
        sigma: data.sigma,
        tilde_sigma: hyper.tilde_sigma,
        wall_ms: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particle_measure::{init_cloud, weighted_sigma};
    use crate::ridge::{fit_with_route, objectives, second_layer_values, SolverRoute};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, "test", 0, 0);
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn gram(n: usize, m: usize, seed: u64) -> (DMatrix<f64>, GramMatrix) {
        let model = FeatureModel::tanh_affine(3);
        let x = gaussian(n, 3, seed);
        let cloud = init_cloud(m, 4, 0.5, seed).unwrap();
        let h = model.feature_matrix(&x, cloud.params()).unwrap();
        let s = weighted_sigma(&h, cloud.weights()).unwrap();
        (x, s)
    }

    #[test]
    fn kernel_properties() {
        let model = FeatureModel::tanh_affine(2);
        let cloud = init_cloud(9, 3, 0.5, 1).unwrap();
        let (x, y) = ([0.3, -1.0], [1.2, 0.4]);
        assert!(kernel_eval(&model, &cloud, &x, &x).unwrap() >= 0.0);
        let kxy = kernel_eval(&model, &cloud, &x, &y).unwrap();
        assert_eq!(kxy, kernel_eval(&model, &cloud, &y, &x).unwrap());
        assert!(kxy.abs() <= 1.0);
        let zero = ParticleCloud::uniform(DMatrix::zeros(1, 3)).unwrap();
        assert_eq!(kernel_eval(&model, &zero, &x, &y).unwrap(), 0.0);
        // Gram entries are kernel evaluations
        let xs = DMatrix::from_row_slice(2, 2, &[x[0], x[1], y[0], y[1]]);
        let h = model.feature_matrix(&xs, cloud.params()).unwrap();
        let s = weighted_sigma(&h, cloud.weights()).unwrap();
        assert!((s.matrix()[(0, 1)] - kxy).abs() < 1e-15);
    }

    #[test]
    fn rank_one_aligned_kernel_has_alignment_one() {
        let f = [0.5, -1.0, 2.0, 0.1];
        let fv = DVector::from_column_slice(&f);
        let s = GramMatrix::from_matrix(&fv * fv.transpose()).unwrap();
        assert!((empirical_alignment(&s, &f).unwrap() - 1.0).abs() < 1e-14);
        let g = [1.0, 0.5, 0.0, 0.0];
        // g . f = 0
        assert!(empirical_alignment(&s, &g).unwrap().abs() < 1e-15);
    }

    #[test]
    fn alignment_undefined_cases() {
        let s = GramMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(empirical_alignment(&s, &[0.0; 3]), Err(Error::UndefinedAlignment(_))));
        let z = GramMatrix::from_matrix(DMatrix::zeros(3, 3)).unwrap();
        assert!(matches!(empirical_alignment(&z, &[1.0; 3]), Err(Error::UndefinedAlignment(_))));
    }

    #[test]
    fn population_alignment_of_zero_particle_is_undefined() {
        let model = FeatureModel::tanh_affine(3);
        let cloud = ParticleCloud::uniform(DMatrix::zeros(1, 4)).unwrap();
        let r = population_alignment(&model, &cloud, &Target::Product12, 200, 0, 0);
        assert!(matches!(r, Err(Error::UndefinedAlignment(_))));
        assert!(population_alignment(&model, &cloud, &Target::Product12, 50, 0, 0).is_err());
    }

    #[test]
    fn population_alignment_rises_when_particles_match_the_target() {
        let d = 8;
        let model = FeatureModel::tanh_affine(d);
        let mut u = vec![0.0; d];
        u[0] = 0.6;
        u[1] = 0.8;
        let target = Target::SingleIndexTanh { direction: u.clone(), kappa: 2.0 };
        let init = init_cloud(400, d + 1, 0.25, 3).unwrap();
        let mut aligned = DMatrix::zeros(50, d + 1);
        for j in 0..50 {
            for k in 0..d {
                aligned[(j, k)] = 2.0 * u[k];
            }
        }
        let aligned = ParticleCloud::uniform(aligned).unwrap();
        let a0 = population_alignment(&model, &init, &target, 4000, 1, 0).unwrap();
        let a1 = population_alignment(&model, &aligned, &target, 4000, 1, 0).unwrap();
        assert!(a1.estimate > 0.9, "{a1:?}");
        assert!(a1.estimate > a0.estimate + 10.0 * (a0.stderr + a1.stderr), "{a0:?} {a1:?}");
        assert!(a0.stderr > 0.0 && a0.stderr < 0.05);
    }

    #[test]
    fn parameter_alignment_extremes() {
        let u = [0.0, 1.0, 0.0];
        let along = DMatrix::from_row_slice(2, 4, &[0.0, 3.0, 0.0, 9.0, 0.0, -0.1, 0.0, -2.0]);
        let c = ParticleCloud::uniform(along).unwrap();
        assert!((parameter_alignment(&c, &u).unwrap() - 1.0).abs() < 1e-15);
        let ortho = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0]);
        let c = ParticleCloud::uniform(ortho).unwrap();
        assert_eq!(parameter_alignment(&c, &u).unwrap(), 0.0);
        // u = 0 contributes zero; unnormalized reference is renormalized
        let with_zero = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, 5.0, 0.0, 2.0, 0.0, 0.0]);
        let c = ParticleCloud::uniform(with_zero).unwrap();
        assert!((parameter_alignment(&c, &[0.0, 4.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dof_special_cases() {
        let z = GramMatrix::from_matrix(DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(degrees_of_freedom(&z, 0.1).unwrap(), 0.0);
        let v = DVector::from_vec(vec![0.3, 0.8, -0.5, 0.1]);
        let s = GramMatrix::from_matrix(&v * v.transpose()).unwrap();
        let lam = 0.05;
        let expected = v.norm_squared() / (v.norm_squared() + 4.0 * lam);
        assert!((degrees_of_freedom(&s, lam).unwrap() - expected).abs() < 1e-12);
        assert!(degrees_of_freedom(&s, 0.0).is_err());
    }

    #[test]
    fn dof_routes_agree() {
        let (_, s) = gram(30, 12, 4);
        let y = DMatrix::from_element(30, 1, 1.0);
        for bla in [1e-3, 1e-2, 0.3] {
            let eig = degrees_of_freedom(&s, bla).unwrap();
            let sol = crate::ridge::fit_second_layer(s.clone(), &y, bla).unwrap();
            assert!((eig - sol.dof_from_trace()).abs() < 1e-8, "{eig} {}", sol.dof_from_trace());
        }
    }

    #[test]
    fn jensen_bound_zero_kernel_case() {
        let f = [1.0, -0.5, 0.25];
        let u = f.iter().map(|v| v * v).sum::<f64>() / (2.0 * 3.0);
        assert!(alignment_lower_bound(u, &f, 0.01, 3).abs() < 1e-15);
        assert!(alignment_lower_bound(1e12, &f, 0.01, 3) < 0.0);
    }

    #[test]
    fn test_loss_cases() {
        let model = FeatureModel::tanh_affine(3);
        let cloud = init_cloud(5, 4, 0.5, 2).unwrap();
        let tx = gaussian(7, 3, 8);
        let a = gaussian(5, 1, 9);
        let pred = predict(&model, &tx, &cloud, &a).unwrap();
        assert_eq!(test_loss(&model, &cloud, &a, &tx, &pred).unwrap(), 0.0);
        let ty = gaussian(7, 1, 10);
        let zero = test_loss(&model, &cloud, &DMatrix::zeros(5, 1), &tx, &ty).unwrap();
        assert!((zero - ty.norm_squared() / 7.0).abs() < 1e-15);
        let loss = test_loss(&model, &cloud, &a, &tx, &ty).unwrap();
        let direct: f64 = (0..7).map(|i| (pred[(i, 0)] - ty[(i, 0)]).powi(2)).sum::<f64>() / 7.0;
        assert!((loss - direct).abs() < 1e-12);
        assert!(test_loss(&model, &cloud, &a, &DMatrix::zeros(0, 3), &DMatrix::zeros(0, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn alignment_in_unit_interval_matches_loop(seed in 0u64..10_000) {
            let (_, s) = gram(8, 5, seed);
            let f: Vec<f64> = gaussian(8, 1, seed + 1).iter().copied().collect();
            let a = empirical_alignment(&s, &f).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
            let mut quad = 0.0;
            for i in 0..8 { for k in 0..8 { quad += f[i] * s.matrix()[(i, k)] * f[k]; } }
            let fsq: f64 = f.iter().map(|v| v * v).sum();
            prop_assert!((a - quad / (fsq * s.frobenius())).abs() < 1e-10);
        }

        #[test]
        fn dof_bounded_and_decreasing(seed in 0u64..10_000) {
            let (_, s) = gram(10, 4, seed);
            let mut prev = f64::INFINITY;
            for lam in [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
                let d = degrees_of_freedom(&s, lam).unwrap();
                prop_assert!((0.0..=4.0 + 1e-9).contains(&d));
                prop_assert!(d < prev);
                prev = d;
            }
        }

        #[test]
        fn parameter_alignment_scale_invariant(seed in 0u64..10_000, scale in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let c = init_cloud(6, 4, 1.0, seed).unwrap();
            let u = [0.6, 0.0, 0.8];
            let p = parameter_alignment(&c, &u).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let mut params = c.params().clone();
            for k in 0..3 { params[(2, k)] *= scale; }
            let c2 = ParticleCloud::uniform(params).unwrap();
            prop_assert!((parameter_alignment(&c2, &u).unwrap() - p).abs() < 1e-12);
        }

        #[test]
        fn jensen_bound_holds(seed in 0u64..10_000, log_reg in -4.0f64..0.0) {
            let bla = 10f64.powf(log_reg);
            let model = FeatureModel::tanh_affine(3);
            let x = gaussian(12, 3, seed);
            let f = x.column(0).component_mul(&x.column(1)).into_owned();
            let y = DMatrix::from_column_slice(12, 1, f.as_slice());
            let cloud = init_cloud(7, 4, 0.5, seed).unwrap();
            let h = model.feature_matrix(&x, cloud.params()).unwrap();
            let sol = fit_with_route(&h, cloud.weights(), &y, bla, SolverRoute::Dense).unwrap();
            let _ = second_layer_values(&h, &sol).unwrap();
            let hyper = Hyperparams { lambda: 1.0, lambda_a: bla, ..Hyperparams::paper() };
            let u = objectives(&sol, &y, &cloud, &hyper).unwrap().u;
            let a = empirical_alignment(sol.sigma(), f.as_slice()).unwrap();
            prop_assert!(a >= alignment_lower_bound(u, f.as_slice(), bla, 12));
        }
    }
}
