//! Quick numerical self-checks run by `mfld check`.

use nalgebra::DMatrix;

use crate::diagnostics::degrees_of_freedom;
use crate::dynamics::{first_variation, particle_drifts, prepare};
use crate::error::Result;
use crate::experiment::data::{gen_synthetic, SyntheticSpec, TargetKind};
use crate::feature_map::FeatureModel;
use crate::label_noise::noise_expectation_check;
use crate::particle_measure::init_cloud;
use crate::ridge::{objectives, second_layer_values, Hyperparams, SolverRoute};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Worst observed relative error.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Drift vs finite differences, objective identities and the label-noise expectation
/// on a small random instance.
pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let d = 5;
    let data = gen_synthetic(
        &SyntheticSpec {
            d,
            n_train: 20,
            n_test: 1,
            target: TargetKind::Product12,
            kappa: 2.0,
            sigma: 0.3,
        },
        seed,
    )?;
    let model = FeatureModel::tanh_affine(d);
    let hyper = Hyperparams {
        lambda: 0.1,
        lambda_a: 0.5,
        lambda_w: 0.25,
        eta: 0.1,
        tilde_sigma: 0.5,
    };
    let cloud = init_cloud(8, d + 1, hyper.lambda_w, seed)?;
    let state = prepare(&model, &cloud, &data, &hyper, SolverRoute::Dense)?;
    let sol = state.solution.as_ref().expect("positive regularization");
    let drift = particle_drifts(&model, &data.x, &cloud, &state, &hyper, None)?;

    // Central differences of the first variation with alpha frozen.
    let fv = |w: &[f64]| -> Result<f64> {
        let h = model.feature_matrix(&data.x, &DMatrix::from_row_slice(1, w.len(), w))?;
        let a = second_layer_values(&h, sol)?;
        Ok(first_variation(a.row(0).transpose().as_slice(), w, &hyper))
    };
    let step = 1e-5;
    let mut grad_err: f64 = 0.0;
    for j in 0..cloud.len() {
        let w = cloud.particle(j);
        let mut fd = vec![0.0; w.len()];
        for (k, g) in fd.iter_mut().enumerate() {
            let mut p = w.clone();
            let mut m = w.clone();
            p[k] += step;
            m[k] -= step;
            *g = (fv(&p)? - fv(&m)?) / (2.0 * step);
        }
        let diff: f64 = fd.iter().enumerate().map(|(k, g)| (g - drift[(j, k)]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|g| g * g).sum::<f64>().sqrt();
        grad_err = grad_err.max(diff / norm.max(1e-12));
    }

    let obj = objectives(sol, &data.y, &cloud, &hyper)?;
    let bla = hyper.bar_lambda_a();
    let n = data.n() as f64;
    let dof = degrees_of_freedom(sol.sigma(), bla)?;
    let noise = noise_expectation_check(&cloud, &data, &model, &hyper, 4000, seed)?;
    Ok(vec![
        CheckOutcome {
            name: "drift vs finite differences",
            error: grad_err,
            tolerance: 1e-5,
        },
        CheckOutcome {
            name: "inner objective closed form",
            error: rel(obj.u, obj.u_closed_form),
            tolerance: 1e-8,
        },
        CheckOutcome {
            name: "trace / degrees-of-freedom identity",
            error: rel(sol.trace_inverse() * n * bla + dof, n),
            tolerance: 1e-8,
        },
        CheckOutcome {
            name: "label-noise expectation",
            error: noise.rel_err,
            tolerance: 1e-2,
        },
    ])
}
