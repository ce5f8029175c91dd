//! Synthetic regression data: Gaussian inputs, bounded targets, uniform
//! observation noise.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, TAG_DATA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `f(x) = x_1 x_2`.
    Product12,
    /// `f(x) = tanh(kappa * u . x)` with `u` uniform on the unit sphere.
    SingleIndexTanh,
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product12" => Ok(TargetKind::Product12),
            "single_index_tanh" => Ok(TargetKind::SingleIndexTanh),
            other => Err(Error::Config(format!("unknown target kind {other:?}"))),
        }
    }
}

/// A target function with its relevant input directions.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Product12,
    SingleIndexTanh { direction: Vec<f64>, kappa: f64 },
}

impl Target {
    pub fn kind(&self) -> TargetKind {
        match self {
            Target::Product12 => TargetKind::Product12,
            Target::SingleIndexTanh { .. } => TargetKind::SingleIndexTanh,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Target::Product12 => x[0] * x[1],
            Target::SingleIndexTanh { direction, kappa } => {
                let z: f64 = direction.iter().zip(x).map(|(u, v)| u * v).sum();
                (kappa * z).tanh()
            }
        }
    }

    /// The single index direction, if the target has one.
    pub fn direction(&self) -> Option<&[f64]> {
        match self {
            Target::Product12 => None,
            Target::SingleIndexTanh { direction, .. } => Some(direction),
        }
    }

    /// Orthonormal basis of the input subspace the target depends on.
    pub fn relevant_subspace(&self, d: usize) -> Vec<Vec<f64>> {
        match self {
            Target::Product12 => (0..2)
                .map(|k| (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
                .collect(),
            Target::SingleIndexTanh { direction, .. } => vec![direction.clone()],
        }
    }

    /// Evaluates the target on every row of `x`.
    pub fn eval_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut row = vec![0.0; x.ncols()];
        DMatrix::from_fn(x.nrows(), 1, |i, _| {
            for (k, r) in row.iter_mut().enumerate() {
                *r = x[(i, k)];
            }
            self.eval(&row)
        })
    }
}

/// Training and held-out data of one run.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Training inputs, `n x d`.
    pub x: DMatrix<f64>,
    /// Noisy training labels, `n x T`.
    pub y: DMatrix<f64>,
    /// Noiseless training targets, `n x T`.
    pub f_clean: DMatrix<f64>,
    pub test_x: DMatrix<f64>,
    /// Noiseless held-out targets.
    pub test_y: DMatrix<f64>,
    pub target: Target,
    /// Half-width of the uniform observation noise.
    pub sigma: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn tasks(&self) -> usize {
        self.y.ncols()
    }
}

/// Parameters of [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub target: TargetKind,
    pub kappa: f64,
    pub sigma: f64,
}

fn gaussian_rows(rows: usize, d: usize, seed: u64, index: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, TAG_DATA, 0, index);
    let mut x = DMatrix::zeros(rows, d);
    for i in 0..rows {
        for k in 0..d {
            x[(i, k)] = rng.sample(StandardNormal);
        }
    }
    x
}

/// Draws a dataset: `x ~ N(0, I_d)`, `y = f(x) + eps`, `eps ~ U[-sigma, sigma]`.
///
/// The direction, training inputs, training noise and test inputs come from
/// separate streams, so e.g. changing `n_test` leaves the training set intact.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.d == 0 || spec.n_train == 0 {
        return Err(Error::Config("d and n_train must be positive".into()));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be >= 0, got {}", spec.sigma)));
    }
    let target = match spec.target {
        TargetKind::Product12 => {
            if spec.d < 2 {
                return Err(Error::Config("product12 target needs d >= 2".into()));
            }
            Target::Product12
        }
        TargetKind::SingleIndexTanh => {
            let mut rng = stream(seed, TAG_DATA, 0, 0);
            let mut u: Vec<f64> = (0..spec.d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            Target::SingleIndexTanh {
                direction: u,
                kappa: spec.kappa,
            }
        }
    };
    let x = gaussian_rows(spec.n_train, spec.d, seed, 1);
    let f_clean = target.eval_rows(&x);
    let mut noise_rng = stream(seed, TAG_DATA, 0, 2);
    let y = f_clean.map(|f| {
        if spec.sigma > 0.0 {
            f + noise_rng.random_range(-spec.sigma..=spec.sigma)
        } else {
            f
        }
    });
    let test_x = gaussian_rows(spec.n_test, spec.d, seed, 3);
    let test_y = target.eval_rows(&test_x);
    Ok(Dataset {
        x,
        y,
        f_clean,
        test_x,
        test_y,
        target,
        sigma: spec.sigma,
    })
}
