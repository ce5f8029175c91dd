//! Exact inner solve of the two-timescale limit for squared loss.
//!
//! For a fixed first layer the optimal second layer is kernel ridge
//! regression on the Gram matrix: with `M = Sigma + n * bar_lambda_a * I`,
//! `alpha_t = M^{-1} Y_t` and `a_t(w) = h(X; w)^T alpha_t`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::feature_map::FeatureModel;
use crate::linalg::col;
use crate::particle_measure::{weighted_sigma, GramMatrix, ParticleCloud};

/// Regularization, temperature and step-size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Entropy (temperature) scale `lambda`.
    pub lambda: f64,
    /// Second-layer L2 weight `lambda_a`.
    pub lambda_a: f64,
    /// First-layer L2 weight `lambda_w`; also the precision of the prior.
    pub lambda_w: f64,
    /// Step size `eta`.
    pub eta: f64,
    /// Half-width of the label-noise procedure's uniform noise.
    #[serde(default)]
    pub tilde_sigma: f64,
}

impl Hyperparams {
    /// `eta = 0.2, lambda = 0.004, lambda_w = lambda_a = 0.25`.
    pub fn paper() -> Self {
        Self {
            lambda: 0.004,
            lambda_a: 0.25,
            lambda_w: 0.25,
            eta: 0.2,
            tilde_sigma: 0.0,
        }
    }

    pub fn bar_lambda_a(&self) -> f64 {
        self.lambda * self.lambda_a
    }

    pub fn bar_lambda_w(&self) -> f64 {
        self.lambda * self.lambda_w
    }

    /// Scale of the Langevin noise, `sqrt(2 eta lambda)`.
    pub fn noise_scale(&self) -> f64 {
        (2.0 * self.eta * self.lambda).sqrt()
    }

    /// All parameters finite and non-negative, `lambda_w > 0`.
    ///
    /// Zero `lambda`, `lambda_a` or `eta` are accepted here: they switch off
    /// the entropy, the data term or the motion respectively. Training runs
    /// additionally require strictly positive values (see `RunConfig`).
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda", self.lambda),
            ("lambda_a", self.lambda_a),
            ("lambda_w", self.lambda_w),
            ("eta", self.eta),
            ("tilde_sigma", self.tilde_sigma),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_w <= 0.0 {
            return Err(Error::InvalidParameter("lambda_w must be positive".into()));
        }
        Ok(())
    }
}

/// Which factorization backs the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverRoute {
    /// Cholesky of the `n x n` matrix `M`.
    Dense,
    /// Cholesky of the `N x N` capacitance matrix via the Woodbury identity.
    Woodbury,
    /// Woodbury when `N < n / 2`, dense otherwise.
    #[default]
    Auto,
}

enum Factor {
    Dense(Cholesky<f64, Dyn>),
    Woodbury {
        /// `H diag(sqrt(p))`, `n x N`.
        scaled: DMatrix<f64>,
        /// Cholesky of `shift * I + scaled^T scaled`.
        inner: Cholesky<f64, Dyn>,
        shift: f64,
    },
}

/// Output of the inner solve.
pub struct RidgeSolution {
    alpha: DMatrix<f64>,
    factor: Factor,
    sigma: GramMatrix,
    bar_lambda_a: f64,
}

impl std::fmt::Debug for RidgeSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RidgeSolution")
            .field("n", &self.n())
            .field("tasks", &self.tasks())
            .field("route", &self.route())
            .field("bar_lambda_a", &self.bar_lambda_a)
            .finish()
    }
}

impl RidgeSolution {
    /// `n x T` coefficients, column `t` is `M^{-1} Y_t`.
    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn sigma(&self) -> &GramMatrix {
        &self.sigma
    }

    pub fn bar_lambda_a(&self) -> f64 {
        self.bar_lambda_a
    }

    pub fn n(&self) -> usize {
        self.sigma.n()
    }

    pub fn tasks(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn route(&self) -> SolverRoute {
        match self.factor {
            Factor::Dense(_) => SolverRoute::Dense,
            Factor::Woodbury { .. } => SolverRoute::Woodbury,
        }
    }

    fn shift(&self) -> f64 {
        self.n() as f64 * self.bar_lambda_a
    }

    /// `M^{-1} rhs` with the retained factorization.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("ridge right-hand side", self.n(), rhs.nrows())?;
        Ok(match &self.factor {
            Factor::Dense(chol) => chol.solve(rhs),
            Factor::Woodbury { scaled, inner, shift } => {
                let inner_rhs = scaled.transpose() * rhs;
                let correction = scaled * inner.solve(&inner_rhs);
                (rhs - correction) / *shift
            }
        })
    }

    /// `v^T M^{-1} v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        let rhs = DMatrix::from_column_slice(v.len(), 1, v);
        let sol = self.solve(&rhs)?;
        Ok(v.iter().zip(sol.iter()).map(|(a, b)| a * b).sum())
    }

    /// `tr(M^{-1})`.
    pub fn trace_inverse(&self) -> f64 {
        match &self.factor {
            Factor::Dense(chol) => {
                let n = self.n();
                let l = chol.l();
                let linv = l
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .expect("Cholesky factor has a positive diagonal");
                linv.norm_squared()
            }
            Factor::Woodbury { scaled, inner, shift } => {
                let (n, m) = scaled.shape();
                let kinv_trace = inner.inverse().trace();
                (n as f64 - m as f64 + shift * kinv_trace) / shift
            }
        }
    }

    /// Degrees of freedom `n - n bar_lambda_a tr(M^{-1})` from the factorization.
    pub fn dof_from_trace(&self) -> f64 {
        self.n() as f64 - self.shift() * self.trace_inverse()
    }

    /// Largest relative normal-equation residual `|M alpha_t - Y_t| / |Y_t|` over tasks.
    pub fn residual(&self, y: &DMatrix<f64>) -> f64 {
        let m = self.sigma.matrix() * &self.alpha + &self.alpha * self.shift();
        (0..y.ncols())
            .map(|t| {
                let r = (m.column(t) - y.column(t)).norm();
                let s = y.column(t).norm();
                if s > 0.0 {
                    r / s
                } else {
                    r
                }
            })
            .fold(0.0, f64::max)
    }
}

fn check_reg(bar_lambda_a: f64) -> Result<()> {
    if bar_lambda_a > 0.0 && bar_lambda_a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "ridge regularization must be positive, got {bar_lambda_a}"
        )))
    }
}

/// Solves `(Sigma + n bar_lambda_a I) alpha = Y` by dense Cholesky.
pub fn fit_second_layer(sigma: GramMatrix, y: &DMatrix<f64>, bar_lambda_a: f64) -> Result<RidgeSolution> {
    check_reg(bar_lambda_a)?;
    let n = sigma.n();
    check_dim("ridge labels", n, y.nrows())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge labels"));
    }
    let mut m = sigma.matrix().clone();
    let shift = n as f64 * bar_lambda_a;
    for i in 0..n {
        m[(i, i)] += shift;
    }
    let chol = Cholesky::new(m).ok_or(Error::Factorization("ridge system"))?;
    let alpha = chol.solve(y);
    Ok(RidgeSolution {
        alpha,
        factor: Factor::Dense(chol),
        sigma,
        bar_lambda_a,
    })
}

/// Same solve through the `N x N` capacitance matrix. `sigma` must be the
/// Gram matrix of `h` under `weights`.
pub fn fit_second_layer_woodbury(
    h: &DMatrix<f64>,
    weights: &DVector<f64>,
    sigma: GramMatrix,
    y: &DMatrix<f64>,
    bar_lambda_a: f64,
) -> Result<RidgeSolution> {
    check_reg(bar_lambda_a)?;
    check_dim("ridge features", sigma.n(), h.nrows())?;
    check_dim("ridge weights", h.ncols(), weights.len())?;
    check_dim("ridge labels", sigma.n(), y.nrows())?;
    let shift = sigma.n() as f64 * bar_lambda_a;
    let mut scaled = h.clone();
    for (j, mut c) in scaled.column_iter_mut().enumerate() {
        c *= weights[j].sqrt();
    }
    let mut cap = scaled.transpose() * &scaled;
    for j in 0..cap.nrows() {
        cap[(j, j)] += shift;
    }
    let inner = Cholesky::new(cap).ok_or(Error::Factorization("capacitance matrix"))?;
    let mut sol = RidgeSolution {
        alpha: DMatrix::zeros(0, 0),
        factor: Factor::Woodbury { scaled, inner, shift },
        sigma,
        bar_lambda_a,
    };
    sol.alpha = sol.solve(y)?;
    Ok(sol)
}

/// Builds the Gram matrix from features and solves along `route`.
pub fn fit_with_route(
    h: &DMatrix<f64>,
    weights: &DVector<f64>,
    y: &DMatrix<f64>,
    bar_lambda_a: f64,
    route: SolverRoute,
) -> Result<RidgeSolution> {
    let sigma = weighted_sigma(h, weights)?;
    let use_woodbury = match route {
        SolverRoute::Dense => false,
        SolverRoute::Woodbury => true,
        SolverRoute::Auto => 2 * h.ncols() < h.nrows(),
    };
    if use_woodbury {
        fit_second_layer_woodbury(h, weights, sigma, y, bar_lambda_a)
    } else {
        fit_second_layer(sigma, y, bar_lambda_a)
    }
}

/// `A[j][t] = a_t(w_j) = H[:, j]^T alpha_t`, an `N x T` matrix.
pub fn second_layer_values(h: &DMatrix<f64>, sol: &RidgeSolution) -> Result<DMatrix<f64>> {
    check_dim("second layer features", sol.n(), h.nrows())?;
    Ok(h.tr_mul(&sol.alpha))
}

/// Network output `f_t(x) = sum_j p_j a_t(w_j) h(x; w_j)` on query rows `xq`.
///
/// `second_layer` is the `N x T` output of [`second_layer_values`].
pub fn predict(
    model: &FeatureModel,
    xq: &DMatrix<f64>,
    cloud: &ParticleCloud,
    second_layer: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dim("second layer rows", cloud.len(), second_layer.nrows())?;
    let hq = model.feature_matrix(xq, cloud.params())?;
    let mut weighted = second_layer.clone();
    for (j, mut r) in weighted.row_iter_mut().enumerate() {
        r *= cloud.weights()[j];
    }
    Ok(hq * weighted)
}

/// Objective values of the limiting functional at the solved second layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// `U + (bar_lambda_w / 2) E|w|^2`.
    pub g: f64,
    /// `train_mse / 2 + (bar_lambda_a / 2) a_sq_norm`.
    pub u: f64,
    /// `(bar_lambda_a / 2T) sum_t Y_t^T M^{-1} Y_t`; equals `u` up to rounding.
    pub u_closed_form: f64,
    /// `(1/nT) sum_t |Y_t - Sigma alpha_t|^2`.
    pub train_mse: f64,
    /// `(1/T) sum_t alpha_t^T Sigma alpha_t = (1/T) sum_t E_mu[a_t(w)^2]`.
    pub a_sq_norm: f64,
    /// `E_mu |w|^2`.
    pub w_sq_norm: f64,
}

pub fn objectives(
    sol: &RidgeSolution,
    y: &DMatrix<f64>,
    cloud: &ParticleCloud,
    hyper: &Hyperparams,
) -> Result<Objectives> {
    let n = sol.n();
    check_dim("objective labels", n, y.nrows())?;
    check_dim("objective tasks", sol.tasks(), y.ncols())?;
    let tasks = y.ncols() as f64;
    let bla = sol.bar_lambda_a;
    let fitted = sol.sigma.matrix() * &sol.alpha;
    let mut sq_resid = 0.0;
    let mut a_sq = 0.0;
    let mut closed = 0.0;
    for t in 0..y.ncols() {
        let (yt, ft, at) = (col(y, t), col(&fitted, t), col(&sol.alpha, t));
        for i in 0..n {
            let r = yt[i] - ft[i];
            sq_resid += r * r;
            a_sq += at[i] * ft[i];
            closed += yt[i] * at[i];
        }
    }
    let train_mse = sq_resid / (n as f64 * tasks);
    let a_sq_norm = a_sq / tasks;
    let u = 0.5 * train_mse + 0.5 * bla * a_sq_norm;
    let u_closed_form = 0.5 * bla * closed / tasks;
    let w_sq_norm = cloud.mean_sq_norm();
    Ok(Objectives {
        g: u + 0.5 * hyper.bar_lambda_w() * w_sq_norm,
        u,
        u_closed_form,
        train_mse,
        a_sq_norm,
        w_sq_norm,
    })
}
