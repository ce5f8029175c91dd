//! Weighted particle representation of the first-layer distribution and
//! the Gram matrix it induces on a set of inputs.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::linalg::mirror_upper;
use crate::rng::{stream, TAG_INIT};

const WEIGHT_TOL: f64 = 1e-12;

/// `N` particles in `d'` dimensions with probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    params: DMatrix<f64>,
    weights: DVector<f64>,
}

impl ParticleCloud {
    /// Builds a cloud from an `N x d'` parameter matrix and weights.
    pub fn new(params: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        check_dim("particle weights", params.nrows(), weights.len())?;
        if params.nrows() == 0 {
            return Err(Error::InvalidParameter("particle cloud must be non-empty".into()));
        }
        if params.iter().chain(weights.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("particle cloud"));
        }
        if weights.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidParameter("negative particle weight".into()));
        }
        let total = weights.sum();
        // summation error grows with the number of particles
        if (total - 1.0).abs() > WEIGHT_TOL * weights.len().max(1) as f64 {
            return Err(Error::InvalidParameter(format!(
                "particle weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { params, weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(params: DMatrix<f64>) -> Result<Self> {
        let n = params.nrows();
        Self::new(params, DVector::from_element(n, 1.0 / n as f64))
    }

    /// Number of particles `N`.
    pub fn len(&self) -> usize {
        self.params.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.params.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.params.ncols()
    }

    /// `N x d'` parameter matrix, one particle per row.
    pub fn params(&self) -> &DMatrix<f64> {
        &self.params
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn particle(&self, j: usize) -> Vec<f64> {
        self.params.row(j).iter().copied().collect()
    }

    pub fn is_uniform(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|&p| p == w0)
    }

    /// `sum_j p_j |w_j|^2`.
    pub fn mean_sq_norm(&self) -> f64 {
        self.params
            .row_iter()
            .zip(self.weights.iter())
            .map(|(r, p)| p * r.norm_squared())
            .sum()
    }

    pub(crate) fn replace_params(&mut self, params: DMatrix<f64>) {
        debug_assert_eq!(params.shape(), self.params.shape());
        self.params = params;
    }

    /// Writes the cloud in the text snapshot format described in the README.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "mfld-cloud v1")?;
        writeln!(out, "{} {}", self.len(), self.dim())?;
        write_row(&mut out, self.weights.iter())?;
        for r in self.params.row_iter() {
            write_row(&mut out, r.iter())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        read_snapshot_body(&mut lines)
    }
}

fn write_row<'a, W: Write>(out: &mut W, vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    let row: Vec<String> = vals.map(|v| format!("{v:?}")).collect();
    writeln!(out, "{}", row.join(" "))?;
    Ok(())
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "cloud snapshot",
        detail: detail.into(),
    }
}

fn parse_row(line: Option<std::io::Result<String>>, len: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| malformed("unexpected end of file"))??;
    let vals = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| malformed(format!("{t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != len {
        return Err(malformed(format!("expected {len} values, found {}", vals.len())));
    }
    Ok(vals)
}

pub(crate) fn read_snapshot_body<I>(lines: &mut I) -> Result<ParticleCloud>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let magic = lines.next().ok_or_else(|| malformed("empty"))??;
    if magic.trim() != "mfld-cloud v1" {
        return Err(malformed(format!("bad header {magic:?}")));
    }
    let shape = lines.next().ok_or_else(|| malformed("missing shape"))??;
    let dims: Vec<usize> = shape
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| malformed(format!("bad shape {shape:?}"))))
        .collect::<Result<_>>()?;
    let [n, dp] = dims[..] else {
        return Err(malformed(format!("bad shape {shape:?}")));
    };
    let weights = DVector::from_vec(parse_row(lines.next(), n)?);
    let mut flat = Vec::with_capacity(n * dp);
    for _ in 0..n {
        flat.extend(parse_row(lines.next(), dp)?);
    }
    ParticleCloud::new(DMatrix::from_row_slice(n, dp, &flat), weights)
}

/// Draws `N` i.i.d. particles from `N(0, I / lambda_w)` with uniform weights.
pub fn init_cloud(n_particles: usize, param_dim: usize, lambda_w: f64, seed: u64) -> Result<ParticleCloud> {
    if n_particles == 0 || param_dim == 0 {
        return Err(Error::InvalidParameter("particle count and dimension must be positive".into()));
    }
    if !(lambda_w > 0.0 && lambda_w.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda_w must be positive, got {lambda_w}")));
    }
    let scale = lambda_w.sqrt().recip();
    let mut rng = stream(seed, TAG_INIT, 0, 0);
    let mut params = DMatrix::zeros(n_particles, param_dim);
    for j in 0..n_particles {
        for k in 0..param_dim {
            params[(j, k)] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    ParticleCloud::uniform(params)
}

/// Gram matrix `sum_j p_j h(X; w_j) h(X; w_j)^T` of a weighted particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Wraps a matrix that is already known to be a symmetric Gram matrix.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim("gram matrix", m.nrows(), m.ncols()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }
}

/// Builds the weighted Gram matrix from an `n x N` feature matrix.
pub fn weighted_sigma(h: &DMatrix<f64>, weights: &DVector<f64>) -> Result<GramMatrix> {
    check_dim("gram weights", h.ncols(), weights.len())?;
    let mut scaled = h.clone();
    for (j, mut c) in scaled.column_iter_mut().enumerate() {
        c *= weights[j].sqrt();
    }
    let mut sigma = &scaled * scaled.transpose();
    mirror_upper(&mut sigma);
    Ok(GramMatrix(sigma))
}

/// The mixture `(1 - t) base + t delta_point` as an `N + 1` particle cloud.
pub fn mixture_measure(base: &ParticleCloud, point: &[f64], t: f64) -> Result<ParticleCloud> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("mixture weight {t} outside [0, 1]")));
    }
    check_dim("mixture point", base.dim(), point.len())?;
    let n = base.len();
    let mut params = base.params.clone().insert_row(n, 0.0);
    params.row_mut(n).copy_from_slice(point);
    let mut weights = base.weights.clone().insert_row(n, 0.0);
    for j in 0..n {
        weights[j] *= 1.0 - t;
    }
    weights[n] = t;
    // renormalization absorbs rounding of the scaled weights
    let total = weights.sum();
    weights /= total;
    ParticleCloud::new(params, weights)
}
