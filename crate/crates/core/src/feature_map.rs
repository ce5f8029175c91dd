//! Neuron activation `h(x; w)` and its parameter gradient.
//!
//! Parameters are laid out as `w = (u, b)` with `u` in input space and the
//! bias last, so `param_dim = input_dim + 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::col;

/// Activation family. Every kind satisfies `|h| <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureModel {
    /// `h(x; u, b) = tanh(u . x + b)`.
    TanhAffine { input_dim: usize },
}

/// Feature values and activation slopes on a batch of inputs.
///
/// `values[(i, j)] = h(x_i; w_j)`; `slopes[(i, j)]` is the derivative of the
/// activation at the pre-activation of the same entry, so that
/// `grad_w h(x_i; w_j) = slopes[(i, j)] * (x_i, 1)`.
#[derive(Debug, Clone)]
pub struct Features {
    pub values: DMatrix<f64>,
    pub slopes: DMatrix<f64>,
}

/// `1 - tanh(z)^2` without cancellation; exact zero only below `~1e-300`.
#[inline]
pub fn sech_sq(z: f64) -> f64 {
    let e = (-2.0 * z.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

/// `(tanh z, sech^2 z)` from a single exponential. With `e = exp(-2|z|)`,
/// `tanh |z| = (1 - e) / (1 + e)` and `sech^2 z = 4e / (1 + e)^2`; near zero
/// `1 - e` comes from `expm1` to avoid cancellation.
#[inline]
fn tanh_and_sech_sq(z: f64) -> (f64, f64) {
    if z.is_nan() {
        return (f64::NAN, f64::NAN);
    }
    let a = z.abs();
    let (e, one_minus_e) = if a < 0.5 {
        let m = (-2.0 * a).exp_m1();
        (1.0 + m, -m)
    } else {
        let e = (-2.0 * a).exp();
        (e, 1.0 - e)
    };
    let p = 1.0 + e;
    ((one_minus_e / p).copysign(z), 4.0 * e / (p * p))
}

#[inline]
fn affine(x: &[f64], w: &[f64]) -> f64 {
    let d = x.len();
    let mut z = 0.0;
    for k in 0..d {
        z += x[k] * w[k];
    }
    z + w[d]
}

impl FeatureModel {
    pub fn tanh_affine(input_dim: usize) -> Self {
        FeatureModel::TanhAffine { input_dim }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            FeatureModel::TanhAffine { input_dim } => input_dim,
        }
    }

    pub fn param_dim(&self) -> usize {
        match *self {
            FeatureModel::TanhAffine { input_dim } => input_dim + 1,
        }
    }

    fn check_point(&self, x: &[f64], w: &[f64]) -> Result<()> {
        check_dim("feature input", self.input_dim(), x.len())?;
        check_dim("feature parameter", self.param_dim(), w.len())
    }

    #[inline]
    fn eval_unchecked(&self, x: &[f64], w: &[f64]) -> (f64, f64) {
        match self {
            FeatureModel::TanhAffine { .. } => tanh_and_sech_sq(affine(x, w)),
        }
    }

    pub fn value(&self, x: &[f64], w: &[f64]) -> Result<f64> {
        self.check_point(x, w)?;
        Ok(self.eval_unchecked(x, w).0)
    }

    /// Gradient of `h(x; w)` with respect to `w`.
    pub fn grad(&self, x: &[f64], w: &[f64]) -> Result<DVector<f64>> {
        self.check_point(x, w)?;
        let (_, s) = self.eval_unchecked(x, w);
        let d = x.len();
        Ok(DVector::from_fn(d + 1, |k, _| if k < d { s * x[k] } else { s }))
    }

    /// Gradients of `h(x_i; w)` for all rows of `x`, as an `n x d'` matrix.
    pub fn param_jacobian(&self, x: &DMatrix<f64>, w: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("feature input", self.input_dim(), x.ncols())?;
        check_dim("feature parameter", self.param_dim(), w.len())?;
        let xt = x.transpose();
        let mut jac = DMatrix::zeros(x.nrows(), self.param_dim());
        for i in 0..x.nrows() {
            let g = self.grad(col(&xt, i), w)?;
            jac.row_mut(i).copy_from(&g.transpose());
        }
        Ok(jac)
    }

    /// `H[i][j] = h(x_i; w_j)` for inputs `x` (`n x d`) and particles `w` (`N x d'`).
    pub fn feature_matrix(&self, x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.features(x, w)?.values)
    }

    /// Feature values together with activation slopes.
    pub fn features(&self, x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Features> {
        check_dim("feature input", self.input_dim(), x.ncols())?;
        check_dim("feature parameter", self.param_dim(), w.ncols())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature inputs"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("particle parameters"));
        }
        let xt = x.transpose();
        let wt = w.transpose();
        Ok(self.features_transposed(&xt, &wt))
    }

    /// Same as [`features`](Self::features) with inputs stored column-wise
    /// (`d x n`) and particles column-wise (`d' x N`). No validation.
    pub(crate) fn features_transposed(&self, xt: &DMatrix<f64>, wt: &DMatrix<f64>) -> Features {
        let (n, m) = (xt.ncols(), wt.ncols());
        let mut values = DMatrix::zeros(n, m);
        let mut slopes = DMatrix::zeros(n, m);
        for j in 0..m {
            let wj = col(wt, j);
            let vcol = &mut values.as_mut_slice()[j * n..(j + 1) * n];
            let scol = &mut slopes.as_mut_slice()[j * n..(j + 1) * n];
            for i in 0..n {
                let (v, s) = self.eval_unchecked(col(xt, i), wj);
                vcol[i] = v;
                scol[i] = s;
            }
        }
        Features { values, slopes }
    }

    /// Computes `sum_i c_i * grad_w h(x_i; w_j)` from the slopes of particle `j`,
    /// accumulating into `out` (length `d'`).
    pub(crate) fn contract_gradients(
        &self,
        xt: &DMatrix<f64>,
        slopes_j: &[f64],
        coeffs: &[f64],
        out: &mut [f64],
    ) {
        match self {
            FeatureModel::TanhAffine { input_dim } => {
                let d = *input_dim;
                for (i, (&s, &c)) in slopes_j.iter().zip(coeffs).enumerate() {
                    let sc = s * c;
                    let x = col(xt, i);
                    for k in 0..d {
                        out[k] += sc * x[k];
                    }
                    out[d] += sc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn model(d: usize) -> FeatureModel {
        FeatureModel::tanh_affine(d)
    }

    #[test]
    fn zero_parameter_gives_zero() {
        let m = model(3);
        assert_eq!(m.value(&[0.3, -2.0, 5.0], &[0.0; 4]).unwrap(), 0.0);
        assert!((m.value(&[0.0; 3], &[0.0, 0.0, 0.0, 0.7]).unwrap() - 0.7f64.tanh()).abs() < 2e-16);
        assert_eq!(m.value(&[0.0; 3], &[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn fused_activation_matches_std() {
        let mut z = 1e-300;
        while z < 40.0 {
            for s in [z, -z] {
                let (t, q) = tanh_and_sech_sq(s);
                assert!((t - s.tanh()).abs() <= 4.0 * f64::EPSILON * s.tanh().abs(), "{s}");
                assert!((q - sech_sq(s)).abs() <= 8.0 * f64::EPSILON * sech_sq(s), "{s}");
            }
            z *= 1.37;
        }
        assert_eq!(tanh_and_sech_sq(f64::INFINITY), (1.0, 0.0));
        assert_eq!(tanh_and_sech_sq(f64::NEG_INFINITY), (-1.0, 0.0));
        assert_eq!(tanh_and_sech_sq(0.0), (0.0, 1.0));
        assert!(tanh_and_sech_sq(f64::NAN).0.is_nan());
    }

    #[test]
    fn unit_direction_value() {
        // tanh(1) to 20 digits
        let v = model(2).value(&[1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = model(2);
        assert!(matches!(m.value(&[1.0], &[0.0; 3]), Err(Error::Dimension { .. })));
        assert!(matches!(m.grad(&[1.0, 2.0], &[0.0; 2]), Err(Error::Dimension { .. })));
        let x = DMatrix::zeros(4, 3);
        let w = DMatrix::zeros(2, 3);
        assert!(m.feature_matrix(&x, &w).is_err());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let m = model(2);
        let mut x = DMatrix::zeros(2, 2);
        x[(1, 0)] = f64::NAN;
        let w = DMatrix::zeros(1, 3);
        assert!(matches!(m.feature_matrix(&x, &w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_at_zero_is_input_and_one() {
        let g = model(3).grad(&[0.5, -1.0, 2.0], &[0.0; 4]).unwrap();
        assert_eq!(g.as_slice(), &[0.5, -1.0, 2.0, 1.0]);
    }

    #[test]
    fn saturated_grad_vanishes() {
        for b in [50.0, -50.0, 1e3, -1e3] {
            let g = model(2).grad(&[1.0, -1.0], &[0.3, 0.2, b]).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-20 && v.is_finite()), "{g:?}");
            let v = model(2).value(&[1.0, -1.0], &[0.3, 0.2, b]).unwrap();
            assert!(v.is_finite() && v.abs() <= 1.0);
        }
    }

    #[test]
    fn grad_matches_central_differences() {
        let m = model(4);
        let mut rng = crate::rng::stream(0, "test", 0, 0);
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let w: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7).collect();
            let g = m.grad(&x, &w).unwrap();
            let fd = DVector::from_fn(5, |k, _| {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[k] += step;
                wm[k] -= step;
                (m.value(&x, &wp).unwrap() - m.value(&x, &wm).unwrap()) / (2.0 * step)
            });
            worst = worst.max((&g - &fd).norm() / g.norm().max(1e-12));
        }
        assert!(worst <= 1e-6, "max relative error {worst:e}");
    }

    #[test]
    fn feature_matrix_matches_pointwise_loop() {
        let m = model(3);
        let mut rng = crate::rng::stream(1, "test", 0, 0);
        let x = DMatrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal));
        let w = DMatrix::from_fn(2, 4, |_, _| rng.sample(StandardNormal));
        let h = m.feature_matrix(&x, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let wj: Vec<f64> = w.row(j).iter().copied().collect();
                assert_eq!(h[(i, j)].to_bits(), m.value(&xi, &wj).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn single_zero_particle_gives_zero_column() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let h = model(2).feature_matrix(&x, &DMatrix::zeros(1, 3)).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_rows_match_grad() {
        let m = model(2);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 0.0, 0.1]);
        let w = [0.2, -0.4, 0.1];
        let j = m.param_jacobian(&x, &w).unwrap();
        for i in 0..3 {
            let g = m.grad(&[x[(i, 0)], x[(i, 1)]], &w).unwrap();
            assert_eq!(j.row(i).transpose(), g);
        }
    }

    proptest! {
        #[test]
        fn value_bounded_and_grad_norm_bounded(
            x in proptest::collection::vec(-50.0f64..50.0, 3),
            w in proptest::collection::vec(-500.0f64..500.0, 4),
        ) {
            let m = model(3);
            let v = m.value(&x, &w).unwrap();
            prop_assert!(v.abs() <= 1.0);
            let g = m.grad(&x, &w).unwrap();
            let bound = (x.iter().map(|a| a * a).sum::<f64>() + 1.0).sqrt();
            prop_assert!(g.norm() <= bound * (1.0 + 1e-12));
        }
    }
}
