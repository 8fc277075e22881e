//! Noiseless independent component analysis posterior over the unmixing
//! matrix.
//!
//! Observations follow `x = W^{-1} s` with heavy-tailed source density
//! `p_s(u)` proportional to `sech(u)`, so `log p_s(u) = -log cosh(u)` up to
//! a constant. With a standard Gaussian prior on the entries of `W`, the
//! log posterior of `W` given `q` observations is
//!
//! ```text
//! L(W) = q log |det W| - sum_i sum_j log cosh([W x_i]_j) - |W|_F^2 / 2
//! ```
//!
//! and its matrix gradient is `q W^{-T} - sum_i tanh(W x_i) x_i^T - W`.
//! Particle positions are the row-major flattening of `W`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{KsdError, Result};
use crate::linalg::{self, Lu};

/// Condition-number ceiling past which `W` is treated as singular.
const COND_LIMIT: f64 = 1e12;

/// Numerically stable `ln cosh(u)`.
fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Log posterior of the unmixing matrix, up to an additive constant.
/// `observations` is `q x p` with one observation per row.
pub fn ica_log_posterior(observations: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<f64> {
    check_shapes(observations, w)?;
    let q = observations.nrows() as f64;
    let mut log_det = 0.0;
    if observations.nrows() > 0 {
        let lu = Lu::factor(w).ok_or(KsdError::Singular {
            cond: f64::INFINITY,
            limit: COND_LIMIT,
        })?;
        log_det = lu.log_abs_det().0;
    }
    // Rows of observations * W^T are (W x_i)^T.
    let y = observations.dot(&w.t());
    let mut like = 0.0;
    for v in y.iter() {
        like -= ln_cosh(*v);
    }
    let frob_sq: f64 = w.iter().map(|v| v * v).sum();
    Ok(q * log_det + like - 0.5 * frob_sq)
}

/// Matrix gradient of [`ica_log_posterior`] in `W`.
///
/// Requires `W` to be numerically invertible when there is data: the
/// `q W^{-T}` term is assembled from LU solves and rejected when the 1-norm
/// condition estimate exceeds 1e12. With no data the gradient is exactly
/// `-W` (the prior alone) and no inverse is formed.
pub fn ica_score(observations: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_shapes(observations, w)?;
    let q = observations.nrows();
    if q == 0 {
        return Ok(w.mapv(|v| -v));
    }
    let w_inv = linalg::invert_checked(w, COND_LIMIT)?;
    let y = observations.dot(&w.t());
    let t = y.mapv(f64::tanh);
    // t^T . observations = sum_i tanh(W x_i) x_i^T.
    let data_term = t.t().dot(&observations);
    let mut grad = w_inv.t().mapv(|v| q as f64 * v);
    grad -= &data_term;
    grad -= &w;
    Ok(grad)
}

fn check_shapes(observations: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<()> {
    let p = w.nrows();
    if w.ncols() != p || p == 0 {
        return Err(KsdError::DimensionMismatch {
            expected: p,
            got: w.ncols(),
        });
    }
    if observations.ncols() != p {
        return Err(KsdError::DimensionMismatch {
            expected: p,
            got: observations.ncols(),
        });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(KsdError::NonFinite {
            context: "unmixing matrix".into(),
        });
    }
    Ok(())
}

/// The ICA posterior as a score model over flattened matrices.
#[derive(Debug, Clone)]
pub struct IcaPosterior {
    observations: Array2<f64>,
}

impl IcaPosterior {
    pub fn new(observations: Array2<f64>) -> Result<Self> {
        if observations.ncols() == 0 {
            return Err(KsdError::EmptyInput("ica observations need p >= 1".into()));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(KsdError::NonFinite {
                context: "ica observations".into(),
            });
        }
        Ok(IcaPosterior { observations })
    }

    pub fn p(&self) -> usize {
        self.observations.ncols()
    }

    /// Dimension of the flattened position, `p^2`.
    pub fn dim(&self) -> usize {
        self.p() * self.p()
    }

    pub fn observations(&self) -> &Array2<f64> {
        &self.observations
    }

    /// Reshapes a flattened (row-major) position back into a matrix.
    pub fn unflatten(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        let p = self.p();
        if x.len() != p * p {
            return Err(KsdError::DimensionMismatch {
                expected: p * p,
                got: x.len(),
            });
        }
        Ok(Array2::from_shape_vec((p, p), x.to_vec()).expect("length checked"))
    }

    pub(crate) fn score_flat(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let w = self.unflatten(x)?;
        let g = ica_score(self.observations.view(), w.view())?;
        Ok(Array1::from_iter(g.iter().copied()))
    }

    pub(crate) fn log_density_flat(&self, x: ArrayView1<f64>) -> Result<f64> {
        let w = self.unflatten(x)?;
        ica_log_posterior(self.observations.view(), w.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn with_no_data_the_score_is_exactly_minus_w() {
        let obs = Array2::<f64>::zeros((0, 2));
        let w = array![[1.5, -0.3], [0.2, 0.9]];
        let g = ica_score(obs.view(), w.view()).unwrap();
        assert_eq!(g, w.mapv(|v| -v));
    }

    #[test]
    fn identity_unmixing_single_observation_hand_value() {
        let obs = array![[1.0, 0.0]];
        let w = Array2::<f64>::eye(2);
        let g = ica_score(obs.view(), w.view()).unwrap();
        // q W^{-T} - tanh(x) x^T - W with W = I, x = e_1.
        let t1 = 1.0f64.tanh();
        assert_abs_diff_eq!(g[[0, 0]], -t1, epsilon = 1e-15);
        assert_eq!(g[[0, 1]], 0.0);
        assert_eq!(g[[1, 0]], 0.0);
        assert_eq!(g[[1, 1]], 0.0);
        assert_abs_diff_eq!(t1, 0.7615941559557649, epsilon = 1e-15);
    }

    #[test]
    fn score_matches_finite_differences_of_the_log_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = Array2::from_shape_fn((50, 2), |_| rng.gen_range(-2.0..2.0));
        let w = array![[1.2, 0.3], [-0.4, 0.8]];
        let g = ica_score(obs.view(), w.view()).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut wp = w.clone();
                wp[[i, j]] = w[[i, j]] + h;
                let hi = ica_log_posterior(obs.view(), wp.view()).unwrap();
                wp[[i, j]] = w[[i, j]] - h;
                let lo = ica_log_posterior(obs.view(), wp.view()).unwrap();
                let fd = (hi - lo) / (2.0 * h);
                worst = worst.max((g[[i, j]] - fd).abs() / fd.abs().max(1.0));
            }
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn singular_unmixing_matrices_are_rejected() {
        let obs = array![[1.0, 0.0], [0.0, 1.0]];
        let w = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            ica_score(obs.view(), w.view()),
            Err(KsdError::Singular { .. })
        ));
    }

    #[test]
    fn flattening_round_trips_row_major() {
        let post = IcaPosterior::new(array![[0.1, 0.2], [0.3, 0.4]]).unwrap();
        let x = array![1.0, 2.0, 3.0, 4.0];
        let w = post.unflatten(x.view()).unwrap();
        assert_eq!(w, array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(post.dim(), 4);
    }

    #[test]
    fn ln_cosh_is_stable_for_large_arguments() {
        // ln cosh(u) -> |u| - ln 2 as |u| grows.
        assert_abs_diff_eq!(ln_cosh(50.0), 50.0 - std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(ln_cosh(-50.0), 50.0 - std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(ln_cosh(0.0), 0.0, epsilon = 1e-15);
        assert!(ln_cosh(1e308).is_finite());
    }
}
