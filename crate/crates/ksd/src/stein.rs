//! The Stein kernel `k_pi` built from a base kernel and a target score.
//!
//! For a base kernel `k` and score `s = grad log pi`,
//!
//! ```text
//! k_pi(x, y) = s(x).s(y) k(x, y) + s(x).grad_2 k(x, y)
//!            + grad_1 k(x, y).s(y) + div_1 grad_2 k(x, y)
//! ```
//!
//! which integrates to zero against `pi` in either argument. Its gradient in
//! the second argument, the quantity the particle flow descends, is
//!
//! ```text
//! grad_2 k_pi(x, y) = s(x).s(y) grad_2 k + Js(y)^T s(x) k
//!                   + hess_2 k s(x) + Js(y)^T grad_1 k
//!                   - hess_2 k s(y) + grad_2 div_1 grad_2 k
//! ```
//!
//! The `s(y)` term is the cross Hessian `d^2 k / dy dx` acting on `s(y)`;
//! for radial kernels that matrix is exactly `-hess_2 k`, which is the
//! form used here. Everything is assembled term by term below so each
//! piece can be pinned in isolation.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

use crate::error::{KsdError, Result};
use crate::flows::ParticleSet;
use crate::kernel::{BaseKernel, KernelParts};
use crate::targets::ScoreModel;

/// A base kernel paired with a target score.
pub struct SteinKernel<'a> {
    base: BaseKernel,
    model: &'a ScoreModel,
}

/// Batched Stein kernel values over one particle set.
#[derive(Debug, Clone)]
pub struct SteinEvaluation {
    /// `gram[[i, j]] = k_pi(x_i, x_j)`.
    pub gram: Array2<f64>,
    /// `grad_gram[[j, i, ..]] = grad_2 k_pi(x_j, x_i)`: first index is the
    /// source particle, second the point being differentiated at.
    pub grad_gram: Array3<f64>,
}

impl<'a> SteinKernel<'a> {
    pub fn new(base: BaseKernel, model: &'a ScoreModel) -> SteinKernel<'a> {
        SteinKernel { base, model }
    }

    pub fn base(&self) -> &BaseKernel {
        &self.base
    }

    pub fn model(&self) -> &ScoreModel {
        self.model
    }

    /// `k_pi(x, y)`.
    pub fn kpi(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        let sx = self.model.score(x)?;
        let sy = self.model.score(y)?;
        let parts = self.base.parts(x, y)?;
        Ok(kpi_from_parts(&parts, &sx, &sy))
    }

    /// `grad_2 k_pi(x, y)`.
    pub fn grad2_kpi(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        let sx = self.model.score(x)?;
        let sy = self.model.score(y)?;
        let jac_y = self.model.score_jacobian(y)?;
        let parts = self.base.parts(x, y)?;
        let terms = grad2_kpi_terms(&parts, &sx, &sy, &jac_y);
        Ok(sum_terms(terms))
    }

    /// Evaluates the Stein kernel and its second-argument gradient over all
    /// ordered particle pairs, caching one score and score-Jacobian per
    /// particle.
    pub fn evaluate_particles(&self, particles: &ParticleSet) -> Result<SteinEvaluation> {
        self.evaluate_positions(particles.positions.view())
    }

    /// Only the Stein gram matrix, skipping the gradients. Discrepancy
    /// values need just this, and it avoids the score Jacobians entirely.
    pub fn gram_positions(&self, positions: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = positions.nrows();
        let d = positions.ncols();
        if n == 0 {
            return Err(KsdError::EmptyInput("particle set".into()));
        }
        if d != self.model.dim() {
            return Err(KsdError::DimensionMismatch {
                expected: self.model.dim(),
                got: d,
            });
        }
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            scores.push(self.model.score(positions.row(i))?);
        }
        let mut gram = Array2::<f64>::zeros((n, n));
        for a in 0..n {
            for b in 0..n {
                let parts = self.base.parts(positions.row(a), positions.row(b))?;
                gram[[a, b]] = kpi_from_parts(&parts, &scores[a], &scores[b]);
            }
        }
        Ok(gram)
    }

    /// Like [`Self::evaluate_particles`], on a bare position matrix.
    pub fn evaluate_positions(&self, positions: ArrayView2<f64>) -> Result<SteinEvaluation> {
        let n = positions.nrows();
        let d = positions.ncols();
        if n == 0 {
            return Err(KsdError::EmptyInput("particle set".into()));
        }
        if d != self.model.dim() {
            return Err(KsdError::DimensionMismatch {
                expected: self.model.dim(),
                got: d,
            });
        }
        let mut scores = Vec::with_capacity(n);
        let mut jacs = Vec::with_capacity(n);
        for i in 0..n {
            let x = positions.row(i);
            scores.push(self.model.score(x)?);
            jacs.push(self.model.score_jacobian(x)?);
        }
        let mut gram = Array2::<f64>::zeros((n, n));
        let mut grad_gram = Array3::<f64>::zeros((n, n, d));
        for a in 0..n {
            for b in 0..n {
                let parts = self.base.parts(positions.row(a), positions.row(b))?;
                gram[[a, b]] = kpi_from_parts(&parts, &scores[a], &scores[b]);
                let terms = grad2_kpi_terms(&parts, &scores[a], &scores[b], &jacs[b]);
                let g = sum_terms(terms);
                grad_gram
                    .slice_mut(ndarray::s![a, b, ..])
                    .assign(&g);
            }
        }
        Ok(SteinEvaluation { gram, grad_gram })
    }
}

fn kpi_from_parts(parts: &KernelParts, sx: &Array1<f64>, sy: &Array1<f64>) -> f64 {
    sx.dot(sy) * parts.k + sx.dot(&parts.g2) + parts.g1.dot(sy) + parts.div
}

/// The six terms of `grad_2 k_pi`, in the order of the module docs.
fn grad2_kpi_terms(
    parts: &KernelParts,
    sx: &Array1<f64>,
    sy: &Array1<f64>,
    jac_y: &Array2<f64>,
) -> [Array1<f64>; 6] {
    let t1 = parts.g2.mapv(|v| sx.dot(sy) * v);
    let t2 = jac_y.t().dot(sx).mapv(|v| parts.k * v);
    let t3 = parts.h2.dot(sx);
    let t4 = jac_y.t().dot(&parts.g1);
    let t5 = parts.h2.dot(sy).mapv(|v| -v);
    let t6 = parts.gdiv.clone();
    [t1, t2, t3, t4, t5, t6]
}

fn sum_terms(terms: [Array1<f64>; 6]) -> Array1<f64> {
    let [t1, t2, t3, t4, t5, t6] = terms;
    t1 + t2 + t3 + t4 + t5 + t6
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::BaseKernel;
    use crate::targets::{sample_matrix, Covariance, ScoreModel};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rbf() -> BaseKernel {
        BaseKernel::gaussian_rbf(1.0).unwrap()
    }

    #[test]
    fn kpi_on_the_diagonal_for_a_standard_gaussian() {
        let model = ScoreModel::standard_gaussian(3).unwrap();
        let sk = SteinKernel::new(rbf(), &model);
        // With s(x) = -x and a unit-bandwidth RBF, k_pi(x, x) = |x|^2 + d.
        for x in [array![0.0, 0.0, 0.0], array![1.0, -2.0, 0.5]] {
            let norm_sq: f64 = x.iter().map(|v| v * v).sum();
            let v = sk.kpi(x.view(), x.view()).unwrap();
            assert_abs_diff_eq!(v, norm_sq + 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kpi_hand_value_for_two_one_dimensional_points() {
        // Standard Gaussian, RBF sigma = 1, x = 0, y = 1. Then s(x) = 0,
        // s(y) = -1, grad_1 k = phi' (x - y) = e^{-1/2}, and the trace term
        // -phi''|x-y|^2 - phi' = -e^{-1/2} + e^{-1/2} cancels, leaving
        // k_pi = grad_1 k . s(y) = -e^{-1/2}.
        let model = ScoreModel::standard_gaussian(1).unwrap();
        let sk = SteinKernel::new(rbf(), &model);
        let v = sk.kpi(array![0.0].view(), array![1.0].view()).unwrap();
        assert_abs_diff_eq!(v, -0.6065306597126334, epsilon = 1e-15);
    }

    #[test]
    fn grad2_kpi_matches_finite_differences_of_kpi() {
        let targets = [
            ScoreModel::standard_gaussian(2).unwrap(),
            ScoreModel::symmetric_mixture(array![1.0, 0.0], 0.1).unwrap(),
            ScoreModel::banana(2.0, 0.2).unwrap(),
            ScoreModel::gaussian(
                array![0.5, -0.5],
                Covariance::Full(array![[1.0, 0.3], [0.3, 0.7]]),
            )
            .unwrap(),
        ];
        let kernels = [rbf(), BaseKernel::imq(1.0, -0.5).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for model in &targets {
            for base in &kernels {
                let sk = SteinKernel::new(base.clone(), model);
                for _ in 0..25 {
                    let x = array![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                    let y = array![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                    let g = sk.grad2_kpi(x.view(), y.view()).unwrap();
                    for i in 0..2 {
                        let mut p = y.clone();
                        p[i] = y[i] + h;
                        let hi = sk.kpi(x.view(), p.view()).unwrap();
                        p[i] = y[i] - h;
                        let lo = sk.kpi(x.view(), p.view()).unwrap();
                        let fd = (hi - lo) / (2.0 * h);
                        let scale = fd.abs().max(1.0);
                        assert!(
                            (g[i] - fd).abs() / scale < 1e-5,
                            "component {i}: analytic {} vs fd {fd}",
                            g[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn cross_gradient_identity_from_kernel_symmetry() {
        // k_pi is symmetric, so grad_1 k_pi(x, y) = grad_2 k_pi(y, x). The
        // left side is only available by differencing kpi in x.
        let model = ScoreModel::banana(2.0, 0.2).unwrap();
        let sk = SteinKernel::new(rbf(), &model);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..50 {
            let x = array![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let y = array![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let g = sk.grad2_kpi(y.view(), x.view()).unwrap();
            for i in 0..2 {
                let mut p = x.clone();
                p[i] = x[i] + h;
                let hi = sk.kpi(p.view(), y.view()).unwrap();
                p[i] = x[i] - h;
                let lo = sk.kpi(p.view(), y.view()).unwrap();
                let fd = (hi - lo) / (2.0 * h);
                assert!(
                    (g[i] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                    "component {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn each_gradient_term_vanishes_where_it_should() {
        // At x = y the odd kernel derivatives are zero, so only the
        // Jacobian terms can survive.
        let model = ScoreModel::standard_gaussian(2).unwrap();
        let x = array![0.7, -0.3];
        let sx = model.score(x.view()).unwrap();
        let jac = model.score_jacobian(x.view()).unwrap();
        let base = rbf();
        let parts = base.parts(x.view(), x.view()).unwrap();
        let terms = grad2_kpi_terms(&parts, &sx, &sx, &jac);
        assert_eq!(terms[0], array![0.0, 0.0]);
        assert_eq!(terms[5], array![0.0, 0.0]);
        // Term 2 is Js^T s k = -s at the diagonal for the standard Gaussian.
        assert_abs_diff_eq!(terms[1][0], -sx[0], epsilon = 1e-15);
        // Term 3 is hess_2 k s(x) = -s / sigma^2.
        assert_abs_diff_eq!(terms[2][0], -sx[0], epsilon = 1e-15);
        // Term 4 is Js^T grad_1 k = 0 at the diagonal.
        assert_eq!(terms[3], array![0.0, 0.0]);
        // Term 5 is -hess_2 k s(y), which cancels term 3 when x = y.
        for c in 0..2 {
            assert_eq!(terms[4][c], -terms[2][c]);
        }
    }

    #[test]
    fn batched_evaluation_matches_pairwise_calls_exactly() {
        let model = ScoreModel::symmetric_mixture(array![1.0, 0.0], 0.1).unwrap();
        let sk = SteinKernel::new(BaseKernel::imq(1.0, -0.5).unwrap(), &model);
        let positions = array![[0.4, 0.1], [-0.6, 0.9], [0.0, -1.2]];
        let eval = sk.evaluate_positions(positions.view()).unwrap();
        let gram_only = sk.gram_positions(positions.view()).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let k = sk.kpi(positions.row(a), positions.row(b)).unwrap();
                assert_eq!(eval.gram[[a, b]], k);
                assert_eq!(gram_only[[a, b]], k);
                let g = sk.grad2_kpi(positions.row(a), positions.row(b)).unwrap();
                for c in 0..2 {
                    assert_eq!(eval.grad_gram[[a, b, c]], g[c]);
                }
            }
        }
    }

    #[test]
    fn gram_matrix_is_symmetric_and_diagonal_matches_structure() {
        let model = ScoreModel::banana(2.0, 0.2).unwrap();
        let sk = SteinKernel::new(rbf(), &model);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let positions =
            Array2::from_shape_fn((8, 2), |_| rng.gen_range(-2.0..2.0));
        let eval = sk.evaluate_positions(positions.view()).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                assert_abs_diff_eq!(eval.gram[[a, b]], eval.gram[[b, a]], epsilon = 1e-12);
            }
            // Diagonal: |s|^2 k(x,x) + div_1 grad_2 k(x,x), the odd terms die.
            let s = model.score(positions.row(a)).unwrap();
            let k0 = sk.base().eval(positions.row(a), positions.row(a)).unwrap();
            let div0 = sk
                .base()
                .div1_grad2(positions.row(a), positions.row(a))
                .unwrap();
            assert_abs_diff_eq!(
                eval.gram[[a, a]],
                s.dot(&s) * k0 + div0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn stein_identity_holds_in_expectation() {
        // E_pi[k_pi(X, y)] = 0: check with a seeded Monte Carlo draw, both
        // for the scalar kernel and componentwise for grad_2 k_pi(X, y).
        let model = ScoreModel::gaussian(
            array![0.5, -1.0],
            Covariance::Full(array![[1.2, 0.4], [0.4, 0.9]]),
        )
        .unwrap();
        let sk = SteinKernel::new(rbf(), &model);
        let y = array![0.3, 0.2];
        let n = 20_000;
        let draws = sample_matrix(&model, n, 77).unwrap();
        let mut vals = Vec::with_capacity(n);
        let mut grads = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
        for i in 0..n {
            vals.push(sk.kpi(draws.row(i), y.view()).unwrap());
            let g = sk.grad2_kpi(draws.row(i), y.view()).unwrap();
            grads[0].push(g[0]);
            grads[1].push(g[1]);
        }
        for series in std::iter::once(&vals).chain(grads.iter()) {
            let mean: f64 = series.iter().sum::<f64>() / n as f64;
            let var: f64 =
                series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let stderr = (var / n as f64).sqrt();
            assert!(
                mean.abs() < 4.0 * stderr,
                "mean {mean} exceeds 4 x stderr {stderr}"
            );
        }
    }

    #[test]
    fn mismatched_particle_dimension_is_rejected() {
        let model = ScoreModel::standard_gaussian(2).unwrap();
        let sk = SteinKernel::new(rbf(), &model);
        let positions = array![[0.0], [1.0]];
        assert!(matches!(
            sk.evaluate_positions(positions.view()),
            Err(KsdError::DimensionMismatch { .. })
        ));
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            sk.evaluate_positions(empty.view()),
            Err(KsdError::EmptyInput(_))
        ));
    }
}
