//! Base kernels and their derivatives.
//!
//! Both kernels here are radial: `k(x, y) = phi(r)` with `r = |x - y|^2 / 2`.
//! Every derivative the Stein kernel needs then comes from the scalar
//! profile `phi` and the displacement `x - y`:
//!
//! ```text
//! grad_1 k(x, y)            =  phi'(r) (x - y)
//! grad_2 k(x, y)            = -phi'(r) (x - y)
//! hess_2 k(x, y)            =  phi''(r) (x - y)(x - y)^T + phi'(r) I
//! div_1 grad_2 k(x, y)      = -2 r phi''(r) - d phi'(r)
//! grad_2 div_1 grad_2 k     =  (x - y) [2 r phi'''(r) + (d + 2) phi''(r)]
//! ```
//!
//! The signs are easy to get wrong (differentiating in `y` flips the
//! displacement), so [`fd_check`] cross-checks every closed form against
//! central finite differences; the unit tests pin a handful of hand-computed
//! values on top of that.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KsdError, Result};

/// Scalar radial profile `phi` and its first three derivatives at one `r`.
struct Profile {
    phi: f64,
    d1: f64,
    d2: f64,
    d3: f64,
}

/// A positive definite base kernel with closed-form derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseKernel {
    /// `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.
    GaussianRbf { bandwidth: f64 },
    /// Inverse multiquadric `k(x, y) = (c^2 + |x - y|^2)^beta`.
    Imq { c: f64, beta: f64 },
}

impl BaseKernel {
    /// Gaussian RBF kernel with bandwidth `sigma > 0`.
    pub fn gaussian_rbf(bandwidth: f64) -> Result<Self> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(KsdError::InvalidParameter(format!(
                "rbf bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(BaseKernel::GaussianRbf { bandwidth })
    }

    /// Inverse multiquadric kernel with `c > 0` and exponent `beta` strictly
    /// between -1 and 0, the range on which it stays integrally strictly
    /// positive definite.
    pub fn imq(c: f64, beta: f64) -> Result<Self> {
        if !c.is_finite() || c <= 0.0 {
            return Err(KsdError::InvalidParameter(format!(
                "imq c must be positive and finite, got {c}"
            )));
        }
        if !beta.is_finite() || beta <= -1.0 || beta >= 0.0 {
            return Err(KsdError::InvalidParameter(format!(
                "imq beta must lie in (-1, 0), got {beta}"
            )));
        }
        Ok(BaseKernel::Imq { c, beta })
    }

    fn profile(&self, r: f64) -> Profile {
        match *self {
            BaseKernel::GaussianRbf { bandwidth } => {
                let s2 = bandwidth * bandwidth;
                let phi = (-r / s2).exp();
                Profile {
                    phi,
                    d1: -phi / s2,
                    d2: phi / (s2 * s2),
                    d3: -phi / (s2 * s2 * s2),
                }
            }
            BaseKernel::Imq { c, beta } => {
                // u = c^2 + 2r is bounded below by c^2 > 0, so the divisions
                // that step the exponent down are always safe.
                let u = c * c + 2.0 * r;
                let phi = u.powf(beta);
                let d1 = 2.0 * beta * phi / u;
                let d2 = 2.0 * (beta - 1.0) * d1 / u;
                let d3 = 2.0 * (beta - 2.0) * d2 / u;
                Profile { phi, d1, d2, d3 }
            }
        }
    }

    /// Checks the two points share a dimension and have finite coordinates,
    /// returning `(x - y, r)`.
    fn displacement(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
        if x.len() != y.len() {
            return Err(KsdError::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        let diff = &x - &y;
        let r = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
        if !r.is_finite() {
            return Err(KsdError::NonFinite {
                context: "kernel input".into(),
            });
        }
        Ok((diff, r))
    }

    /// `k(x, y)`.
    pub fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        let (_, r) = Self::displacement(x, y)?;
        Ok(self.profile(r).phi)
    }

    /// Gradient in the first argument.
    pub fn grad1(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (diff, r) = Self::displacement(x, y)?;
        let p = self.profile(r);
        Ok(diff.mapv(|v| p.d1 * v))
    }

    /// Gradient in the second argument, exactly `-grad1`.
    pub fn grad2(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.grad1(x, y)?.mapv(|v| -v))
    }

    /// Hessian in the second argument. For radial kernels this equals the
    /// Hessian in the first argument.
    pub fn hess2(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array2<f64>> {
        let (diff, r) = Self::displacement(x, y)?;
        let p = self.profile(r);
        let d = diff.len();
        let mut h = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                h[[i, j]] = p.d2 * diff[i] * diff[j];
            }
            h[[i, i]] += p.d1;
        }
        Ok(h)
    }

    /// `sum_i d^2 k / dx_i dy_i`, the trace of the mixed second derivative.
    pub fn div1_grad2(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        let (diff, r) = Self::displacement(x, y)?;
        let p = self.profile(r);
        let d = diff.len() as f64;
        Ok(-2.0 * r * p.d2 - d * p.d1)
    }

    /// Gradient of [`Self::div1_grad2`] in the second argument.
    pub fn grad2_div1_grad2(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (diff, r) = Self::displacement(x, y)?;
        let p = self.profile(r);
        let d = diff.len() as f64;
        let scale = 2.0 * r * p.d3 + (d + 2.0) * p.d2;
        Ok(diff.mapv(|v| scale * v))
    }

    /// Every derivative the Stein kernel assembly needs, from a single
    /// profile evaluation. Values match the individual methods exactly
    /// because they share the same expressions.
    pub(crate) fn parts(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<KernelParts> {
        let (diff, r) = Self::displacement(x, y)?;
        let p = self.profile(r);
        let d = diff.len();
        let g1 = diff.mapv(|v| p.d1 * v);
        let g2 = g1.mapv(|v| -v);
        let mut h2 = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                h2[[i, j]] = p.d2 * diff[i] * diff[j];
            }
            h2[[i, i]] += p.d1;
        }
        let div = -2.0 * r * p.d2 - d as f64 * p.d1;
        let gdiv_scale = 2.0 * r * p.d3 + (d as f64 + 2.0) * p.d2;
        let gdiv = diff.mapv(|v| gdiv_scale * v);
        Ok(KernelParts {
            k: p.phi,
            g1,
            g2,
            h2,
            div,
            gdiv,
        })
    }
}

/// Bundle of kernel derivatives at one ordered pair of points.
pub(crate) struct KernelParts {
    pub k: f64,
    /// Gradient in the first argument.
    pub g1: Array1<f64>,
    /// Gradient in the second argument.
    pub g2: Array1<f64>,
    /// Hessian in the second argument.
    pub h2: Array2<f64>,
    /// `div_1 grad_2 k`.
    pub div: f64,
    /// `grad_2 div_1 grad_2 k`.
    pub gdiv: Array1<f64>,
}

/// Bandwidth from the median heuristic: the median of the pairwise Euclidean
/// distances between the rows of `positions` (lower median for even counts).
///
/// Errors when there are fewer than two points or all points coincide, since
/// a zero bandwidth is not a valid kernel parameter.
pub fn median_heuristic(positions: ArrayView2<f64>) -> Result<f64> {
    let n = positions.nrows();
    if n < 2 {
        return Err(KsdError::EmptyInput(
            "median heuristic needs at least two points".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = positions
                .row(i)
                .iter()
                .zip(positions.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let med = dists[(dists.len() - 1) / 2];
    if med <= 0.0 || !med.is_finite() {
        return Err(KsdError::InvalidParameter(
            "median pairwise distance is zero; points coincide".into(),
        ));
    }
    Ok(med)
}

/// One line of a finite-difference report.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Result of [`fd_check`]: the worst relative error per derivative.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub step: f64,
    pub samples: usize,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < tol)
    }
}

/// Relative error with a unit floor: `|a - b| / max(|b|, 1)`. The floor keeps
/// the measure meaningful where the reference value underflows toward zero
/// (deep RBF tails), while staying a true relative error for large values.
fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}

/// Cross-checks every analytic derivative against central finite differences
/// at `samples` random point pairs with coordinates in [-3, 3], cycling the
/// dimension through 1..=5. Each derivative is differenced from the one a
/// rung below it (`grad2` from `eval`, `hess2` from `grad2`, and so on), so
/// one wrong sign cannot cancel across the ladder.
pub fn fd_check(kernel: &BaseKernel, samples: usize, step: f64, seed: u64) -> Result<FdReport> {
    if samples == 0 {
        return Err(KsdError::EmptyInput("fd_check needs samples > 0".into()));
    }
    if !step.is_finite() || step <= 0.0 {
        return Err(KsdError::InvalidParameter(format!(
            "fd step must be positive, got {step}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for s in 0..samples {
        let d = (s % 5) + 1;
        let draw = |rng: &mut ChaCha8Rng| {
            Array1::from_iter((0..d).map(|_| rng.gen_range(-3.0..3.0)))
        };
        let x = draw(&mut rng);
        let y = draw(&mut rng);

        // grad1: difference eval in x.
        let g1 = kernel.grad1(x.view(), y.view())?;
        let fd_g1 = fd_grad(|p| kernel.eval(p.view(), y.view()), &x, step)?;
        worst[0] = worst[0].max(rel_err(g1.as_slice().unwrap(), fd_g1.as_slice().unwrap()));

        // grad2: difference eval in y.
        let g2 = kernel.grad2(x.view(), y.view())?;
        let fd_g2 = fd_grad(|p| kernel.eval(x.view(), p.view()), &y, step)?;
        worst[1] = worst[1].max(rel_err(g2.as_slice().unwrap(), fd_g2.as_slice().unwrap()));

        // hess2: difference grad2 in y, column by column.
        let h2 = kernel.hess2(x.view(), y.view())?;
        let mut fd_h2 = Array2::<f64>::zeros((d, d));
        for j in 0..d {
            let col = fd_step(
                |p| kernel.grad2(x.view(), p.view()),
                &y,
                j,
                step,
            )?;
            fd_h2.column_mut(j).assign(&col);
        }
        worst[2] = worst[2].max(rel_err(
            h2.as_slice().unwrap(),
            fd_h2.as_standard_layout().as_slice().unwrap(),
        ));

        // div1_grad2: difference each component of grad2 in the matching
        // coordinate of x and sum.
        let dv = kernel.div1_grad2(x.view(), y.view())?;
        let mut fd_dv = 0.0;
        for i in 0..d {
            let col = fd_step(
                |p| kernel.grad2(p.view(), y.view()),
                &x,
                i,
                step,
            )?;
            fd_dv += col[i];
        }
        worst[3] = worst[3].max(rel_err(&[dv], &[fd_dv]));

        // grad2_div1_grad2: difference div1_grad2 in y.
        let g2dv = kernel.grad2_div1_grad2(x.view(), y.view())?;
        let fd_g2dv = fd_grad(|p| kernel.div1_grad2(x.view(), p.view()), &y, step)?;
        worst[4] = worst[4].max(rel_err(
            g2dv.as_slice().unwrap(),
            fd_g2dv.as_slice().unwrap(),
        ));
    }
    let names = ["grad1", "grad2", "hess2", "div1_grad2", "grad2_div1_grad2"];
    Ok(FdReport {
        step,
        samples,
        entries: names
            .iter()
            .zip(worst)
            .map(|(name, max_rel_err)| FdEntry { name, max_rel_err })
            .collect(),
    })
}

/// Central-difference gradient of a scalar function.
fn fd_grad<F>(mut f: F, at: &Array1<f64>, step: f64) -> Result<Array1<f64>>
where
    F: FnMut(&Array1<f64>) -> Result<f64>,
{
    let mut g = Array1::<f64>::zeros(at.len());
    let mut p = at.clone();
    for i in 0..at.len() {
        p[i] = at[i] + step;
        let hi = f(&p)?;
        p[i] = at[i] - step;
        let lo = f(&p)?;
        p[i] = at[i];
        g[i] = (hi - lo) / (2.0 * step);
    }
    Ok(g)
}

/// Central difference of a vector-valued function along coordinate `i`.
fn fd_step<F>(mut f: F, at: &Array1<f64>, i: usize, step: f64) -> Result<Array1<f64>>
where
    F: FnMut(&Array1<f64>) -> Result<Array1<f64>>,
{
    let mut p = at.clone();
    p[i] = at[i] + step;
    let hi = f(&p)?;
    p[i] = at[i] - step;
    let lo = f(&p)?;
    Ok((hi - lo) / (2.0 * step))
}
