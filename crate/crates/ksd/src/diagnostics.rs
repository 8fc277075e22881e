//! Quality measures for particle approximations.
//!
//! The discrepancy itself ([`ksd_between`]) is the headline number, but it
//! only means something if the Stein kernel is built correctly, so
//! [`stein_identity_check`] verifies the defining property
//! `E_{x ~ pi}[k_pi(x, y)] = 0` by Monte Carlo. The remaining helpers are
//! experiment-specific: the Amari distance scores ICA unmixing matrices up
//! to the scale and permutation ambiguity, [`SymmetryPlane`] measures how
//! far particles drift off a reflection-symmetry plane they started on,
//! and [`logreg_accuracy`] evaluates a posterior particle cloud on held
//! out labeled data.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{KsdError, Result};
use crate::flows::ParticleSet;
use crate::linalg::Lu;
use crate::stein::SteinKernel;
use crate::targets::logistic::sigmoid;
use crate::targets::{sample_matrix, LabeledDataset};

/// Result of a Monte-Carlo test of the Stein identity at one point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SteinIdentityCheck {
    pub mean: f64,
    pub stderr: f64,
    /// `|mean| <= 4 stderr`, a roughly 1-in-16000 false-alarm rate.
    pub pass: bool,
    pub n_samples: usize,
}

/// Estimates `E_{x ~ pi}[k_pi(x, y)]`, which is zero when the score inside
/// the Stein kernel matches the sampling distribution. Needs a model with
/// a sampler.
pub fn stein_identity_check(
    sk: &SteinKernel,
    y: ArrayView1<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<SteinIdentityCheck> {
    if n_samples < 2 {
        return Err(KsdError::InvalidParameter(format!(
            "stein identity check needs at least 2 samples, got {n_samples}"
        )));
    }
    let draws = sample_matrix(sk.model(), n_samples, seed)?;
    let mut values = Array1::<f64>::zeros(n_samples);
    for j in 0..n_samples {
        values[j] = sk.kpi(draws.row(j), y)?;
    }
    let n = n_samples as f64;
    let mean = values.sum() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    Ok(SteinIdentityCheck {
        mean,
        stderr,
        pass: mean.abs() <= 4.0 * stderr,
        n_samples,
    })
}

/// The kernel Stein discrepancy between the particle set and the target,
/// `sqrt(2 F(X))`. Roundoff can push the V-statistic a hair below zero, so
/// it is clamped before the square root.
pub fn ksd_between(sk: &SteinKernel, particles: &ParticleSet) -> Result<f64> {
    let gram = sk.gram_positions(particles.positions.view())?;
    let n = gram.nrows() as f64;
    let v_stat = gram.sum() / (n * n);
    Ok(v_stat.max(0.0).sqrt())
}

/// A hyperplane `{x : n . x = offset}` used to measure symmetry breaking.
#[derive(Debug, Clone)]
pub struct SymmetryPlane {
    normal: Array1<f64>,
    offset: f64,
}

impl SymmetryPlane {
    pub fn new(normal: Array1<f64>, offset: f64) -> Result<Self> {
        if normal.is_empty() {
            return Err(KsdError::EmptyInput("plane normal".into()));
        }
        if normal.iter().any(|v| !v.is_finite()) || !offset.is_finite() {
            return Err(KsdError::NonFinite {
                context: "symmetry plane".into(),
            });
        }
        if normal.iter().all(|v| *v == 0.0) {
            return Err(KsdError::InvalidParameter(
                "plane normal must be nonzero".into(),
            ));
        }
        Ok(SymmetryPlane { normal, offset })
    }

    /// The coordinate hyperplane `x_axis = 0`.
    pub fn coordinate(dim: usize, axis: usize) -> Result<Self> {
        if axis >= dim {
            return Err(KsdError::InvalidParameter(format!(
                "axis {axis} out of range for dimension {dim}"
            )));
        }
        let mut normal = Array1::zeros(dim);
        normal[axis] = 1.0;
        SymmetryPlane::new(normal, 0.0)
    }

    /// Largest Euclidean distance from any particle to the plane. Exactly
    /// `max_i |x_i[axis]|` for a coordinate plane.
    pub fn residual(&self, positions: ArrayView2<f64>) -> Result<f64> {
        if positions.ncols() != self.normal.len() {
            return Err(KsdError::DimensionMismatch {
                expected: self.normal.len(),
                got: positions.ncols(),
            });
        }
        if positions.nrows() == 0 {
            return Err(KsdError::EmptyInput("particle set".into()));
        }
        let norm = self.normal.dot(&self.normal).sqrt();
        let mut worst = 0.0f64;
        for row in positions.rows() {
            let dist = (row.dot(&self.normal) - self.offset).abs() / norm;
            worst = worst.max(dist);
        }
        Ok(worst)
    }
}

/// The Amari distance between two invertible matrices, zero exactly when
/// `a b^{-1}` is a permutation with nonzero row scales. With `M = a b^{-1}`
/// and `p x p` matrices it is
///
/// ```text
/// 1/(2p(p-1)) [ sum_i (sum_j |M_ij| / max_j |M_ij| - 1)
///             + sum_j (sum_i |M_ij| / max_i |M_ij| - 1) ]
/// ```
///
/// which lies in `[0, 1]`. It quantifies how far an estimated unmixing
/// matrix is from the truth, ignoring the scale and ordering of the
/// recovered sources.
pub fn amari_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let p = a.nrows();
    if a.ncols() != p || b.nrows() != p || b.ncols() != p {
        return Err(KsdError::DimensionMismatch {
            expected: p,
            got: if a.ncols() != p { a.ncols() } else { b.nrows() },
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(KsdError::NonFinite {
            context: "amari distance input".into(),
        });
    }
    if Lu::factor(a).is_none() {
        return Err(KsdError::InvalidParameter(
            "amari distance needs invertible matrices, first argument is singular".into(),
        ));
    }
    let bt = Lu::factor(b.t()).ok_or_else(|| {
        KsdError::InvalidParameter(
            "amari distance needs invertible matrices, second argument is singular".into(),
        )
    })?;
    if p == 1 {
        return Ok(0.0);
    }
    // Row i of M = a b^{-1} solves b^T m_i = a_i.
    let mut m = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        let row = bt.solve(a.row(i));
        m.row_mut(i).assign(&row);
    }
    let m = m.mapv(f64::abs);
    let mut total = 0.0;
    for i in 0..p {
        let row = m.row(i);
        let max = row.iter().fold(0.0f64, |acc, v| acc.max(*v));
        total += row.sum() / max - 1.0;
    }
    for j in 0..p {
        let col = m.column(j);
        let max = col.iter().fold(0.0f64, |acc, v| acc.max(*v));
        total += col.sum() / max - 1.0;
    }
    Ok(total / (2.0 * (p * (p - 1)) as f64))
}

/// Accuracy of the posterior predictive classifier on a labeled test set.
///
/// Each particle is a `[w, log alpha]` vector; the predictive probability
/// of the positive class averages `sigmoid(w . d)` over particles, and the
/// prediction is `+1` when that average is at least one half.
pub fn logreg_accuracy(particles: &ParticleSet, test: &LabeledDataset) -> Result<f64> {
    if particles.dim() != test.p() + 1 {
        return Err(KsdError::DimensionMismatch {
            expected: test.p() + 1,
            got: particles.dim(),
        });
    }
    if test.n() == 0 {
        return Err(KsdError::EmptyInput("test dataset".into()));
    }
    let p = test.p();
    let n_particles = particles.n() as f64;
    let mut correct = 0usize;
    for i in 0..test.n() {
        let d = test.features().row(i);
        let mut prob = 0.0;
        for k in 0..particles.n() {
            let w = particles.positions.row(k);
            let z: f64 = (0..p).map(|j| w[j] * d[j]).sum();
            prob += sigmoid(z);
        }
        prob /= n_particles;
        let predicted = if prob >= 0.5 { 1.0 } else { -1.0 };
        if predicted == test.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.n() as f64)
}
