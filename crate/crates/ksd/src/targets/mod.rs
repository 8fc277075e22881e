//! Target distributions, exposed through what the flows actually consume:
//! the score `s(x) = grad log pi(x)` and, where available, its Jacobian.
//!
//! Normalizing constants never enter the picture, which is the point: the
//! logistic and ICA posteriors are only known up to one. `log_density` is
//! therefore defined up to an additive constant and exists mainly so tests
//! can difference it against the analytic scores.

pub mod data;
pub mod ica;
pub mod logistic;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{KsdError, Result};
use crate::linalg;

pub use ica::IcaPosterior;
pub use logistic::{LabeledDataset, LogisticPosterior};

/// Covariance specification for a Gaussian component.
#[derive(Debug, Clone)]
pub enum Covariance {
    /// `variance * I`.
    Isotropic(f64),
    /// Arbitrary symmetric positive definite matrix.
    Full(Array2<f64>),
}

#[derive(Debug, Clone)]
enum CovData {
    Isotropic {
        variance: f64,
    },
    Full {
        chol: Array2<f64>,
        inv: Array2<f64>,
        log_det: f64,
    },
}

/// A single Gaussian with precomputed factorizations.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    mean: Array1<f64>,
    cov: CovData,
}

impl GaussianParams {
    pub fn new(mean: Array1<f64>, cov: Covariance) -> Result<Self> {
        if mean.is_empty() {
            return Err(KsdError::EmptyInput("gaussian mean".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(KsdError::NonFinite {
                context: "gaussian mean".into(),
            });
        }
        let cov = match cov {
            Covariance::Isotropic(v) => {
                if !v.is_finite() || v <= 0.0 {
                    return Err(KsdError::InvalidParameter(format!(
                        "gaussian variance must be positive, got {v}"
                    )));
                }
                CovData::Isotropic { variance: v }
            }
            Covariance::Full(m) => {
                let d = mean.len();
                if m.nrows() != d || m.ncols() != d {
                    return Err(KsdError::DimensionMismatch {
                        expected: d,
                        got: m.nrows(),
                    });
                }
                let asym = m
                    .iter()
                    .zip(m.t().iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if asym > 1e-12 {
                    return Err(KsdError::InvalidParameter(
                        "covariance matrix is not symmetric".into(),
                    ));
                }
                let chol = linalg::cholesky(m.view()).ok_or_else(|| {
                    KsdError::InvalidParameter("covariance matrix is not positive definite".into())
                })?;
                let log_det = 2.0 * chol.diag().iter().map(|v| v.ln()).sum::<f64>();
                let inv = linalg::invert_checked(m.view(), 1e12)?;
                CovData::Full { chol, inv, log_det }
            }
        };
        Ok(GaussianParams { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        match &self.cov {
            CovData::Isotropic { variance } => {
                Array1::from_iter(x.iter().zip(self.mean.iter()).map(|(a, m)| (m - a) / variance))
            }
            CovData::Full { inv, .. } => {
                let centered = &x - &self.mean;
                -inv.dot(&centered)
            }
        }
    }

    /// `-Sigma^{-1}`, the score Jacobian, constant in `x`.
    fn neg_precision(&self) -> Array2<f64> {
        let d = self.dim();
        match &self.cov {
            CovData::Isotropic { variance } => {
                Array2::from_diag(&Array1::from_elem(d, -1.0 / variance))
            }
            CovData::Full { inv, .. } => inv.mapv(|v| -v),
        }
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let d = self.dim() as f64;
        let ln_2pi = std::f64::consts::TAU.ln();
        match &self.cov {
            CovData::Isotropic { variance } => {
                let mut q = 0.0;
                for (a, m) in x.iter().zip(self.mean.iter()) {
                    let c = a - m;
                    q += c * c;
                }
                -0.5 * q / variance - 0.5 * d * (ln_2pi + variance.ln())
            }
            CovData::Full { inv, log_det, .. } => {
                let centered = &x - &self.mean;
                let q = centered.dot(&inv.dot(&centered));
                -0.5 * q - 0.5 * (d * ln_2pi + log_det)
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let d = self.dim();
        let z = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        match &self.cov {
            CovData::Isotropic { variance } => &self.mean + &(z * variance.sqrt()),
            CovData::Full { chol, .. } => &self.mean + &chol.dot(&z),
        }
    }
}

/// Finite mixture of Gaussians with normalized positive weights.
#[derive(Debug, Clone)]
pub struct Mixture {
    weights: Vec<f64>,
    components: Vec<GaussianParams>,
}

impl Mixture {
    pub fn new(parts: Vec<(f64, GaussianParams)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(KsdError::EmptyInput("mixture components".into()));
        }
        let d = parts[0].1.dim();
        let mut total = 0.0;
        for (w, g) in &parts {
            if !w.is_finite() || *w <= 0.0 {
                return Err(KsdError::InvalidParameter(format!(
                    "mixture weight must be positive, got {w}"
                )));
            }
            if g.dim() != d {
                return Err(KsdError::DimensionMismatch {
                    expected: d,
                    got: g.dim(),
                });
            }
            total += w;
        }
        let (weights, components) = parts
            .into_iter()
            .map(|(w, g)| (w / total, g))
            .unzip();
        Ok(Mixture { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Posterior responsibilities of each component at `x`, via log-sum-exp.
    fn responsibilities(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w.ln() + g.log_density(x))
            .collect();
        let m = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|u| u / z).collect()
    }

    fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let r = self.responsibilities(x);
        let mut s = Array1::<f64>::zeros(self.dim());
        for (ri, g) in r.iter().zip(&self.components) {
            s += &(g.score(x) * *ri);
        }
        s
    }

    /// Score Jacobian. With responsibilities `r_i` and component scores
    /// `s_i`, this is `sum_i r_i (J_i + s_i s_i^T) - s s^T`.
    fn score_jacobian(&self, x: ArrayView1<f64>) -> Array2<f64> {
        let d = self.dim();
        let r = self.responsibilities(x);
        let scores: Vec<Array1<f64>> = self.components.iter().map(|g| g.score(x)).collect();
        let mut s = Array1::<f64>::zeros(d);
        for (ri, si) in r.iter().zip(&scores) {
            s += &(si * *ri);
        }
        let mut jac = Array2::<f64>::zeros((d, d));
        for ((ri, si), g) in r.iter().zip(&scores).zip(&self.components) {
            jac += &(g.neg_precision() * *ri);
            for a in 0..d {
                for b in 0..d {
                    jac[[a, b]] += ri * si[a] * si[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                jac[[a, b]] -= s[a] * s[b];
            }
        }
        jac
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w.ln() + g.log_density(x))
            .collect();
        let m = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (w, g) in self.weights.iter().zip(&self.components) {
            acc += w;
            if u < acc {
                return g.sample(rng);
            }
        }
        self.components.last().expect("nonempty").sample(rng)
    }
}

/// The two-dimensional banana density
/// `log pi(x) = -x_1^2 / (2 a^2) - (x_2 + b (x_1^2 - a^2))^2 / 2`.
#[derive(Debug, Clone)]
pub struct Banana {
    a: f64,
    b: f64,
}

impl Banana {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || a <= 0.0 || !b.is_finite() {
            return Err(KsdError::InvalidParameter(format!(
                "banana parameters must be finite with a > 0, got a={a}, b={b}"
            )));
        }
        Ok(Banana { a, b })
    }

    fn warp(&self, x: ArrayView1<f64>) -> f64 {
        x[1] + self.b * (x[0] * x[0] - self.a * self.a)
    }

    fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let g = self.warp(x);
        Array1::from(vec![
            -x[0] / (self.a * self.a) - 2.0 * self.b * x[0] * g,
            -g,
        ])
    }

    fn score_jacobian(&self, x: ArrayView1<f64>) -> Array2<f64> {
        let g = self.warp(x);
        let off = -2.0 * self.b * x[0];
        let mut jac = Array2::<f64>::zeros((2, 2));
        jac[[0, 0]] =
            -1.0 / (self.a * self.a) - 2.0 * self.b * g - 4.0 * self.b * self.b * x[0] * x[0];
        jac[[0, 1]] = off;
        jac[[1, 0]] = off;
        jac[[1, 1]] = -1.0;
        jac
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let g = self.warp(x);
        -x[0] * x[0] / (2.0 * self.a * self.a) - 0.5 * g * g
    }
}

/// A target distribution described by its score.
#[derive(Debug, Clone)]
pub enum ScoreModel {
    Gaussian(GaussianParams),
    GaussianMixture(Mixture),
    Banana(Banana),
    LogisticPosterior(LogisticPosterior),
    IcaPosterior(IcaPosterior),
    /// Tempered version of a base target: the score is scaled by
    /// `beta` in (0, 1], i.e. the density is raised to the power `beta`.
    Annealed { base: Box<ScoreModel>, beta: f64 },
}

impl ScoreModel {
    /// Standard Gaussian in `d` dimensions.
    pub fn standard_gaussian(d: usize) -> Result<Self> {
        Ok(ScoreModel::Gaussian(GaussianParams::new(
            Array1::zeros(d),
            Covariance::Isotropic(1.0),
        )?))
    }

    pub fn gaussian(mean: Array1<f64>, cov: Covariance) -> Result<Self> {
        Ok(ScoreModel::Gaussian(GaussianParams::new(mean, cov)?))
    }

    pub fn gaussian_mixture(parts: Vec<(f64, Array1<f64>, Covariance)>) -> Result<Self> {
        let comps = parts
            .into_iter()
            .map(|(w, mean, cov)| GaussianParams::new(mean, cov).map(|g| (w, g)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreModel::GaussianMixture(Mixture::new(comps)?))
    }

    /// Equal-weight two-component mixture with isotropic components at
    /// `centroid` and `-centroid`.
    pub fn symmetric_mixture(centroid: Array1<f64>, variance: f64) -> Result<Self> {
        let neg = centroid.mapv(|v| -v);
        Self::gaussian_mixture(vec![
            (0.5, centroid, Covariance::Isotropic(variance)),
            (0.5, neg, Covariance::Isotropic(variance)),
        ])
    }

    pub fn banana(a: f64, b: f64) -> Result<Self> {
        Ok(ScoreModel::Banana(Banana::new(a, b)?))
    }

    pub fn logistic_posterior(data: LabeledDataset, prior_rate: f64) -> Result<Self> {
        Ok(ScoreModel::LogisticPosterior(LogisticPosterior::new(
            data, prior_rate,
        )?))
    }

    pub fn ica_posterior(observations: Array2<f64>) -> Result<Self> {
        Ok(ScoreModel::IcaPosterior(IcaPosterior::new(observations)?))
    }

    /// Tempers the target by `beta` in (0, 1]. `beta = 1` returns the model
    /// unchanged.
    pub fn anneal(self, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 || beta > 1.0 {
            return Err(KsdError::InvalidParameter(format!(
                "anneal beta must lie in (0, 1], got {beta}"
            )));
        }
        if beta == 1.0 {
            return Ok(self);
        }
        Ok(ScoreModel::Annealed {
            base: Box::new(self),
            beta,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreModel::Gaussian(g) => g.dim(),
            ScoreModel::GaussianMixture(m) => m.dim(),
            ScoreModel::Banana(_) => 2,
            ScoreModel::LogisticPosterior(l) => l.dim(),
            ScoreModel::IcaPosterior(i) => i.dim(),
            ScoreModel::Annealed { base, .. } => base.dim(),
        }
    }

    fn check_point(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(KsdError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KsdError::NonFinite {
                context: "score input".into(),
            });
        }
        Ok(())
    }

    /// The score `grad log pi(x)`.
    pub fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_point(x)?;
        let s = match self {
            ScoreModel::Gaussian(g) => g.score(x),
            ScoreModel::GaussianMixture(m) => m.score(x),
            ScoreModel::Banana(b) => b.score(x),
            ScoreModel::LogisticPosterior(l) => l.score(x)?,
            ScoreModel::IcaPosterior(i) => i.score_flat(x)?,
            ScoreModel::Annealed { base, beta } => base.score(x)?.mapv(|v| beta * v),
        };
        if s.iter().any(|v| !v.is_finite()) {
            return Err(KsdError::NonFinite {
                context: "score output".into(),
            });
        }
        Ok(s)
    }

    /// `log pi(x)` up to an additive constant.
    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_point(x)?;
        match self {
            ScoreModel::Gaussian(g) => Ok(g.log_density(x)),
            ScoreModel::GaussianMixture(m) => Ok(m.log_density(x)),
            ScoreModel::Banana(b) => Ok(b.log_density(x)),
            ScoreModel::LogisticPosterior(l) => l.log_density(x),
            ScoreModel::IcaPosterior(i) => i.log_density_flat(x),
            ScoreModel::Annealed { base, beta } => Ok(beta * base.log_density(x)?),
        }
    }

    /// Whether `score_jacobian` uses a closed form rather than finite
    /// differences.
    pub fn has_analytic_jacobian(&self) -> bool {
        match self {
            ScoreModel::Gaussian(_) | ScoreModel::GaussianMixture(_) | ScoreModel::Banana(_) => {
                true
            }
            ScoreModel::LogisticPosterior(_) | ScoreModel::IcaPosterior(_) => false,
            ScoreModel::Annealed { base, .. } => base.has_analytic_jacobian(),
        }
    }

    /// The Jacobian of the score, `J[i][j] = d s_i / d x_j`. Closed form
    /// where available, otherwise a central finite difference of the score
    /// with step 1e-6.
    pub fn score_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_point(x)?;
        match self {
            ScoreModel::Gaussian(g) => Ok(g.neg_precision()),
            ScoreModel::GaussianMixture(m) => Ok(m.score_jacobian(x)),
            ScoreModel::Banana(b) => Ok(b.score_jacobian(x)),
            ScoreModel::LogisticPosterior(_) | ScoreModel::IcaPosterior(_) => {
                self.fd_score_jacobian(x)
            }
            ScoreModel::Annealed { base, beta } => {
                Ok(base.score_jacobian(x)?.mapv(|v| beta * v))
            }
        }
    }

    fn fd_score_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        let d = self.dim();
        let h = 1e-6;
        let mut jac = Array2::<f64>::zeros((d, d));
        let mut p = x.to_owned();
        for j in 0..d {
            p[j] = x[j] + h;
            let hi = self.score(p.view())?;
            p[j] = x[j] - h;
            let lo = self.score(p.view())?;
            p[j] = x[j];
            let col = (hi - lo) / (2.0 * h);
            jac.column_mut(j).assign(&col);
        }
        Ok(jac)
    }

    /// Draws one exact sample where the target admits one (Gaussian and
    /// mixture targets).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Array1<f64>> {
        match self {
            ScoreModel::Gaussian(g) => Ok(g.sample(rng)),
            ScoreModel::GaussianMixture(m) => Ok(m.sample(rng)),
            _ => Err(KsdError::Unsupported(
                "exact sampling is only available for Gaussian and mixture targets".into(),
            )),
        }
    }
}

/// Stacks `n` i.i.d. samples from the model into an `n x d` matrix, seeded.
pub fn sample_matrix(model: &ScoreModel, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(KsdError::EmptyInput("sample count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let x = model.sample(&mut rng)?;
        out.row_mut(i).assign(&x);
    }
    Ok(out)
}
