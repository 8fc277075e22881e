//! Bayesian logistic regression posterior.
//!
//! The model: labels `y in {-1, +1}` with `p(y = 1 | d, w) = sigmoid(w^T d)`,
//! a Gaussian prior `w ~ N(0, alpha^{-1} I)`, and an exponential hyperprior
//! `alpha ~ Exp(rate)`. The sampled position is `x = [w, t]` with `t = log
//! alpha`, so the change of variables contributes an extra `+t` to the log
//! posterior (and `+1` to its `t`-derivative).

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{KsdError, Result};

/// Default rate of the exponential hyperprior on the precision `alpha`.
pub const DEFAULT_PRIOR_RATE: f64 = 0.01;

/// Numerically stable `1 / (1 + exp(-u))`.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(u))`.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// A binary classification dataset with labels in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Array1<f64>,
    feature_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Array1<f64>) -> Result<Self> {
        let names = (1..=features.ncols()).map(|i| format!("f{i}")).collect();
        Self::with_names(features, labels, names)
    }

    pub fn with_names(
        features: Array2<f64>,
        labels: Array1<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(KsdError::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(KsdError::DimensionMismatch {
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(KsdError::NonFinite {
                context: "dataset features".into(),
            });
        }
        for (i, y) in labels.iter().enumerate() {
            if *y != 1.0 && *y != -1.0 {
                return Err(KsdError::Dataset(format!(
                    "label at row {i} must be +1 or -1, got {y}"
                )));
            }
        }
        Ok(LabeledDataset {
            features,
            labels,
            feature_names,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array1<f64> {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Splits into a head of `n_train` rows and the remaining tail.
    pub fn split_at(&self, n_train: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_train == 0 || n_train >= self.n() {
            return Err(KsdError::InvalidParameter(format!(
                "split point {n_train} must leave both sides nonempty (n = {})",
                self.n()
            )));
        }
        let head = LabeledDataset::with_names(
            self.features.slice(ndarray::s![..n_train, ..]).to_owned(),
            self.labels.slice(ndarray::s![..n_train]).to_owned(),
            self.feature_names.clone(),
        )?;
        let tail = LabeledDataset::with_names(
            self.features.slice(ndarray::s![n_train.., ..]).to_owned(),
            self.labels.slice(ndarray::s![n_train..]).to_owned(),
            self.feature_names.clone(),
        )?;
        Ok((head, tail))
    }
}

/// Log posterior of `x = [w, log alpha]` up to an additive constant.
pub fn logreg_log_posterior(data: &LabeledDataset, x: ArrayView1<f64>, prior_rate: f64) -> f64 {
    let p = data.p();
    let w = x.slice(ndarray::s![..p]);
    let t = x[p];
    let alpha = t.exp();
    let mut ll = 0.0;
    for (row, y) in data.features.rows().into_iter().zip(data.labels.iter()) {
        let z = y * w.dot(&row);
        ll -= softplus(-z);
    }
    let w_sq = w.dot(&w);
    // Likelihood + log N(w | 0, alpha^{-1} I) + log Exp(alpha; rate) + log
    // Jacobian of alpha = e^t, constants dropped.
    ll + 0.5 * (p as f64) * t - 0.5 * alpha * w_sq - prior_rate * alpha + t
}

/// Gradient of [`logreg_log_posterior`] in `x = [w, log alpha]`.
pub fn logreg_score(
    data: &LabeledDataset,
    x: ArrayView1<f64>,
    prior_rate: f64,
) -> Result<Array1<f64>> {
    let p = data.p();
    if x.len() != p + 1 {
        return Err(KsdError::DimensionMismatch {
            expected: p + 1,
            got: x.len(),
        });
    }
    let w = x.slice(ndarray::s![..p]);
    let t = x[p];
    let alpha = t.exp();
    let mut grad = Array1::<f64>::zeros(p + 1);
    for (row, y) in data.features.rows().into_iter().zip(data.labels.iter()) {
        let z = y * w.dot(&row);
        let c = y * sigmoid(-z);
        for j in 0..p {
            grad[j] += c * row[j];
        }
    }
    for j in 0..p {
        grad[j] -= alpha * w[j];
    }
    let w_sq = w.dot(&w);
    grad[p] = 0.5 * (p as f64) - 0.5 * alpha * w_sq - prior_rate * alpha + 1.0;
    Ok(grad)
}

/// The posterior as a score model.
#[derive(Debug, Clone)]
pub struct LogisticPosterior {
    data: LabeledDataset,
    prior_rate: f64,
}

impl LogisticPosterior {
    pub fn new(data: LabeledDataset, prior_rate: f64) -> Result<Self> {
        if !prior_rate.is_finite() || prior_rate <= 0.0 {
            return Err(KsdError::InvalidParameter(format!(
                "prior rate must be positive, got {prior_rate}"
            )));
        }
        Ok(LogisticPosterior { data, prior_rate })
    }

    pub fn dim(&self) -> usize {
        self.data.p() + 1
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    pub(crate) fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        logreg_score(&self.data, x, self.prior_rate)
    }

    pub(crate) fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(logreg_log_posterior(&self.data, x, self.prior_rate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset() -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = 20;
        let p = 3;
        let features = Array2::from_shape_fn((q, p), |_| rng.gen_range(-2.0..2.0));
        let labels = Array1::from_iter((0..q).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }));
        LabeledDataset::new(features, labels).unwrap()
    }

    #[test]
    fn empty_dataset_gives_the_prior_only_gradient() {
        let data = LabeledDataset::new(Array2::zeros((0, 3)), Array1::zeros(0)).unwrap();
        let x = array![0.0, 0.0, 0.0, 0.0];
        let g = logreg_score(&data, x.view(), DEFAULT_PRIOR_RATE).unwrap();
        // w-block: -alpha * 0 = 0; t-block: p/2 - 0 - rate + 1.
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert_abs_diff_eq!(g[3], 1.5 - 0.01 + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn score_matches_finite_differences_of_the_log_posterior() {
        let data = toy_dataset();
        let rate = DEFAULT_PRIOR_RATE;
        let h = 1e-6;
        for x in [
            array![0.0, 0.0, 0.0, 0.0],
            array![0.5, -1.0, 0.2, 0.3],
            array![-0.8, 0.4, 1.1, -0.5],
        ] {
            let g = logreg_score(&data, x.view(), rate).unwrap();
            let mut p = x.clone();
            for i in 0..4 {
                p[i] = x[i] + h;
                let hi = logreg_log_posterior(&data, p.view(), rate);
                p[i] = x[i] - h;
                let lo = logreg_log_posterior(&data, p.view(), rate);
                p[i] = x[i];
                assert_abs_diff_eq!(g[i], (hi - lo) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn flipping_labels_negates_the_w_gradient_through_w_negation() {
        let data = toy_dataset();
        let flipped =
            LabeledDataset::new(data.features().clone(), data.labels().mapv(|y| -y)).unwrap();
        let rate = DEFAULT_PRIOR_RATE;
        let x = array![0.6, -0.3, 0.9, 0.1];
        let x_neg_w = array![-0.6, 0.3, -0.9, 0.1];
        let g_flip = logreg_score(&flipped, x.view(), rate).unwrap();
        let g_orig = logreg_score(&data, x_neg_w.view(), rate).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(g_flip[j], -g_orig[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(g_flip[3], g_orig[3], epsilon = 1e-12);

        // At w = 0 the same symmetry reads as a plain negation.
        let origin = array![0.0, 0.0, 0.0, 0.4];
        let a = logreg_score(&data, origin.view(), rate).unwrap();
        let b = logreg_score(&flipped, origin.view(), rate).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(a[j], -b[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn labels_outside_plus_minus_one_are_rejected() {
        let r = LabeledDataset::new(array![[1.0], [2.0]], array![1.0, 0.5]);
        assert!(matches!(r, Err(KsdError::Dataset(_))));
        let r = LabeledDataset::new(array![[1.0], [f64::NAN]], array![1.0, -1.0]);
        assert!(matches!(r, Err(KsdError::NonFinite { .. })));
    }

    #[test]
    fn sigmoid_is_saturating_but_never_nan() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5, epsilon = 1e-16);
        assert!(sigmoid(f64::MAX).is_finite());
    }

    #[test]
    fn split_preserves_rows_and_rejects_degenerate_points() {
        let data = toy_dataset();
        let (head, tail) = data.split_at(15).unwrap();
        assert_eq!(head.n(), 15);
        assert_eq!(tail.n(), 5);
        assert_eq!(head.features().row(0), data.features().row(0));
        assert_eq!(tail.labels()[0], data.labels()[15]);
        assert!(data.split_at(0).is_err());
        assert!(data.split_at(20).is_err());
    }
}
