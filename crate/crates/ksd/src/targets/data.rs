//! Dataset loading, standardization, and seeded synthetic generators.
//!
//! Labeled CSV files carry a header row; the column named `y` holds labels
//! in `{-1, +1}` and every other column is a numeric feature, kept in header
//! order. Plain matrix CSVs (ICA observations, unmixing matrices, particle
//! dumps) are all-numeric with a generated header.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{KsdError, Result};
use crate::linalg::{self, Lu};
use crate::targets::logistic::LabeledDataset;

/// Loads a labeled CSV. The `y` column may sit anywhere; features keep the
/// order of the remaining header columns.
pub fn load_labeled_csv(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| KsdError::Dataset(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| KsdError::Dataset(e.to_string()))?
        .clone();
    let y_col = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| KsdError::Dataset(format!("{}: no `y` column", path.display())))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y_col)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(KsdError::Dataset(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| KsdError::Dataset(e.to_string()))?;
        if record.len() != header.len() {
            return Err(KsdError::Dataset(format!(
                "row {}: expected {} fields, got {}",
                r + 1,
                header.len(),
                record.len()
            )));
        }
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                KsdError::Dataset(format!("row {}: `{field}` is not a number", r + 1))
            })?;
            if i == y_col {
                labels.push(v);
            } else {
                rows.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(KsdError::Dataset(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let q = labels.len();
    let p = feature_names.len();
    let features = Array2::from_shape_vec((q, p), rows).expect("row lengths checked");
    LabeledDataset::with_names(features, Array1::from(labels), feature_names)
}

/// Writes a labeled dataset with `y` as the first column.
pub fn write_labeled_csv(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| KsdError::Dataset(e.to_string()))?;
    let mut header = vec!["y".to_string()];
    header.extend(data.feature_names().iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| KsdError::Dataset(e.to_string()))?;
    for (row, y) in data
        .features()
        .rows()
        .into_iter()
        .zip(data.labels().iter())
    {
        let mut record = vec![format_float(*y)];
        record.extend(row.iter().map(|v| format_float(*v)));
        writer
            .write_record(&record)
            .map_err(|e| KsdError::Dataset(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes an all-numeric matrix with header `{prefix}1..{prefix}p`.
pub fn write_matrix_csv(path: &Path, m: ArrayView2<f64>, prefix: &str) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| KsdError::Dataset(e.to_string()))?;
    let header: Vec<String> = (1..=m.ncols()).map(|i| format!("{prefix}{i}")).collect();
    writer
        .write_record(&header)
        .map_err(|e| KsdError::Dataset(e.to_string()))?;
    for row in m.rows() {
        let record: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        writer
            .write_record(&record)
            .map_err(|e| KsdError::Dataset(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads an all-numeric matrix CSV written by [`write_matrix_csv`].
pub fn load_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| KsdError::Dataset(format!("{}: {e}", path.display())))?;
    let width = reader
        .headers()
        .map_err(|e| KsdError::Dataset(e.to_string()))?
        .len();
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| KsdError::Dataset(e.to_string()))?;
        if record.len() != width {
            return Err(KsdError::Dataset(format!(
                "row {}: expected {} fields, got {}",
                r + 1,
                width,
                record.len()
            )));
        }
        for field in record.iter() {
            values.push(field.trim().parse().map_err(|_| {
                KsdError::Dataset(format!("row {}: `{field}` is not a number", r + 1))
            })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(KsdError::Dataset(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((rows, width), values).expect("row lengths checked"))
}

/// Shortest round-trip decimal representation; `f64::to_string` in Rust is
/// already exact under re-parsing, which keeps generated files byte-stable.
fn format_float(v: f64) -> String {
    v.to_string()
}

/// Per-column standardization to zero mean and unit (population) standard
/// deviation. Returns the standardized matrix plus the means and standard
/// deviations so test features can be mapped through the same transform.
pub fn standardize(features: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    let q = features.nrows();
    if q == 0 {
        return Err(KsdError::EmptyInput("standardize needs rows".into()));
    }
    let p = features.ncols();
    let mut means = Array1::<f64>::zeros(p);
    let mut stds = Array1::<f64>::zeros(p);
    for j in 0..p {
        let col = features.column(j);
        let mean = col.sum() / q as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q as f64;
        if var <= 0.0 {
            return Err(KsdError::Dataset(format!(
                "feature column {j} is constant and cannot be standardized"
            )));
        }
        means[j] = mean;
        stds[j] = var.sqrt();
    }
    Ok((apply_standardization(features, &means, &stds), means, stds))
}

/// Applies a previously fitted standardization.
pub fn apply_standardization(
    features: ArrayView2<f64>,
    means: &Array1<f64>,
    stds: &Array1<f64>,
) -> Array2<f64> {
    let mut out = features.to_owned();
    for j in 0..out.ncols() {
        let m = means[j];
        let s = stds[j];
        out.column_mut(j).mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Generates a linearly separable binary classification problem: standard
/// Gaussian features, a fixed random direction `w_true`, and labels
/// `sign(w_true . d)`. Rows with `|w_true . d| < margin` are redrawn so the
/// separation has a definite margin.
pub fn generate_logistic(
    p: usize,
    q: usize,
    seed: u64,
    margin: f64,
) -> Result<(LabeledDataset, Array1<f64>)> {
    if p == 0 || q == 0 {
        return Err(KsdError::InvalidParameter(
            "logistic generator needs p >= 1 and q >= 1".into(),
        ));
    }
    if !margin.is_finite() || margin < 0.0 {
        return Err(KsdError::InvalidParameter(format!(
            "margin must be nonnegative, got {margin}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_true = Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut features = Array2::<f64>::zeros((q, p));
    let mut labels = Array1::<f64>::zeros(q);
    for i in 0..q {
        loop {
            let row = Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let z = w_true.dot(&row);
            if z.abs() >= margin {
                features.row_mut(i).assign(&row);
                labels[i] = if z > 0.0 { 1.0 } else { -1.0 };
                break;
            }
        }
    }
    Ok((LabeledDataset::new(features, labels)?, w_true))
}

/// Generates a noiseless ICA problem: a random unmixing matrix `W` with
/// standard normal entries (redrawn until its 1-norm condition number is at
/// most 100), sources drawn from the sech density via inverse-CDF sampling,
/// and observations `x = W^{-1} s`.
pub fn generate_ica(p: usize, q: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if p == 0 || q == 0 {
        return Err(KsdError::InvalidParameter(
            "ica generator needs p >= 1 and q >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w_true, lu) = loop {
        let w = Array2::from_shape_fn((p, p), |_| rng.sample::<f64, _>(StandardNormal));
        if let Some(lu) = Lu::factor(w.view()) {
            let inv = lu.inverse();
            let cond = linalg::one_norm(w.view()) * linalg::one_norm(inv.view());
            if cond <= 100.0 {
                break (w, lu);
            }
        }
    };
    let mut observations = Array2::<f64>::zeros((q, p));
    for i in 0..q {
        // If U ~ Uniform(0, 1), then ln tan(pi U / 2) has density
        // proportional to sech: it is the inverse Gudermannian of
        // pi (U - 1/2).
        let s = Array1::from_iter((0..p).map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (std::f64::consts::FRAC_PI_2 * u).tan().ln()
        }));
        let x = lu.solve(s.view());
        observations.row_mut(i).assign(&x);
    }
    Ok((observations, w_true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn labeled_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = LabeledDataset::new(
            array![[0.25, -1.5], [3.0, 0.1], [-0.75, 2.25]],
            array![1.0, -1.0, 1.0],
        )
        .unwrap();
        write_labeled_csv(&path, &data).unwrap();
        let back = load_labeled_csv(&path).unwrap();
        assert_eq!(back.features(), data.features());
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.feature_names(), data.feature_names());
    }

    #[test]
    fn loader_accepts_y_in_any_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "a,y,b\n1.0,1,2.0\n3.0,-1,4.0\n").unwrap();
        let data = load_labeled_csv(&path).unwrap();
        assert_eq!(data.features(), &array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(data.labels(), &array![1.0, -1.0]);
        assert_eq!(data.feature_names(), ["a", "b"]);
    }

    #[test]
    fn loader_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let no_y = dir.path().join("no_y.csv");
        std::fs::write(&no_y, "a,b\n1,2\n").unwrap();
        assert!(load_labeled_csv(&no_y).is_err());

        let bad_label = dir.path().join("bad_label.csv");
        std::fs::write(&bad_label, "y,a\n0.5,1.0\n").unwrap();
        assert!(load_labeled_csv(&bad_label).is_err());

        let not_numeric = dir.path().join("nan.csv");
        std::fs::write(&not_numeric, "y,a\n1,hello\n").unwrap();
        assert!(load_labeled_csv(&not_numeric).is_err());

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "y,a\n").unwrap();
        assert!(load_labeled_csv(&empty).is_err());
    }

    #[test]
    fn standardize_centers_and_scales() {
        let m = array![[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]];
        let (z, means, stds) = standardize(m.view()).unwrap();
        assert_eq!(means, array![3.0, 30.0]);
        for j in 0..2 {
            let col = z.column(j);
            assert_abs_diff_eq!(col.sum(), 0.0, epsilon = 1e-12);
            let var: f64 = col.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
        // Applying the fitted transform to the training features is the
        // same as standardizing them.
        let again = apply_standardization(m.view(), &means, &stds);
        assert_eq!(again, z);
    }

    #[test]
    fn standardize_rejects_constant_columns() {
        let m = array![[1.0, 2.0], [1.0, 3.0]];
        assert!(standardize(m.view()).is_err());
    }

    #[test]
    fn logistic_generator_is_seeded_and_separable() {
        let (a, w_a) = generate_logistic(4, 60, 7, 0.1).unwrap();
        let (b, w_b) = generate_logistic(4, 60, 7, 0.1).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(w_a, w_b);
        for (row, y) in a.features().rows().into_iter().zip(a.labels().iter()) {
            let z = w_a.dot(&row);
            assert!(y * z >= 0.1, "margin violated: y={y}, z={z}");
        }
        let (c, _) = generate_logistic(4, 60, 8, 0.1).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn ica_generator_is_seeded_and_well_conditioned() {
        let (x_a, w_a) = generate_ica(3, 40, 5).unwrap();
        let (x_b, w_b) = generate_ica(3, 40, 5).unwrap();
        assert_eq!(x_a, x_b);
        assert_eq!(w_a, w_b);
        assert!(x_a.iter().all(|v| v.is_finite()));
        let inv = linalg::invert_checked(w_a.view(), 1e12).unwrap();
        let cond = linalg::one_norm(w_a.view()) * linalg::one_norm(inv.view());
        assert!(cond <= 100.0, "condition {cond}");
        // Mixing back recovers the sources: W x_i should be sech-distributed,
        // in particular finite and not all tiny.
        let s = x_a.dot(&w_a.t());
        assert!(s.iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn matrix_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = array![[1.0, -2.5], [0.1, 1e-12]];
        write_matrix_csv(&path, m.view(), "x").unwrap();
        let back = load_matrix_csv(&path).unwrap();
        assert_eq!(back, m);
    }
}
