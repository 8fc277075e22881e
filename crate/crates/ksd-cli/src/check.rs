//! The `ksd check` self-test: finite-difference ladders for both base
//! kernels and the Stein kernel gradient, plus the Monte-Carlo Stein
//! identity at a handful of evaluation points. Prints one pass/fail line
//! per check and fails the process if any line fails.

use ndarray::{array, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ksd::diagnostics::stein_identity_check;
use ksd::kernel::{fd_check, BaseKernel};
use ksd::stein::SteinKernel;
use ksd::targets::ScoreModel;
use ksd::Result as KsdResult;

use crate::{CliError, CliResult};

struct CheckLine {
    name: String,
    pass: bool,
    detail: String,
}

fn fd_lines(seed: u64, lines: &mut Vec<CheckLine>) -> KsdResult<()> {
    let kernels = [
        ("gaussian_rbf", BaseKernel::gaussian_rbf(0.8)?),
        ("imq", BaseKernel::imq(1.0, -0.5)?),
    ];
    for (name, kernel) in kernels {
        let report = fd_check(&kernel, 40, 1e-5, seed)?;
        lines.push(CheckLine {
            name: format!("fd {name} derivatives"),
            pass: report.all_below(1e-5),
            detail: format!("max rel err {:.3e}", report.max_error()),
        });
    }
    Ok(())
}

fn stein_grad_line(seed: u64, lines: &mut Vec<CheckLine>) -> KsdResult<()> {
    let model = ScoreModel::symmetric_mixture(array![1.0, 0.0], 0.5)?;
    let base = BaseKernel::gaussian_rbf(0.9)?;
    let sk = SteinKernel::new(base, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let x = Array1::from_iter((0..2).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = Array1::from_iter((0..2).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let analytic = sk.grad2_kpi(x.view(), y.view())?;
        for c in 0..2 {
            let mut yp = y.clone();
            yp[c] += h;
            let hi = sk.kpi(x.view(), yp.view())?;
            yp[c] = y[c] - h;
            let lo = sk.kpi(x.view(), yp.view())?;
            let fd = (hi - lo) / (2.0 * h);
            let scale = analytic[c].abs().max(fd.abs()).max(1.0);
            worst = worst.max((analytic[c] - fd).abs() / scale);
        }
    }
    lines.push(CheckLine {
        name: "fd stein kernel gradient".into(),
        pass: worst < 1e-5,
        detail: format!("max rel err {worst:.3e}"),
    });
    Ok(())
}

fn identity_lines(seed: u64, lines: &mut Vec<CheckLine>) -> KsdResult<()> {
    let model = ScoreModel::standard_gaussian(2)?;
    let base = BaseKernel::gaussian_rbf(1.0)?;
    let sk = SteinKernel::new(base, &model);
    let points = [
        array![0.0, 0.0],
        array![0.5, 0.5],
        array![-1.0, 0.3],
        array![2.0, -0.5],
        array![0.0, 1.5],
    ];
    for (i, y) in points.iter().enumerate() {
        let check = stein_identity_check(&sk, y.view(), 20_000, seed.wrapping_add(i as u64))?;
        lines.push(CheckLine {
            name: format!("stein identity at y{i}"),
            pass: check.pass,
            detail: format!("mean {:+.3e}, stderr {:.3e}", check.mean, check.stderr),
        });
    }
    Ok(())
}

/// Runs the whole table. Returns an error (and a nonzero exit) when any
/// line fails.
pub fn run_check(seed: u64) -> CliResult<()> {
    let mut lines = Vec::new();
    fd_lines(seed, &mut lines).map_err(CliError::from)?;
    stein_grad_line(seed, &mut lines).map_err(CliError::from)?;
    identity_lines(seed, &mut lines).map_err(CliError::from)?;

    let width = lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
    let mut failures = 0usize;
    for line in &lines {
        let status = if line.pass { "PASS" } else { "FAIL" };
        println!("{:width$}  {}  {}", line.name, status, line.detail);
        if !line.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        Err(CliError::Runtime(format!("{failures} check(s) failed")))
    } else {
        println!("all {} checks passed", lines.len());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_default_check_suite_passes() {
        run_check(7).unwrap();
    }
}
