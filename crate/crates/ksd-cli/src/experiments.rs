//! The experiment drivers behind `ksd run`.
//!
//! Each experiment reads its keys from a flat [`Config`], checks that no key
//! was left over, runs the flows, and persists three artifacts per scheme
//! (trace JSON, loss CSV, final particles CSV) plus one `metrics.json` for
//! the whole run. Everything downstream of the config and seed is
//! deterministic, so re-running a config reproduces the metrics byte for
//! byte apart from the `runtime_seconds` field.
//!
//! Derived randomness never shares a stream: the MMD target draw offsets
//! the master seed, and the per-repeat ICA data and particle seeds are
//! split with a fixed XOR mask so the initial particles cannot echo the
//! ground-truth matrix.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::Serialize;
use serde_json::{json, Value};

use ksd::diagnostics::{self, SymmetryPlane};
use ksd::flows::{
    run_flow, stein_points, AnnealStage, FlowConfig, FlowScheme, FlowTrace, ParticleSet,
    SearchSpec,
};
use ksd::kernel::{median_heuristic, BaseKernel};
use ksd::targets::{data, sample_matrix, Covariance, ScoreModel};
use ksd::KsdError;

use crate::config::Config;
use crate::output::resolve_out_dir;
use crate::{CliError, CliResult};

/// Offset added to the master seed when drawing MMD target samples.
const MMD_SEED_OFFSET: u64 = 101;

/// XOR mask separating a repeat's particle-init seed from its data seed.
const INIT_SEED_MASK: u64 = 0x9e37_79b9_7f4a_7c15;

/// Per-scheme summary that lands in `metrics.json`.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeMetrics {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_ksd: f64,
    pub final_ksd: f64,
    pub final_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub all_wolfe_ok: Option<bool>,
}

fn ksd_from_loss(loss: f64) -> f64 {
    (2.0 * loss).max(0.0).sqrt()
}

impl SchemeMetrics {
    fn from_trace(t: &FlowTrace) -> Self {
        SchemeMetrics {
            initial_loss: t.initial_loss,
            final_loss: t.final_loss,
            initial_ksd: ksd_from_loss(t.initial_loss),
            final_ksd: ksd_from_loss(t.final_loss),
            final_grad_norm: t.final_grad_norm,
            iterations: t.iterations,
            converged: t.converged,
            diverged: t.diverged,
            all_wolfe_ok: t.all_wolfe_ok,
        }
    }
}

/// The document written to `metrics.json`.
#[derive(Debug, Serialize)]
pub struct MetricsDoc {
    pub experiment: String,
    pub seed: u64,
    pub schemes: BTreeMap<String, SchemeMetrics>,
    pub extra: BTreeMap<String, Value>,
    /// Wall-clock time; the one field excluded from reproducibility.
    pub runtime_seconds: f64,
}

struct ExperimentOutput {
    schemes: BTreeMap<String, SchemeMetrics>,
    extra: BTreeMap<String, Value>,
}

impl ExperimentOutput {
    fn new() -> Self {
        ExperimentOutput {
            schemes: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }
}

/// Runs the experiment described by the config file at `path`.
pub fn run_from_file(path: &Path) -> CliResult<MetricsDoc> {
    let cfg = Config::from_path(path)?;
    run_config(&cfg)
}

/// Runs an already parsed config: dispatches on the `experiment` key,
/// writes artifacts into the resolved output directory, and returns the
/// metrics. A diverged scheme still writes everything and then surfaces as
/// a runtime error so the process exits with code 2.
pub fn run_config(cfg: &Config) -> CliResult<MetricsDoc> {
    let start = Instant::now();
    let experiment = cfg.require("experiment")?.to_string();
    let seed = cfg.u64_or("seed", 0)?;
    let out = resolve_out_dir(cfg, &experiment)?;

    let result = match experiment.as_str() {
        "gaussian2d" => run_gaussian2d(cfg, seed, &out),
        "mixture" => run_mixture(cfg, seed, &out),
        "mixture_annealed" => run_mixture_annealed(cfg, seed, &out),
        "banana" => run_banana(cfg, seed, &out),
        "logreg" => run_logreg(cfg, seed, &out),
        "ica" => run_ica(cfg, seed, &out),
        "stein_points_banana" => run_stein_points_banana(cfg, seed, &out),
        "convergence_race" => run_convergence_race(cfg, seed, &out),
        other => Err(CliError::Config(format!(
            "unknown experiment `{other}` (expected gaussian2d, mixture, mixture_annealed, \
             banana, logreg, ica, stein_points_banana, or convergence_race)"
        ))),
    }?;

    let doc = MetricsDoc {
        experiment,
        seed,
        schemes: result.schemes,
        extra: result.extra,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| CliError::Runtime(format!("metrics serialization: {e}")))?;
    std::fs::write(out.join("metrics.json"), text + "\n")?;

    let diverged: Vec<&str> = doc
        .schemes
        .iter()
        .filter(|(_, m)| m.diverged)
        .map(|(k, _)| k.as_str())
        .collect();
    if !diverged.is_empty() {
        return Err(CliError::Runtime(format!(
            "flow diverged for: {}",
            diverged.join(", ")
        )));
    }
    Ok(doc)
}

fn parse_f64(key: &str, raw: &str) -> CliResult<f64> {
    raw.parse()
        .map_err(|_| CliError::Config(format!("key `{key}`: expected a number, got `{raw}`")))
}

/// Reads a comma-separated vector key, falling back to `default`.
fn vec_or(cfg: &Config, key: &str, default: &[f64]) -> CliResult<Array1<f64>> {
    match cfg.f64_list(key)? {
        Some(v) => Ok(Array1::from_vec(v)),
        None => Ok(Array1::from_vec(default.to_vec())),
    }
}

fn usize_list_or(cfg: &Config, key: &str, default: &[usize]) -> CliResult<Vec<usize>> {
    match cfg.word_list(key)? {
        None => Ok(default.to_vec()),
        Some(words) => words
            .iter()
            .map(|w| {
                w.parse().map_err(|_| {
                    CliError::Config(format!(
                        "key `{key}`: expected a nonnegative integer, got `{w}`"
                    ))
                })
            })
            .collect(),
    }
}

fn parse_schemes(cfg: &Config, default: &[FlowScheme]) -> CliResult<Vec<FlowScheme>> {
    let Some(words) = cfg.word_list("schemes")? else {
        return Ok(default.to_vec());
    };
    if words.is_empty() {
        return Err(CliError::Config("key `schemes` lists no schemes".into()));
    }
    words
        .iter()
        .map(|w| w.parse::<FlowScheme>().map_err(CliError::from))
        .collect()
}

/// Builds the base kernel. `kernel.bandwidth` accepts a number or the word
/// `median`, which applies the median heuristic to the initial particles.
fn parse_kernel(cfg: &Config, init: &ParticleSet, default_bandwidth: &str) -> CliResult<BaseKernel> {
    let ktype = cfg.get("kernel.type").unwrap_or("gaussian_rbf").to_string();
    match ktype.as_str() {
        "gaussian_rbf" => {
            let raw = cfg
                .get("kernel.bandwidth")
                .unwrap_or(default_bandwidth)
                .to_string();
            let bw = if raw == "median" {
                median_heuristic(init.positions.view())?
            } else {
                parse_f64("kernel.bandwidth", &raw)?
            };
            Ok(BaseKernel::gaussian_rbf(bw)?)
        }
        "imq" => {
            let c = cfg.f64_or("kernel.c", 1.0)?;
            let beta = cfg.f64_or("kernel.beta", -0.5)?;
            Ok(BaseKernel::imq(c, beta)?)
        }
        other => Err(CliError::Config(format!(
            "unknown kernel.type `{other}` (expected gaussian_rbf or imq)"
        ))),
    }
}

struct FlowDefaults {
    step_size: f64,
    max_iters: usize,
    tol: f64,
    backtracking: bool,
    snapshot_every: usize,
}

/// Reads the shared flow keys, with a per-scheme step override under
/// `flow.step_size.<scheme>`.
fn parse_flow(cfg: &Config, scheme: FlowScheme, defaults: &FlowDefaults) -> CliResult<FlowConfig> {
    let mut fc = FlowConfig::new(scheme);
    let base_step = cfg.f64_or("flow.step_size", defaults.step_size)?;
    let override_key = format!("flow.step_size.{}", scheme.name());
    fc.step_size = match cfg.get(&override_key) {
        Some(raw) => parse_f64(&override_key, raw)?,
        None => base_step,
    };
    fc.max_iters = cfg.usize_or("flow.max_iters", defaults.max_iters)?;
    fc.tol = cfg.f64_or("flow.tol", defaults.tol)?;
    fc.backtracking = cfg.bool_or("flow.backtracking", defaults.backtracking)?;
    fc.snapshot_every = cfg.usize_or("flow.snapshot_every", defaults.snapshot_every)?;
    fc.lbfgs.memory = cfg.usize_or("lbfgs.memory", fc.lbfgs.memory)?;

    let betas = cfg.f64_list("flow.anneal")?;
    let iters = usize_list_or(cfg, "flow.anneal_iters", &[])?;
    if let Some(betas) = betas {
        if !iters.is_empty() && iters.len() != betas.len() {
            return Err(CliError::Config(format!(
                "flow.anneal has {} stages but flow.anneal_iters lists {}",
                betas.len(),
                iters.len()
            )));
        }
        fc.anneal_schedule = betas
            .iter()
            .enumerate()
            .map(|(i, &beta)| AnnealStage {
                beta,
                iters: iters.get(i).copied(),
            })
            .collect();
    } else if !iters.is_empty() {
        return Err(CliError::Config(
            "flow.anneal_iters needs flow.anneal".into(),
        ));
    }
    Ok(fc)
}

/// Runs one flow and writes its three artifacts under `label`.
fn run_and_persist(
    out: &Path,
    label: &str,
    fc: &FlowConfig,
    base: &BaseKernel,
    model: &ScoreModel,
    init: &ParticleSet,
    mmd_target: Option<&Array2<f64>>,
) -> CliResult<FlowTrace> {
    let trace = run_flow(fc, base, model, init, mmd_target)?;
    trace.write_json(&out.join(format!("trace_{label}.json")))?;
    trace.write_loss_csv(&out.join(format!("loss_{label}.csv")))?;
    trace.write_particles_csv(&out.join(format!("particles_{label}.csv")))?;
    Ok(trace)
}

fn step_label(scheme: FlowScheme, step: f64) -> String {
    format!("{}_{step}", scheme.name())
}

/// Fifty particles from an offset Gaussian contract onto a standard
/// Gaussian target; the MMD baseline runs from the same start.
fn run_gaussian2d(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let n = cfg.usize_or("particles", 50)?;
    let target_mean = vec_or(cfg, "target.mean", &[0.0, 0.0])?;
    let target_variance = cfg.f64_or("target.variance", 1.0)?;
    let init_mean = vec_or(cfg, "init.mean", &[1.0, 1.0])?;
    let init_scale = cfg.f64_or("init.scale", 1.0)?;
    if init_mean.len() != target_mean.len() {
        return Err(CliError::Config(format!(
            "init.mean has {} coordinates but target.mean has {}",
            init_mean.len(),
            target_mean.len()
        )));
    }
    let schemes = parse_schemes(
        cfg,
        &[FlowScheme::KsdLbfgs, FlowScheme::Svgd, FlowScheme::MmdGd],
    )?;
    let mmd_samples = cfg.usize_or("mmd.samples", 500)?;

    let init = ParticleSet::gaussian_init(n, init_mean.view(), init_scale, seed)?;
    let base = parse_kernel(cfg, &init, "1")?;
    let defaults = FlowDefaults {
        step_size: 0.05,
        max_iters: 500,
        tol: 1e-9,
        backtracking: false,
        snapshot_every: 50,
    };
    let mut flow_cfgs = Vec::new();
    for &scheme in &schemes {
        flow_cfgs.push(parse_flow(cfg, scheme, &defaults)?);
    }
    cfg.finish()?;

    let model = ScoreModel::gaussian(target_mean, Covariance::Isotropic(target_variance))?;
    let mmd_target = if schemes.contains(&FlowScheme::MmdGd) {
        Some(sample_matrix(
            &model,
            mmd_samples,
            seed.wrapping_add(MMD_SEED_OFFSET),
        )?)
    } else {
        None
    };

    let mut output = ExperimentOutput::new();
    for (scheme, fc) in schemes.iter().zip(flow_cfgs.iter()) {
        let trace = run_and_persist(
            out,
            scheme.name(),
            fc,
            &base,
            &model,
            &init,
            mmd_target.as_ref(),
        )?;
        output
            .schemes
            .insert(scheme.name().to_string(), SchemeMetrics::from_trace(&trace));
    }
    Ok(output)
}

/// Checks that the centroid lies on the first coordinate axis, which is
/// what lets `on_plane_init` pin the symmetry plane exactly.
fn axis_centroid(centroid: &Array1<f64>) -> CliResult<()> {
    if centroid.len() < 2 {
        return Err(CliError::Config(
            "target.centroid needs at least 2 coordinates".into(),
        ));
    }
    if centroid[0] == 0.0 || centroid.iter().skip(1).any(|&v| v != 0.0) {
        return Err(CliError::Config(format!(
            "target.centroid must lie on the first coordinate axis, got {centroid}"
        )));
    }
    Ok(())
}

/// Particles born on the symmetry plane of a two-component mixture stay
/// there; the metrics record how far they drift (they should not).
fn run_mixture(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let n = cfg.usize_or("particles", 30)?;
    let centroid = vec_or(cfg, "target.centroid", &[1.0, 0.0])?;
    let variance = cfg.f64_or("target.variance", 0.1)?;
    axis_centroid(&centroid)?;
    let d = centroid.len();
    let init_scale = cfg.f64_or("init.scale", 0.5)?;
    let schemes = parse_schemes(cfg, &[FlowScheme::KsdGd])?;

    let init = ParticleSet::on_plane_init(n, d, 0, 0.0, init_scale, seed)?;
    let base = parse_kernel(cfg, &init, "0.5")?;
    let defaults = FlowDefaults {
        step_size: 0.01,
        max_iters: 2000,
        tol: 0.0,
        backtracking: false,
        snapshot_every: 10,
    };
    let mut flow_cfgs = Vec::new();
    for &scheme in &schemes {
        flow_cfgs.push(parse_flow(cfg, scheme, &defaults)?);
    }
    cfg.finish()?;

    let model = ScoreModel::symmetric_mixture(centroid.clone(), variance)?;
    let plane = SymmetryPlane::new(centroid, 0.0)?;

    let mut output = ExperimentOutput::new();
    for (scheme, fc) in schemes.iter().zip(flow_cfgs.iter()) {
        let trace = run_and_persist(out, scheme.name(), fc, &base, &model, &init, None)?;
        let mut max_residual = 0.0f64;
        for snap in &trace.snapshots {
            let rows = snap.positions.len();
            let flat: Vec<f64> = snap.positions.iter().flatten().copied().collect();
            let positions = Array2::from_shape_vec((rows, d), flat)
                .map_err(|e| CliError::Runtime(format!("snapshot shape: {e}")))?;
            max_residual = max_residual.max(plane.residual(positions.view())?);
        }
        let final_residual = plane.residual(trace.final_particles.positions.view())?;
        max_residual = max_residual.max(final_residual);
        output.extra.insert(
            format!("symmetry_residual_final_{}", scheme.name()),
            json!(final_residual),
        );
        output.extra.insert(
            format!("symmetry_residual_max_{}", scheme.name()),
            json!(max_residual),
        );
        output
            .schemes
            .insert(scheme.name().to_string(), SchemeMetrics::from_trace(&trace));
    }
    Ok(output)
}

/// Seed-matched comparison of a plain run against a tempered schedule with
/// the same total iteration budget.
fn run_mixture_annealed(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let n = cfg.usize_or("particles", 30)?;
    let centroid = vec_or(cfg, "target.centroid", &[1.0, 0.0])?;
    let variance = cfg.f64_or("target.variance", 0.1)?;
    let init_mean = vec_or(cfg, "init.mean", &[0.0, 0.0])?;
    let init_scale = cfg.f64_or("init.scale", 2.0)?;
    if init_mean.len() != centroid.len() {
        return Err(CliError::Config(format!(
            "init.mean has {} coordinates but target.centroid has {}",
            init_mean.len(),
            centroid.len()
        )));
    }
    let schemes = parse_schemes(cfg, &[FlowScheme::KsdGd])?;
    if schemes.len() != 1 {
        return Err(CliError::Config(
            "mixture_annealed compares one scheme against itself; list exactly one".into(),
        ));
    }
    let scheme = schemes[0];
    let betas = match cfg.f64_list("anneal.betas")? {
        Some(b) if b.len() >= 2 => b,
        Some(_) => {
            return Err(CliError::Config(
                "anneal.betas needs at least two stages".into(),
            ))
        }
        None => vec![0.1, 1.0],
    };
    let stage_iters = usize_list_or(cfg, "anneal.iters", &[])?;
    if !stage_iters.is_empty() && stage_iters.len() != betas.len() {
        return Err(CliError::Config(format!(
            "anneal.betas has {} stages but anneal.iters lists {}",
            betas.len(),
            stage_iters.len()
        )));
    }

    let init = ParticleSet::gaussian_init(n, init_mean.view(), init_scale, seed)?;
    let base = parse_kernel(cfg, &init, "0.5")?;
    let defaults = FlowDefaults {
        step_size: 0.01,
        max_iters: 600,
        tol: 0.0,
        backtracking: true,
        snapshot_every: 50,
    };
    let mut plain_cfg = parse_flow(cfg, scheme, &defaults)?;
    if !plain_cfg.anneal_schedule.is_empty() {
        return Err(CliError::Config(
            "mixture_annealed builds its own schedule; use anneal.betas".into(),
        ));
    }
    cfg.finish()?;

    // Budget matching: the plain run gets exactly as many iterations as the
    // stages of the annealed run combined.
    let mut annealed_cfg = plain_cfg.clone();
    if stage_iters.is_empty() {
        let total = plain_cfg.max_iters;
        let stages = betas.len();
        annealed_cfg.anneal_schedule = betas
            .iter()
            .enumerate()
            .map(|(i, &beta)| {
                // Even split, with the remainder on the last stage.
                let iters = if i + 1 == stages {
                    total - (total / stages) * (stages - 1)
                } else {
                    total / stages
                };
                AnnealStage {
                    beta,
                    iters: Some(iters),
                }
            })
            .collect();
    } else {
        annealed_cfg.anneal_schedule = betas
            .iter()
            .zip(stage_iters.iter())
            .map(|(&beta, &iters)| AnnealStage {
                beta,
                iters: Some(iters),
            })
            .collect();
        plain_cfg.max_iters = stage_iters.iter().sum();
    }

    let model = ScoreModel::symmetric_mixture(centroid, variance)?;
    let mut output = ExperimentOutput::new();
    let plain = run_and_persist(out, "plain", &plain_cfg, &base, &model, &init, None)?;
    let annealed = run_and_persist(out, "annealed", &annealed_cfg, &base, &model, &init, None)?;
    output.extra.insert(
        "annealed_improves".into(),
        json!(annealed.final_loss < plain.final_loss),
    );
    output
        .schemes
        .insert("plain".into(), SchemeMetrics::from_trace(&plain));
    output
        .schemes
        .insert("annealed".into(), SchemeMetrics::from_trace(&annealed));
    Ok(output)
}

/// Flows on the curved banana target.
fn run_banana(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let n = cfg.usize_or("particles", 50)?;
    let a = cfg.f64_or("target.a", 2.0)?;
    let b = cfg.f64_or("target.b", 0.2)?;
    let init_mean = vec_or(cfg, "init.mean", &[0.0, 0.0])?;
    let init_scale = cfg.f64_or("init.scale", 2.0)?;
    if init_mean.len() != 2 {
        return Err(CliError::Config(
            "the banana target is two-dimensional; init.mean needs 2 coordinates".into(),
        ));
    }
    let schemes = parse_schemes(cfg, &[FlowScheme::KsdLbfgs, FlowScheme::Svgd])?;

    let init = ParticleSet::gaussian_init(n, init_mean.view(), init_scale, seed)?;
    let base = parse_kernel(cfg, &init, "median")?;
    let defaults = FlowDefaults {
        step_size: 0.05,
        max_iters: 500,
        tol: 1e-9,
        backtracking: true,
        snapshot_every: 50,
    };
    let mut flow_cfgs = Vec::new();
    for &scheme in &schemes {
        flow_cfgs.push(parse_flow(cfg, scheme, &defaults)?);
    }
    cfg.finish()?;

    let model = ScoreModel::banana(a, b)?;
    let mut output = ExperimentOutput::new();
    for (scheme, fc) in schemes.iter().zip(flow_cfgs.iter()) {
        let trace = run_and_persist(out, scheme.name(), fc, &base, &model, &init, None)?;
        output
            .schemes
            .insert(scheme.name().to_string(), SchemeMetrics::from_trace(&trace));
    }
    Ok(output)
}

/// Bayesian logistic regression on a labeled CSV: standardize on the
/// training split, run the flows over `[w, log alpha]` particles, report
/// posterior-averaged test accuracy.
fn run_logreg(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let path = cfg.require("data.path")?.to_string();
    let dataset = data::load_labeled_csv(Path::new(&path))?;
    let n_train = cfg.usize_or("data.train", dataset.n() * 2 / 3)?;
    let prior_rate = cfg.f64_or("prior.rate", 0.01)?;
    let n = cfg.usize_or("particles", 20)?;
    let init_scale = cfg.f64_or("init.scale", 0.2)?;
    let schemes = parse_schemes(cfg, &[FlowScheme::KsdLbfgs, FlowScheme::Svgd])?;

    let (train, test) = dataset.split_at(n_train)?;
    let (train_std, means, stds) = data::standardize(train.features().view())?;
    let test_std = data::apply_standardization(test.features().view(), &means, &stds);
    let train = ksd::targets::LabeledDataset::new(train_std, train.labels().to_owned())?;
    let test = ksd::targets::LabeledDataset::new(test_std, test.labels().to_owned())?;

    let dim = train.p() + 1;
    let init = ParticleSet::gaussian_init(n, Array1::zeros(dim).view(), init_scale, seed)?;
    let base = parse_kernel(cfg, &init, "median")?;
    let defaults = FlowDefaults {
        step_size: 1e-4,
        max_iters: 300,
        tol: 1e-9,
        backtracking: true,
        snapshot_every: 50,
    };
    let mut flow_cfgs = Vec::new();
    for &scheme in &schemes {
        flow_cfgs.push(parse_flow(cfg, scheme, &defaults)?);
    }
    cfg.finish()?;

    let model = ScoreModel::logistic_posterior(train.clone(), prior_rate)?;
    let mut output = ExperimentOutput::new();
    output.extra.insert("train_rows".into(), json!(train.n()));
    output.extra.insert("test_rows".into(), json!(test.n()));
    for (scheme, fc) in schemes.iter().zip(flow_cfgs.iter()) {
        let trace = run_and_persist(out, scheme.name(), fc, &base, &model, &init, None)?;
        let accuracy = diagnostics::logreg_accuracy(&trace.final_particles, &test)?;
        output
            .extra
            .insert(format!("accuracy_{}", scheme.name()), json!(accuracy));
        output
            .schemes
            .insert(scheme.name().to_string(), SchemeMetrics::from_trace(&trace));
    }
    Ok(output)
}

/// Unmixing-matrix recovery, repeated over fresh datasets. Every final
/// particle contributes one Amari distance; the per-scheme lists are
/// sorted before writing so aggregation does not depend on repeat order.
fn run_ica(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let p = cfg.usize_or("data.p", 2)?;
    let q = cfg.usize_or("data.q", 1000)?;
    let n = cfg.usize_or("particles", 10)?;
    let repeats = cfg.usize_or("repeats", 10)?;
    if repeats == 0 {
        return Err(CliError::Config("repeats must be at least 1".into()));
    }
    let init_scale = cfg.f64_or("init.scale", 1.0)?;
    let schemes = parse_schemes(cfg, &[FlowScheme::KsdLbfgs, FlowScheme::Svgd])?;
    let defaults = FlowDefaults {
        step_size: 1e-5,
        max_iters: 200,
        tol: 1e-9,
        backtracking: true,
        snapshot_every: 0,
    };
    let mut flow_cfgs = Vec::new();
    for &scheme in &schemes {
        flow_cfgs.push(parse_flow(cfg, scheme, &defaults)?);
    }
    // The kernel may be bandwidth `median`, which depends on each repeat's
    // init, so kernel parsing happens inside the loop; consume the keys once
    // up front with a throwaway init so `finish` sees them.
    let probe = ParticleSet::gaussian_init(
        n.max(2),
        Array1::zeros(p * p).view(),
        init_scale,
        seed ^ INIT_SEED_MASK,
    )?;
    parse_kernel(cfg, &probe, "median")?;
    cfg.finish()?;

    let mut amari: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &scheme in &schemes {
        amari.entry(scheme.name().to_string()).or_default();
    }
    for r in 0..repeats {
        let data_seed = seed.wrapping_add(r as u64);
        let init_seed = data_seed ^ INIT_SEED_MASK;
        let (observations, w_true) = data::generate_ica(p, q, data_seed)?;
        let model = ScoreModel::ica_posterior(observations)?;
        let init = ParticleSet::gaussian_init(n, Array1::zeros(p * p).view(), init_scale, init_seed)?;
        let base = parse_kernel(cfg, &init, "median")?;
        for (scheme, fc) in schemes.iter().zip(flow_cfgs.iter()) {
            let trace = run_flow(fc, &base, &model, &init, None)?;
            let values = amari.get_mut(scheme.name()).expect("entry inserted above");
            for k in 0..trace.final_particles.n() {
                if trace.diverged {
                    values.push(1.0);
                    continue;
                }
                let w_est = trace
                    .final_particles
                    .positions
                    .row(k)
                    .to_owned()
                    .into_shape((p, p))
                    .map_err(|e| CliError::Runtime(format!("particle reshape: {e}")))?;
                let v = match diagnostics::amari_distance(w_est.view(), w_true.view()) {
                    Ok(v) => v,
                    // A singular estimate has not recovered anything; score
                    // it with the maximum of the normalized distance.
                    Err(KsdError::InvalidParameter(_)) => 1.0,
                    Err(e) => return Err(e.into()),
                };
                values.push(v);
            }
        }
    }

    let mut output = ExperimentOutput::new();
    output.extra.insert("repeats".into(), json!(repeats));
    for (name, mut values) in amari {
        values.sort_by(f64::total_cmp);
        let mid = values.len() / 2;
        let median = if values.len() % 2 == 1 {
            values[mid]
        } else {
            0.5 * (values[mid - 1] + values[mid])
        };
        output
            .extra
            .insert(format!("amari_median_{name}"), json!(median));
        output
            .extra
            .insert(format!("amari_count_{name}"), json!(values.len()));
        let column = Array2::from_shape_vec((values.len(), 1), values)
            .map_err(|e| CliError::Runtime(format!("amari column: {e}")))?;
        data::write_matrix_csv(&out.join(format!("amari_{name}.csv")), column.view(), "amari")?;
    }
    Ok(output)
}

/// Greedy Stein point construction on the banana target.
fn run_stein_points_banana(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let n_points = cfg.usize_or("points", 20)?;
    let a = cfg.f64_or("target.a", 2.0)?;
    let b = cfg.f64_or("target.b", 0.2)?;
    let search_type = cfg.get("search.type").unwrap_or("grid").to_string();
    let lo = vec_or(cfg, "search.lo", &[-6.0, -4.0])?.to_vec();
    let hi = vec_or(cfg, "search.hi", &[6.0, 10.0])?.to_vec();
    let search = match search_type.as_str() {
        "grid" => SearchSpec::Grid {
            lo,
            hi,
            per_dim: cfg.usize_or("search.per_dim", 40)?,
        },
        "random" => SearchSpec::Random {
            lo,
            hi,
            candidates: cfg.usize_or("search.candidates", 2000)?,
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown search.type `{other}` (expected grid or random)"
            )))
        }
    };
    let bandwidth = cfg.f64_or("kernel.bandwidth", 1.0)?;
    cfg.finish()?;

    let model = ScoreModel::banana(a, b)?;
    let base = BaseKernel::gaussian_rbf(bandwidth)?;
    let sk = ksd::stein::SteinKernel::new(base, &model);
    let points = stein_points(&sk, n_points, &search, seed)?;
    let ksd_value = diagnostics::ksd_between(&sk, &points)?;
    data::write_matrix_csv(&out.join("stein_points.csv"), points.positions.view(), "x")?;

    let mut output = ExperimentOutput::new();
    output.extra.insert("points".into(), json!(n_points));
    output.extra.insert("final_ksd".into(), json!(ksd_value));
    output
        .extra
        .insert("final_loss".into(), json!(0.5 * ksd_value * ksd_value));
    Ok(output)
}

/// Loss-versus-iteration curves: L-BFGS against fixed-step KSD descent and
/// SVGD at three step sizes each, all from one shared initialization.
fn run_convergence_race(cfg: &Config, seed: u64, out: &Path) -> CliResult<ExperimentOutput> {
    let n = cfg.usize_or("particles", 50)?;
    let target_mean = vec_or(cfg, "target.mean", &[0.0, 0.0])?;
    let target_variance = cfg.f64_or("target.variance", 1.0)?;
    let init_mean = vec_or(cfg, "init.mean", &[1.0, 1.0])?;
    let init_scale = cfg.f64_or("init.scale", 1.0)?;
    if init_mean.len() != target_mean.len() {
        return Err(CliError::Config(format!(
            "init.mean has {} coordinates but target.mean has {}",
            init_mean.len(),
            target_mean.len()
        )));
    }
    let gd_steps = match cfg.f64_list("race.gd_steps")? {
        Some(v) => v,
        None => vec![1.0, 5.0, 25.0],
    };
    let svgd_steps = match cfg.f64_list("race.svgd_steps")? {
        Some(v) => v,
        None => vec![0.05, 0.2, 0.8],
    };

    let init = ParticleSet::gaussian_init(n, init_mean.view(), init_scale, seed)?;
    let base = parse_kernel(cfg, &init, "1")?;
    let defaults = FlowDefaults {
        step_size: 1.0,
        max_iters: 300,
        tol: 0.0,
        backtracking: false,
        snapshot_every: 0,
    };
    let lbfgs_cfg = {
        let mut fc = parse_flow(cfg, FlowScheme::KsdLbfgs, &defaults)?;
        fc.tol = cfg.f64_or("race.lbfgs_tol", 1e-10)?;
        fc
    };
    let gd_template = parse_flow(cfg, FlowScheme::KsdGd, &defaults)?;
    let svgd_template = parse_flow(cfg, FlowScheme::Svgd, &defaults)?;
    cfg.finish()?;

    let model = ScoreModel::gaussian(target_mean, Covariance::Isotropic(target_variance))?;
    let mut output = ExperimentOutput::new();

    let trace = run_and_persist(out, "ksd_lbfgs", &lbfgs_cfg, &base, &model, &init, None)?;
    output
        .schemes
        .insert("ksd_lbfgs".into(), SchemeMetrics::from_trace(&trace));

    for &step in &gd_steps {
        let mut fc = gd_template.clone();
        fc.step_size = step;
        let label = step_label(FlowScheme::KsdGd, step);
        let trace = run_and_persist(out, &label, &fc, &base, &model, &init, None)?;
        output
            .schemes
            .insert(label, SchemeMetrics::from_trace(&trace));
    }
    for &step in &svgd_steps {
        let mut fc = svgd_template.clone();
        fc.step_size = step;
        let label = step_label(FlowScheme::Svgd, step);
        let trace = run_and_persist(out, &label, &fc, &base, &model, &init, None)?;
        output
            .schemes
            .insert(label, SchemeMetrics::from_trace(&trace));
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, text: &str) -> std::path::PathBuf {
        let path = dir.join("run.cfg");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn ksd_from_loss_clamps_negative_values() {
        assert_eq!(ksd_from_loss(-1e-18), 0.0);
        assert_eq!(ksd_from_loss(0.5), 1.0);
    }

    #[test]
    fn step_labels_are_file_friendly() {
        assert_eq!(step_label(FlowScheme::KsdGd, 0.5), "ksd_gd_0.5");
        assert_eq!(step_label(FlowScheme::Svgd, 25.0), "svgd_25");
    }

    #[test]
    fn unknown_experiment_is_a_config_error() {
        let cfg = Config::parse("experiment = volcano\n").unwrap();
        match run_config(&cfg) {
            Err(CliError::Config(msg)) => assert!(msg.contains("volcano")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn typoed_keys_fail_before_the_flow_runs() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "experiment = gaussian2d\nout_dir = {}\nparticles = 5\nflow.step_siz = 0.1\n",
            dir.path().join("o").display()
        );
        let cfg = Config::parse(&text).unwrap();
        match run_config(&cfg) {
            Err(CliError::Config(msg)) => assert!(msg.contains("flow.step_siz")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn small_gaussian2d_run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let text = format!(
            "experiment = gaussian2d\nout_dir = {}\nparticles = 6\nflow.max_iters = 5\n\
             mmd.samples = 30\nseed = 3\n",
            out.display()
        );
        let path = write_cfg(dir.path(), &text);
        let doc = run_from_file(&path).unwrap();
        assert_eq!(doc.experiment, "gaussian2d");
        assert_eq!(doc.schemes.len(), 3);
        for label in ["ksd_lbfgs", "svgd", "mmd_gd"] {
            assert!(out.join(format!("trace_{label}.json")).is_file());
            assert!(out.join(format!("loss_{label}.csv")).is_file());
            assert!(out.join(format!("particles_{label}.csv")).is_file());
        }
        assert!(out.join("metrics.json").is_file());
    }

    #[test]
    fn metrics_json_is_reproducible_except_runtime() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let base = "experiment = mixture\nparticles = 5\nflow.max_iters = 8\nseed = 11\n";
        for out in [&out_a, &out_b] {
            let cfg =
                Config::parse(&format!("{base}out_dir = {}\n", out.display())).unwrap();
            run_config(&cfg).unwrap();
        }
        let strip = |p: &Path| -> String {
            std::fs::read_to_string(p.join("metrics.json"))
                .unwrap()
                .lines()
                .filter(|l| !l.contains("runtime_seconds"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let a = strip(&out_a);
        assert!(a.contains("symmetry_residual_final_ksd_gd"));
        assert_eq!(a, strip(&out_b));
    }
}
