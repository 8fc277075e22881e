//! Particle flows that descend the kernel Stein discrepancy, plus the
//! baselines they are compared against.
//!
//! For particles `x^1..x^N` the discrepancy functional is the V-statistic
//!
//! ```text
//! F(X) = 1/(2 N^2) sum_{i,j} k_pi(x^i, x^j)
//! ```
//!
//! so `KSD^2 = 2 F` and the exact gradient in particle `i` is
//! `(1/N^2) sum_j grad_2 k_pi(x^j, x^i)`. The descent schemes move every
//! particle along that gradient, either with a fixed step (`KSD_GD`) or by
//! handing the stacked positions to L-BFGS (`KSD_LBFGS`). SVGD and MMD
//! gradient descent provide the reference dynamics, and `stein_points`
//! builds a particle set greedily instead of transporting one.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{KsdError, Result};
use crate::kernel::BaseKernel;
use crate::optim::{lbfgs_minimize, LbfgsConfig};
use crate::stein::{SteinEvaluation, SteinKernel};
use crate::targets::{data, ScoreModel};

/// A set of interacting particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    /// `N x d` positions, one particle per row.
    pub positions: Array2<f64>,
    /// How many flow steps produced these positions.
    pub iteration: usize,
    /// Seed that initialized the set; carried along so runs can be retraced.
    pub rng_seed: u64,
}

impl ParticleSet {
    pub fn new(positions: Array2<f64>, rng_seed: u64) -> Result<Self> {
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(KsdError::EmptyInput("particle positions".into()));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(KsdError::NonFinite {
                context: "particle positions".into(),
            });
        }
        Ok(ParticleSet {
            positions,
            iteration: 0,
            rng_seed,
        })
    }

    /// `n` i.i.d. draws from `N(mean, scale^2 I)`.
    pub fn gaussian_init(n: usize, mean: ArrayView1<f64>, scale: f64, seed: u64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(KsdError::InvalidParameter(format!(
                "init scale must be positive, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mean.len();
        let positions = Array2::from_shape_fn((n, d), |(_, j)| {
            let z: f64 = rng.sample(StandardNormal);
            mean[j] + scale * z
        });
        ParticleSet::new(positions, seed)
    }

    /// Gaussian draws with coordinate `axis` pinned to `value` exactly,
    /// placing every particle on a hyperplane.
    pub fn on_plane_init(
        n: usize,
        d: usize,
        axis: usize,
        value: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if axis >= d {
            return Err(KsdError::InvalidParameter(format!(
                "plane axis {axis} out of range for dimension {d}"
            )));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(KsdError::InvalidParameter(format!(
                "init scale must be positive, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Array2::from_shape_fn((n, d), |(_, j)| {
            // Draw for every slot to keep the stream layout fixed, then pin.
            let z: f64 = rng.sample(StandardNormal);
            if j == axis {
                value
            } else {
                scale * z
            }
        });
        ParticleSet::new(positions, seed)
    }

    pub fn n(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }
}

impl Serialize for ParticleSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("ParticleSet", 3)?;
        st.serialize_field("positions", &matrix_rows(self.positions.view()))?;
        st.serialize_field("iteration", &self.iteration)?;
        st.serialize_field("rng_seed", &self.rng_seed)?;
        st.end()
    }
}

fn matrix_rows(m: ArrayView2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// The discrepancy functional `F`; `KSD^2` is twice this.
pub fn ksd_loss(eval: &SteinEvaluation) -> f64 {
    let n = eval.gram.nrows() as f64;
    eval.gram.sum() / (2.0 * n * n)
}

/// Exact gradient of [`ksd_loss`] in every particle: row `i` is
/// `(1/N^2) sum_j grad_gram[[j, i, ..]]`.
pub fn ksd_grad(eval: &SteinEvaluation) -> Array2<f64> {
    let (n, _, d) = eval.grad_gram.dim();
    let mut g = Array2::<f64>::zeros((n, d));
    for j in 0..n {
        for i in 0..n {
            for c in 0..d {
                g[[i, c]] += eval.grad_gram[[j, i, c]];
            }
        }
    }
    let scale = (n * n) as f64;
    g.mapv_inplace(|v| v / scale);
    g
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_step(step: f64) -> Result<()> {
    if !step.is_finite() || step <= 0.0 {
        return Err(KsdError::InvalidParameter(format!(
            "step size must be positive, got {step}"
        )));
    }
    Ok(())
}

/// One explicit Euler step down the KSD gradient.
pub fn gd_step(particles: &ParticleSet, sk: &SteinKernel, step: f64) -> Result<ParticleSet> {
    check_step(step)?;
    let eval = sk.evaluate_particles(particles)?;
    let grad = ksd_grad(&eval);
    advance(particles, &grad, -step)
}

/// `particles + direction * factor`, with a divergence check.
fn advance(particles: &ParticleSet, direction: &Array2<f64>, factor: f64) -> Result<ParticleSet> {
    let positions = &particles.positions + &direction.mapv(|v| factor * v);
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(KsdError::Divergence {
            iteration: particles.iteration,
            context: "particle positions became non-finite".into(),
        });
    }
    Ok(ParticleSet {
        positions,
        iteration: particles.iteration + 1,
        rng_seed: particles.rng_seed,
    })
}

/// The Stein variational direction for every particle:
/// `(1/N) sum_j [k(x^j, x^i) s(x^j) + grad_1 k(x^j, x^i)]`.
/// Particles ascend this (it points toward higher density).
pub fn svgd_direction(
    positions: ArrayView2<f64>,
    base: &BaseKernel,
    model: &ScoreModel,
) -> Result<Array2<f64>> {
    let n = positions.nrows();
    let d = positions.ncols();
    if n == 0 {
        return Err(KsdError::EmptyInput("particle set".into()));
    }
    let mut scores = Vec::with_capacity(n);
    for j in 0..n {
        scores.push(model.score(positions.row(j))?);
    }
    let mut dir = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in 0..n {
            let k = base.eval(positions.row(j), positions.row(i))?;
            let g1 = base.grad1(positions.row(j), positions.row(i))?;
            for c in 0..d {
                dir[[i, c]] += k * scores[j][c] + g1[c];
            }
        }
    }
    dir.mapv_inplace(|v| v / n as f64);
    Ok(dir)
}

/// One SVGD step: `x^i += step * direction_i`.
pub fn svgd_step(
    particles: &ParticleSet,
    base: &BaseKernel,
    model: &ScoreModel,
    step: f64,
) -> Result<ParticleSet> {
    check_step(step)?;
    let dir = svgd_direction(particles.positions.view(), base, model)?;
    advance(particles, &dir, step)
}

/// The MMD gradient direction against a fixed sample `target`:
/// `(1/N) sum_j grad_2 k(x^j, x^i) - (1/M) sum_j grad_2 k(y^j, x^i)`.
pub fn mmd_direction(
    positions: ArrayView2<f64>,
    base: &BaseKernel,
    target: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = positions.nrows();
    let m = target.nrows();
    let d = positions.ncols();
    if n == 0 || m == 0 {
        return Err(KsdError::EmptyInput("mmd particle or target set".into()));
    }
    if target.ncols() != d {
        return Err(KsdError::DimensionMismatch {
            expected: d,
            got: target.ncols(),
        });
    }
    // The two sums are accumulated separately and subtracted once, so when
    // the particles coincide with the target sample they cancel exactly.
    let mut dir = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let mut own = Array1::<f64>::zeros(d);
        for j in 0..n {
            let g2 = base.grad2(positions.row(j), positions.row(i))?;
            own += &g2;
        }
        let mut tgt = Array1::<f64>::zeros(d);
        for j in 0..m {
            let g2 = base.grad2(target.row(j), positions.row(i))?;
            tgt += &g2;
        }
        for c in 0..d {
            dir[[i, c]] = own[c] / n as f64 - tgt[c] / m as f64;
        }
    }
    Ok(dir)
}

/// One MMD gradient descent step: `x^i -= step * direction_i`.
pub fn mmd_step(
    particles: &ParticleSet,
    base: &BaseKernel,
    target: ArrayView2<f64>,
    step: f64,
) -> Result<ParticleSet> {
    check_step(step)?;
    let dir = mmd_direction(particles.positions.view(), base, target)?;
    advance(particles, &dir, -step)
}

/// Candidate pool for the greedy Stein point construction.
#[derive(Debug, Clone)]
pub enum SearchSpec {
    /// Axis-aligned lattice with `per_dim` points per axis, ends inclusive.
    Grid {
        lo: Vec<f64>,
        hi: Vec<f64>,
        per_dim: usize,
    },
    /// Uniform draws from a box.
    Random {
        lo: Vec<f64>,
        hi: Vec<f64>,
        candidates: usize,
    },
}

impl SearchSpec {
    fn candidates(&self, seed: u64) -> Result<Array2<f64>> {
        match self {
            SearchSpec::Grid { lo, hi, per_dim } => {
                let d = lo.len();
                if d == 0 || hi.len() != d {
                    return Err(KsdError::DimensionMismatch {
                        expected: d,
                        got: hi.len(),
                    });
                }
                if *per_dim < 2 {
                    return Err(KsdError::InvalidParameter(
                        "grid needs at least 2 points per axis".into(),
                    ));
                }
                for (a, b) in lo.iter().zip(hi.iter()) {
                    if !(a.is_finite() && b.is_finite() && a < b) {
                        return Err(KsdError::InvalidParameter(format!(
                            "grid bounds need lo < hi, got [{a}, {b}]"
                        )));
                    }
                }
                let total = per_dim.pow(d as u32);
                let mut out = Array2::<f64>::zeros((total, d));
                for idx in 0..total {
                    let mut rest = idx;
                    // Last axis varies fastest.
                    for axis in (0..d).rev() {
                        let step = rest % per_dim;
                        rest /= per_dim;
                        let t = step as f64 / (*per_dim as f64 - 1.0);
                        out[[idx, axis]] = lo[axis] + t * (hi[axis] - lo[axis]);
                    }
                }
                Ok(out)
            }
            SearchSpec::Random { lo, hi, candidates } => {
                let d = lo.len();
                if d == 0 || hi.len() != d {
                    return Err(KsdError::DimensionMismatch {
                        expected: d,
                        got: hi.len(),
                    });
                }
                if *candidates == 0 {
                    return Err(KsdError::EmptyInput("candidate pool".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut out = Array2::<f64>::zeros((*candidates, d));
                for i in 0..*candidates {
                    for j in 0..d {
                        out[[i, j]] = rng.gen_range(lo[j]..hi[j]);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Greedy Stein points: grows a set one particle at a time, each time
/// adding the candidate minimizing `1/2 k_pi(x, x) + sum_i k_pi(x, x^i)`
/// over the pool. Ties go to the lowest candidate index.
pub fn stein_points(
    sk: &SteinKernel,
    n: usize,
    search: &SearchSpec,
    seed: u64,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(KsdError::EmptyInput("requested zero stein points".into()));
    }
    let pool = search.candidates(seed)?;
    let c = pool.nrows();
    let mut half_diag = Vec::with_capacity(c);
    for i in 0..c {
        half_diag.push(0.5 * sk.kpi(pool.row(i), pool.row(i))?);
    }
    // Running sums of k_pi(candidate, chosen point).
    let mut partial = vec![0.0f64; c];
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = 0usize;
        let mut best_val = f64::INFINITY;
        for i in 0..c {
            let v = half_diag[i] + partial[i];
            if v < best_val {
                best_val = v;
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..c {
            partial[i] += sk.kpi(pool.row(i), pool.row(best))?;
        }
    }
    let d = pool.ncols();
    let mut positions = Array2::<f64>::zeros((n, d));
    for (row, idx) in chosen.iter().enumerate() {
        positions.row_mut(row).assign(&pool.row(*idx));
    }
    ParticleSet::new(positions, seed)
}

/// Which dynamics to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowScheme {
    KsdGd,
    KsdLbfgs,
    Svgd,
    MmdGd,
}

impl FlowScheme {
    pub fn name(&self) -> &'static str {
        match self {
            FlowScheme::KsdGd => "ksd_gd",
            FlowScheme::KsdLbfgs => "ksd_lbfgs",
            FlowScheme::Svgd => "svgd",
            FlowScheme::MmdGd => "mmd_gd",
        }
    }
}

impl std::str::FromStr for FlowScheme {
    type Err = KsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ksd_gd" => Ok(FlowScheme::KsdGd),
            "ksd_lbfgs" => Ok(FlowScheme::KsdLbfgs),
            "svgd" => Ok(FlowScheme::Svgd),
            "mmd_gd" => Ok(FlowScheme::MmdGd),
            other => Err(KsdError::InvalidParameter(format!(
                "unknown flow scheme `{other}` (expected ksd_gd, ksd_lbfgs, svgd, or mmd_gd)"
            ))),
        }
    }
}

/// One tempering stage: run with the score scaled by `beta` for `iters`
/// steps (or the config default when `None`).
#[derive(Debug, Clone, Serialize)]
pub struct AnnealStage {
    pub beta: f64,
    pub iters: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub scheme: FlowScheme,
    /// Step size for the fixed-step schemes; ignored by `KSD_LBFGS`.
    pub step_size: f64,
    /// Per-stage iteration budget.
    pub max_iters: usize,
    /// Stop a stage when the gradient (or direction) Frobenius norm drops
    /// below this.
    pub tol: f64,
    /// Empty means a single stage at `beta = 1`.
    pub anneal_schedule: Vec<AnnealStage>,
    /// For `KSD_GD`: halve the step while the loss would increase (at most
    /// 30 times per step) instead of accepting the increase.
    pub backtracking: bool,
    /// Record particle snapshots every this many iterations; 0 disables.
    pub snapshot_every: usize,
    /// Inner optimizer settings for `KSD_LBFGS`.
    pub lbfgs: LbfgsConfig,
}

impl FlowConfig {
    pub fn new(scheme: FlowScheme) -> Self {
        FlowConfig {
            scheme,
            step_size: 0.01,
            max_iters: 500,
            tol: 1e-6,
            anneal_schedule: Vec::new(),
            backtracking: false,
            snapshot_every: 10,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// State of the flow at one iteration. `step_size` is the step that
/// produced this state (zero for the initial record).
#[derive(Debug, Clone, Serialize)]
pub struct FlowRecord {
    pub iteration: usize,
    pub beta: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub positions: Vec<Vec<f64>>,
}

/// Everything a flow run produces.
#[derive(Debug, Clone, Serialize)]
pub struct FlowTrace {
    pub scheme: FlowScheme,
    pub records: Vec<FlowRecord>,
    pub snapshots: Vec<Snapshot>,
    pub final_particles: ParticleSet,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// Total steps taken across all stages.
    pub iterations: usize,
    /// The last stage hit the gradient tolerance.
    pub converged: bool,
    /// Positions or losses went non-finite; the trace stops at the last
    /// finite state.
    pub diverged: bool,
    /// For `KSD_LBFGS`: whether every accepted step satisfied the strong
    /// Wolfe conditions. `None` for the other schemes.
    pub all_wolfe_ok: Option<bool>,
}

impl FlowTrace {
    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| KsdError::Serialization(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    /// Per-iteration records as CSV: `iteration,beta,loss,grad_norm,step_size`.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| KsdError::Serialization(e.to_string()))?;
        w.write_record(["iteration", "beta", "loss", "grad_norm", "step_size"])
            .map_err(|e| KsdError::Serialization(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.beta.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.step_size.to_string(),
            ])
            .map_err(|e| KsdError::Serialization(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Final particle positions as CSV, one row per particle.
    pub fn write_particles_csv(&self, path: &Path) -> Result<()> {
        data::write_matrix_csv(path, self.final_particles.positions.view(), "x")
    }
}

/// Internal bookkeeping shared by the schemes inside [`run_flow`].
struct TraceBuilder {
    records: Vec<FlowRecord>,
    snapshots: Vec<Snapshot>,
    snapshot_every: usize,
    recorded_up_to: Option<usize>,
}

impl TraceBuilder {
    fn new(snapshot_every: usize) -> Self {
        TraceBuilder {
            records: Vec::new(),
            snapshots: Vec::new(),
            snapshot_every,
            recorded_up_to: None,
        }
    }

    /// Records iteration `iter` once, even when stages revisit it.
    fn record(
        &mut self,
        iter: usize,
        beta: f64,
        loss: f64,
        grad_norm: f64,
        step: f64,
        positions: ArrayView2<f64>,
    ) {
        if self.recorded_up_to.map_or(false, |last| iter <= last) {
            return;
        }
        self.recorded_up_to = Some(iter);
        self.records.push(FlowRecord {
            iteration: iter,
            beta,
            loss,
            grad_norm,
            step_size: step,
        });
        if self.snapshot_every > 0 && iter % self.snapshot_every == 0 {
            self.snapshots.push(Snapshot {
                iteration: iter,
                positions: matrix_rows(positions),
            });
        }
    }

    fn ensure_final_snapshot(&mut self, iter: usize, positions: ArrayView2<f64>) {
        if self.snapshot_every == 0 {
            return;
        }
        if self.snapshots.last().map_or(true, |s| s.iteration != iter) {
            self.snapshots.push(Snapshot {
                iteration: iter,
                positions: matrix_rows(positions),
            });
        }
    }
}

/// Runs a particle flow to completion and returns the trace.
///
/// The annealing schedule applies to the score-based schemes; each stage
/// tempers the target by its `beta` and runs until the stage budget or the
/// gradient tolerance is hit. `MMD_GD` has no score, so it rejects a
/// nonempty schedule, and it requires `mmd_target` (samples from the
/// target, drawn once by the caller).
///
/// Divergence does not return an error: the trace comes back with
/// `diverged = true` and stops at the last finite state.
pub fn run_flow(
    cfg: &FlowConfig,
    base: &BaseKernel,
    model: &ScoreModel,
    init: &ParticleSet,
    mmd_target: Option<&Array2<f64>>,
) -> Result<FlowTrace> {
    if cfg.max_iters == 0 {
        return Err(KsdError::InvalidParameter("max_iters must be >= 1".into()));
    }
    if !cfg.tol.is_finite() || cfg.tol < 0.0 {
        return Err(KsdError::InvalidParameter(format!(
            "tol must be nonnegative, got {}",
            cfg.tol
        )));
    }
    if cfg.scheme != FlowScheme::KsdLbfgs {
        check_step(cfg.step_size)?;
    }
    if init.dim() != model.dim() {
        return Err(KsdError::DimensionMismatch {
            expected: model.dim(),
            got: init.dim(),
        });
    }
    let stages: Vec<AnnealStage> = if cfg.anneal_schedule.is_empty() {
        vec![AnnealStage {
            beta: 1.0,
            iters: None,
        }]
    } else {
        cfg.anneal_schedule.clone()
    };
    if cfg.scheme == FlowScheme::MmdGd && !cfg.anneal_schedule.is_empty() {
        return Err(KsdError::InvalidParameter(
            "mmd_gd has no score to anneal; clear the schedule".into(),
        ));
    }
    let target = match (cfg.scheme, mmd_target) {
        (FlowScheme::MmdGd, None) => {
            return Err(KsdError::InvalidParameter(
                "mmd_gd needs target samples".into(),
            ))
        }
        (_, t) => t,
    };

    match cfg.scheme {
        FlowScheme::KsdLbfgs => run_lbfgs_flow(cfg, base, model, init, &stages),
        _ => run_stepping_flow(cfg, base, model, init, &stages, target),
    }
}

/// Shared driver for the fixed-step schemes (KSD GD, SVGD, MMD GD).
fn run_stepping_flow(
    cfg: &FlowConfig,
    base: &BaseKernel,
    model: &ScoreModel,
    init: &ParticleSet,
    stages: &[AnnealStage],
    mmd_target: Option<&Array2<f64>>,
) -> Result<FlowTrace> {
    let mut positions = init.positions.clone();
    let mut builder = TraceBuilder::new(cfg.snapshot_every);
    let mut iter_global = 0usize;
    let mut last_step = 0.0f64;
    let mut diverged = false;
    let mut last_stage_converged = false;
    // KSD GD carries the evaluation of the accepted candidate into the next
    // iteration so each position is evaluated once.
    let mut cached_eval: Option<SteinEvaluation> = None;
    let mut gamma = cfg.step_size;

    'stages: for (stage_idx, stage) in stages.iter().enumerate() {
        let stage_model = model.clone().anneal(stage.beta)?;
        let sk = SteinKernel::new(base.clone(), &stage_model);
        let budget = stage.iters.unwrap_or(cfg.max_iters);
        let mut steps_in_stage = 0usize;
        last_stage_converged = false;
        if cfg.scheme == FlowScheme::KsdGd {
            gamma = cfg.step_size;
            cached_eval = None;
        }

        loop {
            // Evaluate the current state under this stage's target.
            let state = match evaluate_state(
                cfg.scheme,
                &sk,
                base,
                &stage_model,
                positions.view(),
                mmd_target,
                cached_eval.take(),
            ) {
                Ok(s) => s,
                Err(e) => {
                    // A state we already stepped to cannot be evaluated:
                    // that is divergence. A bad *initial* state is an error.
                    if iter_global == 0 && stage_idx == 0 {
                        return Err(e);
                    }
                    diverged = true;
                    break 'stages;
                }
            };
            builder.record(
                iter_global,
                stage.beta,
                state.loss,
                state.grad_norm,
                last_step,
                positions.view(),
            );
            if state.grad_norm < cfg.tol {
                last_stage_converged = true;
                break;
            }
            if steps_in_stage >= budget {
                break;
            }

            // Take one step.
            match cfg.scheme {
                FlowScheme::KsdGd => {
                    let grad = state.direction;
                    let mut accepted = false;
                    let mut halvings = 0usize;
                    while !accepted {
                        let cand = &positions - &grad.mapv(|v| gamma * v);
                        let cand_ok = cand.iter().all(|v| v.is_finite());
                        let cand_eval = if cand_ok {
                            sk.evaluate_positions(cand.view()).ok()
                        } else {
                            None
                        };
                        let cand_loss = cand_eval.as_ref().map(ksd_loss);
                        let acceptable = match cand_loss {
                            Some(l) if l.is_finite() => !cfg.backtracking || l <= state.loss,
                            _ => false,
                        };
                        if acceptable {
                            positions = cand;
                            cached_eval = cand_eval;
                            last_step = gamma;
                            accepted = true;
                        } else if cfg.backtracking && halvings < 30 {
                            gamma *= 0.5;
                            halvings += 1;
                        } else if cfg.backtracking {
                            // No acceptable step at any scale; stop the stage.
                            break;
                        } else {
                            diverged = true;
                            break 'stages;
                        }
                    }
                    if !accepted {
                        break;
                    }
                }
                FlowScheme::Svgd => {
                    let next = &positions + &state.direction.mapv(|v| cfg.step_size * v);
                    if next.iter().any(|v| !v.is_finite()) {
                        diverged = true;
                        break 'stages;
                    }
                    positions = next;
                    last_step = cfg.step_size;
                }
                FlowScheme::MmdGd => {
                    let next = &positions - &state.direction.mapv(|v| cfg.step_size * v);
                    if next.iter().any(|v| !v.is_finite()) {
                        diverged = true;
                        break 'stages;
                    }
                    positions = next;
                    last_step = cfg.step_size;
                }
                FlowScheme::KsdLbfgs => unreachable!("handled by run_lbfgs_flow"),
            }
            iter_global += 1;
            steps_in_stage += 1;
        }
    }

    // Make sure the last state is recorded (it is unless we diverged or a
    // stage ended exactly on a fresh step).
    let last_beta = stages.last().expect("at least one stage").beta;
    if builder.recorded_up_to != Some(iter_global) {
        let stage_model = model.clone().anneal(last_beta)?;
        let sk = SteinKernel::new(base.clone(), &stage_model);
        if let Ok(state) = evaluate_state(
            cfg.scheme,
            &sk,
            base,
            &stage_model,
            positions.view(),
            mmd_target,
            cached_eval.take(),
        ) {
            builder.record(
                iter_global,
                last_beta,
                state.loss,
                state.grad_norm,
                last_step,
                positions.view(),
            );
        }
    }
    builder.ensure_final_snapshot(iter_global, positions.view());
    finish_trace(
        cfg.scheme,
        builder,
        positions,
        init,
        iter_global,
        last_stage_converged,
        diverged,
        None,
    )
}

struct StepState {
    loss: f64,
    grad_norm: f64,
    /// KSD gradient for `KsdGd`, ascent direction for `Svgd`, descent
    /// direction for `MmdGd`.
    direction: Array2<f64>,
}

fn evaluate_state(
    scheme: FlowScheme,
    sk: &SteinKernel,
    base: &BaseKernel,
    stage_model: &ScoreModel,
    positions: ArrayView2<f64>,
    mmd_target: Option<&Array2<f64>>,
    cached: Option<SteinEvaluation>,
) -> Result<StepState> {
    match scheme {
        FlowScheme::KsdGd => {
            let eval = match cached {
                Some(e) => e,
                None => sk.evaluate_positions(positions)?,
            };
            let loss = ksd_loss(&eval);
            if !loss.is_finite() {
                return Err(KsdError::NonFinite {
                    context: "ksd loss".into(),
                });
            }
            let grad = ksd_grad(&eval);
            let grad_norm = frobenius(&grad);
            Ok(StepState {
                loss,
                grad_norm,
                direction: grad,
            })
        }
        FlowScheme::Svgd => {
            let eval = sk.evaluate_positions(positions)?;
            let dir = svgd_direction(positions, base, stage_model)?;
            Ok(StepState {
                loss: ksd_loss(&eval),
                grad_norm: frobenius(&dir),
                direction: dir,
            })
        }
        FlowScheme::MmdGd => {
            let eval = sk.evaluate_positions(positions)?;
            let target = mmd_target.expect("checked by run_flow");
            let dir = mmd_direction(positions, base, target.view())?;
            Ok(StepState {
                loss: ksd_loss(&eval),
                grad_norm: frobenius(&dir),
                direction: dir,
            })
        }
        FlowScheme::KsdLbfgs => unreachable!(),
    }
}

/// KSD descent where L-BFGS drives the stacked particle positions.
fn run_lbfgs_flow(
    cfg: &FlowConfig,
    base: &BaseKernel,
    model: &ScoreModel,
    init: &ParticleSet,
    stages: &[AnnealStage],
) -> Result<FlowTrace> {
    let n = init.n();
    let d = init.dim();
    let mut flat = Array1::from_iter(init.positions.iter().copied());
    let mut builder = TraceBuilder::new(cfg.snapshot_every);
    let mut iter_global = 0usize;
    let mut all_wolfe = true;
    let mut last_converged = false;

    for stage in stages {
        let stage_model = model.clone().anneal(stage.beta)?;
        let sk = SteinKernel::new(base.clone(), &stage_model);
        let objective = |x: &Array1<f64>| -> (f64, Array1<f64>) {
            if x.iter().any(|v| !v.is_finite()) {
                return (f64::INFINITY, Array1::zeros(n * d));
            }
            let positions = x
                .view()
                .into_shape((n, d))
                .expect("flattened length matches");
            match sk.evaluate_positions(positions) {
                Ok(eval) => {
                    let loss = ksd_loss(&eval);
                    let grad = ksd_grad(&eval);
                    (loss, Array1::from_iter(grad.iter().copied()))
                }
                // Score failures (overflow, singular unmixing matrices) act
                // as an infinite barrier the line search retreats from.
                Err(_) => (f64::INFINITY, Array1::zeros(n * d)),
            }
        };
        let lbfgs_cfg = LbfgsConfig {
            max_iters: stage.iters.unwrap_or(cfg.max_iters),
            // The flow tolerance is on the l2 norm of the stacked gradient;
            // the optimizer stops on the inf norm, so divide by sqrt(n d).
            tol_grad: cfg.tol / ((n * d) as f64).sqrt(),
            store_iterates: true,
            ..cfg.lbfgs.clone()
        };
        let out = lbfgs_minimize(objective, &flat, &lbfgs_cfg)?;
        for (k, rec) in out.records.iter().enumerate() {
            let iter_here = iter_global + rec.iteration;
            let pos = out.iterates[k]
                .view()
                .into_shape((n, d))
                .expect("iterate length matches");
            builder.record(
                iter_here,
                stage.beta,
                rec.value,
                rec.grad_l2_norm,
                rec.step_length,
                pos,
            );
            if rec.iteration > 0 && !rec.wolfe_ok {
                all_wolfe = false;
            }
        }
        iter_global += out.records.last().map_or(0, |r| r.iteration);
        flat = out.x;
        last_converged = out.converged;
    }

    let positions = flat
        .view()
        .into_shape((n, d))
        .expect("flattened length matches")
        .to_owned();
    builder.ensure_final_snapshot(iter_global, positions.view());
    finish_trace(
        FlowScheme::KsdLbfgs,
        builder,
        positions,
        init,
        iter_global,
        last_converged,
        false,
        Some(all_wolfe),
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_trace(
    scheme: FlowScheme,
    builder: TraceBuilder,
    positions: Array2<f64>,
    init: &ParticleSet,
    iterations: usize,
    converged: bool,
    diverged: bool,
    all_wolfe_ok: Option<bool>,
) -> Result<FlowTrace> {
    let records = builder.records;
    if records.is_empty() {
        return Err(KsdError::EmptyInput("flow produced no records".into()));
    }
    let initial_loss = records.first().expect("nonempty").loss;
    let last = records.last().expect("nonempty");
    let final_loss = last.loss;
    let final_grad_norm = last.grad_norm;
    Ok(FlowTrace {
        scheme,
        records,
        snapshots: builder.snapshots,
        final_particles: ParticleSet {
            positions,
            iteration: init.iteration + iterations,
            rng_seed: init.rng_seed,
        },
        initial_loss,
        final_loss,
        final_grad_norm,
        iterations,
        converged,
        diverged,
        all_wolfe_ok,
    })
}
