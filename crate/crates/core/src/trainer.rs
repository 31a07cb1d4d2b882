//! Full-batch gradient descent on the feature models, run records, run
//! classification and seeded parameter sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DufmError, Result};
use crate::linalg::{gaussian_matrix, Spectrum, DEFAULT_RELATIVE_ZERO_TOL};
use crate::metrics::{balancedness_residual, nc_metrics, one_per_class, NcMetrics};
use crate::model::{
    analytic_gradients, backprop_gradients, forward, loss, Gradients, HyperParams, ModelKind, ParamStack,
};

impl Serialize for ModelKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.tag())
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        ModelKind::parse(&tag).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub init_scale: f64,
    pub seed: u64,
    /// Halve the step until the loss does not increase.
    #[serde(default = "default_backtracking")]
    pub backtracking: bool,
}

fn default_backtracking() -> bool {
    true
}

impl TrainConfig {
    pub fn linear(k: usize, d: usize, l: usize, lambda: f64) -> Self {
        TrainConfig {
            kind: ModelKind::LinearCe,
            k,
            d,
            l,
            lambda,
            learning_rate: 0.5,
            max_steps: 10_000,
            grad_tol: 1e-7,
            init_scale: 1.0,
            seed: 0,
            backtracking: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d < self.k || self.l < 1 {
            return Err(DufmError::dim(format!(
                "need K >= 2, d >= K, L >= 1; got K={}, d={}, L={}",
                self.k, self.d, self.l
            )));
        }
        HyperParams::new(self.lambda)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DufmError::param("learning_rate must be positive"));
        }
        if self.max_steps < 1 {
            return Err(DufmError::param("max_steps must be at least 1"));
        }
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(DufmError::param("grad_tol must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(DufmError::param("init_scale must be non-negative"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> Result<HyperParams> {
        HyperParams::new(self.lambda)
    }
}

/// Gaussian entries with standard deviation `init_scale / sqrt(d)`, drawn slot by slot.
pub fn init_params(cfg: &TrainConfig) -> Result<ParamStack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = cfg.init_scale / (cfg.d as f64).sqrt();
    let mats = (0..=cfg.l)
        .map(|i| {
            let (r, c) = ParamStack::expected_shape(cfg.k, cfg.d, cfg.l, i);
            gaussian_matrix(r, c, std, &mut rng)
        })
        .collect();
    ParamStack::new(cfg.k, cfg.d, mats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    MaxSteps,
    /// The next step took the loss past `1e3` times its initial value or to a
    /// non-finite value. The last finite iterate is kept.
    Divergence,
    /// No step size down to `lr * 2^-40` decreased the loss.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub step: usize,
    pub loss: f64,
    pub balancedness: f64,
    /// Last-layer features against the classifier.
    pub nc: NcMetrics,
    pub output_spectrum: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// `(step, loss)` before the update taken at that step.
    pub loss_curve: Vec<(usize, f64)>,
    /// `(step, max_l ||dL/dW_l||_F)`, aligned with `loss_curve`.
    pub grad_norm_curve: Vec<(usize, f64)>,
    pub metric_timeline: Vec<MetricSample>,
    pub final_params: ParamStack,
    pub termination: Termination,
    /// Number of parameter updates applied.
    pub steps: usize,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().map_or(f64::NAN, |p| p.1)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.grad_norm_curve.last().map_or(f64::NAN, |p| p.1)
    }
}

pub fn gradients(params: &ParamStack, kind: &ModelKind, hp: &HyperParams) -> Result<Gradients> {
    match kind {
        ModelKind::LinearCe => analytic_gradients(params, kind, hp),
        _ => backprop_gradients(params, kind, hp),
    }
}

pub fn sample_metrics(params: &ParamStack, kind: &ModelKind, step: usize, loss_value: f64) -> Result<MetricSample> {
    let trace = forward(params, kind);
    let l = params.depth();
    let nc = nc_metrics(trace.lambda(l), &one_per_class(params.k()), params.w(l))?;
    Ok(MetricSample {
        step,
        loss: loss_value,
        balancedness: balancedness_residual(params),
        nc,
        output_spectrum: Spectrum::of(trace.output())?.values,
    })
}

const MAX_HALVINGS: u32 = 40;
const DIVERGENCE_FACTOR: f64 = 1e3;

pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    let start = init_params(cfg)?;
    train_from(cfg, start)
}

/// Gradient descent from a given stack.
pub fn train_from(cfg: &TrainConfig, start: ParamStack) -> Result<RunRecord> {
    cfg.validate()?;
    if (start.k(), start.d(), start.depth()) != (cfg.k, cfg.d, cfg.l) {
        return Err(DufmError::dim("starting stack does not match the configuration"));
    }
    let hp = cfg.hyper()?;
    let every = (cfg.max_steps / 200).max(1);
    let mut params = start;
    let mut current = loss(&params, &cfg.kind, &hp)?;
    let initial = current;
    let mut loss_curve = Vec::new();
    let mut grad_norm_curve = Vec::new();
    let mut timeline = Vec::new();
    let mut termination = Termination::MaxSteps;
    let mut steps = 0;

    for step in 0..=cfg.max_steps {
        let g = gradients(&params, &cfg.kind, &hp)?;
        let gnorm = g.max_norm();
        loss_curve.push((step, current));
        grad_norm_curve.push((step, gnorm));
        if step % every == 0 {
            timeline.push(sample_metrics(&params, &cfg.kind, step, current)?);
        }
        if gnorm <= cfg.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        if step == cfg.max_steps {
            break;
        }
        let mut eta = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = params.axpy(-eta, &g.mats);
            if let Ok(trial) = trial {
                let lt = loss(&trial, &cfg.kind, &hp)?;
                if !cfg.backtracking || lt <= current {
                    accepted = Some((trial, lt));
                    break;
                }
            } else if !cfg.backtracking {
                break;
            }
            eta *= 0.5;
        }
        let Some((next, lt)) = accepted else {
            termination = if cfg.backtracking {
                Termination::Stalled
            } else {
                Termination::Divergence
            };
            break;
        };
        if !lt.is_finite() || lt > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            termination = Termination::Divergence;
            break;
        }
        params = next;
        current = lt;
        steps += 1;
    }
    if timeline.last().is_none_or(|s| s.step != steps) {
        timeline.push(sample_metrics(&params, &cfg.kind, steps, current)?);
    }
    Ok(RunRecord {
        config: cfg.clone(),
        loss_curve,
        grad_norm_curve,
        metric_timeline: timeline,
        final_params: params,
        termination,
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class", content = "rank")]
pub enum RunClass {
    DncLike,
    LowRank(usize),
    ZeroCollapse,
    Other,
}

impl RunClass {
    pub fn label(&self) -> String {
        match self {
            RunClass::DncLike => "dnc".into(),
            RunClass::LowRank(r) => format!("lowrank-{r}"),
            RunClass::ZeroCollapse => "zero".into(),
            RunClass::Other => "other".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyThresholds {
    /// Output norm at or below `zero_factor * sqrt(K)` counts as collapsed to zero.
    pub zero_factor: f64,
    /// Bound on the simplex and self-duality deviations for a collapsed run.
    pub metric: f64,
    /// Relative singular-value cutoff for the output rank.
    pub rank_rel_tol: f64,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        ClassifyThresholds {
            zero_factor: 1e-3,
            metric: 5e-2,
            rank_rel_tol: DEFAULT_RELATIVE_ZERO_TOL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunClassification {
    pub class: RunClass,
    pub output_norm: f64,
    pub rank: usize,
    pub nc: NcMetrics,
    pub balancedness: f64,
}

pub fn classify_params(params: &ParamStack, kind: &ModelKind, t: &ClassifyThresholds) -> Result<RunClassification> {
    let trace = forward(params, kind);
    let z = trace.output();
    let k = params.k();
    let l = params.depth();
    let output_norm = z.norm();
    let sv = Spectrum::of(z)?;
    let spectrum = Spectrum::with_tolerance(sv.values.clone(), t.rank_rel_tol * sv.largest());
    let rank = spectrum.rank();
    let nc = nc_metrics(trace.lambda(l), &one_per_class(k), params.w(l))?;
    let class = if output_norm <= t.zero_factor * (k as f64).sqrt() {
        RunClass::ZeroCollapse
    } else if rank + 1 == k && nc.nc2_norm_dev <= t.metric && nc.nc2_angle_dev <= t.metric && nc.nc3 <= t.metric {
        RunClass::DncLike
    } else if rank + 1 < k {
        RunClass::LowRank(rank)
    } else {
        RunClass::Other
    };
    Ok(RunClassification {
        class,
        output_norm,
        rank,
        nc,
        balancedness: balancedness_residual(params),
    })
}

pub fn classify_run(record: &RunRecord, t: &ClassifyThresholds) -> Result<RunClassification> {
    classify_params(&record.final_params, &record.config.kind, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub d: Vec<usize>,
    pub lambda: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// Cartesian product in `d`, `lambda`, `learning_rate`, `seed` order (seed fastest).
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &d in &self.d {
            for &lambda in &self.lambda {
                for &lr in &self.learning_rate {
                    for &seed in &self.seeds {
                        let mut c = base.clone();
                        c.d = d;
                        c.lambda = lambda;
                        c.learning_rate = lr;
                        c.seed = seed;
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.d.len() * self.lambda.len() * self.learning_rate.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub config: TrainConfig,
    pub outcome: std::result::Result<(RunRecord, RunClassification), String>,
}

/// Run every grid point, `jobs` at a time. Results come back in grid order;
/// a failed run is recorded with its error and the sweep carries on.
pub fn sweep(grid: &SweepGrid, base: &TrainConfig, jobs: usize, t: &ClassifyThresholds) -> Result<Vec<SweepEntry>> {
    if grid.is_empty() {
        return Err(DufmError::param("sweep grid is empty"));
    }
    let configs = grid.configs(base);
    let run = |cfg: &TrainConfig| SweepEntry {
        config: cfg.clone(),
        outcome: train(cfg)
            .and_then(|rec| classify_run(&rec, t).map(|c| (rec, c)))
            .map_err(|e| e.to_string()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DufmError::param(format!("could not start worker pool: {e}")))?;
    Ok(pool.install(|| configs.par_iter().map(run).collect()))
}
