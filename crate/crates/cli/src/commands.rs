use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use dufm_core::construct::{
    balanced_factorization_with, build_lowrank_linear, build_lowrank_relu, solve_dnc_scale, DncSpec, FreeFactors,
};
use dufm_core::hessian::{
    eigenvalues, hessian_full_linear_ce, hessian_leading_order_dnc, scale_split, summarize_eigenvalues,
};
use dufm_core::linalg::{matrix_from_json, Spectrum};
use dufm_core::metrics::{
    assumption1_check, balancedness_residual, decay_classify, layer_nc_metrics, solution_space_dims,
};
use dufm_core::model::{forward, loss, HyperParams, LambdaSchedule, ModelKind, ParamStack};
use dufm_core::reduced::search::{minimize_reduced_ce, minimize_reduced_mse, SearchOptions};
use dufm_core::reduced::{
    compare_structures, crossover_depth, named_frame, threshold_check, ReducedCeParams, ReducedMseParams, Threshold,
};
use dufm_core::report::{comparison_table, dims_table, eigenvalue_table, fmt_float, sweep_table, write_json, CsvTable};
use dufm_core::store::{read_params, save_run, save_stack, ParamsManifest};
use dufm_core::trainer::{
    classify_run, sweep, train, train_from, ClassifyThresholds, RunRecord, SweepGrid, TrainConfig,
};
use dufm_core::DufmError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use serde_with::skip_serializing_none;

use crate::config::{f64_list, grid_field, names, output_path, required, u64_grid, usage, usize_grid, UsageError};
use crate::config::{manifest_path, merge};

#[derive(Debug)]
pub enum CliError {
    Usage(UsageError),
    Lab(DufmError),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e)
    }
}

impl From<DufmError> for CliError {
    fn from(e: DufmError) -> Self {
        match e {
            DufmError::InvalidDimension(_) | DufmError::InvalidParameter(_) | DufmError::UnsupportedKind { .. } => {
                CliError::Usage(UsageError(e.to_string()))
            }
            other => CliError::Lab(other),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn write_invocation<T: Serialize>(path: &Path, command: &str, args: &T, outputs: &[&Path]) -> CliResult {
    let value = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": args,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    Ok(write_json(path, &value)?)
}

fn parse_kind(s: &str) -> Result<ModelKind, UsageError> {
    ModelKind::parse(s).map_err(|e| usage(e.to_string()))
}

fn thresholds(zero: Option<f64>, metric: Option<f64>, rank: Option<f64>) -> ClassifyThresholds {
    let d = ClassifyThresholds::default();
    ClassifyThresholds {
        zero_factor: zero.unwrap_or(d.zero_factor),
        metric: metric.unwrap_or(d.metric),
        rank_rel_tol: rank.unwrap_or(d.rank_rel_tol),
    }
}

// ---------------------------------------------------------------- construct

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConstructArgs {
    /// Construction: dnc, lowrank-linear, lowrank-relu or balanced.
    #[arg(long)]
    pub name: Option<String>,
    /// Number of classes.
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// Hidden width (defaults to K).
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of weight layers after the features.
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    /// Regularization strength recorded with the stack; also fixes the dnc scale when --alpha is absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output scale of the dnc construction.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output scale of the lowrank-linear construction.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Layer scale of the lowrank-relu construction.
    #[arg(long)]
    pub psi: Option<f64>,
    /// JSON file with the rows of the K x K target (balanced only).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Use seeded random orthogonal factors between layers instead of the identity.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model kind recorded in the manifest.
    #[arg(long)]
    pub kind: Option<String>,
    /// Binary parameter file; a JSON manifest is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn construct(flags: ConstructArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let name = required(&a.name, "name")?;
    let k = required(&a.k, "K")?;
    let l = required(&a.l, "L")?;
    let lambda = required(&a.lambda, "lambda")?;
    let d = *a.d.get_or_insert(k);
    let free = a.seed.map_or(FreeFactors::Identity, FreeFactors::Random);
    let stack = match name.as_str() {
        "dnc" => {
            let alpha = match a.alpha {
                Some(x) => x,
                None => {
                    let roots = solve_dnc_scale(k, l, lambda)?;
                    let alpha = roots.large().ok_or_else(|| {
                        DufmError::NotApplicable(format!(
                            "no stationary collapsed scale at lambda={lambda}; the largest admissible lambda is {}",
                            roots.critical_lambda
                        ))
                    })?;
                    a.alpha = Some(alpha);
                    alpha
                }
            };
            DncSpec::new(k, d, l, alpha, free)?.build()?
        }
        "lowrank-linear" => build_lowrank_linear(k, d, l, required(&a.beta, "beta")?)?,
        "lowrank-relu" => build_lowrank_relu(k, d, l, required(&a.psi, "psi")?)?,
        "balanced" => {
            let path = required(&a.target, "target")?;
            let text = std::fs::read_to_string(&path)
                .map_err(|e| usage(format!("cannot read target {}: {e}", path.display())))?;
            let z = matrix_from_json(&text).map_err(|e| usage(format!("target {}: {e}", path.display())))?;
            if z.shape() != (k, k) {
                return Err(usage(format!("target must be {k}x{k}, got {:?}", z.shape())).into());
            }
            balanced_factorization_with(&z, l + 1, d, free)?
        }
        other => return Err(usage(format!("unknown construction '{other}'")).into()),
    };
    let kind_tag = a
        .kind
        .get_or_insert_with(|| if name == "lowrank-relu" { "relu-ce" } else { "linear-ce" }.to_string());
    let kind = parse_kind(kind_tag)?;
    let out = output_path(&a.out, "stack.bin");
    a.out = Some(out.clone());
    let stem = out.with_extension("");
    save_stack(&stem, &stack, &kind, lambda)?;
    let bin = stem.with_extension("bin");
    let manifest = stem.with_extension("json");
    write_invocation(&manifest_path(&out, false), "construct", &a, &[&bin, &manifest])?;

    let trace = forward(&stack, &kind);
    let sv = Spectrum::of(trace.output())?;
    let value = loss(&stack, &kind, &HyperParams::new(lambda)?)?;
    println!(
        "{name}: K={k} d={d} L={l}, output rank {}, loss {}, written to {}",
        sv.rank(),
        fmt_float(value),
        bin.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Model kind: linear-ce, relu-ce or mse-<activation>.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Base learning rate; halved within a step until the loss does not increase.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    /// Initial entries have standard deviation init-scale / sqrt(d).
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable step halving (plain gradient descent).
    #[arg(long)]
    pub backtracking: Option<bool>,
    /// Start from a saved parameter file instead of a random draw.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub zero_factor: Option<f64>,
    #[arg(long)]
    pub metric_tol: Option<f64>,
    #[arg(long)]
    pub rank_tol: Option<f64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn curves_table(rec: &RunRecord) -> CsvTable {
    let mut t = CsvTable::new(&["step", "loss", "grad_norm"]);
    for (l, g) in rec.loss_curve.iter().zip(&rec.grad_norm_curve) {
        t.push(vec![l.0.to_string(), fmt_float(l.1), fmt_float(g.1)]);
    }
    t
}

fn timeline_table(rec: &RunRecord) -> CsvTable {
    let mut t = CsvTable::new(&[
        "step",
        "loss",
        "balancedness",
        "nc1",
        "nc2_norm_dev",
        "nc2_angle_dev",
        "nc3",
        "output_rank",
        "top_singular_value",
    ]);
    for s in &rec.metric_timeline {
        let sv = Spectrum::new(s.output_spectrum.clone());
        t.push(vec![
            s.step.to_string(),
            fmt_float(s.loss),
            fmt_float(s.balancedness),
            fmt_float(s.nc.nc1),
            fmt_float(s.nc.nc2_norm_dev),
            fmt_float(s.nc.nc2_angle_dev),
            fmt_float(s.nc.nc3),
            sv.rank().to_string(),
            fmt_float(sv.largest()),
        ]);
    }
    t
}

pub fn train_cmd(flags: TrainArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let k = required(&a.k, "K")?;
    let l = required(&a.l, "L")?;
    let lambda = required(&a.lambda, "lambda")?;
    let d = *a.d.get_or_insert(k);
    let mut cfg = TrainConfig::linear(k, d, l, lambda);
    cfg.kind = parse_kind(a.kind.get_or_insert_with(|| "linear-ce".into()))?;
    cfg.learning_rate = *a.lr.get_or_insert(cfg.learning_rate);
    cfg.max_steps = *a.max_steps.get_or_insert(cfg.max_steps);
    cfg.grad_tol = *a.grad_tol.get_or_insert(cfg.grad_tol);
    cfg.init_scale = *a.init_scale.get_or_insert(cfg.init_scale);
    cfg.seed = *a.seed.get_or_insert(cfg.seed);
    cfg.backtracking = *a.backtracking.get_or_insert(true);
    let t = thresholds(a.zero_factor, a.metric_tol, a.rank_tol);
    (a.zero_factor, a.metric_tol, a.rank_tol) = (Some(t.zero_factor), Some(t.metric), Some(t.rank_rel_tol));
    let dir = output_path(&a.out, "run");
    a.out = Some(dir.clone());

    let rec = match &a.init {
        Some(path) => {
            let start = read_params(path)?;
            train_from(&cfg, start)?
        }
        None => train(&cfg)?,
    };
    let cls = classify_run(&rec, &t)?;
    save_run(&dir, &rec, Some(&cls))?;
    let curves = dir.join("curves.csv");
    let timeline = dir.join("timeline.csv");
    curves_table(&rec).write(&curves)?;
    timeline_table(&rec).write(&timeline)?;
    write_invocation(
        &manifest_path(&dir, true),
        "train",
        &a,
        &[&dir.join("manifest.json"), &dir.join("params.bin"), &curves, &timeline],
    )?;
    println!(
        "{:?} after {} steps: loss {}, max gradient norm {}, class {}, written to {}",
        rec.termination,
        rec.steps,
        fmt_float(rec.final_loss()),
        fmt_float(rec.final_grad_norm()),
        cls.class.label(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SweepArgs {
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    /// Widths, e.g. `6,12,24` or `8..16`.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub d: Option<String>,
    /// Comma-separated regularization strengths.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub lambda: Option<String>,
    /// Comma-separated learning rates.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub lr: Option<String>,
    /// Seeds, e.g. `0..9`.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub seeds: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub zero_factor: Option<f64>,
    #[arg(long)]
    pub metric_tol: Option<f64>,
    #[arg(long)]
    pub rank_tol: Option<f64>,
    /// Concurrent runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also persist every run under `runs/`.
    #[arg(long)]
    pub save_runs: Option<bool>,
    /// Output directory holding sweep.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn sweep_cmd(flags: SweepArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let k = required(&a.k, "K")?;
    let l = required(&a.l, "L")?;
    let grid = SweepGrid {
        d: usize_grid("d", &required(&a.d, "d")?)?,
        lambda: f64_list("lambda", &required(&a.lambda, "lambda")?)?,
        learning_rate: f64_list("lr", a.lr.get_or_insert_with(|| "0.5".into()))?,
        seeds: u64_grid("seeds", a.seeds.get_or_insert_with(|| "0".into()))?,
    };
    let mut base = TrainConfig::linear(k, grid.d[0], l, grid.lambda[0]);
    base.kind = parse_kind(a.kind.get_or_insert_with(|| "linear-ce".into()))?;
    base.max_steps = *a.max_steps.get_or_insert(base.max_steps);
    base.grad_tol = *a.grad_tol.get_or_insert(base.grad_tol);
    base.init_scale = *a.init_scale.get_or_insert(base.init_scale);
    for cfg in grid.configs(&base) {
        cfg.validate()?;
    }
    let t = thresholds(a.zero_factor, a.metric_tol, a.rank_tol);
    (a.zero_factor, a.metric_tol, a.rank_tol) = (Some(t.zero_factor), Some(t.metric), Some(t.rank_rel_tol));
    let jobs = *a.jobs.get_or_insert(1);
    let save_runs = *a.save_runs.get_or_insert(false);
    let dir = output_path(&a.out, "sweep");
    a.out = Some(dir.clone());

    let entries = sweep(&grid, &base, jobs, &t)?;
    let csv = dir.join("sweep.csv");
    sweep_table(&entries).write(&csv)?;
    if save_runs {
        for (i, e) in entries.iter().enumerate() {
            if let Ok((rec, cls)) = &e.outcome {
                save_run(&dir.join("runs").join(format!("{i:04}")), rec, Some(cls))?;
            }
        }
    }
    write_invocation(&manifest_path(&dir, true), "sweep", &a, &[&csv])?;

    let mut counts: BTreeMap<(usize, String), BTreeMap<String, usize>> = BTreeMap::new();
    for e in &entries {
        let label = match &e.outcome {
            Ok((_, c)) => c.class.label(),
            Err(_) => "failed".into(),
        };
        *counts
            .entry((e.config.d, fmt_float(e.config.lambda)))
            .or_default()
            .entry(label)
            .or_default() += 1;
    }
    for ((d, lambda), c) in &counts {
        let total: usize = c.values().sum();
        let parts: Vec<String> = c.iter().map(|(k, n)| format!("{k} {n}/{total}")).collect();
        println!("d={d} lambda={lambda}: {}", parts.join(", "));
    }
    println!("{} runs written to {}", entries.len(), csv.display());
    Ok(())
}

// ---------------------------------------------------------------- compare

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompareArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated frames: dnc, lowrank-linear, lowrank-relu, identity.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub frames: Option<String>,
    /// With exactly two frames, also tabulate both optimal losses over these depths.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub depths: Option<String>,
    /// How lambda varies with depth in the crossover table: fixed, inv_square or sqrt_growth.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn compare_cmd(flags: CompareArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let k = required(&a.k, "K")?;
    let l = required(&a.l, "L")?;
    let lambda = required(&a.lambda, "lambda")?;
    let frame_names = names(a.frames.get_or_insert_with(|| "dnc,lowrank-linear".into()));
    let frames = frame_names
        .iter()
        .map(|n| named_frame(n, k).map(|f| (n.clone(), f)))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = compare_structures(&frames, &ReducedCeParams::new(k, l, lambda)?)?;
    let out = output_path(&a.out, "compare.csv");
    a.out = Some(out.clone());
    comparison_table(&rows).write(&out)?;
    let mut outputs = vec![out.clone()];

    if let Some(depths) = a.depths.clone() {
        if frames.len() != 2 {
            return Err(usage("--depths needs exactly two frames").into());
        }
        let depths = usize_grid("depths", &depths)?;
        let schedule = LambdaSchedule::parse(a.schedule.get_or_insert_with(|| "fixed".into()), lambda)?;
        let c = crossover_depth(&frames[0].1, &frames[1].1, |l| schedule.at(l), &depths)?;
        let mut t = CsvTable::new(&["L", "lambda", "loss_a", "loss_b"]);
        for (i, &l) in c.depths.iter().enumerate() {
            t.push(vec![
                l.to_string(),
                fmt_float(schedule.at(l)),
                fmt_float(c.loss_a[i]),
                fmt_float(c.loss_b[i]),
            ]);
        }
        let path = out.with_extension("crossover.csv");
        t.write(&path)?;
        outputs.push(path);
        match c.crossover {
            Some(l) => println!("{} is no worse than {} from L={l} on", frames[0].0, frames[1].0),
            None => println!("{} stays worse than {} at the deepest depth", frames[0].0, frames[1].0),
        }
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_invocation(&manifest_path(&out, false), "compare", &a, &refs)?;
    for r in &rows {
        println!("{:<16} rank {:>3}  total {}", r.frame_id, r.rank, fmt_float(r.total));
    }
    Ok(())
}

// ---------------------------------------------------------------- hessian

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct HessianArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Scale of the collapsed stack; defaults to the larger stationary root at --lambda.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// full (exact Hessian) or leading (curvature term only).
    #[arg(long)]
    pub mode: Option<String>,
    /// Analyze a saved linear-ce stack instead of the collapsed construction.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Eigenvalues within tol * spectral norm of zero count as near-zero.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Also write every eigenvalue to this CSV.
    #[arg(long)]
    pub spectrum: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn hessian_cmd(flags: HessianArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let lambda = required(&a.lambda, "lambda")?;
    let hp = HyperParams::new(lambda)?;
    let mode = a.mode.get_or_insert_with(|| "full".into()).clone();
    let tol = *a.tol.get_or_insert(1e-10);
    let stack: ParamStack = match &a.input {
        Some(path) => read_params(path)?,
        None => {
            let k = required(&a.k, "K")?;
            let l = required(&a.l, "L")?;
            let d = *a.d.get_or_insert(k);
            let alpha = match a.alpha {
                Some(x) => x,
                None => {
                    let roots = solve_dnc_scale(k, l, lambda)?;
                    roots.large().ok_or_else(|| {
                        DufmError::NotApplicable(format!("no stationary collapsed scale at lambda={lambda}"))
                    })?
                }
            };
            a.alpha = Some(alpha);
            DncSpec::new(k, d, l, alpha, FreeFactors::Identity)?.build()?
        }
    };
    let h = match mode.as_str() {
        "full" => hessian_full_linear_ce(&stack, &ModelKind::LinearCe, &hp)?,
        "leading" => {
            let alpha = a
                .alpha
                .ok_or_else(|| usage("--mode leading analyzes the collapsed construction; drop --input"))?;
            hessian_leading_order_dnc(stack.k(), stack.d(), stack.depth(), alpha)?
        }
        other => return Err(usage(format!("unknown mode '{other}', expected full or leading")).into()),
    };
    let ev = eigenvalues(&h)?;
    let norm = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let summary = summarize_eigenvalues(&ev, tol * norm);
    let split = scale_split(&stack, &hp)?;
    let out = output_path(&a.out, "hessian.json");
    a.out = Some(out.clone());
    write_json(
        &out,
        &json!({
            "summary": summary,
            "symmetry_error": h.symmetry_error(),
            "scale_split": split,
        }),
    )?;
    let mut outputs = vec![out.clone()];
    if let Some(p) = &a.spectrum {
        eigenvalue_table(&ev).write(p)?;
        outputs.push(p.clone());
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_invocation(&manifest_path(&out, false), "hessian", &a, &refs)?;
    println!(
        "dimension {}, min eigenvalue {}, max {}, near-zero {}",
        summary.dimension,
        fmt_float(summary.min_eigenvalue),
        fmt_float(summary.max_eigenvalue),
        summary.near_zero_count
    );
    Ok(())
}

// ---------------------------------------------------------------- spectrum-sweep

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SpectrumSweepArgs {
    /// ce (reduced cross-entropy) or mse (reduced MSE with --activation).
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// Feature width (mse only; defaults to K).
    #[arg(long)]
    pub d: Option<usize>,
    /// Depths, e.g. `2,4,6,8,10`.
    #[arg(long = "L")]
    #[serde(rename = "L", default, deserialize_with = "grid_field")]
    pub l: Option<String>,
    /// fixed, inv_square or sqrt_growth.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Schedule constant.
    #[arg(long)]
    pub c: Option<f64>,
    /// mse activation: relu, identity, square or hadamardN.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn spectrum_sweep_cmd(flags: SpectrumSweepArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let k = required(&a.k, "K")?;
    let depths = usize_grid("L", &required(&a.l, "L")?)?;
    let c = required(&a.c, "c")?;
    let schedule = LambdaSchedule::parse(a.schedule.get_or_insert_with(|| "fixed".into()), c)?;
    let objective = a.objective.get_or_insert_with(|| "ce".into()).clone();
    let defaults = SearchOptions::default();
    let opts = SearchOptions {
        restarts: *a.restarts.get_or_insert(defaults.restarts),
        seed: *a.seed.get_or_insert(defaults.seed),
        max_iters: *a.max_iters.get_or_insert(defaults.max_iters),
        ..defaults
    };
    let mut table = CsvTable::new(&["L", "lambda", "loss", "index", "singular_value", "normalized"]);
    let mut spectra = BTreeMap::new();
    for &l in &depths {
        let lambda = schedule.at(l);
        let res = match objective.as_str() {
            "ce" => minimize_reduced_ce(&ReducedCeParams::new(k, l, lambda)?, &opts)?,
            "mse" => {
                let d = *a.d.get_or_insert(k);
                let act = dufm_core::model::Activation::parse(a.activation.get_or_insert_with(|| "relu".into()))?;
                minimize_reduced_mse(&ReducedMseParams::new(k, d, l, lambda, act)?, &opts)?
            }
            other => return Err(usage(format!("unknown objective '{other}', expected ce or mse")).into()),
        };
        let norm = res.best.norm();
        let normalized = if norm > 0.0 {
            res.spectrum.scaled(1.0 / norm)
        } else {
            res.spectrum.clone()
        };
        for (i, (s, n)) in res.spectrum.values.iter().zip(&normalized.values).enumerate() {
            table.push(vec![
                l.to_string(),
                fmt_float(lambda),
                fmt_float(res.loss),
                i.to_string(),
                fmt_float(*s),
                fmt_float(*n),
            ]);
        }
        spectra.insert(l, normalized);
    }
    let out = output_path(&a.out, "spectrum.csv");
    a.out = Some(out.clone());
    table.write(&out)?;
    let mut outputs = vec![out.clone()];
    if spectra.len() >= 4 {
        let classes = decay_classify(&spectra)?;
        let path = out.with_extension("decay.json");
        write_json(&path, &classes)?;
        outputs.push(path);
        let kinds: Vec<String> = classes.iter().map(|c| format!("{:?}", c.kind)).collect();
        println!("decay classes by index: {}", kinds.join(", "));
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_invocation(&manifest_path(&out, false), "spectrum-sweep", &a, &refs)?;
    for (l, s) in &spectra {
        println!("L={l}: rank {}", s.rank());
    }
    Ok(())
}

// ---------------------------------------------------------------- dims

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DimsArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// Rank of the competing solution set.
    #[arg(long)]
    pub r: Option<usize>,
    /// Widths, e.g. `8..64`.
    #[arg(long)]
    #[serde(default, deserialize_with = "grid_field")]
    pub d: Option<String>,
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn dims_cmd(flags: DimsArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let k = required(&a.k, "K")?;
    let r = required(&a.r, "r")?;
    let l = required(&a.l, "L")?;
    let ds = usize_grid("d", &required(&a.d, "d")?)?;
    let rep = solution_space_dims(k, r, &ds, l)?;
    let out = output_path(&a.out, "dims.csv");
    a.out = Some(out.clone());
    dims_table(&rep).write(&out)?;
    write_invocation(&manifest_path(&out, false), "dims", &a, &[&out])?;
    println!(
        "{} widths written to {}; large-width limit {}",
        rep.rows.len(),
        out.display(),
        fmt_float(rep.limit)
    );
    Ok(())
}

// ---------------------------------------------------------------- thresholds

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ThresholdsArgs {
    /// t1 (linear model) or t6 (ReLU model).
    #[arg(long)]
    pub theorem: Option<String>,
    #[arg(long = "K")]
    #[serde(rename = "K", default, deserialize_with = "grid_field")]
    pub k: Option<String>,
    #[arg(long = "L")]
    #[serde(rename = "L", default, deserialize_with = "grid_field")]
    pub l: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn thresholds_cmd(flags: ThresholdsArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let which = Threshold::parse(&required(&a.theorem, "theorem")?)?;
    let ks = usize_grid("K", &required(&a.k, "K")?)?;
    let ls = usize_grid("L", &required(&a.l, "L")?)?;
    let mut t = CsvTable::new(&["K", "L", "holds"]);
    let mut holding = 0;
    for &k in &ks {
        for &l in &ls {
            let h = threshold_check(which, k, l);
            holding += usize::from(h);
            t.push(vec![k.to_string(), l.to_string(), h.to_string()]);
        }
    }
    let out = output_path(&a.out, "thresholds.csv");
    a.out = Some(out.clone());
    t.write(&out)?;
    write_invocation(&manifest_path(&out, false), "thresholds", &a, &[&out])?;
    println!("{holding} of {} grid points satisfy the inequality", t.rows.len());
    Ok(())
}

// ---------------------------------------------------------------- metrics

#[skip_serializing_none]
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct MetricsArgs {
    /// Parameter file written by construct or train.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Model kind; defaults to the manifest next to the input, else linear-ce.
    #[arg(long)]
    pub kind: Option<String>,
    /// Key of the emitted JSON object; defaults to the input file stem.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn sibling_kind(input: &Path) -> Option<String> {
    let text = std::fs::read_to_string(input.with_extension("json")).ok()?;
    let m: ParamsManifest = serde_json::from_str(&text).ok()?;
    Some(m.kind.tag())
}

pub fn metrics_cmd(flags: MetricsArgs) -> CliResult {
    let mut a = merge(&flags, flags.config.as_deref())?;
    let input = required(&a.input, "input")?;
    let stack = read_params(&input)?;
    let kind_tag = a
        .kind
        .get_or_insert_with(|| sibling_kind(&input).unwrap_or_else(|| "linear-ce".into()))
        .clone();
    let kind = parse_kind(&kind_tag)?;
    let run_id = a
        .run_id
        .get_or_insert_with(|| {
            input
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned())
        })
        .clone();

    let trace = forward(&stack, &kind);
    let sv = Spectrum::of(trace.output())?;
    let layers: BTreeMap<String, Value> = layer_nc_metrics(&stack)?
        .into_iter()
        .enumerate()
        .map(|(i, m)| ((i + 1).to_string(), json!(m)))
        .collect();
    let mut body = json!({
        "kind": kind_tag,
        "K": stack.k(),
        "d": stack.d(),
        "L": stack.depth(),
        "balancedness": balancedness_residual(&stack),
        "output_rank": sv.rank(),
        "output_singular_values": sv.values,
        "layers": layers,
    });
    if kind == ModelKind::ReluCe && stack.depth() >= 2 {
        body["mean_ratio"] = json!(assumption1_check(&trace)?);
    }
    let out = output_path(&a.out, "metrics.json");
    a.out = Some(out.clone());
    let mut doc = serde_json::Map::new();
    doc.insert(run_id.clone(), body);
    write_json(&out, &doc)?;
    write_invocation(&manifest_path(&out, false), "metrics", &a, &[&out])?;
    println!("{run_id}: output rank {}, written to {}", sv.rank(), out.display());
    Ok(())
}
