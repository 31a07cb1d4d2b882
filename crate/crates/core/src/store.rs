//! On-disk parameter stacks and run directories.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DufmError, Result};
use crate::linalg::{read_matrix, write_matrix};
use crate::model::{ModelKind, ParamStack};
use crate::report::{write_json, write_text};
use crate::trainer::{MetricSample, RunClassification, RunRecord, Termination, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub kind: ModelKind,
    pub lambda: f64,
}

impl ParamsManifest {
    pub fn of(params: &ParamStack, kind: &ModelKind, lambda: f64) -> Self {
        ParamsManifest {
            k: params.k(),
            d: params.d(),
            l: params.depth(),
            kind: kind.clone(),
            lambda,
        }
    }
}

/// Slots `H_1, W_1, ..., W_L` as consecutive binary containers.
pub fn write_params(path: &Path, params: &ParamStack) -> Result<()> {
    write_text(path, "")?;
    let mut w = BufWriter::new(File::create(path)?);
    for m in params.mats() {
        write_matrix(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamStack> {
    let mut r = BufReader::new(File::open(path)?);
    let mut mats = Vec::new();
    while let Some(m) = read_matrix(&mut r)? {
        mats.push(m);
    }
    let first = mats
        .first()
        .ok_or_else(|| DufmError::Format("parameter file holds no matrices".into()))?;
    let (d, k) = first.shape();
    ParamStack::new(k, d, mats)
}

/// Writes `<stem>.bin` and `<stem>.json` side by side.
pub fn save_stack(stem: &Path, params: &ParamStack, kind: &ModelKind, lambda: f64) -> Result<()> {
    write_params(&stem.with_extension("bin"), params)?;
    write_json(&stem.with_extension("json"), &ParamsManifest::of(params, kind, lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub termination: Termination,
    pub steps: usize,
    pub loss_curve: Vec<(usize, f64)>,
    pub grad_norm_curve: Vec<(usize, f64)>,
    pub metric_timeline: Vec<MetricSample>,
    pub classification: Option<RunClassification>,
}

/// `manifest.json` plus `params.bin` under `dir`.
pub fn save_run(dir: &Path, record: &RunRecord, classification: Option<&RunClassification>) -> Result<()> {
    let manifest = RunManifest {
        config: record.config.clone(),
        termination: record.termination,
        steps: record.steps,
        loss_curve: record.loss_curve.clone(),
        grad_norm_curve: record.grad_norm_curve.clone(),
        metric_timeline: record.metric_timeline.clone(),
        classification: classification.copied(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_params(&dir.join("params.bin"), &record.final_params)
}

pub fn load_run(dir: &Path) -> Result<(RunManifest, ParamStack)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    Ok((manifest, read_params(&dir.join("params.bin"))?))
}
