//! One-factor sweeps over CL, TB, NT and δ.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic, SyntheticTask, TaskConfig};
use super::stats::{median, pearson};
use super::train::{train, TrainConfig};
use crate::backbone::{Model, ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    /// Conv layers per stage.
    Cl,
    /// Transformer blocks per stage.
    Tb,
    /// Stage-1 token count, set through the patch size.
    Nt,
    /// Attention score scaler.
    Delta,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Cl, Factor::Tb, Factor::Nt, Factor::Delta];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Cl => "CL",
            Factor::Tb => "TB",
            Factor::Nt => "NT",
            Factor::Delta => "delta",
        }
    }

    /// `base` with this factor set to `value`.
    pub fn apply(self, base: &ModelConfig, value: f64) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(self.name(), format!("value must be a non-negative integer, got {value}")))
            }
        };
        match self {
            Factor::Cl => cfg.cnn_layers = [count()?; NUM_STAGES],
            Factor::Tb => cfg.transformer_blocks = [count()?; NUM_STAGES],
            Factor::Nt => {
                let tokens = count()?;
                let side = (tokens as f64).sqrt().round() as usize;
                if side == 0 || side * side != tokens || cfg.image_size % side != 0 {
                    return Err(Error::invalid(
                        "NT",
                        format!(
                            "{tokens} tokens is not a square grid dividing the {0}x{0} image",
                            cfg.image_size
                        ),
                    ));
                }
                cfg.patch = cfg.image_size / side;
            }
            Factor::Delta => cfg.delta = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("factor", format!("unknown factor `{s}`, expected one of CL, TB, NT, delta")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub factor: Factor,
    pub value: f64,
    pub param_count: usize,
    pub final_loss: f64,
    pub acc_total: f64,
    pub acc_small: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_large: Option<f64>,
    /// `acc_total / acc_small`
    pub ratio: Option<f64>,
}

/// Everything a sweep point needs besides the factor value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepBase {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    /// Seeds model initialization and task generation.
    pub seed: u64,
}

/// A sweep that stopped at a failing point. `records` holds every point
/// that completed.
#[derive(Debug, thiserror::Error)]
#[error("sweep point {factor}={value} failed: {source}")]
pub struct SweepFailure {
    pub factor: Factor,
    pub value: f64,
    pub records: Vec<SweepRecord>,
    #[source]
    pub source: Error,
}

/// Build, train and evaluate one model with `factor` set to `value`.
pub fn run_point(factor: Factor, value: f64, base: &SweepBase, task: &SyntheticTask) -> Result<SweepRecord> {
    let cfg = factor.apply(&base.model, value)?;
    let mut model = Model::build(cfg, base.seed)?;
    let history = train(&mut model, task, &base.train, None)?;
    let last = history.final_eval();
    Ok(SweepRecord {
        factor,
        value,
        param_count: model.count_backbone_params(),
        final_loss: last.loss,
        acc_total: last.metrics.total,
        acc_small: last.metrics.small,
        acc_medium: last.metrics.medium,
        acc_large: last.metrics.large,
        ratio: last.metrics.ratio,
    })
}

/// Train one model per value, in parallel. Records come back in ascending
/// value order regardless of scheduling.
pub fn run_sweep(factor: Factor, values: &[f64], base: &SweepBase) -> std::result::Result<Vec<SweepRecord>, SweepFailure> {
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let fail = |value: f64, records: Vec<SweepRecord>, source: Error| SweepFailure { factor, value, records, source };
    let task = gen_synthetic(&base.task, base.seed).map_err(|e| fail(f64::NAN, Vec::new(), e))?;
    let results: Vec<Result<SweepRecord>> = values.par_iter().map(|&v| run_point(factor, v, base, &task)).collect();

    let mut records = Vec::with_capacity(values.len());
    let mut first_error = None;
    for (&v, r) in values.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if first_error.is_none() => first_error = Some((v, e)),
            Err(_) => {}
        }
    }
    match first_error {
        None => Ok(records),
        Some((value, source)) => Err(fail(value, records, source)),
    }
}

/// Pearson correlation between factor value and small-band accuracy.
/// `None` if fewer than two records have a small-band accuracy or either
/// side is constant.
pub fn small_band_correlation(records: &[SweepRecord]) -> Result<Option<f64>> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = records.iter().filter_map(|r| r.acc_small.map(|a| (r.value, a))).unzip();
    if xs.len() < 2 {
        return Ok(None);
    }
    pearson(&xs, &ys)
}

/// Per-seed small-band correlations and their median.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedCorrelations {
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub median: Option<f64>,
}

pub fn correlation_over_seeds(factor: Factor, values: &[f64], base: &SweepBase, seeds: &[u64]) -> Result<SeedCorrelations> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let b = SweepBase { seed, train: TrainConfig { seed, ..base.train.clone() }, ..base.clone() };
        let records = run_sweep(factor, values, &b).map_err(|f| f.source)?;
        per_seed.push((seed, small_band_correlation(&records)?));
    }
    let finite: Vec<f64> = per_seed.iter().filter_map(|&(_, c)| c).collect();
    Ok(SeedCorrelations { median: median(&finite), per_seed })
}
