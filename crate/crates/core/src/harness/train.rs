//! Mini-batch training with SGD or AdamW.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SyntheticTask;
use super::stats::{stratified_metrics, StratifiedMetrics};
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::io::checkpoint::save_checkpoint;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// SGD momentum; ignored by AdamW.
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Evaluate on the full task every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::AdamW,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            momentum: 0.9,
            steps: 2000,
            batch: 16,
            seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train config", d));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of optimizer steps taken before this evaluation.
    pub step: usize,
    pub loss: f64,
    pub metrics: StratifiedMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mini-batch loss before each step.
    pub losses: Vec<f64>,
    /// Full-task evaluations; always starts at step 0 and ends at the last step.
    pub evals: Vec<EvalPoint>,
}

impl TrainHistory {
    pub fn final_eval(&self) -> &EvalPoint {
        self.evals.last().expect("history always has a final evaluation")
    }
}

/// Mean loss and stratified accuracy of `model` over every sample of `task`.
pub fn evaluate(model: &Model<f64>, task: &SyntheticTask) -> Result<(f64, StratifiedMetrics)> {
    let mut preds = Vec::with_capacity(task.len());
    let mut total = 0.0;
    let all: Vec<usize> = (0..task.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (images, labels) = task.batch(chunk);
        let (_, logits) = model.infer(&images)?;
        let c = logits.shape()[1];
        for (row, &y) in logits.data().chunks(c).zip(&labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            preds.push(argmax(row));
        }
    }
    let metrics = stratified_metrics(&preds, &task.labels(), &task.bands())?;
    Ok((total / task.len() as f64, metrics))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Reshuffles once per pass over the data; a batch at least the size of the
/// task always takes every sample in order.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Batches {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.batch == self.order.len() {
            return self.order.clone();
        }
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

struct OptimizerState {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl OptimizerState {
    fn new() -> Self {
        OptimizerState {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            t: 0,
        }
    }

    /// New parameter values, or `None` if any would be non-finite.
    fn propose(
        &mut self,
        cfg: &TrainConfig,
        model: &Model<f64>,
        grads: &BTreeMap<String, Tensor<f64>>,
    ) -> Result<Option<Vec<(String, Vec<f64>)>>> {
        self.t += 1;
        let lr = cfg.learning_rate;
        let mut out = Vec::with_capacity(grads.len());
        for (path, p) in model.params().iter() {
            let g = grads
                .get(path)
                .ok_or_else(|| Error::UnknownParameter(path.to_string()))?
                .data();
            let m = self.first.entry(path.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let mut next = p.data().to_vec();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for ((w, &gi), mi) in next.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = cfg.momentum * *mi + gi + cfg.weight_decay * *w;
                        *w -= lr * *mi;
                    }
                }
                Optimizer::AdamW => {
                    let v = self.second.entry(path.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - BETA1.powi(self.t);
                    let c2 = 1.0 - BETA2.powi(self.t);
                    for (((w, &gi), mi), vi) in next.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        let step = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                        *w -= lr * (step + cfg.weight_decay * *w);
                    }
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            out.push((path.to_string(), next));
        }
        Ok(Some(out))
    }
}

fn diverged(model: &Model<f64>, checkpoint: Option<&Path>, step: usize, loss: f64) -> Error {
    if let Some(path) = checkpoint {
        if let Err(e) = save_checkpoint(model, path) {
            return e;
        }
    }
    Error::Diverged { step, loss }
}

/// Train `model` in place on `task`.
///
/// The final parameters are written to `checkpoint` when given. If the loss
/// or an update turns non-finite, training stops with [`Error::Diverged`]
/// and the last finite parameters are written instead.
pub fn train(
    model: &mut Model<f64>,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mc = model.config();
    if mc.num_classes != task.config.num_classes {
        return Err(Error::invalid(
            "train",
            format!("model head has {} classes, task has {}", mc.num_classes, task.config.num_classes),
        ));
    }
    if mc.image_size != task.config.image_size {
        return Err(Error::invalid(
            "train",
            format!("model expects {0}x{0} images, task has {1}x{1}", mc.image_size, task.config.image_size),
        ));
    }

    let mut batches = Batches::new(task.len(), cfg.batch, cfg.seed);
    let mut state = OptimizerState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let (loss, metrics) = evaluate(model, task)?;
    evals.push(EvalPoint { step: 0, loss, metrics });

    for step in 0..cfg.steps {
        let (images, labels) = task.batch(&batches.next());
        let (loss, grads, _) = model.loss_and_grads(&images, &labels)?;
        if !loss.is_finite() {
            return Err(diverged(model, checkpoint, step, loss));
        }
        losses.push(loss);
        match state.propose(cfg, model, &grads)? {
            Some(update) => {
                for (path, data) in update {
                    model.params_mut().get_mut(&path)?.data_mut().copy_from_slice(&data);
                }
            }
            None => return Err(diverged(model, checkpoint, step, f64::NAN)),
        }
        let done = step + 1;
        if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let (loss, metrics) = evaluate(model, task)?;
            evals.push(EvalPoint { step: done, loss, metrics });
        }
    }
    if let Some(path) = checkpoint {
        save_checkpoint(model, path)?;
    }
    Ok(TrainHistory { losses, evals })
}
