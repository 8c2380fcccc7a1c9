//! Heatmap regression training on synthetic samples.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::heatmap::{decode, flip_average, gaussian_target, mse_loss, pckh, KeypointSet, PckhScores};
use crate::model::{HeatmapModel, Model};
use crate::rng::SeedTree;
use crate::synth::{flip_pairs, SynthSample};
use crate::tensor::{lit, Element, Tensor};

/// Heatmaps are a quarter of the image size.
pub const HEATMAP_STRIDE: usize = 4;
pub const TARGET_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Adam,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Samples per step, taken cyclically from the training set.
    pub batch: usize,
    /// Size of the synthetic training set.
    pub samples: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { seed: 0, steps: 300, lr: 1e-3, batch: 16, samples: 16, optimizer: Optimizer::Adam }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.samples == 0 {
            return Err(Error::config("train.batch and train.samples must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be finite and ≥ 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Seeds for model initialisation and the training set, both derived from `train.seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub model: u64,
    pub data: u64,
}

impl RunSeeds {
    pub fn new(root: u64) -> Self {
        let tree = SeedTree::new(root);
        RunSeeds { model: tree.derive("model"), data: tree.derive("synth") }
    }
}

/// Heatmap targets and visibility for one sample at the model's output resolution.
pub fn sample_target<T: Element>(s: &SynthSample, k: usize) -> Result<(Tensor<T>, Vec<bool>)> {
    let (h, w) = (s.image.shape()[1] / HEATMAP_STRIDE, s.image.shape()[2] / HEATMAP_STRIDE);
    let kps = s.keypoints_at_stride(HEATMAP_STRIDE);
    Ok((gaussian_target(&kps, (k, h, w), TARGET_SIGMA)?, kps.visibility()))
}

/// Loss and per-parameter gradients of one sample.
fn sample_grads<T: Element>(
    model: &Model<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    visible: &[bool],
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    let g = Graph::new();
    let x = g.constant(image.clone());
    let pred = model.arch.forward(&g, &model.params, x)?;
    let t = g.constant(target.clone());
    let loss = mse_loss(&g, pred, t, visible)?;
    let value = g.value(loss).item()?.to_f64_lossy();
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

/// Mean loss over `data` without updating anything.
pub fn evaluate_loss<T: Element>(model: &Model<T>, data: &[SynthSample]) -> Result<f64> {
    let k = model.config().keypoints;
    let losses = data
        .par_iter()
        .map(|s| {
            let (target, vis) = sample_target::<T>(s, k)?;
            let g = Graph::new();
            let x = g.constant(s.image_as());
            let pred = model.arch.forward(&g, &model.params, x)?;
            let t = g.constant(target);
            let l = mse_loss(&g, pred, t, &vis)?;
            let v = g.value(l).item()?.to_f64_lossy();
            Ok(v)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

struct OptimState<T> {
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    t: i32,
}

fn apply_update<T: Element>(
    model: &mut Model<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut OptimState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let lr: T = lit(cfg.lr);
    let (b1, b2, eps): (T, T, T) = (lit(0.9), lit(0.999), lit(1e-8));
    let c1 = T::one() - b1.powi(state.t);
    let c2 = T::one() - b2.powi(state.t);
    for (name, p) in model.params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
        match cfg.optimizer {
            Optimizer::Adam => {
                let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
                for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (T::one() - b1) * gi;
                    *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
            Optimizer::Momentum => {
                for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
                    *mi = b1 * *mi + gi;
                    *w -= lr * *mi;
                }
            }
        }
        if !p.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}` after update {}", state.t)));
        }
    }
    Ok(())
}

/// Runs `cfg.steps` updates. Entry `i` of the returned history is the mean batch
/// loss after `i` updates, so entry 0 is the untouched model and the history has
/// `steps + 1` entries.
pub fn train_loop<T: Element>(
    model: &mut Model<T>,
    data: &[SynthSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let k = model.config().keypoints;
    let prepared = data
        .iter()
        .map(|s| {
            let (t, v) = sample_target::<T>(s, k)?;
            Ok((s.image_as::<T>(), t, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = cfg.batch.min(prepared.len());
    let mut state = OptimState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 };
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|i| (step * batch + i) % prepared.len()).collect();
        let results = idx
            .par_iter()
            .map(|&i| sample_grads(model, &prepared[i].0, &prepared[i].1, &prepared[i].2))
            .collect::<Result<Vec<_>>>()?;
        // reduce in sample order so the sum does not depend on scheduling
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let inv: T = lit(1.0 / batch as f64);
        for (l, gs) in results {
            loss += l / batch as f64;
            for (name, g) in gs {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * inv),
                    None => {
                        grads.insert(name, g.into_iter().map(|v| v * inv).collect());
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        history.push(loss);
        on_step(step, loss);
        if step < cfg.steps {
            apply_update(model, &grads, &mut state, cfg)?;
        }
    }
    Ok(history)
}

/// Result of scoring a model on synthetic samples.
#[derive(Clone, Debug)]
pub struct EvalReport<T> {
    pub scores: PckhScores,
    pub predictions: Vec<KeypointSet>,
    pub heatmaps: Vec<Tensor<T>>,
}

/// PCKh@`alpha` in heatmap coordinates, optionally with flip-test averaging.
pub fn evaluate<T: Element, M: HeatmapModel<T> + Sync>(
    model: &M,
    data: &[SynthSample],
    keypoints: usize,
    alpha: f64,
    flip: bool,
) -> Result<EvalReport<T>> {
    let pairs = flip_pairs(keypoints);
    let heatmaps = data
        .par_iter()
        .map(|s| {
            let img = s.image_as::<T>();
            if flip {
                flip_average(model, &img, &pairs)
            } else {
                model.predict(&img)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions = heatmaps.iter().map(decode).collect::<Result<Vec<_>>>()?;
    let gts: Vec<KeypointSet> = data.iter().map(|s| s.keypoints_at_stride(HEATMAP_STRIDE)).collect();
    let scores = pckh(&predictions, &gts, alpha)?;
    Ok(EvalReport { scores, predictions, heatmaps })
}
