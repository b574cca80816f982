//! Losses, optimisation loop, checkpoints and the gradient-check harness.
//!
//! Batches are processed one utterance per graph and the per-utterance
//! gradients are summed in batch order, which is equivalent to right-padding
//! with key and frame masks. The cross-entropy is averaged over all frames of
//! the batch and the diagonal loss over its utterances, so
//! `loss = L_pred + λ · L_diag` is independent of batch composition order.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointManifest, MANIFEST_FILE};
pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, grad_check_config, GradCheckExample,
    GradCheckOptions, GradCheckReport, TensorCheck,
};
pub use loss::{
    cross_entropy_loss, cross_entropy_sum, cross_entropy_with_grad, diag_loss, diag_loss_with_grad,
    diagonal_band, total_loss, CrossEntropySum, LossComponents,
};
pub use optim::{clip_global_norm, global_norm, Adam};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datamodel::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::eval;
use crate::matrix::{Matrix, Real};
use crate::model::{self, forward_graph, Mode, ModelConfig, ModelParams};
use crate::seed;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_DROPOUT: u64 = 13;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Bandwidth `g` of the diagonal constraint.
    pub diag_bandwidth: f64,
    /// Weight `λ` of the diagonal constraint.
    pub diag_weight: f64,
    pub grad_clip_norm: f64,
    /// Snapshot interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Held-out evaluation interval in steps.
    pub log_every: u64,
    /// Maximum number of held-out utterances scored at each log step.
    pub eval_utts: usize,
    /// Stop once held-out unit accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            diag_bandwidth: 0.2,
            diag_weight: 1.0,
            grad_clip_norm: 1.0,
            checkpoint_every: 0,
            log_every: 50,
            eval_utts: 32,
            target_accuracy: None,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.diag_bandwidth > 0.0 && self.diag_bandwidth.is_finite()) {
            return fail("diag_bandwidth must be positive");
        }
        if !(self.diag_weight >= 0.0 && self.diag_weight.is_finite()) {
            return fail("diag_weight must be non-negative");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm < 0.0 {
            return fail("grad_clip_norm must be non-negative");
        }
        if self.log_every == 0 {
            return fail("log_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Loss and gradients of one utterance.
pub struct SequenceGradients<T> {
    pub cross_entropy: CrossEntropySum,
    pub l_diag: f64,
    pub diag_score: f64,
    pub grads: Vec<Matrix<T>>,
}

/// Forward and backward pass for one utterance. The objective is
/// `pred_scale · Σ_t CE_t + diag_scale · L_diag`.
pub fn sequence_gradients<T: Real>(
    params: &ModelParams<T>,
    utt: &Utterance,
    n: usize,
    pred_scale: f64,
    diag_scale: f64,
    diag_bandwidth: f64,
    mode: &mut Mode<'_>,
) -> Result<SequenceGradients<T>> {
    let units = utt
        .units
        .as_ref()
        .ok_or_else(|| Error::validation(format!("utterance {} has no target units", utt.id)))?;
    if units.len() != n * utt.video.len() {
        return Err(Error::validation(format!(
            "utterance {}: {} units for {} frames at n={n}",
            utt.id,
            units.len(),
            utt.video.len()
        )));
    }
    let mut g = Graph::new();
    let trace = forward_graph(&mut g, params, &utt.phonemes, &utt.video, n, mode)?;
    let (ce, dlogits) =
        cross_entropy_sum(g.value(trace.logits), units.units(), None, Some(pred_scale))?;
    let attention = g.value(trace.attention);
    let (l_diag, mut dattn) = diag_loss_with_grad(attention, diag_bandwidth)?;
    let diag_score = eval::diagonality_score_with(attention, diag_bandwidth)?;
    let mut seeds = vec![(trace.logits, dlogits.expect("gradient requested"))];
    if diag_scale != 0.0 {
        dattn.scale_assign(T::from_f64_lossy(diag_scale));
        seeds.push((trace.attention, dattn));
    }
    let back = g.backward(&seeds);
    let mut grads = params.zeros_like();
    back.accumulate_params(&g, &mut grads);
    Ok(SequenceGradients {
        cross_entropy: ce,
        l_diag,
        diag_score,
        grads,
    })
}

/// Metrics of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub l_pred: f64,
    pub l_diag: f64,
    pub grad_norm: f64,
    /// Frame accuracy on the training batch (dropout active).
    pub batch_acc: f64,
}

/// One gradient step over `batch`: backprop, global-norm clipping, Adam update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    batch: &[&Utterance],
    n: usize,
    cfg: &TrainConfig,
    opt: &mut Adam<f32>,
    dropout_seed: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let total_frames: usize = batch.iter().map(|u| u.video.len() * n).sum();
    let pred_scale = 1.0 / total_frames as f64;
    let diag_scale = cfg.diag_weight / batch.len() as f64;
    let shared: &ModelParams<f32> = params;
    let results: Vec<SequenceGradients<f32>> = batch
        .par_iter()
        .enumerate()
        .map(|(j, utt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(dropout_seed, 0, j as u64));
            sequence_gradients(
                shared,
                utt,
                n,
                pred_scale,
                diag_scale,
                cfg.diag_bandwidth,
                &mut Mode::Train(&mut rng),
            )
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    let mut ce_sum = 0.0;
    let mut correct = 0;
    let mut diag_sum = 0.0;
    for r in &results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            acc.add_assign(g);
        }
        ce_sum += r.cross_entropy.sum;
        correct += r.cross_entropy.correct;
        diag_sum += r.l_diag;
    }
    for (name, g) in params.names().iter().zip(&grads) {
        if !g.is_finite() {
            return Err(Error::numeric(name.clone(), "non-finite gradient"));
        }
    }
    let l_pred = ce_sum / total_frames as f64;
    let l_diag = diag_sum / batch.len() as f64;
    let loss = l_pred + cfg.diag_weight * l_diag;
    if !loss.is_finite() {
        return Err(Error::numeric("loss", "non-finite training loss"));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    opt.update(params.tensors_mut(), &grads, cfg.learning_rate);
    Ok(StepMetrics {
        step: opt.step,
        loss,
        l_pred,
        l_diag,
        grad_norm,
        batch_acc: correct as f64 / total_frames as f64,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub l_pred: f64,
    pub l_diag: f64,
    /// Unit accuracy on the held-out slice.
    pub acc: f64,
    /// Mean aligner diagonality on the held-out slice.
    pub diag_score: f64,
}

/// Held-out accuracy (pooled over frames) and mean diagonality of `params` on `utts`.
pub fn evaluate_slice(
    params: &ModelParams<f32>,
    utts: &[&Utterance],
    n: usize,
    bandwidth: f64,
) -> Result<(f64, f64)> {
    if utts.is_empty() {
        return Err(Error::validation("evaluation slice is empty"));
    }
    let per_utt: Vec<(usize, usize, f64)> = utts
        .par_iter()
        .map(|utt| {
            let trace = model::forward(params, &utt.phonemes, &utt.video, n, &mut Mode::Eval)?;
            let gt = utt.units.as_ref().ok_or_else(|| {
                Error::validation(format!("utterance {} has no ground-truth units", utt.id))
            })?;
            let pred = trace.logits.argmax_rows();
            if pred.len() != gt.len() {
                return Err(Error::validation(format!(
                    "utterance {}: predicted {} units, ground truth has {}",
                    utt.id,
                    pred.len(),
                    gt.len()
                )));
            }
            let correct = pred.iter().zip(gt.units()).filter(|(a, b)| a == b).count();
            let score = eval::diagonality_score_with(&trace.attention, bandwidth)?;
            Ok((correct, pred.len(), score))
        })
        .collect::<Result<_>>()?;
    let correct: usize = per_utt.iter().map(|r| r.0).sum();
    let frames: usize = per_utt.iter().map(|r| r.1).sum();
    let diag = per_utt.iter().map(|r| r.2).sum::<f64>() / per_utt.len() as f64;
    Ok((correct as f64 / frames as f64, diag))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricsRecord>,
    pub last_step: Option<StepMetrics>,
    pub stopped_early: bool,
}

/// Owns the mutable training state for one run.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    cfg: TrainConfig,
    params: ModelParams<f32>,
    adam: Adam<f32>,
    n: usize,
    train_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
    perm_epoch: Option<u64>,
    perm: Vec<usize>,
    last: Option<StepMetrics>,
    resumed: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(model_cfg, seed::derive(cfg.seed, STREAM_INIT, 0))?;
        let adam = Adam::new(
            params.tensors(),
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        Self::with_state(corpus, params, adam, cfg, false)
    }

    /// Continues from a checkpoint's parameters and optimiser state.
    pub fn resume(corpus: &'a Corpus, checkpoint: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let adam = checkpoint
            .optimizer
            .ok_or_else(|| Error::validation("checkpoint has no optimizer state to resume from"))?;
        Self::with_state(corpus, checkpoint.params, adam, cfg, true)
    }

    fn with_state(
        corpus: &'a Corpus,
        params: ModelParams<f32>,
        adam: Adam<f32>,
        cfg: &TrainConfig,
        resumed: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::validation("corpus is empty"));
        }
        let n = corpus.upsample_ratio()?;
        let mc = params.config();
        let meta = &corpus.metadata;
        if mc.vocab_size != meta.vocab_size
            || mc.num_units != meta.num_units
            || mc.video_dim != meta.video_dim
        {
            return Err(Error::validation(format!(
                "model config (V_p={}, K={}, d_v={}) does not match corpus (V_p={}, K={}, d_v={})",
                mc.vocab_size,
                mc.num_units,
                mc.video_dim,
                meta.vocab_size,
                meta.num_units,
                meta.video_dim
            )));
        }
        let train_idx = corpus.split_indices("train");
        if train_idx.is_empty() {
            return Err(Error::validation(
                "corpus has no utterances in the train split",
            ));
        }
        let mut holdout_idx: Vec<usize> = (0..corpus.len())
            .filter(|i| corpus.splits[*i] != "train")
            .collect();
        if holdout_idx.is_empty() {
            holdout_idx = train_idx.clone();
        }
        holdout_idx.truncate(cfg.eval_utts.max(1));
        Ok(Self {
            corpus,
            cfg: cfg.clone(),
            params,
            adam,
            n,
            train_idx,
            holdout_idx,
            perm_epoch: None,
            perm: Vec::new(),
            last: None,
            resumed,
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn upsample_ratio(&self) -> usize {
        self.n
    }

    /// Utterance indices of the batch used at `step` (0-based). Batches
    /// walk a seeded per-epoch permutation of the train split.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let len = self.train_idx.len() as u64;
        let bs = self.cfg.batch_size as u64;
        (0..bs)
            .map(|j| {
                let pos = step * bs + j;
                let epoch = pos / len;
                if self.perm_epoch != Some(epoch) {
                    let mut perm = self.train_idx.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                        self.cfg.seed,
                        STREAM_SHUFFLE,
                        epoch,
                    ));
                    perm.shuffle(&mut rng);
                    self.perm = perm;
                    self.perm_epoch = Some(epoch);
                }
                self.perm[(pos % len) as usize]
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.adam.step;
        let idx = self.batch_indices(step);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &self.corpus.utterances[i]).collect();
        let dropout_seed = seed::derive(self.cfg.seed, STREAM_DROPOUT, step);
        let metrics = train_step(
            &mut self.params,
            &batch,
            self.n,
            &self.cfg,
            &mut self.adam,
            dropout_seed,
        )?;
        self.last = Some(metrics);
        Ok(metrics)
    }

    /// Accuracy and diagonality on the held-out slice.
    pub fn evaluate_holdout(&self) -> Result<(f64, f64)> {
        let utts: Vec<&Utterance> = self
            .holdout_idx
            .iter()
            .map(|&i| &self.corpus.utterances[i])
            .collect();
        evaluate_slice(&self.params, &utts, self.n, self.cfg.diag_bandwidth)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: CheckpointManifest {
                config: self.params.config().clone(),
                step: self.adam.step,
                seed: self.cfg.seed,
                loss: self.last.map(|m| m.loss),
                tensors: self.params.names().to_vec(),
                train_config: Some(self.cfg.clone()),
                has_optimizer: true,
            },
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }

    /// Runs until `max_steps` (or the accuracy target), logging held-out
    /// metrics every `log_every` steps. With `out`, writes `metrics.jsonl`,
    /// periodic snapshots and the final checkpoint there.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(self.resumed)
                    .truncate(!self.resumed)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, file))
            }
            None => None,
        };
        let mut history = Vec::new();
        let mut stopped_early = false;
        while self.adam.step < self.cfg.max_steps {
            let m = self.step()?;
            let step = self.adam.step;
            if step.is_multiple_of(self.cfg.log_every) || step == self.cfg.max_steps {
                let (acc, diag_score) = self.evaluate_holdout()?;
                let record = MetricsRecord {
                    step,
                    loss: m.loss,
                    l_pred: m.l_pred,
                    l_diag: m.l_diag,
                    acc,
                    diag_score,
                };
                log::info!(
                    "step {step}: loss {:.4} (pred {:.4}, diag {:.4}) held-out acc {:.4} diag {:.4}",
                    m.loss, m.l_pred, m.l_diag, acc, diag_score
                );
                if let Some((path, file)) = log.as_mut() {
                    let line =
                        serde_json::to_string(&record).map_err(|e| Error::json(&*path, e))?;
                    writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
                }
                history.push(record);
                if self.cfg.target_accuracy.is_some_and(|t| acc >= t) {
                    stopped_early = true;
                    break;
                }
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.checkpoint()
                        .save(dir.join(format!("step-{step:06}")))?;
                }
            }
        }
        let checkpoint = self.checkpoint();
        if let Some(dir) = out {
            checkpoint.save(dir)?;
        }
        Ok(TrainOutcome {
            checkpoint,
            history,
            last_step: self.last,
            stopped_early,
        })
    }
}

/// Trains a fresh model on the corpus's train split.
pub fn train(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    Trainer::new(corpus, model_cfg, train_cfg)?.run(out)
}

#[cfg(test)]
mod tests;
