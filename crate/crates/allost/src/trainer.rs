//! Training loop: token-weighted batch loss, clipped Adam under the Noam
//! schedule, periodic validation, best-k checkpoint retention and averaging.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use allost_core::model::{AlloSt, ParameterSet, Session, Source};
use allost_core::optim::{adam_step, clip_global_norm, noam_lr, AdamConfig, AdamState};
use allost_core::Tensor;
use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datapipe::{make_batches, Batch, Example, Tokenizers};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub noam_scale: f64,
    /// Utterances per batch.
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub keep_best: usize,
    pub clip_norm: f64,
    /// Phone BPE-dropout applied while training.
    pub phone_dropout: f64,
    /// Steps between validations; 0 validates at the end of every epoch.
    pub valid_interval: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 1000,
            noam_scale: 1.0,
            batch_size: 32,
            max_steps: 20_000,
            seed: 1,
            keep_best: 5,
            clip_norm: 5.0,
            phone_dropout: 0.1,
            valid_interval: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        if self.keep_best == 0 {
            return Err(Error::config("keep_best must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.phone_dropout) {
            return Err(Error::config(format!("phone_dropout {} outside [0, 1]", self.phone_dropout)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One line of `metrics.jsonl`, written at every validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    /// Token-weighted mean training loss since the previous record.
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Teacher-forced token accuracy on the validation set.
    pub valid_accuracy: f64,
    pub lr: f64,
}

/// Teacher-forced loss and token accuracy over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeptCheckpoint {
    pub step: u64,
    pub valid_loss: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean of the kept checkpoints.
    pub averaged: ParameterSet<f32>,
    /// Weights after the final step.
    pub last: ParameterSet<f32>,
    /// Sorted by validation loss, best first.
    pub kept: Vec<KeptCheckpoint>,
    pub metrics: Vec<MetricRecord>,
    pub averaged_path: PathBuf,
}

/// SplitMix64 finalizer, used to derive per-example seeds.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dropout stream for batch member `k` at `step`.
pub fn example_rng(seed: u64, step: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(step ^ mix(k as u64))))
}

fn phone_slice(model: &AlloSt, phones: &[usize]) -> Option<Vec<usize>> {
    model.config().fusion_mode.uses_phones().then(|| phones.to_vec())
}

pub fn evaluate(model: &AlloSt, params: &ParameterSet<f32>, examples: &[Example], tok: &Tokenizers) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for ex in examples {
        let phones = phone_slice(model, &tok.encode_phones(ex, 0.0, &mut rng)?);
        let target = tok.encode_target(ex)?;
        let src = Source::new(&ex.feats, phones.as_deref());
        let mut s = Session::new(params);
        let (_, r) = model.loss(&mut s, &src, &target)?;
        loss += r.loss * r.tokens as f64;
        correct += r.correct;
        tokens += r.tokens;
    }
    if tokens == 0 {
        return Err(Error::data("evaluation set is empty"));
    }
    Ok(EvalReport {
        loss: loss / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

fn add_into(acc: &mut [Option<Tensor<f32>>], grads: Vec<Option<Tensor<f32>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            (_, None) => {}
        }
    }
}

/// Per-step statistics.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

/// One optimizer update on `batch`. Each member's mean loss is weighted by
/// its share of the batch's target tokens, so the update follows the
/// token-averaged batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &AlloSt,
    params: &mut ParameterSet<f32>,
    state: &mut AdamState<f32>,
    batch: &Batch,
    examples: &[Example],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let lr = noam_lr(step, model.config().d_model, cfg.warmup_steps, cfg.noam_scale)?;
    let items: Vec<_> = (0..batch.len()).map(|k| batch.item(k)).collect();
    let total: usize = items.iter().map(|i| i.target.len() + 1).sum();
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
    let mut loss_sum = 0.0;
    for (k, item) in items.iter().enumerate() {
        let mut rng = example_rng(cfg.seed, step, k);
        let phones = phone_slice(model, &item.phones);
        let src = Source::new(&item.feats, phones.as_deref());
        let mut s = Session::training(params, model.config().dropout, &mut rng);
        let (loss, report) = model.loss(&mut s, &src, &item.target)?;
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at step {step} on {} (lr {lr:.3e})",
                report.loss, examples[item.index].id
            )));
        }
        let weight = report.tokens as f32 / total as f32;
        let scaled = s.graph.scale(loss, weight);
        let mut grads = s.graph.backward(scaled)?;
        add_into(&mut acc, s.param_grads(&mut grads));
        loss_sum += report.loss * report.tokens as f64;
    }
    let grad_norm = clip_global_norm(&mut acc, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at step {step} (lr {lr:.3e})")));
    }
    adam_step(params, &acc, state, lr, &cfg.adam())?;
    Ok(StepReport {
        loss: loss_sum / total as f64,
        tokens: total,
        grad_norm,
    })
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:04}.alst")
}

/// Inserts a new checkpoint and deletes whichever file falls out of the best `keep`.
fn retain_best(kept: &mut Vec<KeptCheckpoint>, new: KeptCheckpoint, keep: usize) -> Result<()> {
    kept.push(new);
    kept.sort_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.step.cmp(&b.step)));
    while kept.len() > keep {
        let worst = kept.pop().expect("non-empty");
        fs::remove_file(&worst.path).at(&worst.path)?;
    }
    Ok(())
}

/// Trains from `params`, writing `metrics.jsonl`, `checkpoints/step<N>.alst`
/// and `averaged.alst` under `run_dir`.
pub fn train(
    model: &AlloSt,
    mut params: ParameterSet<f32>,
    train_set: &[Example],
    valid_set: &[Example],
    tok: &Tokenizers,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(&params)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::data("training and validation sets must be non-empty"));
    }
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).at(&ckpt_dir)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut log = File::create(&metrics_path).at(&metrics_path)?;

    let mut state = AdamState::new(&params);
    let mut kept: Vec<KeptCheckpoint> = Vec::new();
    let mut metrics = Vec::new();
    let (mut window_loss, mut window_tokens) = (0.0, 0usize);
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut last_validated = 0u64;

    let mut validate = |params: &ParameterSet<f32>,
                        step: u64,
                        epoch: u64,
                        window_loss: &mut f64,
                        window_tokens: &mut usize,
                        kept: &mut Vec<KeptCheckpoint>|
     -> Result<()> {
        let eval = evaluate(model, params, valid_set, tok)?;
        if !eval.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at step {step}")));
        }
        let record = MetricRecord {
            step,
            epoch,
            train_loss: if *window_tokens > 0 { *window_loss / *window_tokens as f64 } else { f64::NAN },
            valid_loss: eval.loss,
            valid_accuracy: eval.accuracy,
            lr: noam_lr(step.max(1), model.config().d_model, cfg.warmup_steps, cfg.noam_scale)?,
        };
        *window_loss = 0.0;
        *window_tokens = 0;
        info!(
            "step {step} epoch {epoch}: train {:.4} valid {:.4} acc {:.3}",
            record.train_loss, record.valid_loss, record.valid_accuracy
        );
        serde_json::to_writer(&mut log, &record).expect("metric serializes");
        log.write_all(b"\n").at(&metrics_path)?;
        metrics.push(record);

        let path = ckpt_dir.join(checkpoint_name(step));
        checkpoint::save(&path, params)?;
        retain_best(
            kept,
            KeptCheckpoint {
                step,
                valid_loss: eval.loss,
                path,
            },
            cfg.keep_best,
        )
    };

    'outer: while step < cfg.max_steps {
        let batches = make_batches(train_set, tok, cfg.batch_size, cfg.phone_dropout, cfg.seed, epoch)?;
        for batch in &batches {
            step += 1;
            let r = train_step(model, &mut params, &mut state, batch, train_set, cfg, step)?;
            debug!("step {step}: loss {:.4} |g| {:.3}", r.loss, r.grad_norm);
            window_loss += r.loss * r.tokens as f64;
            window_tokens += r.tokens;
            if cfg.valid_interval > 0 && step % cfg.valid_interval == 0 {
                validate(&params, step, epoch, &mut window_loss, &mut window_tokens, &mut kept)?;
                last_validated = step;
            }
            if step >= cfg.max_steps {
                break 'outer;
            }
        }
        if cfg.valid_interval == 0 {
            validate(&params, step, epoch, &mut window_loss, &mut window_tokens, &mut kept)?;
            last_validated = step;
        }
        epoch += 1;
    }
    if last_validated != step {
        validate(&params, step, epoch, &mut window_loss, &mut window_tokens, &mut kept)?;
    }

    let paths: Vec<&Path> = kept.iter().map(|k| k.path.as_path()).collect();
    let averaged = checkpoint::average_checkpoints(&paths)?;
    let averaged_path = run_dir.join("averaged.alst");
    checkpoint::save(&averaged_path, &averaged)?;
    Ok(TrainOutcome {
        averaged,
        last: params,
        kept,
        metrics,
        averaged_path,
    })
}
