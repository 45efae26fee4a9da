//! Multi-task training: joint diffusion and noise-classification losses with
//! adaptive-moment optimization, an optional classification-only pretraining
//! phase, and an optional frozen encoder.
//!
//! Batch items run on independent tapes (parallel when the `parallel` feature
//! is on); per-item gradients are collected in index order and reduced
//! sequentially, so results are bit-identical for any thread count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioner::{cross_entropy, encode, InjectionMode};
use crate::datagen::Record;
use crate::denoiser::predict_eps;
use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::{streams, Rng};
use crate::schedule::Schedule;
use crate::tape::{backward, watch, with_tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_nc: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub divergence_limit: f64,
    pub pretrain_nc: bool,
    pub pretrain_epochs: usize,
    pub freeze_encoder: bool,
    pub injection: InjectionMode,
    pub use_conditioner: bool,
    /// Random circular shift and gain on the encoder input during training;
    /// noise-family identity is invariant to both.
    pub augment_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_nc: 0.3,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            divergence_limit: 1e6,
            pretrain_nc: true,
            pretrain_epochs: 60,
            freeze_encoder: false,
            injection: InjectionMode::Addition,
            use_conditioner: true,
            augment_encoder: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda_nc < 0.0 {
            return Err(Error::Config(format!("lambda_nc must be >= 0, got {}", self.lambda_nc)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    pub diff_loss: f64,
    pub nc_loss: f64,
    pub nc_accuracy: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// Final joint-phase training classification accuracy, if any.
    pub fn final_nc_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.nc_accuracy)
    }

    pub fn final_diff_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .rev()
            .find(|e| e.phase == Phase::Joint)
            .map(|e| e.diff_loss)
    }
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub diff_loss: f64,
    pub nc_loss: f64,
    pub combined_loss: f64,
    pub nc_correct: usize,
    pub batch_len: usize,
    pub grad_norm: f64,
}

struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(cfg: &TrainConfig, sizes: &[usize]) -> Adam {
        Adam {
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    fn update(&mut self, slot: usize, data: &mut [f64], grad: &[f64]) {
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..data.len() {
            m[i] = self.b1 * m[i] + (1.0 - self.b1) * grad[i];
            v[i] = self.b2 * v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Mutable training state across steps of one phase.
pub struct TrainState {
    pub model: Model,
    pub schedule: Schedule,
    pub config: TrainConfig,
    pub phase: Phase,
    pub global_step: usize,
    rng: Rng,
    opt: Adam,
    trainable: Vec<String>,
}

fn trainable_names(model: &Model, cfg: &TrainConfig, phase: Phase) -> Vec<String> {
    let mut names = Vec::new();
    model.for_each_tensor(&mut |name, _| {
        let keep = match phase {
            Phase::Pretrain => name.starts_with("conditioner."),
            Phase::Joint => {
                if name.starts_with("conditioner.encoder.") {
                    cfg.use_conditioner && !cfg.freeze_encoder
                } else if name.starts_with("conditioner.") {
                    cfg.use_conditioner
                } else {
                    true
                }
            }
        };
        if keep {
            names.push(name);
        }
    });
    names
}

impl TrainState {
    pub fn new(model: Model, schedule: Schedule, config: TrainConfig, phase: Phase) -> TrainState {
        let trainable = trainable_names(&model, &config, phase);
        let mut sizes = Vec::with_capacity(trainable.len());
        model.for_each_tensor(&mut |name, t| {
            if trainable.contains(&name) {
                sizes.push(t.numel());
            }
        });
        let rng = Rng::new(config.seed);
        let opt = Adam::new(&config, &sizes);
        TrainState { model, schedule, config, phase, global_step: 0, rng, opt, trainable }
    }
}

struct ItemOutput {
    grads: Vec<Vec<f64>>,
    diff_loss: f64,
    nc_loss: f64,
    predicted: Option<usize>,
}

fn run_item(
    state: &TrainState,
    item: &Record,
    item_rng: &Rng,
) -> Result<ItemOutput> {
    let cfg = &state.config;
    let mut noise_rng = item_rng.substream(streams::DIFFUSION_NOISE, 0);
    let t_step = 1 + noise_rng.uniform_int(state.schedule.step_count() as u64) as usize;

    let enc_input: Vec<f64> = if cfg.augment_encoder && cfg.use_conditioner {
        // circular shift, gain, and an SNR re-mix: noise-family identity is
        // invariant to all three, and the re-mix keeps the task from
        // saturating so the multi-task weight stays meaningful
        let mut aug_rng = item_rng.substream(streams::DATA, 1);
        let n = item.noisy.len();
        let shift = aug_rng.uniform_int(n as u64) as usize;
        let gain = aug_rng.uniform_range(0.6, 1.6);
        let target_snr = aug_rng.uniform_range(-8.0, 14.0);
        let snr_scale = 10f64.powf((item.snr_db - target_snr) / 20.0);
        (0..n)
            .map(|i| {
                let j = (i + shift) % n;
                gain * (item.clean[j] + snr_scale * (item.noisy[j] - item.clean[j]))
            })
            .collect()
    } else {
        item.noisy.clone()
    };

    // Stage a copy of the model on a fresh tape, watching only trainable
    // parameters; frozen tensors stay untracked so the gradient map carries
    // no entry for them.
    let (out, tape) = with_tape(|| {
        let mut staged = state.model.clone();
        let mut handles: Vec<Tensor> = Vec::with_capacity(state.trainable.len());
        staged.for_each_tensor_mut(&mut |name, t| {
            if state.trainable.contains(&name) {
                *t = watch(t);
                handles.push(t.clone());
            }
        });

        match state.phase {
            Phase::Pretrain => {
                let out = encode(&staged.conditioner, &enc_input)?;
                let loss = cross_entropy(&out.probs, item.class_index)?;
                let predicted = argmax(out.probs.data());
                Ok::<_, Error>((loss.clone(), handles, 0.0, loss.item(), Some(predicted)))
            }
            Phase::Joint => {
                let sample =
                    forward_sample(&state.schedule, &item.clean, &item.noisy, t_step, &mut noise_rng)?;
                let (emb, probs) = if cfg.use_conditioner {
                    let out = encode(&staged.conditioner, &enc_input)?;
                    (Some(out.embedding), Some(out.probs))
                } else {
                    (None, None)
                };
                let pred = predict_eps(
                    &staged.denoiser,
                    sample.x_t.data(),
                    &item.noisy,
                    t_step,
                    emb.as_ref(),
                )?;
                let l_diff = pred.l1(&sample.target)?;
                let (loss, nc_val, predicted) = match &probs {
                    Some(p) => {
                        let l_nc = cross_entropy(p, item.class_index)?;
                        let combined = l_diff.add(&l_nc.mul_scalar(cfg.lambda_nc))?;
                        (combined, l_nc.item(), Some(argmax(p.data())))
                    }
                    None => (l_diff.clone(), 0.0, None),
                };
                Ok((loss, handles, l_diff.item(), nc_val, predicted))
            }
        }
    });
    let (loss, handles, diff_l, nc_l, predicted) = out?;
    let grads_map = backward(&tape, &loss)?;
    let grads = handles
        .iter()
        .map(|h| match grads_map.wrt(h) {
            Some(g) => g.to_vec(),
            None => vec![0.0; h.numel()],
        })
        .collect();
    Ok(ItemOutput { grads, diff_loss: diff_l, nc_loss: nc_l, predicted })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One optimizer step over a batch. Returns the step losses; parameters and
/// optimizer state advance in place.
pub fn train_step(state: &mut TrainState, batch: &[&Record]) -> Result<StepStats> {
    let (mut stats, predictions) = step_with_predictions(state, batch)?;
    stats.nc_correct = batch
        .iter()
        .zip(&predictions)
        .filter(|(rec, pred)| **pred == Some(rec.class_index))
        .count();
    Ok(stats)
}

fn run_phase(
    state: &mut TrainState,
    dataset: &[Record],
    epochs: usize,
    report: &mut TrainReport,
    hook: &mut impl FnMut(&Model, Phase, usize) -> Result<()>,
) -> Result<()> {
    let n = dataset.len();
    let phase_tag = match state.phase {
        Phase::Pretrain => 1u64 << 32,
        Phase::Joint => 2u64 << 32,
    };
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            Rng::new(state.config.seed).substream(streams::SHUFFLE, phase_tag + epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut diff_sum = 0.0;
        let mut nc_sum = 0.0;
        let mut correct = 0usize;
        let mut labeled = 0usize;
        for chunk in order.chunks(state.config.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|i| &dataset[*i]).collect();
            let predictions = step_with_predictions(state, &batch)?;
            diff_sum += predictions.0.diff_loss * batch.len() as f64;
            nc_sum += predictions.0.nc_loss * batch.len() as f64;
            for (rec, pred) in batch.iter().zip(&predictions.1) {
                if let Some(p) = pred {
                    labeled += 1;
                    if *p == rec.class_index {
                        correct += 1;
                    }
                }
            }
        }
        report.epochs.push(EpochStats {
            phase: state.phase,
            epoch,
            diff_loss: diff_sum / n as f64,
            nc_loss: nc_sum / n as f64,
            nc_accuracy: if labeled > 0 { Some(correct as f64 / labeled as f64) } else { None },
            wall_secs: start.elapsed().as_secs_f64(),
        });
        hook(&state.model, state.phase, epoch)?;
    }
    Ok(())
}

// train_step plus the per-item class predictions, for accuracy bookkeeping.
fn step_with_predictions(
    state: &mut TrainState,
    batch: &[&Record],
) -> Result<(StepStats, Vec<Option<usize>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let step_rng = state.rng.substream(streams::DIFFUSION_NOISE, state.global_step as u64);
    let outputs: Vec<Result<ItemOutput>> = crate::par::map_indexed(batch.len(), |i| {
        let item_rng = step_rng.substream(streams::DIFFUSION_NOISE, i as u64);
        run_item(state, batch[i], &item_rng)
    });
    let mut collected = Vec::with_capacity(batch.len());
    for out in outputs {
        collected.push(out?);
    }
    let predictions: Vec<Option<usize>> = collected.iter().map(|o| o.predicted).collect();
    let stats = apply_batch(state, &collected, batch.len())?;
    Ok((stats, predictions))
}

fn apply_batch(state: &mut TrainState, outputs: &[ItemOutput], batch_len: usize) -> Result<StepStats> {
    let scale = 1.0 / batch_len as f64;
    let mut grads: Vec<Vec<f64>> = outputs[0].grads.clone();
    for out in &outputs[1..] {
        for (a, g) in grads.iter_mut().zip(&out.grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    let diff_loss = outputs.iter().map(|o| o.diff_loss).sum::<f64>() * scale;
    let nc = outputs.iter().map(|o| o.nc_loss).sum::<f64>() * scale;
    let combined = match state.phase {
        Phase::Pretrain => nc,
        Phase::Joint => diff_loss + state.config.lambda_nc * nc,
    };
    if !combined.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.global_step, diff_loss, nc_loss: nc });
    }
    if combined > state.config.divergence_limit {
        return Err(Error::Diverged {
            step: state.global_step,
            loss: combined,
            limit: state.config.divergence_limit,
        });
    }
    let norm: f64 =
        grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > state.config.grad_clip && norm > 0.0 {
        let s = state.config.grad_clip / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    state.opt.t += 1;
    let trainable = state.trainable.clone();
    let opt = &mut state.opt;
    let mut slot = 0usize;
    state.model.for_each_tensor_mut(&mut |name, t| {
        if trainable.contains(&name) {
            t.map_data_mut(|data| opt.update(slot, data, &grads[slot]));
            slot += 1;
        }
    });
    state.global_step += 1;
    Ok(StepStats {
        diff_loss,
        nc_loss: nc,
        combined_loss: combined,
        nc_correct: 0,
        batch_len,
        grad_norm: norm,
    })
}

/// Train a fresh model on a labeled dataset.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    schedule: &Schedule,
    dataset: &[Record],
) -> Result<(Model, TrainReport)> {
    train_with(cfg, model_cfg, schedule, dataset, |_, _, _| Ok(()))
}

/// Train with a per-epoch hook (checkpointing and similar side effects).
pub fn train_with(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    schedule: &Schedule,
    dataset: &[Record],
    mut hook: impl FnMut(&Model, Phase, usize) -> Result<()>,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset".into()));
    }
    let mut classes: Vec<usize> = dataset.iter().map(|r| r.class_index).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "training labels must cover >= 2 classes, got {}",
            classes.len()
        )));
    }

    let init_rng = Rng::new(cfg.seed);
    let model = Model::init(model_cfg, cfg.injection, cfg.use_conditioner, schedule, &init_rng);
    let mut report = TrainReport::default();

    let model = if cfg.pretrain_nc && cfg.use_conditioner {
        let mut state = TrainState::new(model, schedule.clone(), cfg.clone(), Phase::Pretrain);
        run_phase(&mut state, dataset, cfg.pretrain_epochs, &mut report, &mut hook)?;
        state.model
    } else {
        model
    };

    let mut state = TrainState::new(model, schedule.clone(), cfg.clone(), Phase::Joint);
    run_phase(&mut state, dataset, cfg.epochs, &mut report, &mut hook)?;
    Ok((state.model, report))
}
