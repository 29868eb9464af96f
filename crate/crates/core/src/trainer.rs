//! Adam optimization loop with a two-plateau learning-rate schedule,
//! resumable checkpoints and optional validation-based model selection.

use std::fmt;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment, derive_seed, normalize_batch, AnnotatedFrame, AugmentConfig};
use crate::detector::calibrate_threshold;
use crate::error::{Error, Result};
use crate::eval::{accuracy, eval_frame, EvalFrame, DEFAULT_TOLERANCE_PX};
use crate::loss::batch_loss;
use crate::model::{Checkpoint, Mode, Model, TrainingMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    /// Last epoch (1-based) trained at the initial rate.
    pub lr_drop_epoch: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// `None` trains on whole frames.
    pub augment: Option<AugmentConfig>,
    /// Threads preparing batches; 1 prepares them inline.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            lr_drop_factor: 10.0,
            lr_drop_epoch: 50,
            total_epochs: 75,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            augment: Some(AugmentConfig::full_scale()),
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule that keeps the drop at two thirds of the run.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            total_epochs: epochs,
            lr_drop_epoch: ((epochs as f64 * 2.0 / 3.0).round() as usize).clamp(1, epochs.saturating_sub(1).max(1)),
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let a = &self.adam;
        if !(self.initial_lr > 0.0 && self.lr_drop_factor > 0.0 && a.epsilon > 0.0) {
            return Err(Error::param("learning rate, drop factor and epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::param("Adam betas must lie in [0, 1)"));
        }
        if self.total_epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::param("epochs, batch size and workers must be positive"));
        }
        if self.total_epochs > 1 && self.lr_drop_epoch >= self.total_epochs {
            return Err(Error::param(format!(
                "lr drop epoch {} must come before the last epoch {}",
                self.lr_drop_epoch, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop_epoch {
            self.initial_lr
        } else {
            self.initial_lr / self.lr_drop_factor
        }
    }
}

/// First and second moments per parameter array plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn for_model(model: &Model) -> Self {
        let zeros: Vec<Vec<f32>> = model.parameters().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every array.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameter arrays, {} gradients, {} moment arrays",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, ((p, g), (m, v))) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)).enumerate() {
        if p.len() != g.len() || p.len() != m.len() || p.len() != v.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "array {i}: {} parameters, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    m.len()
                ),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {}, {:e}, {:.6}, {}, {}",
            self.epoch, self.step, self.lr, self.loss, self.pos_count, self.neg_count
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Calibrated accuracy and threshold on the validation frames, when given.
    pub validation: Option<(f64, f32)>,
}

/// Hooks called during [`Trainer::fit`]; errors abort training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _trainer: &Trainer, _summary: &EpochSummary) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    /// Epoch, accuracy and model with the best validation accuracy.
    pub best: Option<(usize, f64, Model)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub global_step: u64,
}

/// Frames of one batch, in order: augmented copies or the originals.
fn prepare_batch(
    data: &[AnnotatedFrame],
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<AnnotatedFrame>> {
    let one = |i: usize| -> Result<AnnotatedFrame> {
        match &cfg.augment {
            Some(a) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, i as u64));
                Ok(augment(&data[i], a, &mut rng)?.0)
            }
            None => Ok(data[i].clone()),
        }
    };
    if cfg.workers <= 1 || indices.len() <= 1 {
        return indices.iter().map(|&i| one(i)).collect();
    }
    let chunk = indices.len().div_ceil(cfg.workers);
    thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&i| one(i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for h in handles {
            out.extend(h.join().expect("batch preparation thread panicked")?);
        }
        Ok(out)
    })
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.check()?;
        Ok(Trainer {
            optimizer: OptimizerState::for_model(&model),
            model,
            config,
            epochs_done: 0,
            global_step: 0,
        })
    }

    /// Shuffled frame order of 1-based `epoch`.
    pub fn epoch_order(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        order
    }

    /// Forward, loss, backward and one Adam update on prepared frames.
    pub fn train_step(&mut self, batch: &[AnnotatedFrame], epoch: usize) -> Result<StepRecord> {
        let first = batch.first().ok_or_else(|| Error::param("empty batch"))?;
        if let Some(f) = batch
            .iter()
            .find(|f| (f.height(), f.width()) != (first.height(), first.width()))
        {
            return Err(Error::shape(
                "train_step",
                format!(
                    "frames of one batch must share a size: {}x{} ({}) vs {}x{} ({}); enable cropping",
                    first.height(),
                    first.width(),
                    first.source_id,
                    f.height(),
                    f.width(),
                    f.source_id
                ),
            ));
        }
        let norm = self.model.input_norm();
        let images: Vec<_> = batch.iter().map(|f| &f.image).collect();
        let x = normalize_batch(&images, &norm)?;
        let mut candidate = self.model.clone();
        let out = candidate.forward(&x, Mode::Train)?;
        let balls: Vec<Vec<(usize, usize)>> = batch.iter().map(|f| f.balls.clone()).collect();
        let (loss, _) = batch_loss(&out.logits, &out.confidence, &balls)?;
        let step = self.global_step + 1;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step: step as usize,
                frames: batch.iter().map(|f| f.source_id.clone()).collect(),
            });
        }
        let grads = candidate.backward(out.cache.as_ref(), &loss.grad_logits)?;
        let lr = self.config.lr_at(epoch);
        let grad_refs: Vec<&[f32]> = grads.values().collect();
        {
            let mut params = candidate.parameters_mut();
            adam_step(&mut params, &grad_refs, &mut self.optimizer, lr, &self.config.adam)?;
        }
        self.model = candidate;
        self.global_step = step;
        Ok(StepRecord {
            epoch,
            step,
            lr,
            loss: loss.value,
            pos_count: loss.pos_count,
            neg_count: loss.neg_count,
        })
    }

    /// One pass over `data`; the last partial batch is kept.
    pub fn run_epoch(&mut self, data: &[AnnotatedFrame], observer: &mut dyn TrainObserver) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::param("training set is empty"));
        }
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(data.len(), epoch);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        let mut sum = 0.0;
        if self.config.workers <= 1 {
            for idx in &batches {
                let frames = prepare_batch(data, idx, &self.config, epoch)?;
                let rec = self.train_step(&frames, epoch)?;
                observer.on_step(&rec)?;
                sum += rec.loss;
            }
        } else {
            // A producer prepares batches ahead through a bounded queue.
            let cfg = self.config.clone();
            thread::scope(|s| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<Vec<AnnotatedFrame>>>(2);
                let batches_ref = &batches;
                let cfg_ref = &cfg;
                s.spawn(move || {
                    for idx in batches_ref {
                        if tx.send(prepare_batch(data, idx, cfg_ref, epoch)).is_err() {
                            break;
                        }
                    }
                });
                for frames in rx {
                    let rec = self.train_step(&frames?, epoch)?;
                    observer.on_step(&rec)?;
                    sum += rec.loss;
                }
                Ok(())
            })?;
        }
        self.epochs_done = epoch;
        Ok(sum / batches.len() as f64)
    }

    /// Trains until `total_epochs`, resuming from `epochs_done`.
    pub fn fit(
        &mut self,
        data: &[AnnotatedFrame],
        validation: Option<&[AnnotatedFrame]>,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainReport> {
        let mut report = TrainReport {
            epochs: Vec::new(),
            best: None,
        };
        while self.epochs_done < self.config.total_epochs {
            let mean_loss = self.run_epoch(data, observer)?;
            let validation = match validation {
                Some(v) if !v.is_empty() => {
                    let frames = infer_frames(&self.model, v)?;
                    let theta = calibrate_threshold(&frames, DEFAULT_TOLERANCE_PX)?;
                    let acc = accuracy(&frames, theta, DEFAULT_TOLERANCE_PX)?.accuracy;
                    if report.best.as_ref().is_none_or(|b| acc > b.1) {
                        report.best = Some((self.epochs_done, acc, self.model.clone()));
                    }
                    Some((acc, theta))
                }
                _ => None,
            };
            let summary = EpochSummary {
                epoch: self.epochs_done,
                mean_loss,
                validation,
            };
            observer.on_epoch(self, &summary)?;
            report.epochs.push(summary);
        }
        Ok(report)
    }

    /// Model, optimizer moments and progress counters in one checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.header.training = Some(TrainingMeta {
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            adam_t: self.optimizer.t,
            run_seed: self.config.seed,
        });
        for ((name, _), (m, v)) in self
            .model
            .parameters()
            .iter()
            .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
        {
            ck.push_array(format!("adam.m.{name}"), vec![m.len()], m.clone());
            ck.push_array(format!("adam.v.{name}"), vec![v.len()], v.clone());
        }
        ck
    }

    /// Restores a run saved by [`Trainer::to_checkpoint`]. A checkpoint
    /// without training state starts a fresh optimizer on its weights.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let mut trainer = Trainer::new(model, config)?;
        if let Some(meta) = ck.header.training {
            let names = trainer.model.parameter_names();
            for (i, name) in names.iter().enumerate() {
                let fetch = |kind: &str| {
                    let key = format!("adam.{kind}.{name}");
                    ck.array(&key).map(<[f32]>::to_vec).ok_or_else(|| Error::Format {
                        offset: 12,
                        msg: format!("training checkpoint lacks `{key}`"),
                    })
                };
                let (m, v) = (fetch("m")?, fetch("v")?);
                if m.len() != trainer.optimizer.m[i].len() || v.len() != trainer.optimizer.v[i].len() {
                    return Err(Error::Format {
                        offset: 12,
                        msg: format!("optimizer state for `{name}` has the wrong length"),
                    });
                }
                trainer.optimizer.m[i] = m;
                trainer.optimizer.v[i] = v;
            }
            trainer.optimizer.t = meta.adam_t;
            trainer.epochs_done = meta.epochs_done;
            trainer.global_step = meta.global_step;
        }
        Ok(trainer)
    }
}

/// Inference on every frame, one at a time.
pub fn infer_frames(model: &Model, frames: &[AnnotatedFrame]) -> Result<Vec<EvalFrame>> {
    let norm = model.input_norm();
    frames
        .iter()
        .map(|f| {
            let x = crate::dataio::normalize_image(&f.image, &norm);
            eval_frame(model, &f.source_id, &x, &f.balls)
        })
        .collect()
}
