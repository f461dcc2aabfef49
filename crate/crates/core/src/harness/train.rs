//! Adam training loop over a fixed in-memory dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::data::SegmentationSample;
use super::loss::segmentation_loss;
use crate::error::{Error, Result};
use crate::metrics::{dice, masks_from_logits, BinaryMask};
use crate::network::{RichUNet, RichUNetConfig};
use crate::tensor::{seeded_rng, Mode, ParamStore, Rng, Session, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of cross-entropy; soft Dice gets `1 - lambda`.
    pub lambda: f64,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 400,
            batch_size: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.5,
            steps: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be > 0, got {}", self.eps));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size))
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Bias-corrected update; parameters without a gradient see a zero one.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, (_, p)) in store.params_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(Tensor::data);
            for j in 0..p.numel() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.data_mut()[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub loss: f64,
    /// Mean Dice of the batch's argmax predictions.
    pub dice: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} loss {:.6} dice {:.6}", self.step, self.loss, self.dice)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: RichUNet,
    pub optimizer: Adam,
    pub rng: Rng,
    pub step: usize,
    pub config: TrainConfig,
}

impl TrainState {
    /// Fresh network and optimizer; all randomness flows from `config.seed`.
    pub fn new(net_config: &RichUNetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let net = RichUNet::build(net_config, &mut rng)?;
        let optimizer = Adam::new(net.store());
        Ok(Self {
            net,
            optimizer,
            rng,
            step: 0,
            config,
        })
    }

    pub fn train_step(&mut self, data: &[SegmentationSample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let picks = batch_indices(self.config.seed, self.config.batch_size, data.len(), self.step);
        let batch: Vec<&SegmentationSample> = picks.iter().map(|&i| &data[i]).collect();
        let images = stack_images(&batch)?;
        let masks: Vec<BinaryMask> = batch.iter().map(|s| s.mask.clone()).collect();
        let step = self.step + 1;

        let (loss, dice_mean, grads, updates) = {
            let mut s = Session::new(self.net.store(), Mode::Train, &mut self.rng);
            let x = s.input(images);
            let logits = self.net.forward(&mut s, x)?;
            let loss = segmentation_loss(&mut s, logits, &masks, self.config.lambda)?;
            let value = s.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss became {value} at step {step}")));
            }
            let preds = masks_from_logits(s.tape.value(logits));
            let dice_mean = mean_dice(&preds, &masks)?;
            let grads = s.tape.backward(loss)?;
            let param_grads = s.param_grads(&grads);
            (value, dice_mean, param_grads, s.into_updates())
        };
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
        }
        self.net.store_mut().apply_updates(updates);
        self.optimizer.step(self.net.store_mut(), &grads, &self.config);
        self.step = step;
        Ok(StepLog {
            step,
            loss,
            dice: dice_mean,
        })
    }
}

/// Runs until `state.step == until`, calling `observe` after every step.
pub fn train(
    state: &mut TrainState,
    data: &[SegmentationSample],
    until: usize,
    mut observe: impl FnMut(&TrainState, &StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let mut log = Vec::with_capacity(until.saturating_sub(state.step));
    while state.step < until {
        let entry = state.train_step(data)?;
        observe(state, &entry)?;
        log.push(entry);
    }
    Ok(log)
}

/// Sample indices for the batch at 0-based `step`. Each epoch visits every
/// sample once in an order drawn from `(seed, epoch)` alone, so resuming
/// needs no sampler state. The last batch of an epoch may be smaller.
pub fn batch_indices(seed: u64, batch_size: usize, n: usize, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let start = pos * batch_size;
    order[start..(start + batch_size).min(n)].to_vec()
}

/// `[B,C,H,W]` batch from same-sized samples.
pub fn stack_images(batch: &[&SegmentationSample]) -> Result<Tensor> {
    let first = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(batch.len() * first.image.numel());
    for s in batch {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "sample {} has shape {:?}, expected {shape:?}",
                s.id,
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![batch.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

fn mean_dice(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += dice(p, g)?;
    }
    Ok(total / preds.len() as f64)
}
