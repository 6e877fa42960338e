use serde::{Deserialize, Serialize};

use super::loss::{tokenizer_objective, LossComponents, LossWeights};
use super::model::TokenizerModel;
use crate::data::{LabeledImage, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, warmup_lr, AdamW, AdamWConfig};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    /// Reassign codes unused for this many steps to batch latents; 0 disables.
    pub revive_every: usize,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 2e-3,
            warmup_steps: 50,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            loss: LossWeights::default(),
            revive_every: 0,
        }
    }
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("tokenizer training: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        let w = &self.loss;
        if !(w.delta >= 0.0 && w.eta >= 0.0 && w.commitment >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEpoch {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub loss: LossComponents,
    /// Fraction of codebook rows selected at least once during the epoch.
    pub usage: f64,
    pub revived: usize,
}

/// Stacks images into a `[B, H, W, 3]` tensor in `[-1, 1]`.
pub fn image_batch(items: &[&LabeledImage]) -> Result<Tensor> {
    let first = &items
        .first()
        .ok_or_else(|| Error::invalid("batch", "empty batch"))?
        .image;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(items.len() * w * h * CHANNELS);
    for it in items {
        if it.image.width() != w || it.image.height() != h {
            return Err(Error::Geometry("images in a batch differ in size".into()));
        }
        data.extend(it.image.pixels().iter().map(|v| 2.0 * v - 1.0));
    }
    Tensor::new(&[items.len(), h, w, CHANNELS], data)
}

/// Trains in place. `on_epoch` runs after every epoch, e.g. to write a
/// checkpoint; its error aborts training.
pub fn train_tokenizer(
    model: &mut TokenizerModel,
    data: &[LabeledImage],
    cfg: &TokenizerTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TokenizerEpoch, &TokenizerModel) -> Result<()>,
) -> Result<Vec<TokenizerEpoch>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_tokenizer", "dataset is empty"));
    }
    let k = model.config().codebook_size;
    let d = model.config().d_code;
    let steps = model.steps();
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut since_used = vec![0usize; k];
    let mut global_step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = Rng::stream(seed, epoch as u64);
        rng.shuffle(&mut order);
        let mut used = vec![false; k];
        let mut sums = LossComponents::default();
        let mut batches = 0usize;
        let mut revived = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
            let x = image_batch(&items)?;
            let p = model.bind(true);
            let z1 = model.encode_bound(&p, &x)?;
            let noises: Vec<Tensor> = (0..steps).map(|_| rng.normal_tensor(z1.shape())).collect();
            let rollout = model.rollout(&p, &z1, &noises)?;
            let raw = model.decode_bound(&p, &rollout.accumulated)?;
            let obj = tokenizer_objective(model, &x, &rollout, &raw, &cfg.loss)?;
            if !obj.objective.item().is_finite() {
                return Err(Error::Divergence {
                    stage: "tokenizer",
                    step: global_step,
                });
            }
            obj.objective.backward()?;
            let mut grads = p.grads();
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(
                model.params_mut(),
                &grads,
                warmup_lr(cfg.lr, global_step, cfg.warmup_steps),
            );
            global_step += 1;

            since_used.iter_mut().for_each(|s| *s += 1);
            for codes in &rollout.codes {
                for &c in codes {
                    used[c] = true;
                    since_used[c] = 0;
                }
            }
            if cfg.revive_every > 0 && global_step.is_multiple_of(cfg.revive_every) {
                let latents = &rollout.noisy;
                let rows = latents[0].numel() / d;
                let table = model.codebook_id();
                let cb = &mut model.params_mut().get_mut(table).data;
                for (c, s) in since_used.iter_mut().enumerate() {
                    if *s >= cfg.revive_every {
                        let v = &latents[rng.below(steps)];
                        let r = rng.below(rows);
                        cb[c * d..(c + 1) * d].copy_from_slice(&v.data()[r * d..(r + 1) * d]);
                        *s = 0;
                        revived += 1;
                    }
                }
            }

            let c = obj.components;
            sums.recon += c.recon;
            sums.quant += c.quant;
            sums.total += c.total;
            batches += 1;
        }

        let n = batches as f64;
        let report = TokenizerEpoch {
            epoch,
            loss: LossComponents {
                recon: sums.recon / n,
                quant: sums.quant / n,
                pept: 0.0,
                gan: 0.0,
                total: sums.total / n,
            },
            usage: used.iter().filter(|&&u| u).count() as f64 / k as f64,
            revived,
        };
        on_epoch(&report, model)?;
        history.push(report);
    }
    Ok(history)
}
