use serde::{Deserialize, Serialize};

use super::model::{GeneratorConfig, GeneratorModel, Geometry};
use crate::data::RecordSet;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, warmup_lr, AdamW, AdamWConfig, Bound, Ema};
use crate::numerics::{Rng, Tensor};
use crate::quantizer::{TokenizationRecord, TokenizerModel};

/// Teacher-forcing inputs and targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub label: usize,
    /// `eps_t`, flattened `[h * w * d_code]`, for `t = 1..=T`.
    pub noises: Vec<Vec<f64>>,
    /// `z'_{t-1}`, flattened, for `t = 1..=T` (`z'_0 = 0`).
    pub prefix: Vec<Vec<f64>>,
    /// `C_t` for `t = 1..=T`.
    pub codes: Vec<Vec<usize>>,
}

impl TrainingExample {
    pub fn from_record(record: &TokenizationRecord, label: usize) -> Result<Self> {
        let steps = record.steps();
        let prefix = (0..steps)
            .map(|t| record.accumulated(t).map(|a| a.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label,
            noises: record.noises.iter().map(Tensor::to_vec).collect(),
            prefix,
            codes: record.codes.clone(),
        })
    }

    pub fn steps(&self) -> usize {
        self.codes.len()
    }
}

/// Rebuilds teacher-forcing examples from stored records: noise from each
/// record's seed, accumulations from its codes through the tokenizer.
pub fn examples_from_records(tokenizer: &TokenizerModel, records: &RecordSet) -> Result<Vec<TrainingExample>> {
    let g = &records.geometry;
    let tok = Geometry::of_tokenizer(tokenizer);
    if g.steps != tok.steps || g.height != tok.grid || g.width != tok.grid || g.codebook_size != tok.codebook_size {
        return Err(Error::Geometry(format!(
            "records T={} {}x{} K={} vs tokenizer T={} {}x{} K={}",
            g.steps, g.height, g.width, g.codebook_size, tok.steps, tok.grid, tok.grid, tok.codebook_size
        )));
    }
    let n = g.height * g.width;
    records
        .records
        .iter()
        .map(|r| {
            let noises = tokenizer
                .noises_from_seed(r.noise_seed, [g.height, g.width])
                .iter()
                .map(Tensor::to_vec)
                .collect();
            let codes: Vec<Vec<usize>> = r
                .codes
                .chunks_exact(n)
                .map(|c| c.iter().map(|&v| usize::from(v)).collect())
                .collect();
            let mut acc = Tensor::zeros(&[g.height, g.width, tok.d_code]);
            let mut prefix = Vec::with_capacity(g.steps);
            for c in &codes {
                prefix.push(acc.to_vec());
                acc = acc.add(&tokenizer.embed_codes(c, &[g.height, g.width])?)?;
            }
            Ok(TrainingExample {
                label: r.label as usize,
                noises,
                prefix,
                codes,
            })
        })
        .collect()
}

/// Mean cross-entropy of `logits [.., K]` against one target per row.
pub fn generator_loss(logits: &Tensor, codes: &[usize]) -> Result<Tensor> {
    logits.cross_entropy(codes)
}

/// A batch of `(example, step)` pairs assembled into model inputs.
pub struct StepBatch {
    pub eps: Tensor,
    pub z_prev: Tensor,
    pub steps: Vec<usize>,
    pub labels: Vec<usize>,
    pub targets: Vec<usize>,
}

impl StepBatch {
    /// `items` are `(example index, t, label override)`.
    pub fn assemble(
        config: &GeneratorConfig,
        examples: &[TrainingExample],
        items: &[(usize, usize, usize)],
    ) -> Result<Self> {
        let (n, d) = (config.tokens(), config.d_code);
        let mut eps = Vec::with_capacity(items.len() * n * d);
        let mut z_prev = Vec::with_capacity(items.len() * n * d);
        let mut targets = Vec::with_capacity(items.len() * n);
        for &(i, t, _) in items {
            let ex = &examples[i];
            eps.extend_from_slice(&ex.noises[t - 1]);
            z_prev.extend_from_slice(&ex.prefix[t - 1]);
            targets.extend_from_slice(&ex.codes[t - 1]);
        }
        let b = items.len();
        Ok(Self {
            eps: Tensor::new(&[b, n, d], eps)?,
            z_prev: Tensor::new(&[b, n, d], z_prev)?,
            steps: items.iter().map(|it| it.1).collect(),
            labels: items.iter().map(|it| it.2).collect(),
            targets,
        })
    }

    pub fn loss(&self, model: &GeneratorModel, p: &Bound) -> Result<Tensor> {
        let logits = model.forward(p, &self.eps, &self.z_prev, &self.steps, &self.labels)?;
        generator_loss(&logits, &self.targets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    /// Train every example on all `T` steps instead of one sampled step.
    pub all_steps: bool,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 5e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.03,
            ema_decay: 0.999,
            cond_dropout: 0.1,
            all_steps: false,
        }
    }
}

impl GeneratorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("generator training: {msg}")));
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
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must lie in [0, 1]");
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
pub struct GeneratorEpoch {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub dropped_labels: usize,
    pub labels_seen: usize,
}

pub struct TrainedGenerator {
    pub model: GeneratorModel,
    /// Averaged weights, used for sampling.
    pub ema: GeneratorModel,
    pub history: Vec<GeneratorEpoch>,
}

/// Replaces each label by `null` with probability `p`.
pub fn drop_labels(labels: &mut [usize], null: usize, p: f64, rng: &mut Rng) -> usize {
    let mut dropped = 0;
    for y in labels.iter_mut() {
        if rng.bernoulli(p) {
            *y = null;
            dropped += 1;
        }
    }
    dropped
}

fn check_examples(config: &GeneratorConfig, examples: &[TrainingExample]) -> Result<()> {
    let (n, d) = (config.tokens(), config.d_code);
    for (index, ex) in examples.iter().enumerate() {
        let bad = |msg: String| Err(Error::Record { index, msg });
        if ex.steps() != config.steps || ex.noises.len() != config.steps || ex.prefix.len() != config.steps {
            return bad(format!("{} steps, generator expects T = {}", ex.steps(), config.steps));
        }
        if ex.label >= config.num_classes {
            return bad(format!("label {} >= {} classes", ex.label, config.num_classes));
        }
        let shapes_ok = ex.noises.iter().chain(&ex.prefix).all(|v| v.len() == n * d)
            && ex
                .codes
                .iter()
                .all(|c| c.len() == n && c.iter().all(|&k| k < config.codebook_size));
        if !shapes_ok {
            return bad("token grid or code range does not match the generator".into());
        }
    }
    Ok(())
}

pub fn train_generator(
    config: GeneratorConfig,
    examples: &[TrainingExample],
    cfg: &GeneratorTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&GeneratorEpoch) -> Result<()>,
) -> Result<TrainedGenerator> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("train_generator", "no training examples"));
    }
    check_examples(&config, examples)?;
    let mut model = GeneratorModel::new(config, seed)?;
    let mut ema = Ema::new(model.params(), cfg.ema_decay);
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let steps = model.config().steps;
    let null = model.config().null_label();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut rng = Rng::stream(seed, epoch as u64);
        rng.shuffle(&mut order);
        let mut items: Vec<(usize, usize)> = if cfg.all_steps {
            order.iter().flat_map(|&i| (1..=steps).map(move |t| (i, t))).collect()
        } else {
            order.iter().map(|&i| (i, 1 + rng.below(steps))).collect()
        };
        if cfg.all_steps {
            rng.shuffle(&mut items);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut dropped = 0usize;
        let mut seen = 0usize;
        for chunk in items.chunks(cfg.batch_size) {
            let mut labels: Vec<usize> = chunk.iter().map(|&(i, _)| examples[i].label).collect();
            dropped += drop_labels(&mut labels, null, cfg.cond_dropout, &mut rng);
            seen += labels.len();
            let triples: Vec<(usize, usize, usize)> =
                chunk.iter().zip(&labels).map(|(&(i, t), &y)| (i, t, y)).collect();
            let batch = StepBatch::assemble(model.config(), examples, &triples)?;
            let p = model.bind(true);
            let loss = batch.loss(&model, &p)?;
            if !loss.item().is_finite() {
                return Err(Error::Divergence {
                    stage: "generator",
                    step: global_step,
                });
            }
            loss.backward()?;
            let mut grads = p.grads();
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(
                model.params_mut(),
                &grads,
                warmup_lr(cfg.lr, global_step, cfg.warmup_steps),
            );
            ema.update(model.params());
            global_step += 1;
            total += loss.item();
            batches += 1;
        }
        let report = GeneratorEpoch {
            epoch,
            loss: total / batches as f64,
            dropped_labels: dropped,
            labels_seen: seen,
        };
        on_epoch(&report)?;
        history.push(report);
    }
    let mut ema_model = model.clone();
    ema_model.params_mut().copy_from(&ema.shadow)?;
    Ok(TrainedGenerator {
        model,
        ema: ema_model,
        history,
    })
}

/// Teacher-forced argmax accuracy per step `t = 1..=T`, conditioned on the
/// true labels.
pub fn step_accuracy(model: &GeneratorModel, examples: &[TrainingExample]) -> Result<Vec<f64>> {
    check_examples(model.config(), examples)?;
    let steps = model.config().steps;
    let k = model.config().codebook_size;
    let p = model.bind(false);
    let mut acc = Vec::with_capacity(steps);
    for t in 1..=steps {
        let mut hits = 0usize;
        let mut total = 0usize;
        for chunk in (0..examples.len()).collect::<Vec<_>>().chunks(32) {
            let items: Vec<(usize, usize, usize)> = chunk.iter().map(|&i| (i, t, examples[i].label)).collect();
            let batch = StepBatch::assemble(model.config(), examples, &items)?;
            let logits = model.forward(&p, &batch.eps, &batch.z_prev, &batch.steps, &batch.labels)?;
            for (row, &target) in logits.data().chunks_exact(k).zip(&batch.targets) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                hits += usize::from(best == target);
                total += 1;
            }
        }
        acc.push(hits as f64 / total as f64);
    }
    Ok(acc)
}
