use serde::{Deserialize, Serialize};

use super::model::{Geometry, StepPredictor};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::quantizer::TokenizerModel;
use crate::schedule::{cfg_lambda, CfgMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub lambda_max: f64,
    pub cfg_mode: CfgMode,
    pub tau: f64,
    pub use_gumbel: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lambda_max: 2.0,
            cfg_mode: CfgMode::Linear,
            tau: 1.0,
            use_gumbel: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "sampler: tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config(format!(
                "sampler: lambda_max must be non-negative, got {}",
                self.lambda_max
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("sampler: steps must be positive".into()));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.lambda_max > 0.0
    }
}

/// `cond + (cond - uncond) * lambda`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, lambda: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape("cfg_combine", cond.shape(), uncond.shape()));
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(c, u)| c + (c - u) * lambda)
        .collect();
    Tensor::new(cond.shape(), data)
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// One code per last-axis row of `logits`: `argmax(tau * l - ln(-ln u))`
/// with `u ~ U(0, 1)` when Gumbel sampling is on, plain argmax otherwise.
pub fn sample_codes(logits: &Tensor, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<usize>> {
    if cfg.tau.is_nan() || cfg.tau <= 0.0 {
        return Err(Error::invalid(
            "sample_codes",
            format!("tau must be positive, got {}", cfg.tau),
        ));
    }
    let k = *logits.shape().last().unwrap();
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            if cfg.use_gumbel {
                let noisy: Vec<f64> = row.iter().map(|l| cfg.tau * l - (-rng.uniform().ln()).ln()).collect();
                argmax(noisy.into_iter())
            } else {
                argmax(row.iter().copied())
            }
        })
        .collect())
}

/// Recurrent token prediction: `T` steps of predict, guide, sample and
/// accumulate, then decode. Returns the decoded images and the sampled
/// codes (`T` grids of `B * h * w`).
pub fn generate_codes(
    model: &impl StepPredictor,
    tokenizer: &TokenizerModel,
    labels: &[usize],
    cfg: &SamplerConfig,
) -> Result<(Vec<Image>, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let geometry = model.geometry();
    geometry.ensure_matches(&Geometry::of_tokenizer(tokenizer))?;
    if cfg.steps != geometry.steps {
        return Err(Error::Geometry(format!(
            "sampler T = {} vs models T = {}",
            cfg.steps, geometry.steps
        )));
    }
    if labels.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let b = labels.len();
    let g = geometry.grid;
    let shape = [b, g, g, geometry.d_code];
    let null = vec![model.null_label(); b];
    let mut rng = Rng::new(cfg.seed);
    let mut z = Tensor::zeros(&shape);
    let mut all_codes = Vec::with_capacity(geometry.steps);
    for t in 1..=geometry.steps {
        let eps = rng.normal_tensor(&shape);
        let cond = model.predict(&eps, labels, t, &z)?;
        let logits = if cfg.guided() {
            let uncond = model.predict(&eps, &null, t, &z)?;
            cfg_combine(
                &cond,
                &uncond,
                cfg_lambda(t, geometry.steps, cfg.lambda_max, cfg.cfg_mode)?,
            )?
        } else {
            cond
        };
        let codes = sample_codes(&logits, cfg, &mut rng)?;
        z = z.add(&tokenizer.embed_codes(&codes, &[b, g, g])?)?;
        all_codes.push(codes);
    }
    let images = (0..b)
        .map(|i| {
            let n = g * g * geometry.d_code;
            let zi = Tensor::new(&shape[1..], z.data()[i * n..(i + 1) * n].to_vec())?;
            tokenizer.decode(&zi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((images, all_codes))
}

pub fn generate(
    model: &impl StepPredictor,
    tokenizer: &TokenizerModel,
    labels: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    Ok(generate_codes(model, tokenizer, labels, cfg)?.0)
}
