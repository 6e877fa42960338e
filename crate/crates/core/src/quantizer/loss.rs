use serde::{Deserialize, Serialize};

use super::model::{Rollout, TokenizationRecord, TokenizerModel};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Weights of the tokenizer objective
/// `L_recon + delta L_quant + L_pept + eta L_gan`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub delta: f64,
    pub eta: f64,
    /// Weight of the encoder-side commitment half of each quantization term.
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta: 0.25,
            eta: 0.75,
            commitment: 0.25,
        }
    }
}

/// Loss components. `recon` is the pixel MSE in the encoder's `[-1, 1]`
/// space; `quant` is `sum_t gamma_t mean((v_t - e_t)^2)`. The perceptual
/// and adversarial terms are always zero here.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub quant: f64,
    pub pept: f64,
    pub gan: f64,
    pub total: f64,
}

impl LossComponents {
    fn new(recon: f64, quant: f64, w: &LossWeights) -> Self {
        let (pept, gan) = (0.0, 0.0);
        Self {
            recon,
            quant,
            pept,
            gan,
            total: recon + w.delta * quant + pept + w.eta * gan,
        }
    }
}

/// Differentiable training objective plus its reported components.
pub struct TokenizerObjective {
    /// `recon + delta * sum_t gamma_t (codebook_t + commitment * commit_t)`.
    pub objective: Tensor,
    pub components: LossComponents,
}

/// Per-step loss weights: `gamma_t`, or all ones when weighting is off.
pub fn step_weights(model: &TokenizerModel) -> Vec<f64> {
    if model.config().gamma_weighting {
        model.schedule().gammas().to_vec()
    } else {
        vec![1.0; model.steps()]
    }
}

/// Builds the training objective from a rollout and the decoder output.
/// `x` and `raw` are `[B, H, W, 3]` in `[-1, 1]`.
pub fn tokenizer_objective(
    model: &TokenizerModel,
    x: &Tensor,
    rollout: &Rollout,
    raw: &Tensor,
    weights: &LossWeights,
) -> Result<TokenizerObjective> {
    let recon = raw.mse(x)?;
    let gammas = step_weights(model);
    let mut quant_value = 0.0;
    let mut quant: Option<Tensor> = None;
    for ((v, e), &g) in rollout.noisy.iter().zip(&rollout.looked_up).zip(&gammas) {
        let codebook_term = v.detach().mse(e)?;
        let commit_term = v.mse(&e.detach())?;
        quant_value += g * codebook_term.item();
        let step = codebook_term.add(&commit_term.scale(weights.commitment))?.scale(g);
        quant = Some(match quant {
            Some(q) => q.add(&step)?,
            None => step,
        });
    }
    let quant = quant.ok_or_else(|| Error::invalid("tokenizer_loss", "rollout has no steps"))?;
    let objective = recon.add(&quant.scale(weights.delta))?;
    Ok(TokenizerObjective {
        components: LossComponents::new(recon.item(), quant_value, weights),
        objective,
    })
}

/// `L_recon + delta L_quant` for a finished tokenization of `x` and its
/// reconstruction `x_rec`, both as images.
pub fn tokenizer_loss(
    model: &TokenizerModel,
    x: &Image,
    record: &TokenizationRecord,
    x_rec: &Image,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let recon = x_rec.to_signed_tensor().mse(&x.to_signed_tensor())?.item();
    let codebook = model.codebook();
    let mut quant = 0.0;
    for ((v, codes), g) in record.noisy.iter().zip(&record.codes).zip(step_weights(model)) {
        let e = codebook.lookup(codes)?;
        let sq: f64 = v.data().iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum();
        quant += g * sq / e.len() as f64;
    }
    Ok(LossComponents::new(recon, quant, weights))
}
