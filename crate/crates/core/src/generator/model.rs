use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamSet};
use crate::numerics::{Rng, Tensor};
use crate::quantizer::TokenizerModel;

const SECTION: &str = "generator";
const LN_EPS: f64 = 1e-6;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Transformer blocks; hidden width is `64 * depth` and there are
    /// `depth` attention heads.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub steps: usize,
    pub codebook_size: usize,
    pub d_code: usize,
    /// Token grid side `h = w`.
    pub grid: usize,
}

impl GeneratorConfig {
    /// Geometry taken from a tokenizer.
    pub fn for_tokenizer(tokenizer: &TokenizerModel, depth: usize, num_classes: usize) -> Self {
        let c = tokenizer.config();
        Self {
            depth,
            mlp_ratio: 2,
            num_classes,
            steps: tokenizer.steps(),
            codebook_size: c.codebook_size,
            d_code: c.d_code,
            grid: c.token_grid(),
        }
    }

    pub fn hidden(&self) -> usize {
        64 * self.depth
    }

    pub fn heads(&self) -> usize {
        self.depth
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Condition index of the unconditional branch.
    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("generator: {msg}")));
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.steps == 0 || self.grid == 0 || self.d_code == 0 || self.codebook_size < 2 {
            return bad(format!(
                "degenerate geometry T={} grid={} d_code={} K={}",
                self.steps, self.grid, self.d_code, self.codebook_size
            ));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            steps: self.steps,
            codebook_size: self.codebook_size,
            d_code: self.d_code,
            grid: self.grid,
        }
    }
}

/// What a generator and a tokenizer must agree on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub steps: usize,
    pub codebook_size: usize,
    pub d_code: usize,
    pub grid: usize,
}

impl Geometry {
    pub fn of_tokenizer(tokenizer: &TokenizerModel) -> Self {
        let c = tokenizer.config();
        Self {
            steps: tokenizer.steps(),
            codebook_size: c.codebook_size,
            d_code: c.d_code,
            grid: c.token_grid(),
        }
    }

    pub fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        if self != other {
            return Err(Error::Geometry(format!(
                "generator T={} K={} d_code={} grid={} vs tokenizer T={} K={} d_code={} grid={}",
                self.steps,
                self.codebook_size,
                self.d_code,
                self.grid,
                other.steps,
                other.codebook_size,
                other.d_code,
                other.grid
            )));
        }
        Ok(())
    }
}

/// One step of the recurrent predictor: logits `[B, h, w, K]` from noise
/// and accumulated latents `[B, h, w, d_code]`, labels and the step index.
pub trait StepPredictor {
    fn geometry(&self) -> Geometry;

    fn null_label(&self) -> usize;

    fn predict(&self, eps: &Tensor, labels: &[usize], t: usize, z_prev: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamSet,
    input_proj: Linear,
    pos: ParamId,
    t_embed: ParamId,
    y_embed: ParamId,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let rng = &mut rng;
        let h = config.hidden();
        let mut ps = ParamSet::new();
        let input_proj = Linear::new(&mut ps, "input_proj", 2 * config.d_code, h, rng);
        let pos = ps.normal("pos_embed", &[config.tokens(), h], EMBED_STD, rng);
        let t_embed = ps.normal("t_embed", &[config.steps, h], EMBED_STD, rng);
        let y_embed = ps.normal("y_embed", &[config.num_classes + 1, h], EMBED_STD, rng);
        let blocks = (0..config.depth)
            .map(|i| Block {
                modulation: Linear::zeroed(&mut ps, &format!("block{i}.adaln"), h, 6 * h),
                q: Linear::new(&mut ps, &format!("block{i}.q"), h, h, rng),
                k: Linear::new(&mut ps, &format!("block{i}.k"), h, h, rng),
                v: Linear::new(&mut ps, &format!("block{i}.v"), h, h, rng),
                proj: Linear::new(&mut ps, &format!("block{i}.proj"), h, h, rng),
                fc1: Linear::new(&mut ps, &format!("block{i}.fc1"), h, config.mlp_ratio * h, rng),
                fc2: Linear::new(&mut ps, &format!("block{i}.fc2"), config.mlp_ratio * h, h, rng),
            })
            .collect();
        let final_modulation = Linear::zeroed(&mut ps, "final.adaln", h, 2 * h);
        let head = Linear::new(&mut ps, "head", h, config.codebook_size, rng);
        Ok(Self {
            config,
            params: ps,
            input_proj,
            pos,
            t_embed,
            y_embed,
            blocks,
            final_modulation,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, requires_grad: bool) -> Bound {
        self.params.bind(requires_grad)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.steps {
            return Err(Error::invalid(
                "predict_step",
                format!("t = {t} outside 1..={}", self.config.steps),
            ));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&y) = labels.iter().find(|&&y| y > self.config.null_label()) {
            return Err(Error::invalid(
                "predict_step",
                format!(
                    "label {y} outside 0..={} (null = {})",
                    self.config.null_label(),
                    self.config.null_label()
                ),
            ));
        }
        Ok(())
    }

    /// Logits `[B, N, K]` for tokens `eps`, `z_prev` of shape `[B, N, d_code]`
    /// and per-example steps and labels.
    pub fn forward(
        &self,
        p: &Bound,
        eps: &Tensor,
        z_prev: &Tensor,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (n, d) = (cfg.tokens(), cfg.d_code);
        let b = steps.len();
        if eps.shape() != [b, n, d] || z_prev.shape() != [b, n, d] || labels.len() != b {
            return Err(Error::shape("generator", eps.shape(), &[b, n, d]));
        }
        for &t in steps {
            self.check_step(t)?;
        }
        self.check_labels(labels)?;
        let hd = cfg.hidden();
        let heads = cfg.heads();
        let dh = hd / heads;

        let x = self
            .input_proj
            .forward(p, &Tensor::concat(&[eps.clone(), z_prev.clone()])?)?;
        let mut x = x.add(&p[self.pos])?;
        let t_idx: Vec<usize> = steps.iter().map(|t| t - 1).collect();
        let cond = p[self.t_embed]
            .gather_rows(&t_idx, &[b])?
            .add(&p[self.y_embed].gather_rows(labels, &[b])?)?
            .silu();

        let attn_scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            let m = blk.modulation.forward(p, &cond)?;
            let part = |i: usize| m.slice_last(i * hd, (i + 1) * hd);
            let (shift1, scale1, gate1) = (part(0)?, part(1)?, part(2)?);
            let (shift2, scale2, gate2) = (part(3)?, part(4)?, part(5)?);

            let h = x.layer_norm(LN_EPS).modulate(&shift1, &scale1)?;
            let split = |proj: &Linear| -> Result<Tensor> {
                proj.forward(p, &h)?.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3])
            };
            let (q, k, v) = (split(&blk.q)?, split(&blk.k)?, split(&blk.v)?);
            let att = q.matmul(&k.transpose()?)?.scale(attn_scale).softmax();
            let o = att.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, hd])?;
            let o = blk.proj.forward(p, &o)?;
            x = x.add_gated(&o, &gate1)?;

            let h = x.layer_norm(LN_EPS).modulate(&shift2, &scale2)?;
            let h = blk.fc2.forward(p, &blk.fc1.forward(p, &h)?.gelu())?;
            x = x.add_gated(&h, &gate2)?;
        }
        let m = self.final_modulation.forward(p, &cond)?;
        let h = x
            .layer_norm(LN_EPS)
            .modulate(&m.slice_last(0, hd)?, &m.slice_last(hd, 2 * hd)?)?;
        self.head.forward(p, &h)
    }

    /// Single-example form: `eps`, `z_prev` are `[h, w, d_code]`; returns
    /// `[h * w, K]` logits.
    pub fn predict_step(&self, eps: &Tensor, y: usize, t: usize, z_prev: &Tensor) -> Result<Tensor> {
        let (n, d) = (self.config.tokens(), self.config.d_code);
        let logits = self.forward(
            &self.bind(false),
            &eps.reshape(&[1, n, d])?,
            &z_prev.reshape(&[1, n, d])?,
            &[t],
            &[y],
        )?;
        logits.reshape(&[n, self.config.codebook_size])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::params_to_bytes(SECTION, &self.config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, params): (GeneratorConfig, _) =
            container::params_from_bytes(SECTION, bytes, "generator checkpoint")?;
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

impl StepPredictor for GeneratorModel {
    fn geometry(&self) -> Geometry {
        self.config.geometry()
    }

    fn null_label(&self) -> usize {
        self.config.null_label()
    }

    fn predict(&self, eps: &Tensor, labels: &[usize], t: usize, z_prev: &Tensor) -> Result<Tensor> {
        let (n, d, k) = (self.config.tokens(), self.config.d_code, self.config.codebook_size);
        let b = labels.len();
        let g = self.config.grid;
        let logits = self.forward(
            &self.bind(false),
            &eps.reshape(&[b, n, d])?,
            &z_prev.reshape(&[b, n, d])?,
            &vec![t; b],
            labels,
        )?;
        logits.reshape(&[b, g, g, k])
    }
}
