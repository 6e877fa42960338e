use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use crate::container;
use crate::data::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamId, ParamSet};
use crate::numerics::{Rng, Tensor};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

const SECTION: &str = "tokenizer";
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub image_size: usize,
    /// Power of two; `H / h`.
    pub downsample_ratio: usize,
    /// Channels at full resolution, doubled per downsampling level.
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub codebook_size: usize,
    pub d_code: usize,
    pub bias_conv: bool,
    /// Weight step `t` of the quantization loss by `gamma_t`; uniform otherwise.
    pub gamma_weighting: bool,
    pub schedule: ScheduleConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample_ratio: 4,
            base_channels: 16,
            blocks_per_level: 3,
            codebook_size: 512,
            d_code: 8,
            bias_conv: true,
            gamma_weighting: true,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("tokenizer: {msg}")));
        if !self.downsample_ratio.is_power_of_two() {
            return bad(format!(
                "downsample_ratio {} is not a power of two",
                self.downsample_ratio
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.downsample_ratio) {
            return bad(format!(
                "image_size {} not divisible by downsample_ratio {}",
                self.image_size, self.downsample_ratio
            ));
        }
        if self.base_channels == 0 || self.d_code == 0 {
            return bad("base_channels and d_code must be positive".into());
        }
        if self.codebook_size < 2 || self.codebook_size > usize::from(u16::MAX) + 1 {
            return bad(format!("codebook_size {} outside [2, 65536]", self.codebook_size));
        }
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("tokenizer schedule: {e}")))?;
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample_ratio.trailing_zeros() as usize + 1
    }

    pub fn token_grid(&self) -> usize {
        self.image_size / self.downsample_ratio
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, name: &str, ch: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), ch, ch, 3, 1, 1.0, rng),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), ch, ch, 3, 1, 1.0, rng),
        }
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(p, &x.silu())?;
        let h = self.conv2.forward(p, &h.silu())?;
        x.add(&h)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    /// Strided conv in the encoder, upsample-then-conv in the decoder.
    resample: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    levels: Vec<Level>,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(ps: &mut ParamSet, cfg: &TokenizerConfig, rng: &mut Rng) -> Self {
        let n = cfg.levels();
        let conv_in = Conv2d::new(ps, "enc.conv_in", CHANNELS, cfg.channels(0), 3, 1, 1.0, rng);
        let levels = (0..n)
            .map(|l| {
                let ch = cfg.channels(l);
                let blocks = (0..cfg.blocks_per_level)
                    .map(|b| ResBlock::new(ps, &format!("enc.l{l}.b{b}"), ch, rng))
                    .collect();
                let resample = (l + 1 < n)
                    .then(|| Conv2d::new(ps, &format!("enc.l{l}.down"), ch, cfg.channels(l + 1), 3, 2, 1.0, rng));
                Level { blocks, resample }
            })
            .collect();
        let conv_out = Conv2d::new(ps, "enc.conv_out", cfg.channels(n - 1), cfg.d_code, 3, 1, 1.0, rng);
        Self {
            conv_in,
            levels,
            conv_out,
        }
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(p, x)?;
        for level in &self.levels {
            for b in &level.blocks {
                h = b.forward(p, &h)?;
            }
            if let Some(down) = &level.resample {
                h = down.forward(p, &h)?;
            }
        }
        Ok(self.conv_out.forward(p, &h.silu())?.layer_norm(LN_EPS))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    /// Deepest level first.
    levels: Vec<Level>,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(ps: &mut ParamSet, cfg: &TokenizerConfig, rng: &mut Rng) -> Self {
        let n = cfg.levels();
        let conv_in = Conv2d::new(ps, "dec.conv_in", cfg.d_code, cfg.channels(n - 1), 3, 1, 1.0, rng);
        let levels = (0..n)
            .rev()
            .map(|l| {
                let ch = cfg.channels(l);
                let blocks = (0..cfg.blocks_per_level)
                    .map(|b| ResBlock::new(ps, &format!("dec.l{l}.b{b}"), ch, rng))
                    .collect();
                let resample =
                    (l > 0).then(|| Conv2d::new(ps, &format!("dec.l{l}.up"), ch, cfg.channels(l - 1), 3, 1, 1.0, rng));
                Level { blocks, resample }
            })
            .collect();
        let conv_out = Conv2d::new(ps, "dec.conv_out", cfg.channels(0), CHANNELS, 3, 1, 1.0, rng);
        Self {
            conv_in,
            levels,
            conv_out,
        }
    }

    fn forward(&self, p: &Bound, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(p, z)?;
        for level in &self.levels {
            for b in &level.blocks {
                h = b.forward(p, &h)?;
            }
            if let Some(up) = &level.resample {
                h = up.forward(p, &h.upsample2x()?)?;
            }
        }
        self.conv_out.forward(p, &h.silu())
    }
}

/// Tensors produced by one pass of the diffusion-based quantization over a
/// batch. All step tensors have the latent's `[B, h, w, d_code]` shape.
pub struct Rollout {
    /// `v_t = alpha_t z_t + beta_t eps_t`.
    pub noisy: Vec<Tensor>,
    /// Codebook rows selected at step `t`; gradients reach the codebook.
    pub looked_up: Vec<Tensor>,
    /// `v'_t`: the selected rows (plus the bias convolution when enabled),
    /// with straight-through gradients to `v_t`.
    pub quantized: Vec<Tensor>,
    /// `z_1 .. z_{T+1}`.
    pub residuals: Vec<Tensor>,
    /// `z'_T = sum_t v'_t`.
    pub accumulated: Tensor,
    /// Flattened `[B * h * w]` code grid per step.
    pub codes: Vec<Vec<usize>>,
}

/// Per-image output of the forward tokenization.
#[derive(Clone, Debug)]
pub struct TokenizationRecord {
    /// `C_1 .. C_T`, each `h * w` indices in row-major order.
    pub codes: Vec<Vec<usize>>,
    /// `eps_1 .. eps_T`, each `[h, w, d_code]`.
    pub noises: Vec<Tensor>,
    /// `v_1 .. v_T`.
    pub noisy: Vec<Tensor>,
    /// `v'_1 .. v'_T`.
    pub per_step_quantized: Vec<Tensor>,
    /// `z_1 .. z_{T+1}`.
    pub residuals: Vec<Tensor>,
    /// `z'_T`.
    pub z_final: Tensor,
}

impl TokenizationRecord {
    pub fn steps(&self) -> usize {
        self.codes.len()
    }

    /// `z'_t` for `t` in `0..=T`, summed in the same order as `z_final`.
    pub fn accumulated(&self, t: usize) -> Result<Tensor> {
        let mut acc = Tensor::zeros(self.z_final.shape());
        for q in &self.per_step_quantized[..t] {
            acc = acc.add(q)?;
        }
        Ok(acc)
    }
}

/// Encoder, codebook, optional bias convolution and decoder.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    config: TokenizerConfig,
    schedule: NoiseSchedule,
    params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
    codebook: ParamId,
    bias_conv: Option<Conv2d>,
}

impl TokenizerModel {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut ps = ParamSet::new();
        let encoder = Encoder::new(&mut ps, &config, &mut rng);
        let codebook = ps.normal("codebook", &[config.codebook_size, config.d_code], 1.0, &mut rng);
        let bias_conv = config.bias_conv.then(|| {
            let conv = Conv2d::new(&mut ps, "bias_conv", config.d_code, config.d_code, 3, 1, 1.0, &mut rng);
            ps.get_mut(conv.weight).data.iter_mut().for_each(|v| *v = 0.0);
            conv
        });
        let decoder = Decoder::new(&mut ps, &config, &mut rng);
        Ok(Self {
            schedule: config.schedule.build()?,
            config,
            params: ps,
            encoder,
            decoder,
            codebook,
            bias_conv,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Latent shape `[h, w, d_code]` for an `image_size` square input.
    pub fn latent_shape(&self) -> [usize; 3] {
        let g = self.config.token_grid();
        [g, g, self.config.d_code]
    }

    pub fn codebook(&self) -> Codebook {
        let p = self.params.get(self.codebook);
        Codebook::new(self.config.codebook_size, self.config.d_code, p.data.clone()).expect("codebook kept finite")
    }

    pub fn set_codebook(&mut self, codebook: &Codebook) -> Result<()> {
        if codebook.size() != self.config.codebook_size || codebook.dim() != self.config.d_code {
            return Err(Error::Geometry(format!(
                "codebook {}x{} vs model {}x{}",
                codebook.size(),
                codebook.dim(),
                self.config.codebook_size,
                self.config.d_code
            )));
        }
        self.params.get_mut(self.codebook).data = codebook.embeddings().to_vec();
        Ok(())
    }

    /// Replaces the schedule; weights are untouched.
    pub fn set_schedule(&mut self, schedule: ScheduleConfig) -> Result<()> {
        self.schedule = schedule.build()?;
        self.config.schedule = schedule;
        Ok(())
    }

    pub fn bind(&self, requires_grad: bool) -> Bound {
        self.params.bind(requires_grad)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.config.downsample_ratio;
        match x.shape() {
            &[_, h, w, c] if c == CHANNELS && h % r == 0 && w % r == 0 => Ok(()),
            &[_, h, w, c] if c == CHANNELS => Err(Error::Geometry(format!(
                "input {h}x{w} not divisible by downsample ratio {r}"
            ))),
            other => Err(Error::Geometry(format!("expected [B, H, W, 3] input, got {other:?}"))),
        }
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        match z.shape() {
            &[_, _, _, d] if d == self.config.d_code => Ok(()),
            other => Err(Error::Geometry(format!(
                "expected [B, h, w, {}] latent, got {other:?}",
                self.config.d_code
            ))),
        }
    }

    /// `[B, H, W, 3]` in `[-1, 1]` to layer-normalized `[B, h, w, d_code]`.
    pub fn encode_bound(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.forward(p, x)
    }

    /// Decoder output before range mapping, in the encoder's `[-1, 1]` space.
    pub fn decode_bound(&self, p: &Bound, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        self.decoder.forward(p, z)
    }

    /// Adds the bias convolution (when enabled) to looked-up rows.
    fn embed(&self, p: &Bound, ste: &Tensor) -> Result<Tensor> {
        match &self.bias_conv {
            Some(conv) => {
                let s = ste.shape().to_vec();
                let x = if s.len() == 3 {
                    ste.reshape(&[1, s[0], s[1], s[2]])?
                } else {
                    ste.clone()
                };
                let q = x.add(&conv.forward(p, &x)?)?;
                q.reshape(&s)
            }
            None => Ok(ste.clone()),
        }
    }

    /// `v'` for given codes: the looked-up rows plus the bias convolution.
    /// `grid` is `[B, h, w]` or `[h, w]`.
    pub fn embed_codes(&self, codes: &[usize], grid: &[usize]) -> Result<Tensor> {
        let p = self.bind(false);
        let rows = p[self.codebook].gather_rows(codes, grid)?;
        self.embed(&p, &rows)
    }

    /// Algorithm 1 on a batch of latents `z_1` with the given per-step noise.
    pub fn rollout(&self, p: &Bound, z1: &Tensor, noises: &[Tensor]) -> Result<Rollout> {
        self.check_latent(z1)?;
        let steps = self.steps();
        if noises.len() != steps {
            return Err(Error::invalid(
                "tokenize",
                format!("{} noise tensors for T = {steps}", noises.len()),
            ));
        }
        let table = &p[self.codebook];
        let codebook = Codebook::new(self.config.codebook_size, self.config.d_code, table.to_vec())?;
        let grid = &z1.shape()[..3];
        let mut out = Rollout {
            noisy: Vec::with_capacity(steps),
            looked_up: Vec::with_capacity(steps),
            quantized: Vec::with_capacity(steps),
            residuals: vec![z1.clone()],
            accumulated: Tensor::zeros(z1.shape()),
            codes: Vec::with_capacity(steps),
        };
        let mut z = z1.clone();
        for (t, eps) in (1..=steps).zip(noises) {
            if eps.shape() != z1.shape() {
                return Err(Error::shape("tokenize", eps.shape(), z1.shape()));
            }
            let (a, b) = (self.schedule.alpha(t), self.schedule.beta(t));
            let v = z.scale(a).add(&eps.scale(b))?;
            let codes = codebook.nearest_codes(v.data())?;
            let e = table.gather_rows(&codes, grid)?;
            let q = self.embed(p, &v.straight_through(&e)?)?;
            z = z.sub(&q)?;
            out.accumulated = out.accumulated.add(&q)?;
            out.noisy.push(v);
            out.looked_up.push(e);
            out.quantized.push(q);
            out.residuals.push(z.clone());
            out.codes.push(codes);
        }
        Ok(out)
    }

    /// `T` standard-normal tensors of the latent shape, regenerated from a seed.
    pub fn noises_from_seed(&self, seed: u64, grid: [usize; 2]) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        let shape = [grid[0], grid[1], self.config.d_code];
        (0..self.steps()).map(|_| rng.normal_tensor(&shape)).collect()
    }

    pub fn encode(&self, x: &Image) -> Result<Tensor> {
        let t = x.to_signed_tensor();
        let s = t.shape().to_vec();
        let z = self.encode_bound(&self.bind(false), &t.reshape(&[1, s[0], s[1], s[2]])?)?;
        let zs = z.shape().to_vec();
        z.reshape(&zs[1..])
    }

    /// Decodes `[h, w, d_code]` to an image, mapping `[-1, 1]` to `[0, 1]`
    /// and clamping.
    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        let &[h, w, d] = z.shape() else {
            return Err(Error::Geometry(format!(
                "expected [h, w, d_code] latent, got {:?}",
                z.shape()
            )));
        };
        let raw = self.decode_bound(&self.bind(false), &z.reshape(&[1, h, w, d])?)?;
        let pixels = raw.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
        Image::new(
            w * self.config.downsample_ratio,
            h * self.config.downsample_ratio,
            pixels,
        )
    }

    /// Algorithm 1 on a single latent `[h, w, d_code]`.
    pub fn tokenize_latent(&self, z1: &Tensor, noises: &[Tensor]) -> Result<TokenizationRecord> {
        let &[h, w, d] = z1.shape() else {
            return Err(Error::Geometry(format!(
                "expected [h, w, d_code] latent, got {:?}",
                z1.shape()
            )));
        };
        let batch = |t: &Tensor| t.reshape(&[1, h, w, d]);
        let unbatch = |t: &Tensor| t.reshape(&[h, w, d]);
        let noises_b = noises.iter().map(batch).collect::<Result<Vec<_>>>()?;
        let r = self.rollout(&self.bind(false), &batch(z1)?, &noises_b)?;
        let all = |v: &[Tensor]| v.iter().map(unbatch).collect::<Result<Vec<_>>>();
        Ok(TokenizationRecord {
            codes: r.codes,
            noises: noises.to_vec(),
            noisy: all(&r.noisy)?,
            per_step_quantized: all(&r.quantized)?,
            residuals: all(&r.residuals)?,
            z_final: unbatch(&r.accumulated)?,
        })
    }

    /// Algorithm 1 with noise drawn from `rng`.
    pub fn tokenize(&self, x: &Image, rng: &mut Rng) -> Result<TokenizationRecord> {
        let z1 = self.encode(x)?;
        let shape = z1.shape().to_vec();
        let noises: Vec<Tensor> = (0..self.steps()).map(|_| rng.normal_tensor(&shape)).collect();
        self.tokenize_latent(&z1, &noises)
    }

    /// Algorithm 1 with noise regenerated from `noise_seed`.
    pub fn tokenize_seeded(&self, x: &Image, noise_seed: u64) -> Result<TokenizationRecord> {
        let z1 = self.encode(x)?;
        let noises = self.noises_from_seed(noise_seed, [z1.shape()[0], z1.shape()[1]]);
        self.tokenize_latent(&z1, &noises)
    }

    /// Tokenize then decode the accumulated latent.
    pub fn reconstruct(&self, x: &Image, noise_seed: u64) -> Result<Image> {
        self.decode(&self.tokenize_seeded(x, noise_seed)?.z_final)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::params_to_bytes(SECTION, &self.config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, params): (TokenizerConfig, _) =
            container::params_from_bytes(SECTION, bytes, "tokenizer checkpoint")?;
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

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> TokenizerConfig {
        TokenizerConfig {
            image_size: 8,
            downsample_ratio: 2,
            base_channels: 4,
            blocks_per_level: 1,
            codebook_size: 16,
            d_code: 4,
            ..TokenizerConfig::default()
        }
    }

    fn image(seed: u64, size: usize) -> Image {
        let mut rng = Rng::new(seed);
        Image::new(size, size, (0..size * size * 3).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn default_geometry() {
        let m = TokenizerModel::new(TokenizerConfig::default(), 0).unwrap();
        let z = m.encode(&image(1, 32)).unwrap();
        assert_eq!(z.shape(), &[8, 8, 8]);
        let x = m.decode(&z).unwrap();
        assert_eq!((x.width(), x.height()), (32, 32));
    }

    #[test]
    fn latents_are_normalized_per_position() {
        let m = TokenizerModel::new(tiny(), 3).unwrap();
        let z = m.encode(&image(2, 8)).unwrap();
        for row in z.data().chunks_exact(4) {
            let mu = row.iter().sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = TokenizerModel::new(tiny(), 0).unwrap();
        assert!(matches!(m.encode(&image(0, 7)), Err(Error::Geometry(_))));
    }

    #[test]
    fn final_step_sees_pure_residual() {
        let m = TokenizerModel::new(tiny(), 0).unwrap();
        let rec = m.tokenize(&image(4, 8), &mut Rng::new(5)).unwrap();
        let t = m.steps();
        assert_eq!(rec.noisy[t - 1].data(), rec.residuals[t - 1].data());
    }

    #[test]
    fn z_final_is_the_sum_of_steps() {
        let m = TokenizerModel::new(tiny(), 0).unwrap();
        let rec = m.tokenize(&image(4, 8), &mut Rng::new(5)).unwrap();
        assert_eq!(rec.accumulated(rec.steps()).unwrap(), rec.z_final);
    }

    #[test]
    fn embed_codes_matches_rollout() {
        let m = TokenizerModel::new(tiny(), 0).unwrap();
        let mut ps = m.params().clone();
        let bias = ps.find("bias_conv.weight").unwrap();
        let mut rng = Rng::new(8);
        ps.get_mut(bias).data.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        let mut m = m;
        m.params_mut().copy_from(&ps).unwrap();
        let rec = m.tokenize(&image(4, 8), &mut Rng::new(5)).unwrap();
        for t in 0..m.steps() {
            assert_eq!(
                m.embed_codes(&rec.codes[t], &[4, 4]).unwrap(),
                rec.per_step_quantized[t]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = TokenizerModel::new(tiny(), 11).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = TokenizerModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
