//! Run configuration: one TOML file drives every subcommand.

use std::path::Path;

use rdpm::data::SyntheticSpec;
use rdpm::generator::{GeneratorConfig, GeneratorTrainConfig, SamplerConfig};
use rdpm::numerics::derive_seed;
use rdpm::quantizer::{TokenizerConfig, TokenizerTrainConfig};
use rdpm::schedule::{CfgMode, ScheduleConfig};
use rdpm::{Error, Result};
use serde::{Deserialize, Serialize};

/// Seed stream indices; every random draw of a run derives from the
/// top-level seed through one of these.
pub mod stream {
    pub const DATA: u64 = 0;
    pub const TOKENIZER_INIT: u64 = 1;
    pub const TOKENIZER_TRAIN: u64 = 2;
    pub const TOKENIZE: u64 = 3;
    pub const GENERATOR_TRAIN: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const EVAL: u64 = 6;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_classes: 4,
            images_per_class: 50,
            image_size: 32,
        }
    }
}

/// Tokenizer architecture; image size and schedule come from their own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub downsample_ratio: usize,
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub codebook_size: usize,
    pub d_code: usize,
    pub bias_conv: bool,
    pub gamma_weighting: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        Self {
            downsample_ratio: t.downsample_ratio,
            base_channels: t.base_channels,
            blocks_per_level: t.blocks_per_level,
            codebook_size: t.codebook_size,
            d_code: t.d_code,
            bias_conv: t.bias_conv,
            gamma_weighting: t.gamma_weighting,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { depth: 6, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub lambda_max: f64,
    pub cfg_mode: CfgMode,
    pub tau: f64,
    pub use_gumbel: bool,
    /// Images drawn per class by `sample` and `eval`.
    pub samples_per_class: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            lambda_max: s.lambda_max,
            cfg_mode: s.cfg_mode,
            tau: s.tau,
            use_gumbel: s.use_gumbel,
            samples_per_class: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub schedule: ScheduleConfig,
    pub tokenizer: TokenizerSection,
    pub tokenizer_train: TokenizerTrainConfig,
    pub generator: GeneratorSection,
    pub generator_train: GeneratorTrainConfig,
    pub sampler: SamplerSection,
}

impl RunConfig {
    /// Parses and validates; unknown keys and out-of-range values are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(2..=8).contains(&d.num_classes) {
            return Err(Error::Config(format!(
                "data: num_classes must lie in 2..=8, got {}",
                d.num_classes
            )));
        }
        if d.images_per_class == 0 {
            return Err(Error::Config("data: images_per_class must be positive".into()));
        }
        if d.image_size < 8 {
            return Err(Error::Config(format!(
                "data: image_size must be at least 8, got {}",
                d.image_size
            )));
        }
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.tokenizer_config().validate()?;
        self.tokenizer_train.validate()?;
        self.generator_config().validate()?;
        self.generator_train.validate()?;
        self.sampler_config(0).validate()?;
        if self.sampler.samples_per_class == 0 {
            return Err(Error::Config("sampler: samples_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.data.num_classes,
            images_per_class: self.data.images_per_class,
            size: self.data.image_size,
            seed: self.seed_for(stream::DATA),
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        let t = &self.tokenizer;
        TokenizerConfig {
            image_size: self.data.image_size,
            downsample_ratio: t.downsample_ratio,
            base_channels: t.base_channels,
            blocks_per_level: t.blocks_per_level,
            codebook_size: t.codebook_size,
            d_code: t.d_code,
            bias_conv: t.bias_conv,
            gamma_weighting: t.gamma_weighting,
            schedule: self.schedule,
        }
    }

    /// Generator geometry follows the tokenizer configuration.
    pub fn generator_config(&self) -> GeneratorConfig {
        let t = self.tokenizer_config();
        GeneratorConfig {
            depth: self.generator.depth,
            mlp_ratio: self.generator.mlp_ratio,
            num_classes: self.data.num_classes,
            steps: t.schedule.steps,
            codebook_size: t.codebook_size,
            d_code: t.d_code,
            grid: t.token_grid(),
        }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            steps: self.schedule.steps,
            lambda_max: s.lambda_max,
            cfg_mode: s.cfg_mode,
            tau: s.tau,
            use_gumbel: s.use_gumbel,
            seed,
        }
    }

    pub fn seed_for(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }
}
