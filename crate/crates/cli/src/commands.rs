//! Subcommand implementations. Every command loads the run configuration,
//! writes it next to its outputs as `run.toml`, and derives all randomness
//! from the configured seed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rdpm::data::{
    generate_synthetic, load_records, save_records, write_image, Image, LabeledImage, NearestCentroid, RecordGeometry,
    RecordSet, StoredRecord,
};
use rdpm::generator::{
    examples_from_records, generate_codes, step_accuracy, train_generator, GeneratorModel, TrainingExample,
};
use rdpm::numerics::derive_seed;
use rdpm::quantizer::{train_tokenizer, TokenizerModel};
use rdpm::{Error, Result};
use serde_json::json;

use crate::config::{stream, RunConfig};
use crate::dataset::{read_dataset, write_dataset};
use crate::report::MetricsReport;

pub const TOKENIZER_CKPT: &str = "tokenizer.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const GENERATOR_RAW_CKPT: &str = "generator_raw.ckpt";
pub const RECORDS: &str = "records.bin";
pub const CONTACT_SHEET: &str = "contact_sheet.ppm";
pub const RUN_CONFIG: &str = "run.toml";

/// Shared state of one command invocation.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, quiet: bool) -> Result<Self> {
        std::fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let path = out.join(RUN_CONFIG);
        std::fs::write(&path, config.to_toml()?).map_err(|e| Error::Io { path, source: e })?;
        Ok(Self { config, out, quiet })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn report(&self, name: &str) -> Result<MetricsReport> {
        MetricsReport::create(self.out.join(name))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn json_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Noise seed of dataset item `index`; shared by `tokenize`, `reconstruct` and `eval`.
pub fn item_noise_seed(config: &RunConfig, index: usize) -> u64 {
    derive_seed(config.seed_for(stream::TOKENIZE), index as u64)
}

fn load_data(ctx: &Context, dir: &Path) -> Result<Vec<LabeledImage>> {
    let (manifest, items) = read_dataset(dir)?;
    let d = &ctx.config.data;
    if manifest.spec.num_classes != d.num_classes || manifest.spec.size != d.image_size {
        return Err(Error::Geometry(format!(
            "dataset has {} classes at {}px, config expects {} at {}px",
            manifest.spec.num_classes, manifest.spec.size, d.num_classes, d.image_size
        )));
    }
    if let Some(bad) = items
        .iter()
        .find(|it| it.image.width() != d.image_size || it.image.height() != d.image_size)
    {
        return Err(Error::Geometry(format!(
            "dataset image {}x{} vs configured {}px",
            bad.image.width(),
            bad.image.height(),
            d.image_size
        )));
    }
    Ok(items)
}

fn load_tokenizer(ctx: &Context, path: &Path) -> Result<TokenizerModel> {
    let model = TokenizerModel::load(path)?;
    let expected = ctx.config.tokenizer_config();
    if *model.config() != expected {
        return Err(Error::Geometry(format!(
            "{}: tokenizer checkpoint configuration {:?} differs from the run configuration {:?}",
            path.display(),
            model.config(),
            expected
        )));
    }
    Ok(model)
}

fn load_generator(ctx: &Context, path: &Path) -> Result<GeneratorModel> {
    let model = GeneratorModel::load(path)?;
    let expected = ctx.config.generator_config();
    if *model.config() != expected {
        return Err(Error::Geometry(format!(
            "{}: generator checkpoint configuration {:?} differs from the run configuration {:?}",
            path.display(),
            model.config(),
            expected
        )));
    }
    Ok(model)
}

pub fn make_data(ctx: &Context) -> Result<()> {
    let spec = ctx.config.synthetic_spec();
    let items = generate_synthetic(&spec)?;
    write_dataset(&ctx.out, &spec, &items)?;
    ctx.say(format!("wrote {} images to {}", items.len(), ctx.out.display()));
    Ok(())
}

pub fn train_tokenizer_cmd(ctx: &Context, data_dir: &Path) -> Result<()> {
    let data = load_data(ctx, data_dir)?;
    let cfg = &ctx.config;
    let mut model = TokenizerModel::new(cfg.tokenizer_config(), cfg.seed_for(stream::TOKENIZER_INIT))?;
    let mut report = ctx.report("tokenizer_metrics.jsonl")?;
    let ckpt = ctx.path(TOKENIZER_CKPT);
    train_tokenizer(
        &mut model,
        &data,
        &cfg.tokenizer_train,
        cfg.seed_for(stream::TOKENIZER_TRAIN),
        |epoch, model| {
            model.save(&ckpt)?;
            report.record("tokenizer_epoch", json_value(epoch)?)?;
            ctx.say(format!(
                "tokenizer epoch {:>3}  recon {:.5}  quant {:.5}  usage {:.3}",
                epoch.epoch, epoch.loss.recon, epoch.loss.quant, epoch.usage
            ));
            Ok(())
        },
    )?;
    model.save(&ckpt)
}

pub fn tokenize_cmd(ctx: &Context, tokenizer: &Path, data_dir: &Path) -> Result<()> {
    let model = load_tokenizer(ctx, tokenizer)?;
    let data = load_data(ctx, data_dir)?;
    let set = tokenize_dataset(&ctx.config, &model, &data)?;
    save_records(ctx.path(RECORDS), &set)?;
    ctx.say(format!("tokenized {} images", set.records.len()));
    Ok(())
}

pub fn tokenize_dataset(config: &RunConfig, model: &TokenizerModel, data: &[LabeledImage]) -> Result<RecordSet> {
    let [h, w, _] = model.latent_shape();
    let mut set = RecordSet::new(RecordGeometry {
        steps: model.steps(),
        height: h,
        width: w,
        codebook_size: model.config().codebook_size,
    });
    set.records = data
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let noise_seed = item_noise_seed(config, i);
            let rec = model.tokenize_seeded(&item.image, noise_seed)?;
            let codes = rec.codes.iter().flatten().map(|&c| c as u16).collect();
            Ok(StoredRecord {
                label: item.label as u32,
                noise_seed,
                codes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(set)
}

pub fn train_generator_cmd(ctx: &Context, tokenizer: &Path, records: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let tok = load_tokenizer(ctx, tokenizer)?;
    let set = load_records(records)?;
    if let Some((i, r)) = set
        .records
        .iter()
        .enumerate()
        .find(|(_, r)| r.label as usize >= cfg.data.num_classes)
    {
        return Err(Error::Record {
            index: i,
            msg: format!("label {} >= {} classes", r.label, cfg.data.num_classes),
        });
    }
    let examples = examples_from_records(&tok, &set)?;
    let mut report = ctx.report("generator_metrics.jsonl")?;
    let trained = train_generator(
        cfg.generator_config(),
        &examples,
        &cfg.generator_train,
        cfg.seed_for(stream::GENERATOR_TRAIN),
        |epoch| {
            report.record("generator_epoch", json_value(epoch)?)?;
            ctx.say(format!("generator epoch {:>3}  loss {:.5}", epoch.epoch, epoch.loss));
            Ok(())
        },
    )?;
    trained.ema.save(ctx.path(GENERATOR_CKPT))?;
    trained.model.save(ctx.path(GENERATOR_RAW_CKPT))?;
    let accuracy = step_accuracy(&trained.ema, &examples)?;
    report.record(
        "generator_train_accuracy",
        json!({ "per_step_accuracy": accuracy, "weights": "ema" }),
    )?;
    Ok(())
}

/// `labels` cycles to fill `n` images.
pub fn sample_labels(config: &RunConfig, labels: Option<&[usize]>, n: Option<usize>) -> Result<Vec<usize>> {
    let classes = config.data.num_classes;
    let base: Vec<usize> = match labels {
        Some(l) if !l.is_empty() => l.to_vec(),
        _ => (0..classes).collect(),
    };
    if let Some(&bad) = base.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} outside 0..{classes}")));
    }
    let n = n.unwrap_or(classes * config.sampler.samples_per_class);
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    Ok((0..n).map(|i| base[i % base.len()]).collect())
}

/// Contact sheet with `ceil(sqrt(n))` columns.
pub fn contact_sheet(images: &[Image]) -> Result<Image> {
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    Image::grid(images, cols)
}

pub fn sample_cmd(
    ctx: &Context,
    generator: &Path,
    tokenizer: &Path,
    labels: Option<&[usize]>,
    n: Option<usize>,
) -> Result<()> {
    let cfg = &ctx.config;
    let tok = load_tokenizer(ctx, tokenizer)?;
    let gen = load_generator(ctx, generator)?;
    let labels = sample_labels(cfg, labels, n)?;
    let (images, _) = generate_codes(&gen, &tok, &labels, &cfg.sampler_config(cfg.seed_for(stream::SAMPLE)))?;
    let mut report = ctx.report("samples.jsonl")?;
    for (i, (image, label)) in images.iter().zip(&labels).enumerate() {
        let file = format!("sample_{i:04}_class{label}.ppm");
        write_image(ctx.path(&file), image)?;
        report.record("sample", json!({ "index": i, "label": label, "path": file }))?;
    }
    write_image(ctx.path(CONTACT_SHEET), &contact_sheet(&images)?)?;
    report.record("sample_grid", json!({ "path": CONTACT_SHEET, "count": images.len() }))?;
    ctx.say(format!("wrote {} samples to {}", images.len(), ctx.out.display()));
    Ok(())
}

/// Each row of originals is followed by a row of their reconstructions.
pub fn reconstruct_cmd(ctx: &Context, tokenizer: &Path, data_dir: &Path, n: Option<usize>) -> Result<()> {
    let tok = load_tokenizer(ctx, tokenizer)?;
    let data = load_data(ctx, data_dir)?;
    let n = n.unwrap_or(16).min(data.len());
    let recon = (0..n)
        .into_par_iter()
        .map(|i| tok.reconstruct(&data[i].image, item_noise_seed(&ctx.config, i)))
        .collect::<Result<Vec<_>>>()?;
    let cols = 8.min(n.max(1));
    let mut tiles = Vec::with_capacity(2 * n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(cols) {
        tiles.extend(chunk.iter().map(|&i| data[i].image.clone()));
        tiles.extend(std::iter::repeat_n(black(&data[0].image), cols - chunk.len()));
        tiles.extend(chunk.iter().map(|&i| recon[i].clone()));
    }
    let mut report = ctx.report("reconstructions.jsonl")?;
    for (i, image) in recon.iter().enumerate() {
        let file = format!("recon_{i:04}.ppm");
        write_image(ctx.path(&file), image)?;
        report.record(
            "reconstruction",
            json!({ "index": i, "path": file, "mse": mse(image, &data[i].image) }),
        )?;
    }
    if n > 0 {
        write_image(ctx.path("reconstructions.ppm"), &Image::grid(&tiles, cols)?)?;
    }
    Ok(())
}

fn black(like: &Image) -> Image {
    Image::new(like.width(), like.height(), vec![0.0; like.pixels().len()]).expect("same geometry")
}

fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.pixels().len() as f64;
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// `exp(H)` of the empirical code distribution.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalSummary {
    pub recon_mse: f64,
    pub codebook_usage: f64,
    pub codebook_perplexity: f64,
    pub per_step_perplexity: Vec<f64>,
    pub per_step_accuracy: Option<Vec<f64>>,
    pub class_consistency: Option<f64>,
    pub chance: f64,
    pub sample_grid: Option<String>,
}

pub fn eval_cmd(ctx: &Context, tokenizer: &Path, generator: Option<&Path>, data_dir: &Path) -> Result<EvalSummary> {
    let cfg = &ctx.config;
    let tok = load_tokenizer(ctx, tokenizer)?;
    let data = load_data(ctx, data_dir)?;
    let mut report = ctx.report("eval.jsonl")?;

    let recon_mse = data
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            Ok(mse(
                &tok.reconstruct(&item.image, item_noise_seed(cfg, i))?,
                &item.image,
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum::<f64>()
        / data.len() as f64;
    report.record("reconstruction", json!({ "mse": recon_mse, "images": data.len() }))?;

    let records = tokenize_dataset(cfg, &tok, &data)?;
    let g = records.geometry;
    let k = g.codebook_size;
    let mut all = vec![0usize; k];
    let mut per_step_perplexity = Vec::with_capacity(g.steps);
    for t in 1..=g.steps {
        let mut counts = vec![0usize; k];
        for r in &records.records {
            for &c in r.step_codes(&g, t) {
                counts[c as usize] += 1;
                all[c as usize] += 1;
            }
        }
        per_step_perplexity.push(perplexity(&counts));
    }
    let codebook_usage = all.iter().filter(|&&c| c > 0).count() as f64 / k as f64;
    let codebook_perplexity = perplexity(&all);
    report.record(
        "codebook",
        json!({
            "usage": codebook_usage,
            "perplexity": codebook_perplexity,
            "per_step_perplexity": per_step_perplexity,
            "size": k,
        }),
    )?;

    let chance = 1.0 / cfg.data.num_classes as f64;
    let mut summary = EvalSummary {
        recon_mse,
        codebook_usage,
        codebook_perplexity,
        per_step_perplexity,
        per_step_accuracy: None,
        class_consistency: None,
        chance,
        sample_grid: None,
    };

    if let Some(path) = generator {
        let gen = load_generator(ctx, path)?;
        let examples: Vec<TrainingExample> = examples_from_records(&tok, &records)?;
        let accuracy = step_accuracy(&gen, &examples)?;
        report.record("step_accuracy", json!({ "per_step_accuracy": accuracy }))?;

        let labels = sample_labels(cfg, None, None)?;
        let (images, _) = generate_codes(&gen, &tok, &labels, &cfg.sampler_config(cfg.seed_for(stream::EVAL)))?;
        let probe = NearestCentroid::fit(&data, cfg.data.num_classes)?;
        let sampled: Vec<LabeledImage> = images
            .iter()
            .zip(&labels)
            .map(|(image, &label)| LabeledImage {
                image: image.clone(),
                label,
            })
            .collect();
        let consistency = probe.accuracy(&sampled);
        let grid = "eval_samples.ppm";
        write_image(ctx.path(grid), &contact_sheet(&images)?)?;
        report.record(
            "class_consistency",
            json!({ "accuracy": consistency, "chance": chance, "samples": labels.len(), "sample_grid": grid }),
        )?;
        summary.per_step_accuracy = Some(accuracy);
        summary.class_consistency = Some(consistency);
        summary.sample_grid = Some(grid.into());
    }
    report.record("summary", json_value(&summary)?)?;
    ctx.say(serde_json::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?);
    Ok(summary)
}
