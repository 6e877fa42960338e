//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `RDPM_ACCEPTANCE=1,4,10` runs a subset.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};
use std::slice::from_ref;
use std::time::{Duration, Instant};

use rdpm::data::{generate_synthetic, read_image, LabeledImage, SyntheticSpec};
use rdpm::generator::{
    cfg_combine, generate, sample_codes, step_accuracy, train_generator, GeneratorConfig, GeneratorModel,
    GeneratorTrainConfig, Geometry, SamplerConfig, StepBatch, StepPredictor, TrainingExample,
};
use rdpm::nn::Bound;
use rdpm::numerics::{GradCheck, GradCheckReport, Rng, Tensor};
use rdpm::quantizer::{
    image_batch, tokenizer_objective, train_tokenizer, Codebook, LossWeights, TokenizerConfig, TokenizerModel,
    TokenizerTrainConfig,
};
use rdpm::schedule::{cfg_lambda, CfgMode, NoiseSchedule, ScheduleConfig, ScheduleKind};
use rdpm::Result;
use rdpm_cli::commands::item_noise_seed;
use rdpm_cli::config::RunConfig;
use rdpm_cli::report::read_report;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const TELESCOPE_TOL: f64 = 1e-12;
const POW_TOL: f64 = 1e-12;
const CHI2_P: f64 = 0.01;
const MEMORISE_ACC: f64 = 0.99;
const PROBE_FACTOR: f64 = 2.0;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn(&mut Shared) -> Result<Outcome>;

/// State carried from the first desk run into the determinism check.
#[derive(Default)]
struct Shared {
    desk: Option<PathBuf>,
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("RDPM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Option<u64>, Check); 10] = [
        (1, "schedule invariants", Some(1), schedules),
        (2, "nearest-neighbour oracle", Some(5), quantization_oracle),
        (3, "residual telescoping", None, telescoping),
        (4, "gradient checks", Some(120), gradient_checks),
        (5, "gumbel-max law", Some(30), gumbel_law),
        (6, "guidance identities", None, cfg_identities),
        (7, "reconstruction vs steps", Some(900), step_trend),
        (8, "desk run", Some(3600), desk_run),
        (9, "determinism", None, determinism),
        (10, "inference forward count", None, forward_count),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, limit, check) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = check(&mut shared).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|s| elapsed <= Duration::from_secs(s));
        let pass = outcome.pass && in_time;
        let budget = limit.map(|s| format!(" / {s}s")).unwrap_or_default();
        let late = if in_time { "" } else { " over time budget;" };
        println!(
            "{} {id:>2} {name}: {}{late} ({:.2}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    std::process::exit(if failed == 0 { 0 } else { 1 });
}

// ---- 1 ----

fn schedules(_: &mut Shared) -> Result<Outcome> {
    let mut problems = Vec::new();
    for kind in [ScheduleKind::Sin, ScheduleKind::Linear, ScheduleKind::Pow] {
        for steps in [1, 2, 10, 64] {
            let s = NoiseSchedule::new(kind, steps, 0.75)?;
            if s.alpha(steps) != 1.0 {
                problems.push(format!("{kind} T={steps}: alpha_T = {}", s.alpha(steps)));
            }
            if s.alphas().windows(2).any(|w| w[0] >= w[1]) {
                problems.push(format!("{kind} T={steps}: alpha not strictly increasing"));
            }
            for t in 1..=steps {
                let (a, b) = (s.alpha(t), s.beta(t));
                if a * a + b * b != 1.0 {
                    problems.push(format!("{kind} T={steps} t={t}: a^2+b^2-1 = {:e}", a * a + b * b - 1.0));
                }
            }
        }
    }
    let s = NoiseSchedule::new(ScheduleKind::Pow, 10, 0.75)?;
    let mut worst = 0.0f64;
    for t in 1..=10 {
        // 0.75 = 3/4, so phi^n = 3^n / 4^n with both powers exact in f64
        let n = (10 - t) as i32;
        let expect = 3f64.powi(n) / 4f64.powi(n);
        worst = worst.max((s.alpha(t) - expect).abs());
    }
    if worst > POW_TOL {
        problems.push(format!("pow deviation {worst:e}"));
    }
    let detail = if problems.is_empty() {
        format!("3 kinds x T in {{1,2,10,64}} exact; pow max deviation {worst:e}")
    } else {
        problems.join("; ")
    };
    Ok(Outcome::new(problems.is_empty(), detail))
}

// ---- 2 ----

fn brute_force(rows: &[f64], dim: usize, q: &[f64]) -> usize {
    let dists: Vec<f64> = rows
        .chunks(dim)
        .map(|r| r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).expect("non-empty")
}

fn quantization_oracle(_: &mut Shared) -> Result<Outcome> {
    let (k, d) = (512, 8);
    let mut rng = Rng::new(2);
    let mut rows = rng.normal_vec(k * d);
    for (src, dst) in [(5, 300), (64, 65), (120, 511)] {
        let r = rows[src * d..(src + 1) * d].to_vec();
        rows[dst * d..(dst + 1) * d].copy_from_slice(&r);
    }
    let cb = Codebook::new(k, d, rows.clone())?;
    let queries: Vec<Vec<f64>> = (0..1000)
        .map(|i| match i % 5 {
            0 => rows[300 * d..301 * d].to_vec(),
            1 => rows[(i % k) * d..(i % k + 1) * d].to_vec(),
            _ => rng.normal_vec(d),
        })
        .collect();
    let expect: Vec<usize> = queries.iter().map(|q| brute_force(&rows, d, q)).collect();
    let single = queries.iter().zip(&expect).filter(|(q, &e)| cb.nearest(q) != e).count();
    let batched = cb.nearest_codes(&queries.concat())?;
    let batch_bad = batched.iter().zip(&expect).filter(|(a, b)| a != b).count();
    let ties = expect.iter().filter(|&&e| e == 5).count();
    Ok(Outcome::new(
        single == 0 && batch_bad == 0,
        format!("1000 queries, K=512: {single} single and {batch_bad} batched mismatches; {ties} tie queries"),
    ))
}

// ---- 3 ----

fn telescoping(_: &mut Shared) -> Result<Outcome> {
    let mut model = TokenizerModel::new(TokenizerConfig::default(), 3)?;
    let id = model.params().find("bias_conv.weight").expect("bias conv enabled");
    let n = model.params().get(id).data.len();
    model.params_mut().get_mut(id).data = Rng::new(4).normal_vec(n).iter().map(|v| 0.1 * v).collect();
    let [h, w, d] = model.latent_shape();
    let steps = model.steps();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = Rng::stream(5, i);
        let z1 = rng.normal_tensor(&[h, w, d]);
        let noises: Vec<Tensor> = (0..steps).map(|_| rng.normal_tensor(&[h, w, d])).collect();
        let rec = model.tokenize_latent(&z1, &noises)?;
        for t in 1..=steps {
            let gap = z1.sub(&rec.accumulated(t)?)?.sub(&rec.residuals[t])?;
            worst = worst.max(gap.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(Outcome::new(
        worst <= TELESCOPE_TOL,
        format!("100 latents x {steps} steps, max ||z1 - z'_t - z_t+1|| = {worst:e}"),
    ))
}

// ---- 4 ----

fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let r = Rng::new(seed).normal_tensor(y.shape());
    Ok(y.mul(&r)?.sum())
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Rng::new(seed).normal_tensor(shape)
}

/// Values kept away from the kinks of relu and clamp.
fn smooth(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = Rng::new(seed);
    let v = (0..n)
        .map(|i| {
            let u = rng.uniform();
            match i % 3 {
                0 => -1.9 + 0.8 * u,
                1 => 0.1 + 0.3 * u,
                _ => 0.6 + 1.2 * u,
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

fn grad(f: impl Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Result<GradCheckReport> {
    GradCheck::new(GRAD_H, GRAD_TOL).run(f, inputs)
}

fn primitive_checks() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4], 2);
    let c = randn(&[3, 4], 3);
    let x = randn(&[2, 5], 4);
    let s = smooth(&[2, 5], 5);
    let r = randn(&[3, 6], 6);
    let m = randn(&[2, 3, 4], 7);
    let w = randn(&[4, 5], 8);
    let wb = randn(&[2, 4, 5], 9);
    let y = randn(&[2, 3, 2], 10);
    let img = randn(&[2, 5, 5, 2], 11);
    let k = randn(&[3, 3, 2, 3], 12);
    let table = randn(&[5, 3], 13);
    let b5 = randn(&[5], 14);
    let (shift, cond, u) = (randn(&[2, 4], 15), randn(&[2, 4], 16), randn(&[2, 3, 4], 17));
    Ok(vec![
        ("add", grad(|t| project(&t[0].add(&t[1])?, 1), &[a.clone(), b.clone()])?),
        ("sub", grad(|t| project(&t[0].sub(&t[1])?, 2), &[a.clone(), b.clone()])?),
        ("mul", grad(|t| project(&t[0].mul(&t[1])?, 3), &[a.clone(), c])?),
        ("mul_broadcast", grad(|t| project(&t[0].mul(&t[1])?, 4), &[a, b])?),
        ("scale", grad(|t| project(&t[0].scale(-1.7), 5), from_ref(&x))?),
        (
            "neg_add_scalar",
            grad(|t| project(&t[0].neg().add_scalar(0.3), 6), from_ref(&x))?,
        ),
        ("square", grad(|t| project(&t[0].square(), 7), from_ref(&x))?),
        ("exp", grad(|t| project(&t[0].exp(), 8), from_ref(&x))?),
        (
            "log",
            grad(|t| project(&t[0].square().add_scalar(0.5).log(), 9), from_ref(&x))?,
        ),
        ("silu", grad(|t| project(&t[0].silu(), 10), from_ref(&x))?),
        ("gelu", grad(|t| project(&t[0].gelu(), 11), from_ref(&x))?),
        ("tanh", grad(|t| project(&t[0].tanh(), 12), from_ref(&x))?),
        ("relu", grad(|t| project(&t[0].relu(), 13), from_ref(&s))?),
        ("clamp", grad(|t| project(&t[0].clamp(-1.0, 0.5), 14), &[s])?),
        ("sum", grad(|t| Ok(t[0].sum()), from_ref(&x))?),
        ("mean", grad(|t| Ok(t[0].mean()), &[x])?),
        ("softmax", grad(|t| project(&t[0].softmax(), 15), from_ref(&r))?),
        ("log_softmax", grad(|t| project(&t[0].log_softmax(), 16), from_ref(&r))?),
        (
            "layer_norm",
            grad(|t| project(&t[0].layer_norm(1e-6), 17), from_ref(&r))?,
        ),
        ("cross_entropy", grad(|t| t[0].cross_entropy(&[5, 0, 2]), from_ref(&r))?),
        (
            "mse",
            grad(|t| t[0].mse(&t[1]), &[r.clone(), r.scale(0.5).add_scalar(0.1)])?,
        ),
        (
            "matmul",
            grad(|t| project(&t[0].matmul(&t[1])?, 18), &[m.clone(), w.clone()])?,
        ),
        (
            "matmul_batched",
            grad(|t| project(&t[0].matmul(&t[1])?, 19), &[m.clone(), wb])?,
        ),
        ("reshape", grad(|t| project(&t[0].reshape(&[6, 4])?, 20), from_ref(&m))?),
        (
            "permute",
            grad(|t| project(&t[0].permute(&[1, 2, 0])?, 21), from_ref(&m))?,
        ),
        ("transpose", grad(|t| project(&t[0].transpose()?, 22), from_ref(&m))?),
        (
            "concat",
            grad(
                |t| project(&Tensor::concat(&[t[0].clone(), t[1].clone()])?, 23),
                &[m.clone(), y],
            )?,
        ),
        (
            "slice_last",
            grad(|t| project(&t[0].slice_last(1, 3)?, 24), from_ref(&m))?,
        ),
        (
            "broadcast_axis",
            grad(|t| project(&t[0].broadcast_axis(1, 3)?, 25), from_ref(&m))?,
        ),
        (
            "upsample2x",
            grad(
                |t| project(&t[0].reshape(&[1, 2, 3, 4])?.upsample2x()?, 26),
                from_ref(&m),
            )?,
        ),
        (
            "gather_rows",
            grad(
                |t| project(&t[0].gather_rows(&[4, 0, 2, 2, 1, 3], &[2, 3])?, 27),
                &[table],
            )?,
        ),
        (
            "conv2d",
            grad(|t| project(&t[0].conv2d(&t[1], 1, 1)?, 28), &[img.clone(), k.clone()])?,
        ),
        (
            "conv2d_stride2",
            grad(|t| project(&t[0].conv2d(&t[1], 2, 1)?, 29), &[img, k])?,
        ),
        (
            "affine",
            grad(|t| project(&t[0].affine(&t[1], &t[2])?, 30), &[m.clone(), w, b5])?,
        ),
        (
            "modulate",
            grad(
                |t| project(&t[0].modulate(&t[1], &t[2])?, 31),
                &[m.clone(), shift, cond.clone()],
            )?,
        ),
        (
            "add_gated",
            grad(|t| project(&t[0].add_gated(&t[1], &t[2])?, 32), &[m, u, cond])?,
        ),
    ])
}

/// Checks the parameters whose names satisfy `select`, holding the rest fixed.
fn model_check(
    base: &Bound,
    names: &[String],
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&Bound) -> Result<Tensor>,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let chosen: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| select(n))
        .map(|(i, _)| i)
        .collect();
    let values: Vec<Tensor> = chosen.iter().map(|&i| base.tensors()[i].clone()).collect();
    GradCheck::new(GRAD_H, GRAD_TOL).sample(per_tensor, 31).run(
        |leaves| {
            let mut ts = base.tensors().to_vec();
            for (j, &i) in chosen.iter().enumerate() {
                ts[i] = leaves[j].clone();
            }
            loss(&Bound::from_tensors(ts))
        },
        &values,
    )
}

fn tiny_tokenizer(steps: usize) -> TokenizerConfig {
    TokenizerConfig {
        image_size: 8,
        downsample_ratio: 2,
        base_channels: 4,
        blocks_per_level: 1,
        codebook_size: 16,
        d_code: 4,
        schedule: ScheduleConfig {
            steps,
            ..ScheduleConfig::default()
        },
        ..TokenizerConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    generate_synthetic(&SyntheticSpec {
        num_classes: 2,
        images_per_class: n.div_ceil(2),
        size: 8,
        seed,
    })
}

/// With one step the straight-through path is exact for the decoder and
/// the bias convolution; the codebook is checked on its own loss term and
/// the encoder through a fixed projection of its output.
fn tokenizer_checks() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut model = TokenizerModel::new(tiny_tokenizer(1), 15)?;
    let id = model.params().find("bias_conv.weight").expect("bias conv enabled");
    let n = model.params().get(id).data.len();
    model.params_mut().get_mut(id).data = Rng::new(16).normal_vec(n).iter().map(|v| 0.2 * v).collect();
    let data = tiny_data(2, 3)?;
    let x = image_batch(&data.iter().collect::<Vec<_>>())?;
    let [h, w, d] = model.latent_shape();
    let noises = vec![Rng::new(17).normal_tensor(&[2, h, w, d])];
    let base = model.bind(false);
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let z1 = model.encode_bound(&base, &x)?;
    let objective = |p: &Bound| {
        let r = model.rollout(p, &z1, &noises)?;
        let raw = model.decode_bound(p, &r.accumulated)?;
        Ok(tokenizer_objective(&model, &x, &r, &raw, &LossWeights::default())?.objective)
    };
    let codebook_term = |p: &Bound| {
        let r = model.rollout(p, &z1, &noises)?;
        Ok(r.noisy[0]
            .detach()
            .mse(&r.looked_up[0])?
            .scale(model.schedule().gamma(1)))
    };
    let proj = Rng::new(18).normal_tensor(&[2, h, w, d]);
    Ok(vec![
        (
            "tokenizer decoder",
            model_check(&base, &names, |n| n.starts_with("dec."), objective, 4)?,
        ),
        (
            "tokenizer bias_conv",
            model_check(&base, &names, |n| n.starts_with("bias_conv"), objective, 12)?,
        ),
        (
            "tokenizer codebook",
            model_check(&base, &names, |n| n == "codebook", codebook_term, 24)?,
        ),
        (
            "tokenizer encoder",
            model_check(
                &base,
                &names,
                |n| n.starts_with("enc."),
                |p| Ok(model.encode_bound(p, &x)?.mul(&proj)?.sum()),
                4,
            )?,
        ),
    ])
}

fn generator_check() -> Result<(&'static str, GradCheckReport)> {
    let tok = TokenizerModel::new(tiny_tokenizer(3), 1)?;
    let data = tiny_data(3, 4)?;
    let exs: Vec<TrainingExample> = data
        .iter()
        .take(3)
        .enumerate()
        .map(|(i, it)| TrainingExample::from_record(&tok.tokenize_seeded(&it.image, 100 + i as u64)?, it.label))
        .collect::<Result<_>>()?;
    let cfg = GeneratorConfig::for_tokenizer(&tok, 1, 2);
    let mut model = GeneratorModel::new(cfg.clone(), 13)?;
    // adaLN-Zero starts with zero gates; perturb them so every path carries gradient
    let mut rng = Rng::new(14);
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| p.name.contains("adaln"))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let id = model.params().find(&name).expect("listed");
        let n = model.params().get(id).data.len();
        model.params_mut().get_mut(id).data = rng.normal_vec(n).iter().map(|v| 0.05 * v).collect();
    }
    let batch = StepBatch::assemble(&cfg, &exs, &[(0, 1, 0), (1, 2, 2), (2, 3, 1)])?;
    let values = model.bind(false).tensors().to_vec();
    let report = GradCheck::new(GRAD_H, GRAD_TOL).sample(6, 15).run(
        |leaves| batch.loss(&model, &Bound::from_tensors(leaves.to_vec())),
        &values,
    )?;
    Ok(("generator cross-entropy", report))
}

fn gradient_checks(_: &mut Shared) -> Result<Outcome> {
    let mut all = primitive_checks()?;
    let primitives = all.len();
    all.extend(tokenizer_checks()?);
    all.push(generator_check()?);
    let failed: Vec<String> = all
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, r)| format!("{n} ({:e})", r.max_rel_error))
        .collect();
    let coords: usize = all.iter().map(|(_, r)| r.coords.len()).sum();
    let worst = all
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("non-empty");
    let detail = if failed.is_empty() {
        format!(
            "{primitives} primitives + {} model losses, {coords} coordinates, worst rel err {:e} ({})",
            all.len() - primitives,
            worst.1.max_rel_error,
            worst.0
        )
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok(Outcome::new(failed.is_empty(), detail))
}

// ---- 5 ----

fn gumbel_law(_: &mut Shared) -> Result<Outcome> {
    let cases: [(Vec<f64>, f64); 3] = [
        (vec![1.0, 0.0, -1.0, 0.5, 2.0], 1.0),
        (vec![0.3, 0.3, 0.3, 0.3, 0.3], 0.7),
        (vec![-2.0, 1.5, 0.0, 0.8, -0.4], 2.5),
    ];
    let n = 100_000;
    let mut ps = Vec::new();
    for (i, (logits, tau)) in cases.iter().enumerate() {
        let k = logits.len();
        let rows = Tensor::new(&[n, k], logits.iter().cycle().take(n * k).cloned().collect())?;
        let cfg = SamplerConfig {
            tau: *tau,
            ..SamplerConfig::default()
        };
        let codes = sample_codes(&rows, &cfg, &mut Rng::new(40 + i as u64))?;
        let mut counts = vec![0usize; k];
        codes.iter().for_each(|&c| counts[c] += 1);
        let scaled: Vec<f64> = logits.iter().map(|l| tau * l).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scaled.iter().map(|v| (v - m).exp()).sum();
        let probs: Vec<f64> = scaled.iter().map(|v| (v - m).exp() / z).collect();
        let stat: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| (c as f64 - p * n as f64).powi(2) / (p * n as f64))
            .sum();
        ps.push(1.0 - ChiSquared::new((k - 1) as f64).expect("dof > 0").cdf(stat));
    }
    Ok(Outcome::new(
        ps.iter().all(|&p| p > CHI2_P),
        format!(
            "K=5, 100k draws, chi-square p = {:.3} / {:.3} / {:.3}",
            ps[0], ps[1], ps[2]
        ),
    ))
}

// ---- 6 ----

fn cfg_identities(_: &mut Shared) -> Result<Outcome> {
    let mut rng = Rng::new(50);
    let cond = rng.normal_tensor(&[64, 16]);
    let uncond = rng.normal_tensor(&[64, 16]);
    let greedy = SamplerConfig {
        use_gumbel: false,
        ..SamplerConfig::default()
    };
    let argmax = |t: &Tensor| sample_codes(t, &greedy, &mut Rng::new(0));
    let zero = argmax(&cfg_combine(&cond, &uncond, 0.0)?)? == argmax(&cond)?;
    let gumbel = SamplerConfig::default();
    let zero_gumbel = sample_codes(&cfg_combine(&cond, &uncond, 0.0)?, &gumbel, &mut Rng::new(51))?
        == sample_codes(&cond, &gumbel, &mut Rng::new(51))?;
    let invariant = [0.5, 2.0, 7.5, 40.0]
        .iter()
        .map(|&l| cfg_combine(&cond, &cond, l))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .all(|t| t.data() == cond.data());
    let lambda_max = 3.7;
    let ramp = cfg_lambda(1, 10, lambda_max, CfgMode::Linear)? == 0.0
        && cfg_lambda(10, 10, lambda_max, CfgMode::Linear)? == lambda_max;
    let pass = zero && zero_gumbel && invariant && ramp;
    Ok(Outcome::new(
        pass,
        format!(
            "lambda=0 argmax equal: {zero} (with gumbel: {zero_gumbel}); cond==uncond invariant: {invariant}; ramp endpoints exact: {ramp}"
        ),
    ))
}

// ---- 7 ----

const TREND_STEPS: [usize; 4] = [2, 4, 6, 10];

fn toy_family_mse(kind: ScheduleKind, seed: u64) -> Result<Vec<f64>> {
    let size = 16;
    let train = generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        images_per_class: 25,
        size,
        seed: 100 + seed,
    })?;
    let test = generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        images_per_class: 8,
        size,
        seed: 200 + seed,
    })?;
    let train_cfg = TokenizerTrainConfig {
        epochs: 30,
        warmup_steps: 10,
        ..TokenizerTrainConfig::default()
    };
    let mut out = Vec::new();
    for steps in TREND_STEPS {
        let cfg = TokenizerConfig {
            image_size: size,
            downsample_ratio: 4,
            base_channels: 8,
            blocks_per_level: 1,
            codebook_size: 8,
            d_code: 8,
            schedule: ScheduleConfig {
                kind,
                steps,
                ..ScheduleConfig::default()
            },
            ..TokenizerConfig::default()
        };
        let mut model = TokenizerModel::new(cfg, seed)?;
        train_tokenizer(&mut model, &train, &train_cfg, seed, |_, _| Ok(()))?;
        let mut total = 0.0;
        for (i, item) in test.iter().enumerate() {
            let rec = model.reconstruct(&item.image, 1000 + i as u64)?;
            let n = rec.pixels().len() as f64;
            total += rec
                .pixels()
                .iter()
                .zip(item.image.pixels())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
        }
        out.push(total / test.len() as f64);
    }
    Ok(out)
}

/// For each adjacent pair of step counts, the number of seeds on which
/// the larger count reconstructs no worse.
fn pairwise_votes(rows: &[Vec<f64>]) -> Vec<usize> {
    (0..TREND_STEPS.len() - 1)
        .map(|j| rows.iter().filter(|r| r[j + 1] <= r[j]).count())
        .collect()
}

fn format_rows(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| r.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join("/"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn step_trend(_: &mut Shared) -> Result<Outcome> {
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|s| toy_family_mse(ScheduleKind::Pow, s))
        .collect::<Result<_>>()?;
    let votes = pairwise_votes(&rows);
    let pass = votes.iter().all(|&v| 2 * v > rows.len());
    let diag_start = Instant::now();
    let linear: Vec<Vec<f64>> = (0..3)
        .map(|s| toy_family_mse(ScheduleKind::Linear, s))
        .collect::<Result<_>>()?;
    println!(
        "     7 note: linear schedule, same protocol: MSE {} ; votes {:?} ({:.1}s, not part of the verdict)",
        format_rows(&linear),
        pairwise_votes(&linear),
        diag_start.elapsed().as_secs_f64()
    );
    Ok(Outcome::new(
        pass,
        format!(
            "T={TREND_STEPS:?} per-seed MSE {}; seeds with MSE(T_next) <= MSE(T) per pair {votes:?} of 3",
            format_rows(&rows)
        ),
    ))
}

// ---- 8 / 9 ----

fn rdpm(args: &[&str]) -> Result<()> {
    let mut full = vec!["rdpm"];
    full.extend_from_slice(args);
    match rdpm_cli::run(full) {
        0 => Ok(()),
        code => Err(rdpm::Error::Config(format!(
            "`rdpm {}` exited with {code}",
            args.join(" ")
        ))),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> rdpm::Error {
    rdpm::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// The full operator pipeline at the default configuration.
fn desk_pipeline(root: &Path) -> Result<()> {
    if root.exists() {
        fs::remove_dir_all(root).map_err(|e| io_error(root, e))?;
    }
    let (data, tok, gen) = (root.join("data"), root.join("tokenizer"), root.join("generator"));
    let (samples, eval) = (root.join("samples"), root.join("eval"));
    let ckpt = tok.join("tokenizer.ckpt");
    let gckpt = gen.join("generator.ckpt");
    rdpm(&["make-data", "--out", p(&data), "--quiet"])?;
    rdpm(&["train-tokenizer", "--out", p(&tok), "--data", p(&data), "--quiet"])?;
    rdpm(&[
        "tokenize",
        "--out",
        p(&tok),
        "--tokenizer",
        p(&ckpt),
        "--data",
        p(&data),
        "--quiet",
    ])?;
    let records = tok.join("records.bin");
    rdpm(&[
        "train-generator",
        "--out",
        p(&gen),
        "--tokenizer",
        p(&ckpt),
        "--records",
        p(&records),
        "--quiet",
    ])?;
    rdpm(&[
        "sample",
        "--out",
        p(&samples),
        "--generator",
        p(&gckpt),
        "--tokenizer",
        p(&ckpt),
        "--quiet",
    ])?;
    rdpm(&[
        "eval",
        "--out",
        p(&eval),
        "--tokenizer",
        p(&ckpt),
        "--generator",
        p(&gckpt),
        "--data",
        p(&data),
        "--quiet",
    ])
}

fn acceptance_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Overfits a depth-6 generator on one tokenized desk image.
fn memorise(root: &Path) -> Result<Vec<f64>> {
    let config = RunConfig::default();
    let tok = TokenizerModel::load(root.join("tokenizer/tokenizer.ckpt"))?;
    let data = generate_synthetic(&config.synthetic_spec())?;
    let image = read_image(root.join("data/00000.ppm"))?;
    let record = tok.tokenize_seeded(&image, item_noise_seed(&config, 0))?;
    let example = TrainingExample::from_record(&record, data[0].label)?;
    let cfg = GeneratorTrainConfig {
        epochs: 150,
        batch_size: tok.steps(),
        lr: 1e-3,
        warmup_steps: 10,
        weight_decay: 0.0,
        cond_dropout: 0.0,
        all_steps: true,
        ..GeneratorTrainConfig::default()
    };
    let trained = train_generator(config.generator_config(), from_ref(&example), &cfg, 60, |_| Ok(()))?;
    step_accuracy(&trained.model, &[example])
}

fn desk_run(shared: &mut Shared) -> Result<Outcome> {
    let root = acceptance_dir().join("run_a");
    let start = Instant::now();
    desk_pipeline(&root)?;
    let pipeline_secs = start.elapsed().as_secs_f64();
    shared.desk = Some(root.clone());

    let k = RunConfig::default().tokenizer.codebook_size as f64;
    let history = read_report(root.join("generator/generator_metrics.jsonl"))?;
    let loss = history
        .iter()
        .rfind(|r| r["kind"] == "generator_epoch")
        .and_then(|r| r["loss"].as_f64())
        .unwrap_or(f64::NAN);
    let a = loss < k.ln();

    let mem_start = Instant::now();
    let acc = memorise(&root)?;
    let min_acc = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let b = min_acc >= MEMORISE_ACC;

    let eval = read_report(root.join("eval/eval.jsonl"))?;
    let summary = eval.iter().find(|r| r["kind"] == "summary").expect("summary record");
    let consistency = summary["class_consistency"].as_f64().unwrap_or(f64::NAN);
    let chance = summary["chance"].as_f64().unwrap_or(f64::NAN);
    let c = consistency >= PROBE_FACTOR * chance;

    Ok(Outcome::new(
        a && b && c,
        format!(
            "(a) final generator loss {loss:.3} vs ln K {:.3}: {a}; (b) memorisation min per-step accuracy {min_acc:.4} ({:.0}s): {b}; (c) probe accuracy {consistency:.3} vs 2x chance {:.3}: {c}; pipeline {pipeline_secs:.0}s",
            k.ln(),
            mem_start.elapsed().as_secs_f64(),
            PROBE_FACTOR * chance
        ),
    ))
}

fn files_under(root: &Path, dir: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let path = root.join(dir);
    let mut files: Vec<PathBuf> = fs::read_dir(&path)
        .map_err(|e| io_error(&path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .map(|p| p.strip_prefix(root).expect("under root").to_path_buf())
        .collect();
    files.sort();
    Ok(files)
}

fn determinism(shared: &mut Shared) -> Result<Outcome> {
    let first = match &shared.desk {
        Some(root) => root.clone(),
        None => {
            let root = acceptance_dir().join("run_a");
            desk_pipeline(&root)?;
            root
        }
    };
    let second = acceptance_dir().join("run_b");
    desk_pipeline(&second)?;
    let mut compared = files_under(&first, "tokenizer", "ckpt")?;
    compared.extend(files_under(&first, "generator", "ckpt")?);
    let checkpoints = compared.len();
    compared.extend(files_under(&first, "samples", "ppm")?);
    compared.extend(files_under(&first, "eval", "ppm")?);
    let differing: Vec<String> = compared
        .iter()
        .filter(|rel| fs::read(first.join(rel)).ok() != fs::read(second.join(rel)).ok())
        .map(|rel| rel.display().to_string())
        .collect();
    Ok(Outcome::new(
        differing.is_empty() && checkpoints >= 3,
        format!(
            "{checkpoints} checkpoints + {} images compared, {} differ{}",
            compared.len() - checkpoints,
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(": {}", differing.join(", "))
            }
        ),
    ))
}

// ---- 10 ----

struct Counting<'a> {
    inner: &'a GeneratorModel,
    calls: Cell<usize>,
}

impl StepPredictor for Counting<'_> {
    fn geometry(&self) -> Geometry {
        self.inner.geometry()
    }

    fn null_label(&self) -> usize {
        self.inner.null_label()
    }

    fn predict(&self, eps: &Tensor, labels: &[usize], t: usize, z_prev: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(eps, labels, t, z_prev)
    }
}

fn forward_count(_: &mut Shared) -> Result<Outcome> {
    let config = RunConfig::default();
    let tok = TokenizerModel::new(config.tokenizer_config(), 70)?;
    let model = GeneratorModel::new(config.generator_config(), 71)?;
    let mut counts = Vec::new();
    for lambda_max in [config.sampler.lambda_max, 0.0] {
        let counting = Counting {
            inner: &model,
            calls: Cell::new(0),
        };
        let cfg = SamplerConfig {
            lambda_max,
            ..config.sampler_config(72)
        };
        let images = generate(&counting, &tok, &[0, 1, 2, 3], &cfg)?;
        assert_eq!(images.len(), 4);
        counts.push(counting.calls.get());
    }
    let steps = tok.steps();
    Ok(Outcome::new(
        steps == 10 && counts == [20, 10],
        format!(
            "T = {steps}: {} forwards with guidance, {} without",
            counts[0], counts[1]
        ),
    ))
}
