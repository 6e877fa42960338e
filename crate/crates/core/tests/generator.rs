use std::cell::Cell;

use rdpm::data::{generate_synthetic, SyntheticSpec};
use rdpm::generator::{
    cfg_combine, drop_labels, generate_codes, generator_loss, sample_codes, step_accuracy, train_generator,
    GeneratorConfig, GeneratorModel, GeneratorTrainConfig, Geometry, SamplerConfig, StepBatch, StepPredictor,
    TrainingExample,
};
use rdpm::nn::{Bound, Ema, ParamSet};
use rdpm::numerics::{GradCheck, Rng, Tensor};
use rdpm::quantizer::{TokenizerConfig, TokenizerModel};
use rdpm::schedule::{cfg_lambda, CfgMode, ScheduleConfig, ScheduleKind};
use rdpm::Result;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tiny_tokenizer(steps: usize) -> TokenizerModel {
    let cfg = TokenizerConfig {
        image_size: 8,
        downsample_ratio: 2,
        base_channels: 4,
        blocks_per_level: 1,
        codebook_size: 16,
        d_code: 4,
        bias_conv: true,
        gamma_weighting: true,
        schedule: ScheduleConfig {
            kind: ScheduleKind::Pow,
            steps,
            phi: 0.75,
        },
    };
    TokenizerModel::new(cfg, 1).unwrap()
}

fn examples(tok: &TokenizerModel, n: usize) -> Vec<TrainingExample> {
    let data = generate_synthetic(&SyntheticSpec {
        num_classes: 2,
        images_per_class: n.div_ceil(2),
        size: 8,
        seed: 4,
    })
    .unwrap();
    data.iter()
        .take(n)
        .enumerate()
        .map(|(i, it)| {
            TrainingExample::from_record(&tok.tokenize_seeded(&it.image, 100 + i as u64).unwrap(), it.label).unwrap()
        })
        .collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| v - m - z.ln()).collect()
}

#[test]
fn cross_entropy_examples() {
    let k = 7;
    let uniform = Tensor::full(&[3, k], 0.4);
    let loss = generator_loss(&uniform, &[0, 3, 6]).unwrap().item();
    assert!((loss - (k as f64).ln()).abs() < 1e-12);

    let mut sharp = vec![0.0; 2 * k];
    sharp[2] = 50.0;
    sharp[k + 5] = 50.0;
    let loss = generator_loss(&Tensor::new(&[2, k], sharp).unwrap(), &[2, 5])
        .unwrap()
        .item();
    assert!(loss < 1e-20);

    let logits = vec![0.3, -1.2, 2.0, 1.1, 0.0, -0.4];
    let expect = -(log_softmax(&logits[..3])[1] + log_softmax(&logits[3..])[0]) / 2.0;
    let loss = generator_loss(&Tensor::new(&[2, 3], logits).unwrap(), &[1, 0])
        .unwrap()
        .item();
    assert!((loss - expect).abs() < 1e-14);
}

#[test]
fn teacher_forced_loss_matches_recomputation() {
    let tok = tiny_tokenizer(3);
    let exs = examples(&tok, 4);
    let cfg = GeneratorConfig::for_tokenizer(&tok, 1, 2);
    let mut model = GeneratorModel::new(cfg.clone(), 2).unwrap();
    perturb(&mut model, 3);
    let items: Vec<(usize, usize, usize)> = vec![(0, 1, 0), (1, 3, 1), (2, 2, 2), (3, 1, 1)];
    let batch = StepBatch::assemble(&cfg, &exs, &items).unwrap();
    let loss = batch.loss(&model, &model.bind(false)).unwrap().item();

    let [h, w, d] = tok.latent_shape();
    let mut total = 0.0;
    let mut count = 0;
    for &(i, t, y) in &items {
        let ex = &exs[i];
        let eps = Tensor::new(&[h, w, d], ex.noises[t - 1].clone()).unwrap();
        let z = Tensor::new(&[h, w, d], ex.prefix[t - 1].clone()).unwrap();
        let logits = model.predict_step(&eps, y, t, &z).unwrap();
        for (row, &c) in logits.data().chunks(16).zip(&ex.codes[t - 1]) {
            total -= log_softmax(row)[c];
            count += 1;
        }
    }
    assert!((loss - total / count as f64).abs() < 1e-10);
}

#[test]
fn teacher_forcing_prefix_is_ground_truth_accumulation() {
    let tok = tiny_tokenizer(4);
    let data = generate_synthetic(&SyntheticSpec {
        num_classes: 2,
        images_per_class: 1,
        size: 8,
        seed: 5,
    })
    .unwrap();
    let rec = tok.tokenize_seeded(&data[0].image, 9).unwrap();
    let ex = TrainingExample::from_record(&rec, 0).unwrap();
    assert!(ex.prefix[0].iter().all(|&v| v == 0.0));
    for t in 1..4 {
        assert_eq!(ex.prefix[t], rec.accumulated(t).unwrap().to_vec());
    }
}

fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn gumbel_max_follows_tempered_softmax() {
    for (logits, tau) in [(vec![1.0, 0.0, -1.0], 1.0), (vec![0.5, 0.2, 0.9], 2.5)] {
        let k = logits.len();
        let n = 100_000;
        let rows = Tensor::new(&[n, k], logits.iter().cycle().take(n * k).cloned().collect()).unwrap();
        let cfg = SamplerConfig {
            tau,
            ..SamplerConfig::default()
        };
        let codes = sample_codes(&rows, &cfg, &mut Rng::new(7)).unwrap();
        let mut counts = vec![0usize; k];
        codes.iter().for_each(|&c| counts[c] += 1);
        let scaled: Vec<f64> = logits.iter().map(|l| tau * l).collect();
        let probs: Vec<f64> = log_softmax(&scaled).iter().map(|v| v.exp()).collect();
        for j in 0..k {
            let sigma = (probs[j] * (1.0 - probs[j]) / n as f64).sqrt();
            assert!((counts[j] as f64 / n as f64 - probs[j]).abs() < 3.0 * sigma + 1e-12);
        }
        assert!(chi_square_p(&counts, &probs) > 0.01);
    }
}

#[test]
fn cfg_identities() {
    let mut rng = Rng::new(8);
    let cond = rng.normal_tensor(&[16, 5]);
    let uncond = rng.normal_tensor(&[16, 5]);
    let cfg = SamplerConfig::default();
    let a = sample_codes(&cfg_combine(&cond, &uncond, 0.0).unwrap(), &cfg, &mut Rng::new(9)).unwrap();
    let b = sample_codes(&cond, &cfg, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    for lambda in [0.5, 3.0, 17.0] {
        assert_eq!(cfg_combine(&cond, &cond, lambda).unwrap().data(), cond.data());
    }
    assert_eq!(cfg_lambda(1, 10, 2.5, CfgMode::Linear).unwrap(), 0.0);
    assert_eq!(cfg_lambda(10, 10, 2.5, CfgMode::Linear).unwrap(), 2.5);
    assert_eq!(cfg_lambda(4, 10, 2.5, CfgMode::Constant).unwrap(), 2.5);
}

#[test]
fn condition_dropout_frequency() {
    let mut labels = vec![1usize; 10_000];
    let dropped = drop_labels(&mut labels, 4, 0.1, &mut Rng::new(10));
    assert_eq!(dropped, labels.iter().filter(|&&y| y == 4).count());
    assert!((dropped as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{dropped}");
}

#[test]
fn ema_converges_to_frozen_weights() {
    let mut ps = ParamSet::new();
    ps.add("w", &[3], vec![1.0, -2.0, 0.5]);
    let mut start = ps.clone();
    start.get_mut(start.find("w").unwrap()).data = vec![0.0; 3];
    let mut ema = Ema::new(&start, 0.99);
    for _ in 0..5000 {
        ema.update(&ps);
    }
    for (a, b) in ema.shadow.iter().zip(ps.iter()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_initialised_model_ignores_condition() {
    let tok = tiny_tokenizer(4);
    let model = GeneratorModel::new(GeneratorConfig::for_tokenizer(&tok, 2, 3), 11).unwrap();
    let [h, w, d] = tok.latent_shape();
    let mut rng = Rng::new(12);
    let eps = rng.normal_tensor(&[h, w, d]);
    let z = rng.normal_tensor(&[h, w, d]);
    let base = model.predict_step(&eps, 0, 1, &z).unwrap();
    assert_eq!(base.shape(), &[h * w, 16]);
    for (y, t) in [(1, 1), (2, 4), (3, 2), (0, 3)] {
        let other = model.predict_step(&eps, y, t, &z).unwrap();
        let max_diff = base
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0, "y={y} t={t}");
    }
    assert!(model.predict_step(&eps, 0, 0, &z).is_err());
    assert!(model.predict_step(&eps, 0, 5, &z).is_err());
}

/// Replaces the zero-initialised modulation weights so every path carries gradient.
fn perturb(model: &mut GeneratorModel, seed: u64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|p| p.name.contains("adaln"))
        .map(|p| p.name.clone())
        .collect();
    for name in ids {
        let id = model.params().find(&name).unwrap();
        let n = model.params().get(id).data.len();
        model.params_mut().get_mut(id).data = rng.normal_vec(n).iter().map(|v| 0.05 * v).collect();
    }
}

#[test]
fn depth_one_gradient_check() {
    let tok = tiny_tokenizer(3);
    let exs = examples(&tok, 3);
    let cfg = GeneratorConfig::for_tokenizer(&tok, 1, 2);
    assert_eq!((cfg.hidden(), cfg.heads()), (64, 1));
    let mut model = GeneratorModel::new(cfg.clone(), 13).unwrap();
    perturb(&mut model, 14);
    let batch = StepBatch::assemble(&cfg, &exs, &[(0, 1, 0), (1, 2, 2), (2, 3, 1)]).unwrap();
    let values = model.bind(false).tensors().to_vec();
    let report = GradCheck::new(1e-5, 1e-4)
        .sample(6, 15)
        .run(
            |leaves| batch.loss(&model, &Bound::from_tensors(leaves.to_vec())),
            &values,
        )
        .unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
}

/// Counts forward passes of the wrapped predictor.
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

#[test]
fn sampling_runs_one_forward_per_branch_and_step() {
    let tok = tiny_tokenizer(5);
    let model = GeneratorModel::new(GeneratorConfig::for_tokenizer(&tok, 1, 2), 16).unwrap();
    for (lambda_max, expect) in [(2.0, 10), (0.0, 5)] {
        let counting = Counting {
            inner: &model,
            calls: Cell::new(0),
        };
        let cfg = SamplerConfig {
            steps: 5,
            lambda_max,
            ..SamplerConfig::default()
        };
        let (images, codes) = generate_codes(&counting, &tok, &[0, 1, 1], &cfg).unwrap();
        assert_eq!(counting.calls.get(), expect);
        assert_eq!(images.len(), 3);
        assert_eq!(codes.len(), 5);
    }
}

#[test]
fn geometry_mismatch_fails_before_compute() {
    let tok = tiny_tokenizer(5);
    let other = tiny_tokenizer(4);
    let model = GeneratorModel::new(GeneratorConfig::for_tokenizer(&other, 1, 2), 17).unwrap();
    let counting = Counting {
        inner: &model,
        calls: Cell::new(0),
    };
    let cfg = SamplerConfig {
        steps: 5,
        ..SamplerConfig::default()
    };
    assert!(matches!(
        generate_codes(&counting, &tok, &[0], &cfg),
        Err(rdpm::Error::Geometry(_))
    ));
    assert_eq!(counting.calls.get(), 0);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let tok = tiny_tokenizer(3);
    let mut model = GeneratorModel::new(GeneratorConfig::for_tokenizer(&tok, 1, 2), 18).unwrap();
    perturb(&mut model, 19);
    let cfg = SamplerConfig {
        steps: 3,
        seed: 4,
        ..SamplerConfig::default()
    };
    let a = generate_codes(&model, &tok, &[0, 1], &cfg).unwrap();
    let b = generate_codes(&model, &tok, &[0, 1], &cfg).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
}

#[test]
fn training_loss_falls_below_uniform_baseline() {
    let tok = tiny_tokenizer(3);
    let exs = examples(&tok, 16);
    let cfg = GeneratorTrainConfig {
        epochs: 30,
        batch_size: 8,
        lr: 2e-3,
        warmup_steps: 5,
        ..GeneratorTrainConfig::default()
    };
    let trained = train_generator(GeneratorConfig::for_tokenizer(&tok, 4, 2), &exs, &cfg, 20, |_| Ok(())).unwrap();
    let last = trained.history.last().unwrap().loss;
    assert!(last < (16f64).ln(), "final loss {last}");
}

#[test]
fn single_image_is_memorised() {
    let tok = tiny_tokenizer(3);
    let exs = examples(&tok, 1);
    let cfg = GeneratorTrainConfig {
        epochs: 150,
        batch_size: 3,
        lr: 3e-3,
        warmup_steps: 10,
        cond_dropout: 0.0,
        weight_decay: 0.0,
        ema_decay: 0.9,
        all_steps: true,
        ..GeneratorTrainConfig::default()
    };
    let trained = train_generator(GeneratorConfig::for_tokenizer(&tok, 1, 2), &exs, &cfg, 21, |_| Ok(())).unwrap();
    let acc = step_accuracy(&trained.model, &exs).unwrap();
    assert!(acc.iter().all(|&a| a >= 0.99), "{acc:?}");
}
