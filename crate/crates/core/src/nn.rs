//! Parameters, layers and optimisation shared by the tokenizer and the
//! generator.
//!
//! Model weights live in a [`ParamSet`] as plain vectors. A training step
//! binds them into fresh gradient-tracking leaves ([`Bound`]), builds a
//! loss, calls `backward`, then hands the collected gradients to the
//! optimiser. Inference binds without gradients.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape {shape:?} does not match data"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, shape, vec![0.0; shape.iter().product()])
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        self.add(name, shape, data)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.range(-bound, bound)).collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces every parameter's values from `other`, which must have the
    /// same names and shapes in the same order.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Geometry(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Geometry(format!(
                    "parameter {} {:?} vs {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn bind(&self, requires_grad: bool) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::leaf(&p.shape, p.data.clone(), requires_grad).expect("validated on insert"))
            .collect();
        Bound { tensors }
    }
}

/// Parameters bound as tensors for one forward (and backward) pass.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    /// Gradients after `backward`; unused parameters get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

/// Affine map over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: ps.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng),
            bias: ps.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn zeroed(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: ps.zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: ps.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.affine(&p[self.weight], &p[self.bias])
    }
}

/// Square-kernel convolution over NHWC tensors.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let bound = gain / ((kernel * kernel * cin) as f64).sqrt();
        Self {
            weight: ps.uniform(format!("{name}.weight"), &[kernel, kernel, cin, cout], bound, rng),
            bias: ps.zeros(format!("{name}.bias"), &[cout]),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&p[self.weight], self.stride, self.pad)?.add(&p[self.bias])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps);
        let bc2 = 1.0 - beta2.powi(self.steps);
        for (i, param) in params.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..param.data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                param.data[j] -= lr * (update + weight_decay * param.data[j]);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Linear warmup over `warmup` steps, then constant.
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Exponential moving average of a parameter set.
///
/// The effective decay after `n` updates is `min(decay, (1 + n) / (10 + n))`,
/// so short runs are not dominated by the initial weights.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub shadow: ParamSet,
    updates: usize,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &ParamSet) {
        let d = self.effective_decay();
        self.updates += 1;
        for (s, p) in self.shadow.params.iter_mut().zip(&params.params) {
            for (sv, pv) in s.data.iter_mut().zip(&p.data) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
    }
}
