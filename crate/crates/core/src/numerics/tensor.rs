//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation returns a fresh immutable [`Tensor`]. When at least one
//! input requires a gradient, the result remembers the operation and its
//! inputs; [`Tensor::backward`] walks that graph once in reverse
//! topological order. Graphs are single-use: a second `backward` through
//! any already-differentiated interior node is an error. Only leaves keep
//! gradients; they accumulate across distinct graphs until
//! [`Tensor::zero_grad`].
//!
//! Binary elementwise operations broadcast only over leading dimensions:
//! the lower-rank operand's shape must equal the trailing dimensions of the
//! other. Anything else is a shape error.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    grad: Mutex<Option<Vec<f64>>>,
    consumed: AtomicBool,
}

/// Geometry of a 2-D convolution over NHWC inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Offset(Tensor),
    StraightThrough(Tensor),
    Square(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Relu(Tensor),
    Silu(Tensor),
    Gelu(Tensor),
    Tanh(Tensor),
    Clamp(Tensor, f64, f64),
    Map(Tensor, fn(f64) -> f64),
    Sum(Tensor),
    Mean(Tensor),
    MatMul(Tensor, Tensor),
    Affine(Tensor, Tensor, Tensor),
    Modulate(Tensor, Tensor, Tensor),
    AddGated(Tensor, Tensor, Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Concat(Vec<Tensor>),
    Slice(Tensor, usize, usize),
    Broadcast(Tensor, usize, usize),
    Gather(Tensor, Arc<Vec<usize>>),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    LayerNorm(Tensor, Vec<f64>),
    CrossEntropy(Tensor, Arc<Vec<usize>>, Vec<f64>),
    Conv2d(Tensor, Tensor, ConvGeom, Vec<f64>),
    Upsample2x(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv2d(a, b, ..) => vec![a, b],
            Op::Affine(a, b, c) | Op::Modulate(a, b, c) | Op::AddGated(a, b, c) => vec![a, b, c],
            Op::Concat(xs) => xs.iter().collect(),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::StraightThrough(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Clamp(a, ..)
            | Op::Map(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice(a, ..)
            | Op::Broadcast(a, ..)
            | Op::Gather(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::CrossEntropy(a, ..)
            | Op::Upsample2x(a) => vec![a],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Creates a constant tensor. Fails unless `product(shape) == data.len()`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Creates a leaf that collects gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::raw(shape.to_vec(), Arc::new(data), requires_grad, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), Arc::new(vec![0.0; numel(shape)]), false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::raw(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, Op::Leaf)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1], Arc::new(vec![value]), false, Op::Leaf)
    }

    fn raw(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, op: Op) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            op,
            grad: Mutex::new(None),
            consumed: AtomicBool::new(false),
        }))
    }

    /// Result of an operation; the graph edge is dropped when no input
    /// needs a gradient.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Self::raw(shape, Arc::new(data), requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf; interior tensors never keep one.
    pub fn grad(&self) -> Option<Tensor> {
        let guard = self.0.grad.lock().expect("grad lock poisoned");
        guard
            .as_ref()
            .map(|g| Self::raw(self.0.shape.clone(), Arc::new(g.clone()), false, Op::Leaf))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.shape.clone(), Arc::clone(&self.0.data), false, Op::Leaf)
    }

    fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// elementwise

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, a, b));
    }
    Ok(long.to_vec())
}

/// [`reduce_to`] that hands `g` back unchanged when no reduction is needed.
fn reduce_owned(g: Vec<f64>, len: usize) -> Vec<f64> {
    if g.len() == len {
        g
    } else {
        reduce_to(&g, len)
    }
}

/// Sums `g` (length n) down to length `len` where `len` divides `n`.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    if a.len() >= b.len() {
        for chunk in a.chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks_exact(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = broadcast_shape(op, self.shape(), other.shape())?;
        Ok((shape, zip_broadcast(self.data(), other.data(), f)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = self.binary(other, "add", |x, y| x + y)?;
        Ok(Self::from_op(shape, data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(Self::from_op(shape, data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(Self::from_op(shape, data, Op::Mul(self.clone(), other.clone())))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Self::from_op(self.shape().to_vec(), data, op)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, Op::Offset(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, Op::Square(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(|x| x * sigmoid(x), Op::Silu(self.clone()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        // 0.5 (1 + tanh u) == sigmoid(2u), and exp is much cheaper than tanh
        self.unary(|x| x * sigmoid(2.0 * gelu_inner(x)), Op::Gelu(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh(self.clone()))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp(self.clone(), lo, hi))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&self, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Tensor {
        self.unary(f, Op::Map(self.clone(), df))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Self::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Self::from_op(vec![1], vec![s / self.numel() as f64], Op::Mean(self.clone()))
    }

    /// Straight-through estimator: the result carries `value`'s data
    /// exactly, while the gradient is copied unchanged to `self`.
    pub fn straight_through(&self, value: &Tensor) -> Result<Tensor> {
        if self.shape() != value.shape() {
            return Err(Error::shape("straight_through", self.shape(), value.shape()));
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            value.to_vec(),
            Op::StraightThrough(self.clone()),
        ))
    }

    /// Mean squared difference.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.sub(other)?.square().mean())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * gelu_inner(x));
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

// ---------------------------------------------------------------------------
// matmul

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[.., m, k] x [k, n]` (shared right operand) or
    /// `[B.., m, k] x [B.., k, n]` (batched, identical leading dims).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", a, b));
        }
        let mut shape = a[..a.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; numel(&shape)];
        if b.len() == 2 {
            let rows = self.numel() / k;
            gemm(rows, k, n, self.data(), k, 1, other.data(), n, 1, &mut out, false);
        } else {
            if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
                return Err(Error::shape("matmul", a, b));
            }
            let batch = numel(&a[..a.len() - 2]);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[i * m * k..],
                    k,
                    1,
                    &other.data()[i * k * n..],
                    n,
                    1,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Ok(Self::from_op(shape, out, Op::MatMul(self.clone(), other.clone())))
    }
}

/// Leading extent `b` and row width `h` of an `[b, .., h]` tensor paired
/// with a per-example `[b, h]` operand.
fn per_example_geometry(op: &'static str, x: &[usize], cond: &[usize]) -> Result<(usize, usize)> {
    match (x, cond) {
        ([b, .., h], [cb, ch]) if x.len() >= 2 && b == cb && h == ch => Ok((*b, *h)),
        _ => Err(Error::shape(op, x, cond)),
    }
}

impl Tensor {
    /// `self . weight + bias` for `[.., k] x [k, n] + [n]`.
    pub fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (a, w) = (self.shape(), weight.shape());
        let k = *a.last().unwrap_or(&0);
        if a.is_empty() || w.len() != 2 || w[0] != k || bias.shape() != [w[1]] {
            return Err(Error::shape("affine", a, w));
        }
        let n = w[1];
        let rows = self.numel() / k.max(1);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(bias.data());
        }
        gemm(rows, k, n, self.data(), k, 1, weight.data(), n, 1, &mut out, true);
        let mut shape = a.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Self::from_op(
            shape,
            out,
            Op::Affine(self.clone(), weight.clone(), bias.clone()),
        ))
    }

    /// AdaLN modulation `self * (1 + scale) + shift` of an `[b, .., h]`
    /// tensor by per-example `[b, h]` rows.
    pub fn modulate(&self, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
        let (b, h) = per_example_geometry("modulate", self.shape(), shift.shape())?;
        per_example_geometry("modulate", self.shape(), scale.shape())?;
        let per = self.numel() / b;
        let mut out = Vec::with_capacity(self.numel());
        for (i, x) in self.data().chunks_exact(per).enumerate() {
            let (sh, sc) = (&shift.data()[i * h..(i + 1) * h], &scale.data()[i * h..(i + 1) * h]);
            for row in x.chunks_exact(h) {
                out.extend(row.iter().zip(sh).zip(sc).map(|((x, s), c)| x * (1.0 + c) + s));
            }
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            out,
            Op::Modulate(self.clone(), shift.clone(), scale.clone()),
        ))
    }

    /// Gated residual `self + update * gate` with per-example `[b, h]` gates.
    pub fn add_gated(&self, update: &Tensor, gate: &Tensor) -> Result<Tensor> {
        if self.shape() != update.shape() {
            return Err(Error::shape("add_gated", self.shape(), update.shape()));
        }
        let (b, h) = per_example_geometry("add_gated", self.shape(), gate.shape())?;
        let per = self.numel() / b;
        let mut out = Vec::with_capacity(self.numel());
        for (i, (x, u)) in self
            .data()
            .chunks_exact(per)
            .zip(update.data().chunks_exact(per))
            .enumerate()
        {
            let gt = &gate.data()[i * h..(i + 1) * h];
            for (xr, ur) in x.chunks_exact(h).zip(u.chunks_exact(h)) {
                out.extend(xr.iter().zip(ur).zip(gt).map(|((x, u), g)| x + u * g));
            }
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            out,
            Op::AddGated(self.clone(), update.clone(), gate.clone()),
        ))
    }
}

/// Gradient of a per-example `[b, h]` operand: `sum over rows of g * x`
/// (or of `g` alone when `x` is `None`).
fn per_example_reduce(g: &[f64], x: Option<&[f64]>, b: usize, h: usize) -> Vec<f64> {
    let per = g.len() / b;
    let mut out = vec![0.0; b * h];
    for (i, dst) in out.chunks_exact_mut(h).enumerate() {
        let gi = &g[i * per..(i + 1) * per];
        match x {
            Some(x) => {
                let xi = &x[i * per..(i + 1) * per];
                for (gr, xr) in gi.chunks_exact(h).zip(xi.chunks_exact(h)) {
                    dst.iter_mut().zip(gr).zip(xr).for_each(|((d, g), x)| *d += g * x);
                }
            }
            None => {
                for gr in gi.chunks_exact(h) {
                    dst.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
    out
}

/// `g * cond` with `[b, h]` rows broadcast over the middle axes.
fn per_example_scale(mut g: Vec<f64>, cond: &[f64], offset: f64, b: usize, h: usize) -> Vec<f64> {
    let per = g.len() / b;
    for (i, gi) in g.chunks_exact_mut(per).enumerate() {
        let c = &cond[i * h..(i + 1) * h];
        for row in gi.chunks_exact_mut(h) {
            row.iter_mut().zip(c).for_each(|(v, c)| *v *= offset + c);
        }
    }
    g
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
    let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
    if bsh.len() == 2 {
        let rows = a.numel() / k;
        if let Some(ga) = ga.as_mut() {
            // dA = dC . B^T
            gemm(rows, n, k, g, n, 1, b.data(), 1, n, ga, false);
        }
        if let Some(gb) = gb.as_mut() {
            // dB = A^T . dC
            gemm(k, rows, n, a.data(), 1, k, g, n, 1, gb, false);
        }
    } else {
        let batch = a.numel() / (m * k);
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                gemm(
                    m,
                    n,
                    k,
                    gi,
                    n,
                    1,
                    &b.data()[i * k * n..],
                    1,
                    n,
                    &mut ga[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[i * m * k..],
                    1,
                    k,
                    gi,
                    n,
                    1,
                    &mut gb[i * k * n..(i + 1) * k * n],
                    false,
                );
            }
        }
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// layout

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = rank - 1;
    loop {
        // innermost dimension as a tight loop
        let stride = strides[inner];
        for j in 0..out_shape[inner] {
            out.push(data[offset + j * stride]);
        }
        // odometer over the outer dimensions
        let mut d = inner;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let requires_grad = self.requires_grad();
        let op = if requires_grad {
            Op::Reshape(self.clone())
        } else {
            Op::Leaf
        };
        Ok(Self::raw(shape.to_vec(), Arc::clone(&self.0.data), requires_grad, op))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {:?}", self.shape()),
            ));
        }
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Ok(Self::from_op(shape, data, Op::Permute(self.clone(), perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::invalid("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            let sh = p.shape();
            if sh.len() != first.shape().len() || &sh[..sh.len() - 1] != lead {
                return Err(Error::shape("concat", first.shape(), sh));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self::from_op(shape, data, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        let w = *self.shape().last().unwrap();
        if start >= end || end > w {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{end} out of bounds for shape {:?}", self.shape()),
            ));
        }
        let rows = self.numel() / w;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * w + start..r * w + end]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        Ok(Self::from_op(shape, data, Op::Slice(self.clone(), start, end)))
    }

    /// Inserts a new axis of extent `n` at position `axis`, repeating values.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis > self.shape().len() || n == 0 {
            return Err(Error::invalid(
                "broadcast_axis",
                format!("axis {axis} x{n} invalid for shape {:?}", self.shape()),
            ));
        }
        let outer = numel(&self.shape()[..axis]);
        let inner = numel(&self.shape()[axis..]);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &self.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, n);
        Ok(Self::from_op(shape, data, Op::Broadcast(self.clone(), axis, n)))
    }

    /// Row lookup in a `[rows, width]` table. Output shape is
    /// `index_shape ++ [width]`.
    pub fn gather_rows(&self, indices: &[usize], index_shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::invalid(
                "gather_rows",
                format!("table must be 2-D, got {:?}", self.shape()),
            ));
        }
        if numel(index_shape) != indices.len() {
            return Err(Error::invalid(
                "gather_rows",
                format!("index shape {index_shape:?} does not hold {} indices", indices.len()),
            ));
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(width);
        Ok(Self::from_op(
            shape,
            data,
            Op::Gather(self.clone(), Arc::new(indices.to_vec())),
        ))
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let &[b, h, w, c] = self.shape() else {
            return Err(Error::invalid(
                "upsample2x",
                format!("expected NHWC, got {:?}", self.shape()),
            ));
        };
        let mut data = vec![0.0; b * 4 * h * w * c];
        let src = self.data();
        for bi in 0..b {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let s = ((bi * h + y / 2) * w + x / 2) * c;
                    let d = ((bi * 2 * h + y) * 2 * w + x) * c;
                    data[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        Ok(Self::from_op(
            vec![b, 2 * h, 2 * w, c],
            data,
            Op::Upsample2x(self.clone()),
        ))
    }
}

// ---------------------------------------------------------------------------
// row-wise normalisations and losses

impl Tensor {
    fn last_dim(&self) -> usize {
        *self.shape().last().unwrap()
    }

    pub fn softmax(&self) -> Tensor {
        let k = self.last_dim();
        let mut data = self.to_vec();
        for row in data.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        Self::from_op(self.shape().to_vec(), data, Op::Softmax(self.clone()))
    }

    pub fn log_softmax(&self) -> Tensor {
        let k = self.last_dim();
        let mut data = self.to_vec();
        for row in data.chunks_exact_mut(k) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Self::from_op(self.shape().to_vec(), data, Op::LogSoftmax(self.clone()))
    }

    /// Normalises each last-axis vector to zero mean, unit variance. No affine.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let k = self.last_dim();
        let mut data = self.to_vec();
        let mut inv = Vec::with_capacity(self.numel() / k);
        for row in data.chunks_exact_mut(k) {
            let mu = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * s);
            inv.push(s);
        }
        Self::from_op(self.shape().to_vec(), data, Op::LayerNorm(self.clone(), inv))
    }

    /// Mean over rows of `-log softmax(row)[target]`, rows taken along the
    /// last axis.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let k = self.last_dim();
        let rows = self.numel() / k;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = self.to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_exact_mut(k).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        Ok(Self::from_op(
            vec![1],
            vec![total / rows as f64],
            Op::CrossEntropy(self.clone(), Arc::new(targets.to_vec()), probs),
        ))
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

// ---------------------------------------------------------------------------
// convolution

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.cin;
                        let off = (ky * g.kernel + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.height * g.width * g.cin];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.cin;
                        let off = (ky * g.kernel + kx) * g.cin;
                        for c in 0..g.cin {
                            x[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tensor {
    /// 2-D convolution of an NHWC input with a `[k, k, cin, cout]` kernel.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (&[batch, height, width, cin], &[kernel, kw, wcin, cout]) = (self.shape(), weight.shape()) else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        if kernel != kw || cin != wcin || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        let g = ConvGeom {
            batch,
            height,
            width,
            cin,
            cout,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        };
        let cols = im2col(self.data(), &g);
        let mut out = vec![0.0; g.rows() * cout];
        gemm(
            g.rows(),
            g.patch(),
            cout,
            &cols,
            g.patch(),
            1,
            weight.data(),
            cout,
            1,
            &mut out,
            false,
        );
        let shape = vec![batch, g.out_h, g.out_w, cout];
        Ok(Self::from_op(
            shape,
            out,
            Op::Conv2d(self.clone(), weight.clone(), g, cols),
        ))
    }
}

// ---------------------------------------------------------------------------
// backward

impl Tensor {
    /// Reverse-mode sweep from a scalar loss. Populates `grad()` on every
    /// reachable tensor that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward(
                "loss does not depend on any tensor requiring a gradient".into(),
            ));
        }
        let order = self.topo_order();
        for node in &order {
            if !node.is_leaf() && node.0.consumed.swap(true, Ordering::SeqCst) {
                return Err(Error::Backward(
                    "graph already differentiated; rebuild it for another backward".into(),
                ));
            }
        }
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else { continue };
            if node.is_leaf() {
                let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => *slot = Some(g),
                }
            } else {
                node.propagate(g, &mut grads);
            }
        }
        Ok(())
    }

    /// Post-order over the subgraph of gradient-requiring tensors.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, mut g: Vec<f64>, grads: &mut HashMap<usize, Vec<f64>>) {
        let mut send = |t: &Tensor, v: Vec<f64>| {
            if !t.requires_grad() {
                return;
            }
            debug_assert_eq!(v.len(), t.numel());
            match grads.get_mut(&t.key()) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x),
                None => {
                    grads.insert(t.key(), v);
                }
            }
        };
        let y = self.data();
        // g <- f(x, g), reusing the incoming buffer
        let local = |x: &Tensor, mut g: Vec<f64>, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            g.iter_mut().zip(x.data()).for_each(|(gv, &xv)| *gv = f(xv, *gv));
            g
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.0.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let gb = b.requires_grad().then(|| {
                    let mut gb = if a.requires_grad() {
                        reduce_to(&g, b.numel())
                    } else {
                        reduce_owned(std::mem::take(&mut g), b.numel())
                    };
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    gb
                });
                if a.requires_grad() {
                    send(a, reduce_owned(g, a.numel()));
                }
                if let Some(gb) = gb {
                    send(b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    send(a, reduce_owned(zip_broadcast(&g, bd, |gv, v| gv * v), ad.len()));
                }
                if b.requires_grad() {
                    send(b, reduce_owned(zip_broadcast(&g, ad, |gv, v| gv * v), bd.len()));
                }
            }
            Op::Scale(a, c) => {
                g.iter_mut().for_each(|v| *v *= c);
                send(a, g)
            }
            Op::Offset(a) | Op::Reshape(a) | Op::StraightThrough(a) => send(a, g),
            Op::Square(a) => send(a, local(a, g, &|x, gv| 2.0 * x * gv)),
            Op::Exp(a) => {
                g.iter_mut().zip(y).for_each(|(gv, yv)| *gv *= yv);
                send(a, g)
            }
            Op::Log(a) => send(a, local(a, g, &|x, gv| gv / x)),
            Op::Relu(a) => send(a, local(a, g, &|x, gv| if x > 0.0 { gv } else { 0.0 })),
            Op::Silu(a) => send(
                a,
                local(a, g, &|x, gv| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Gelu(a) => send(a, local(a, g, &|x, gv| gv * gelu_grad(x))),
            Op::Tanh(a) => {
                g.iter_mut().zip(y).for_each(|(gv, yv)| *gv *= 1.0 - yv * yv);
                send(a, g)
            }
            Op::Clamp(a, lo, hi) => send(a, local(a, g, &|x, gv| if x > *lo && x < *hi { gv } else { 0.0 })),
            Op::Map(a, df) => send(a, local(a, g, &|x, gv| gv * df(x))),
            Op::Sum(a) => send(a, vec![g[0]; a.numel()]),
            Op::Mean(a) => send(a, vec![g[0] / a.numel() as f64; a.numel()]),
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(a, b, &g);
                if let Some(ga) = ga {
                    send(a, ga);
                }
                if let Some(gb) = gb {
                    send(b, gb);
                }
            }
            Op::Affine(x, w, bias) => {
                if bias.requires_grad() {
                    send(bias, reduce_to(&g, bias.numel()));
                }
                let (gx, gw) = matmul_backward(x, w, &g);
                if let Some(gx) = gx {
                    send(x, gx);
                }
                if let Some(gw) = gw {
                    send(w, gw);
                }
            }
            Op::Modulate(x, shift, scale) => {
                let (b, h) = (x.shape()[0], x.last_dim());
                if shift.requires_grad() {
                    send(shift, per_example_reduce(&g, None, b, h));
                }
                if scale.requires_grad() {
                    send(scale, per_example_reduce(&g, Some(x.data()), b, h));
                }
                if x.requires_grad() {
                    send(x, per_example_scale(g, scale.data(), 1.0, b, h));
                }
            }
            Op::AddGated(x, update, gate) => {
                let (b, h) = (x.shape()[0], x.last_dim());
                if gate.requires_grad() {
                    send(gate, per_example_reduce(&g, Some(update.data()), b, h));
                }
                if update.requires_grad() {
                    send(update, per_example_scale(g.clone(), gate.data(), 0.0, b, h));
                }
                if x.requires_grad() {
                    send(x, g);
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                send(a, permute_data(&g, self.shape(), &inverse));
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        send(p, gp);
                    }
                    off += w;
                }
            }
            Op::Slice(a, start, end) => {
                let w = a.last_dim();
                let sw = end - start;
                let mut ga = vec![0.0; a.numel()];
                for (r, chunk) in g.chunks_exact(sw).enumerate() {
                    ga[r * w + start..r * w + end].copy_from_slice(chunk);
                }
                send(a, ga);
            }
            Op::Broadcast(a, axis, n) => {
                let inner = numel(&a.shape()[*axis..]);
                let mut ga = vec![0.0; a.numel()];
                for (o, block) in g.chunks_exact(n * inner).enumerate() {
                    let dst = &mut ga[o * inner..(o + 1) * inner];
                    for rep in block.chunks_exact(inner) {
                        dst.iter_mut().zip(rep).for_each(|(d, v)| *d += v);
                    }
                }
                send(a, ga);
            }
            Op::Gather(table, idx) => {
                let width = table.shape()[1];
                let mut gt = vec![0.0; table.numel()];
                for (&i, chunk) in idx.iter().zip(g.chunks_exact(width)) {
                    gt[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(chunk)
                        .for_each(|(d, v)| *d += v);
                }
                send(table, gt);
            }
            Op::Softmax(a) => {
                let k = a.last_dim();
                let mut ga = vec![0.0; a.numel()];
                for ((gr, yr), out) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(ga.chunks_exact_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(a, ga);
            }
            Op::LogSoftmax(a) => {
                let k = a.last_dim();
                let mut ga = vec![0.0; a.numel()];
                for ((gr, yr), out) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(ga.chunks_exact_mut(k)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..k {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                send(a, ga);
            }
            Op::LayerNorm(a, inv) => {
                let k = a.last_dim();
                let kf = k as f64;
                let mut ga = vec![0.0; a.numel()];
                for (((gr, yr), out), s) in g
                    .chunks_exact(k)
                    .zip(y.chunks_exact(k))
                    .zip(ga.chunks_exact_mut(k))
                    .zip(inv)
                {
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = s / kf * (kf * gr[j] - sum_g - yr[j] * sum_gy);
                    }
                }
                send(a, ga);
            }
            Op::CrossEntropy(a, targets, probs) => {
                let k = a.last_dim();
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                let mut ga: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    ga[r * k + t] -= scale;
                }
                send(a, ga);
            }
            Op::Conv2d(x, w, geom, cols) => {
                if w.requires_grad() {
                    let mut gw = vec![0.0; w.numel()];
                    // dW = cols^T . dY
                    gemm(
                        geom.patch(),
                        geom.rows(),
                        geom.cout,
                        cols,
                        1,
                        geom.patch(),
                        &g,
                        geom.cout,
                        1,
                        &mut gw,
                        false,
                    );
                    send(w, gw);
                }
                if x.requires_grad() {
                    let mut gcols = vec![0.0; cols.len()];
                    // dcols = dY . W^T
                    gemm(
                        geom.rows(),
                        geom.cout,
                        geom.patch(),
                        &g,
                        geom.cout,
                        1,
                        w.data(),
                        1,
                        geom.cout,
                        &mut gcols,
                        false,
                    );
                    send(x, col2im(&gcols, geom));
                }
            }
            Op::Upsample2x(a) => {
                let &[b, h, w, c] = a.shape() else { unreachable!() };
                let mut ga = vec![0.0; a.numel()];
                for bi in 0..b {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((bi * 2 * h + yy) * 2 * w + xx) * c;
                            let d = ((bi * h + yy / 2) * w + xx / 2) * c;
                            for ci in 0..c {
                                ga[d + ci] += g[s + ci];
                            }
                        }
                    }
                }
                send(a, ga);
            }
        }
    }
}

impl PartialEq for Tensor {
    /// Value equality: same shape and bitwise-equal data.
    fn eq(&self, other: &Self) -> bool {
        self.same_node(other)
            || (self.shape() == other.shape()
                && self
                    .data()
                    .iter()
                    .zip(other.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}
