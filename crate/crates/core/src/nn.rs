//! Dense-network numerics: matrices, dense maps with low-rank adapter deltas,
//! softmax cross-entropy, manual backpropagation over the trainable
//! parameters of a residual stack, SGD, and a central-difference oracle.
//!
//! Only adapters and the classifier head are trainable. The base layers and
//! the input projection never receive gradient entries.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ResidualBlock;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, values)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite non-negative std");
        let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Shape(format!(
                "transposed matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.values[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self += alpha · u ⊗ v`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::Shape(format!(
                "outer product {}x{} into {}x{}",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (r, &ur) in u.iter().enumerate() {
            let a = alpha * ur;
            if a == 0.0 {
                continue;
            }
            let dst = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (d, &vc) in dst.iter_mut().zip(v) {
                *d += a * vc;
            }
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "axpy: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        axpy(&mut self.values, alpha, &other.values);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Parameters of an affine map `weight · x + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseParams {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zero_out(&mut self) {
        self.weight.fill(0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

pub fn dense_forward(params: &DenseParams, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = params.weight.matvec(x)?;
    axpy(&mut y, 1.0, &params.bias);
    Ok(y)
}

/// Low-rank adapter: effective weight delta is `scale · up · down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub down: Matrix,
    pub up: Matrix,
    pub scale: f64,
}

/// Standard deviation used for the `down` factor at initialization.
pub const LORA_DOWN_INIT_STD: f64 = 0.02;

impl LoraAdapter {
    pub fn new(down: Matrix, up: Matrix, scale: f64) -> Result<Self> {
        let rank = down.rows();
        if rank == 0 || up.cols() != rank {
            return Err(Error::Shape(format!(
                "adapter factors down {:?} / up {:?} disagree on rank",
                down.shape(),
                up.shape()
            )));
        }
        if rank > down.cols().min(up.rows()) {
            return Err(Error::Shape(format!(
                "rank {rank} exceeds min(in={}, out={})",
                down.cols(),
                up.rows()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Precondition(format!("adapter scale {scale} must be > 0")));
        }
        Ok(LoraAdapter { down, up, scale })
    }

    /// `down ~ N(0, 0.02²)`, `up = 0`: the initial delta is exactly zero.
    pub fn zero_delta<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(Error::Precondition(format!(
                "rank {rank} must lie in [1, min({in_dim}, {out_dim})]"
            )));
        }
        LoraAdapter::new(
            Matrix::gaussian(rank, in_dim, LORA_DOWN_INIT_STD, rng),
            Matrix::zeros(out_dim, rank),
            scale,
        )
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    /// `scale · up · down`
    pub fn delta(&self) -> Result<Matrix> {
        let mut d = self.up.matmul(&self.down)?;
        d.scale(self.scale);
        Ok(d)
    }

    pub fn zero_out(&mut self) {
        self.down.fill(0.0);
        self.up.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.down.as_slice().len() + self.up.as_slice().len()
    }
}

/// `(weight + scale·up·down)·x + bias`, evaluated in factored form.
pub fn lora_delta_apply(adapter: &LoraAdapter, params: &DenseParams, x: &[f64]) -> Result<Vec<f64>> {
    if adapter.down.cols() != params.in_dim() || adapter.up.rows() != params.out_dim() {
        return Err(Error::Shape(format!(
            "adapter {}->{} on a {}->{} layer",
            adapter.down.cols(),
            adapter.up.rows(),
            params.in_dim(),
            params.out_dim()
        )));
    }
    let mut y = dense_forward(params, x)?;
    let low = adapter.down.matvec(x)?;
    let delta = adapter.up.matvec(&low)?;
    axpy(&mut y, adapter.scale, &delta);
    Ok(y)
}

/// Pointwise nonlinearity. Every variant satisfies `act(0) = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at `z`; the ReLU kink at 0 takes derivative 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Numerically stabilized softmax cross-entropy. Returns the loss and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax over empty logits".into()));
    }
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Read access to a residual stack: frozen input projection, an ordered run
/// of residual blocks, and a classifier head.
pub trait Network {
    fn input_proj(&self) -> &DenseParams;
    fn blocks(&self) -> &[ResidualBlock];
    fn head(&self) -> &DenseParams;
}

/// Mutable access to the trainable parameters (adapters and head).
pub trait TrainableNetwork: Network {
    fn parts_mut(&mut self) -> (&mut [ResidualBlock], &mut DenseParams);

    fn blocks_mut(&mut self) -> &mut [ResidualBlock] {
        self.parts_mut().0
    }

    fn head_mut(&mut self) -> &mut DenseParams {
        self.parts_mut().1
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `hidden[0]` is the projected input; `hidden[k]` the output of block k.
    pub hidden: Vec<Vec<f64>>,
    pub pre_activation: Vec<Vec<f64>>,
    pub low_rank: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

pub fn forward_trace<N: Network + ?Sized>(net: &N, x: &[f64]) -> Result<ForwardTrace> {
    let blocks = net.blocks();
    let mut hidden = Vec::with_capacity(blocks.len() + 1);
    let mut pre_activation = Vec::with_capacity(blocks.len());
    let mut low_rank = Vec::with_capacity(blocks.len());
    hidden.push(dense_forward(net.input_proj(), x)?);
    for block in blocks {
        let h = hidden.last().expect("non-empty");
        let low = block.adapter.down.matvec(h)?;
        let mut z = dense_forward(&block.base, h)?;
        axpy(&mut z, block.adapter.scale, &block.adapter.up.matvec(&low)?);
        let next: Vec<f64> = h
            .iter()
            .zip(&z)
            .map(|(&hv, &zv)| hv + block.activation.apply(zv))
            .collect();
        pre_activation.push(z);
        low_rank.push(low);
        hidden.push(next);
    }
    let logits = dense_forward(net.head(), hidden.last().expect("non-empty"))?;
    Ok(ForwardTrace {
        hidden,
        pre_activation,
        low_rank,
        logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub down: Matrix,
    pub up: Matrix,
}

/// Gradients of the trainable parameters, shape-matched to a network.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord {
    pub adapters: Vec<AdapterGrad>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

impl GradRecord {
    pub fn zeros_like<N: Network + ?Sized>(net: &N) -> Self {
        GradRecord {
            adapters: net
                .blocks()
                .iter()
                .map(|b| AdapterGrad {
                    down: Matrix::zeros(b.adapter.down.rows(), b.adapter.down.cols()),
                    up: Matrix::zeros(b.adapter.up.rows(), b.adapter.up.cols()),
                })
                .collect(),
            head_weight: Matrix::zeros(net.head().out_dim(), net.head().in_dim()),
            head_bias: vec![0.0; net.head().out_dim()],
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradRecord) -> Result<()> {
        if self.adapters.len() != other.adapters.len() {
            return Err(Error::Shape("gradient records cover different blocks".into()));
        }
        for (a, b) in self.adapters.iter_mut().zip(&other.adapters) {
            a.down.axpy(alpha, &b.down)?;
            a.up.axpy(alpha, &b.up)?;
        }
        self.head_weight.axpy(alpha, &other.head_weight)?;
        axpy(&mut self.head_bias, alpha, &other.head_bias);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.adapters {
            a.down.scale(s);
            a.up.scale(s);
        }
        self.head_weight.scale(s);
        self.head_bias.iter_mut().for_each(|b| *b *= s);
    }

    /// Flattened in the same order as [`trainable_slices_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.extend_from_slice(a.down.as_slice());
            out.extend_from_slice(a.up.as_slice());
        }
        out.extend_from_slice(self.head_weight.as_slice());
        out.extend_from_slice(&self.head_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Squared norm of the adapter part of block `k`.
    pub fn adapter_norm2(&self, k: usize) -> f64 {
        self.adapters[k].down.norm2() + self.adapters[k].up.norm2()
    }
}

/// Loss and gradients of one labeled sample.
pub fn backward_pass<N: Network + ?Sized>(net: &N, x: &[f64], label: usize) -> Result<(f64, GradRecord)> {
    let mut grads = GradRecord::zeros_like(net);
    let loss = accumulate_gradient(net, x, label, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Adds `weight · ∇loss(x, label)` into `grads` and returns the loss.
pub fn accumulate_gradient<N: Network + ?Sized>(
    net: &N,
    x: &[f64],
    label: usize,
    weight: f64,
    grads: &mut GradRecord,
) -> Result<f64> {
    let trace = forward_trace(net, x)?;
    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, label)?;
    let head = net.head();
    let top = trace.hidden.last().expect("non-empty");
    grads.head_weight.add_outer(weight, &dlogits, top)?;
    axpy(&mut grads.head_bias, weight, &dlogits);

    let mut g_hidden = head.weight.matvec_t(&dlogits)?;
    for (k, block) in net.blocks().iter().enumerate().rev() {
        let h = &trace.hidden[k];
        let dz: Vec<f64> = g_hidden
            .iter()
            .zip(&trace.pre_activation[k])
            .map(|(&g, &z)| g * block.activation.derivative(z))
            .collect();
        let s = block.adapter.scale;
        // z = W h + b + s·U (D h)
        let up_t_dz = block.adapter.up.matvec_t(&dz)?;
        let slot = &mut grads.adapters[k];
        slot.up.add_outer(weight * s, &dz, &trace.low_rank[k])?;
        slot.down.add_outer(weight * s, &up_t_dz, h)?;

        let through_base = block.base.weight.matvec_t(&dz)?;
        let through_down = block.adapter.down.matvec_t(&up_t_dz)?;
        for ((g, b), d) in g_hidden.iter_mut().zip(&through_base).zip(&through_down) {
            *g += b + s * d;
        }
    }
    Ok(loss)
}

/// Mean loss and mean gradient over a batch of `(features, label)` pairs.
pub fn batch_gradient<'a, N, I>(net: &N, batch: I) -> Result<(f64, GradRecord)>
where
    N: Network + ?Sized,
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut grads = GradRecord::zeros_like(net);
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in batch {
        total += accumulate_gradient(net, x, y, 1.0, &mut grads)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    grads.scale(1.0 / count as f64);
    Ok((total / count as f64, grads))
}

/// Trainable scalars in a fixed order: per block `down` then `up`, then head
/// weight, then head bias.
pub fn trainable_slices_mut<N: TrainableNetwork + ?Sized>(net: &mut N) -> Vec<&mut [f64]> {
    let (blocks, head) = net.parts_mut();
    let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * blocks.len() + 2);
    for b in blocks {
        out.push(b.adapter.down.as_mut_slice());
        out.push(b.adapter.up.as_mut_slice());
    }
    out.push(head.weight.as_mut_slice());
    out.push(head.bias.as_mut_slice());
    out
}

/// `p ← p − lr·g` over every trainable parameter.
pub fn sgd_step<N: TrainableNetwork + ?Sized>(net: &mut N, grads: &GradRecord, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Precondition(format!("learning rate {lr}")));
    }
    if grads.adapters.len() != net.blocks().len() {
        return Err(Error::Shape(format!(
            "{} adapter gradients for {} blocks",
            grads.adapters.len(),
            net.blocks().len()
        )));
    }
    for (block, g) in net.blocks_mut().iter_mut().zip(&grads.adapters) {
        block.adapter.down.axpy(-lr, &g.down)?;
        block.adapter.up.axpy(-lr, &g.up)?;
    }
    let head = net.head_mut();
    head.weight.axpy(-lr, &grads.head_weight)?;
    if head.bias.len() != grads.head_bias.len() {
        return Err(Error::Shape("head bias gradient length".into()));
    }
    axpy(&mut head.bias, -lr, &grads.head_bias);
    Ok(())
}

pub fn sample_loss<N: Network + ?Sized>(net: &N, x: &[f64], label: usize) -> Result<f64> {
    let trace = forward_trace(net, x)?;
    Ok(softmax_cross_entropy(&trace.logits, label)?.0)
}

fn perturb<N: TrainableNetwork + ?Sized>(net: &mut N, index: usize, delta: f64) {
    let mut remaining = index;
    for slice in trainable_slices_mut(net) {
        if remaining < slice.len() {
            slice[remaining] += delta;
            return;
        }
        remaining -= slice.len();
    }
    panic!("trainable index {index} out of range");
}

/// Central-difference check of [`backward_pass`] over every trainable scalar.
/// Returns `max |analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_gradcheck<N>(net: &N, x: &[f64], label: usize, epsilon: f64) -> Result<f64>
where
    N: TrainableNetwork + Clone,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Precondition(format!(
            "epsilon {epsilon} must lie in (0, 1e-2]"
        )));
    }
    let (_, grads) = backward_pass(net, x, label)?;
    let analytic = grads.flatten();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        perturb(&mut probe, i, epsilon);
        let plus = sample_loss(&probe, x, label)?;
        perturb(&mut probe, i, -2.0 * epsilon);
        let minus = sample_loss(&probe, x, label)?;
        perturb(&mut probe, i, epsilon);
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss probing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
