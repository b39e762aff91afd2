//! Pairwise-connected feedforward network with hand-written backpropagation.
//!
//! Layout: a pairwise layer maps the `(1 + M)·p` augmented inputs to `p`
//! units (unit `j` sees only `x_j` and its `M` knockoff copies), dropout,
//! then `depth` fully connected ELU layers of width `hidden`, optional
//! covariate concatenation, and a final linear unit. The first FC layer
//! carries the L1 penalty.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::datagen::Task;
use crate::error::{Error, Result};
use crate::seed;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TRJKNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Original feature count.
    pub p: usize,
    /// Knockoff copies per feature.
    pub copies: usize,
    pub depth: usize,
    pub hidden: usize,
    /// L1 coefficient on the first FC layer's weights.
    pub lambda: f64,
    pub dropout_prob: f64,
    pub covariate_dim: usize,
    pub task: Task,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn input_dim(&self) -> usize {
        (1 + self.copies) * self.p
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("network needs at least one feature".into()));
        }
        if self.copies == 0 {
            return Err(Error::Config("network needs at least one knockoff copy".into()));
        }
        if !(1..=3).contains(&self.depth) {
            return Err(Error::Config(format!("depth must be 1, 2 or 3, got {}", self.depth)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a nonnegative number".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout probability must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix used for mini-batches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowMajor {
    pub data: Vec<f64>,
    pub nrows: usize,
    pub ncols: usize,
}

impl RowMajor {
    pub fn new(data: Vec<f64>, nrows: usize, ncols: usize) -> Self {
        assert_eq!(data.len(), nrows * ncols);
        RowMajor { data, nrows, ncols }
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let (nrows, ncols) = m.shape();
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in 0..nrows {
            data.extend(m.row(i).iter());
        }
        RowMajor { data, nrows, ncols }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    /// Copy the given rows, in order, into `out`.
    pub fn gather_into(&self, rows: &[usize], out: &mut RowMajor) {
        out.nrows = rows.len();
        out.ncols = self.ncols;
        out.data.clear();
        for &r in rows {
            out.data.extend_from_slice(self.row(r));
        }
    }

    pub fn gather(&self, rows: &[usize]) -> RowMajor {
        let mut out = RowMajor::default();
        self.gather_into(rows, &mut out);
        out
    }
}

/// A mini-batch of augmented inputs with optional covariates.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a RowMajor,
    pub covariates: Option<&'a RowMajor>,
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a RowMajor, covariates: Option<&'a RowMajor>) -> Self {
        Batch { x, covariates }
    }

    pub fn rows(&self) -> usize {
        self.x.nrows
    }
}

/// Inverted dropout scaling factors for the pairwise layer (rows × p).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub scale: Vec<f64>,
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// Weights stored input-major: `w[i * out + o]`.
    w: Range<usize>,
    b: Range<usize>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    pair: Range<usize>,
    fc: Vec<Dense>,
    head: Dense,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut off = 0;
        let mut take = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let pair = take(cfg.input_dim());
        let mut fc = Vec::with_capacity(cfg.depth);
        let mut fan_in = cfg.p;
        for _ in 0..cfg.depth {
            fc.push(Dense {
                w: take(fan_in * cfg.hidden),
                b: take(cfg.hidden),
                fan_in,
                fan_out: cfg.hidden,
            });
            fan_in = cfg.hidden;
        }
        let head_in = cfg.hidden + cfg.covariate_dim;
        let head = Dense {
            w: take(head_in),
            b: take(1),
            fan_in: head_in,
            fan_out: 1,
        };
        Layout {
            pair,
            fc,
            head,
            total: off,
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Forward {
    pub output: Vec<f64>,
    /// Pairwise layer output before dropout (rows × p).
    pub pairwise: Vec<f64>,
    /// Input to each FC layer, then the last hidden activation.
    hidden_in: Vec<Vec<f64>>,
    /// Pre-activation of each FC layer.
    pre: Vec<Vec<f64>>,
    rows: usize,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    grads: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    dout: Vec<f64>,
    forward: Forward,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

/// `c = beta·c + a·b` for row-major `c` (m×n); `a` (m×k) and `b` (k×n)
/// are addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa && b.len() > (k - 1) * rsb + (n - 1) * csb));
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above keep every strided access in bounds.
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

#[inline]
pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Data-fit loss of one prediction: squared error, or logistic loss on the
/// logit for the binary task.
pub fn pointwise_loss(task: Task, output: f64, target: f64) -> f64 {
    match task {
        Task::Regression => (output - target).powi(2),
        Task::Binary => softplus(output) - target * output,
    }
}

fn pointwise_loss_grad(task: Task, output: f64, target: f64) -> f64 {
    match task {
        Task::Regression => 2.0 * (output - target),
        Task::Binary => sigmoid(output) - target,
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    layout: Layout,
    params: Vec<f64>,
    adam: Adam,
    dropout_rng: Pcg64Mcg,
    scratch: Scratch,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.adam == other.adam
    }
}

impl Network {
    /// Build a network with Glorot-uniform weights and zero biases.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = seed::rng_for(config.seed, seed::TAG_INIT);
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize, params: &mut [f64]| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut params[range] {
                *v = rng.random_range(-limit..limit);
            }
        };
        // The pairwise layer is scaled as the (1+M)p → p map it represents.
        fill(layout.pair.clone(), (1 + config.copies) * config.p, config.p, &mut params);
        for d in &layout.fc {
            fill(d.w.clone(), d.fan_in, d.fan_out, &mut params);
        }
        fill(layout.head.w.clone(), layout.head.fan_in, 1, &mut params);
        let adam = Adam::new(layout.total);
        let dropout_rng = Pcg64Mcg::seed_from_u64(seed::derive(config.seed, seed::TAG_DROPOUT));
        Ok(Network {
            config,
            layout,
            params,
            adam,
            dropout_rng,
            scratch: Scratch::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Pairwise weights as a `(1 + M) × p` row-major block.
    pub fn pairwise_weights(&self) -> &[f64] {
        &self.params[self.layout.pair.clone()]
    }

    pub fn pairwise_weights_mut(&mut self) -> &mut [f64] {
        let r = self.layout.pair.clone();
        &mut self.params[r]
    }

    /// Weights of FC layer `layer` (input-major, `w[i * out + o]`) and biases.
    pub fn dense_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let d = &self.layout.fc[layer];
        let (w, b) = (d.w.clone(), d.b.clone());
        let (head, tail) = self.params.split_at_mut(b.start);
        (&mut head[w], &mut tail[..b.len()])
    }

    /// Final layer weights (hidden then covariates) and bias.
    pub fn head_mut(&mut self) -> (&mut [f64], &mut f64) {
        let d = &self.layout.head;
        let (w, b) = (d.w.clone(), d.b.start);
        let (head, tail) = self.params.split_at_mut(b);
        (&mut head[w], &mut tail[0])
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.x.ncols != self.config.input_dim() {
            return Err(Error::Dimension {
                context: "network input columns",
                expected: self.config.input_dim(),
                got: batch.x.ncols,
            });
        }
        let cov_cols = batch.covariates.map_or(0, |c| c.ncols);
        if cov_cols != self.config.covariate_dim {
            return Err(Error::Dimension {
                context: "covariate columns",
                expected: self.config.covariate_dim,
                got: cov_cols,
            });
        }
        if let Some(c) = batch.covariates {
            if c.nrows != batch.rows() {
                return Err(Error::Dimension {
                    context: "covariate rows",
                    expected: batch.rows(),
                    got: c.nrows,
                });
            }
        }
        Ok(())
    }

    /// Draw a fresh dropout mask from the network's own stream.
    pub fn sample_dropout_mask(&mut self, rows: usize) -> DropoutMask {
        let keep = 1.0 - self.config.dropout_prob;
        let cut = (keep * 4_294_967_296.0).min(u32::MAX as f64) as u32;
        // Branch-free: the bit pattern of 1/keep masked by the comparison.
        let inv = (1.0 / keep).to_bits();
        let pick = |half: u32| f64::from_bits(inv & 0u64.wrapping_sub(u64::from(half < cut)));
        let len = rows * self.config.p;
        let mut scale = vec![0.0; len.next_multiple_of(2)];
        for pair in scale.chunks_exact_mut(2) {
            let u = self.dropout_rng.next_u64();
            pair[0] = pick(u as u32);
            pair[1] = pick((u >> 32) as u32);
        }
        scale.truncate(len);
        DropoutMask { scale }
    }

    /// Forward pass. `mask = None` is evaluation mode (dropout is identity).
    pub fn forward(&self, batch: &Batch, mask: Option<&DropoutMask>) -> Result<Forward> {
        self.check_batch(batch)?;
        let mut fwd = Forward::default();
        self.forward_into(batch, mask, &mut fwd);
        Ok(fwd)
    }

    /// Forward pass in training mode with a freshly sampled dropout mask.
    pub fn forward_train(&mut self, batch: &Batch) -> Result<(Forward, Option<DropoutMask>)> {
        self.check_batch(batch)?;
        let mask = (self.config.dropout_prob > 0.0).then(|| self.sample_dropout_mask(batch.rows()));
        let fwd = self.forward(batch, mask.as_ref())?;
        Ok((fwd, mask))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.forward(batch, None)?.output)
    }

    fn forward_into(&self, batch: &Batch, mask: Option<&DropoutMask>, fwd: &mut Forward) {
        let cfg = &self.config;
        let (p, h) = (cfg.p, cfg.hidden);
        let rows = batch.rows();
        let d_in = cfg.input_dim();
        let w_pair = &self.params[self.layout.pair.clone()];
        fwd.rows = rows;

        fwd.pairwise.clear();
        fwd.pairwise.resize(rows * p, 0.0);
        for b in 0..rows {
            let x = &batch.x.data[b * d_in..(b + 1) * d_in];
            let out = &mut fwd.pairwise[b * p..(b + 1) * p];
            for m in 0..=cfg.copies {
                let w = &w_pair[m * p..(m + 1) * p];
                let xm = &x[m * p..(m + 1) * p];
                for ((o, w), x) in out.iter_mut().zip(w).zip(xm) {
                    *o += w * x;
                }
            }
        }

        let depth = self.layout.fc.len();
        fwd.hidden_in.resize_with(depth + 1, Vec::new);
        fwd.pre.resize_with(depth, Vec::new);
        {
            let first = &mut fwd.hidden_in[0];
            first.clear();
            first.extend_from_slice(&fwd.pairwise);
            if let Some(mask) = mask {
                for (v, s) in first.iter_mut().zip(&mask.scale) {
                    *v *= s;
                }
            }
        }
        for (l, dense) in self.layout.fc.iter().enumerate() {
            let w = &self.params[dense.w.clone()];
            let bias = &self.params[dense.b.clone()];
            let (before, after) = fwd.hidden_in.split_at_mut(l + 1);
            let pre = &mut fwd.pre[l];
            pre.clear();
            for _ in 0..rows {
                pre.extend_from_slice(bias);
            }
            gemm(rows, dense.fan_in, h, &before[l], (dense.fan_in, 1), w, (h, 1), 1.0, pre);
            let next = &mut after[0];
            next.clear();
            next.extend(pre.iter().map(|&z| elu(z)));
        }

        let head_w = &self.params[self.layout.head.w.clone()];
        let head_b = self.params[self.layout.head.b.start];
        let last = &fwd.hidden_in[depth];
        fwd.output.clear();
        for b in 0..rows {
            let mut o = head_b + dot(&last[b * h..(b + 1) * h], &head_w[..h]);
            if let Some(c) = batch.covariates {
                o += dot(c.row(b), &head_w[h..]);
            }
            fwd.output.push(o);
        }
    }

    /// Backpropagate `dout` (d loss / d output per row). Accumulates
    /// parameter gradients into `grads` and, when given, input gradients
    /// (rows × input_dim) into `dinput`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        batch: &Batch,
        fwd: &Forward,
        mask: Option<&DropoutMask>,
        dout: &[f64],
        mut grads: Option<&mut [f64]>,
        dinput: Option<&mut [f64]>,
        scratch: (&mut Vec<f64>, &mut Vec<f64>),
    ) {
        let cfg = &self.config;
        let (p, h) = (cfg.p, cfg.hidden);
        let rows = fwd.rows;
        let depth = self.layout.fc.len();
        let (delta, delta_prev) = scratch;

        // Head layer.
        let head = &self.layout.head;
        let head_w = &self.params[head.w.clone()];
        let last = &fwd.hidden_in[depth];
        if let Some(g) = grads.as_deref_mut() {
            for b in 0..rows {
                axpy(dout[b], &last[b * h..(b + 1) * h], &mut g[head.w.start..head.w.start + h]);
                if let Some(c) = batch.covariates {
                    axpy(dout[b], c.row(b), &mut g[head.w.start + h..head.w.end]);
                }
                g[head.b.start] += dout[b];
            }
        }
        delta.clear();
        for &d in &dout[..rows] {
            delta.extend(head_w[..h].iter().map(|w| d * w));
        }

        // FC stack, top down. `delta` holds d loss / d activation.
        for l in (0..depth).rev() {
            let dense = &self.layout.fc[l];
            // ELU'(z) = ELU(z) + 1 for z ≤ 0.
            for ((d, &z), &a) in delta.iter_mut().zip(&fwd.pre[l]).zip(&fwd.hidden_in[l + 1]) {
                if z <= 0.0 {
                    *d *= a + 1.0;
                }
            }
            let input = &fwd.hidden_in[l];
            let w = &self.params[dense.w.clone()];
            if let Some(g) = grads.as_deref_mut() {
                gemm(dense.fan_in, rows, h, input, (1, dense.fan_in), delta, (h, 1), 1.0, &mut g[dense.w.clone()]);
                let gb = &mut g[dense.b.clone()];
                for b in 0..rows {
                    axpy(1.0, &delta[b * h..(b + 1) * h], gb);
                }
            }
            delta_prev.clear();
            delta_prev.resize(rows * dense.fan_in, 0.0);
            gemm(rows, h, dense.fan_in, delta, (h, 1), w, (1, h), 0.0, delta_prev);
            std::mem::swap(delta, delta_prev);
        }

        // Through dropout to the pairwise outputs.
        if let Some(mask) = mask {
            for (d, s) in delta.iter_mut().zip(&mask.scale) {
                *d *= s;
            }
        }
        let d_in = cfg.input_dim();
        if let Some(g) = grads {
            let gp = &mut g[self.layout.pair.clone()];
            for b in 0..rows {
                let x = &batch.x.data[b * d_in..(b + 1) * d_in];
                let da = &delta[b * p..(b + 1) * p];
                for m in 0..=cfg.copies {
                    let gm = &mut gp[m * p..(m + 1) * p];
                    for ((g, d), x) in gm.iter_mut().zip(da).zip(&x[m * p..(m + 1) * p]) {
                        *g += d * x;
                    }
                }
            }
        }
        if let Some(dx) = dinput {
            let w_pair = &self.params[self.layout.pair.clone()];
            for b in 0..rows {
                let da = &delta[b * p..(b + 1) * p];
                let row = &mut dx[b * d_in..(b + 1) * d_in];
                for m in 0..=cfg.copies {
                    let wm = &w_pair[m * p..(m + 1) * p];
                    for ((o, d), w) in row[m * p..(m + 1) * p].iter_mut().zip(da).zip(wm) {
                        *o += d * w;
                    }
                }
            }
        }
    }

    /// L1 penalty term `λ‖W_FC1‖₁`.
    pub fn l1_penalty(&self) -> f64 {
        let w = &self.params[self.layout.fc[0].w.clone()];
        self.config.lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Mean data-fit loss over a batch in evaluation mode (no penalty).
    pub fn data_loss(&self, batch: &Batch, targets: &[f64]) -> Result<f64> {
        if targets.len() != batch.rows() {
            return Err(Error::Dimension {
                context: "targets",
                expected: batch.rows(),
                got: targets.len(),
            });
        }
        let out = self.predict(batch)?;
        let task = self.config.task;
        Ok(out
            .iter()
            .zip(targets)
            .map(|(o, t)| pointwise_loss(task, *o, *t))
            .sum::<f64>()
            / targets.len() as f64)
    }

    /// Penalized loss and its gradient with respect to every parameter,
    /// for a fixed dropout mask.
    pub fn loss_and_gradient(
        &self,
        batch: &Batch,
        targets: &[f64],
        mask: Option<&DropoutMask>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        let mut scratch = Scratch::default();
        let loss = self.loss_and_gradient_with(batch, targets, mask, &mut scratch)?;
        Ok((loss, scratch.grads))
    }

    fn loss_and_gradient_with(
        &self,
        batch: &Batch,
        targets: &[f64],
        mask: Option<&DropoutMask>,
        scratch: &mut Scratch,
    ) -> Result<f64> {
        let rows = batch.rows();
        if rows == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if targets.len() != rows {
            return Err(Error::Dimension {
                context: "targets",
                expected: rows,
                got: targets.len(),
            });
        }
        let task = self.config.task;
        self.forward_into(batch, mask, &mut scratch.forward);
        let out = &scratch.forward.output;
        let inv = 1.0 / rows as f64;
        let data: f64 = out
            .iter()
            .zip(targets)
            .map(|(o, t)| pointwise_loss(task, *o, *t))
            .sum::<f64>()
            * inv;
        scratch.dout.clear();
        scratch
            .dout
            .extend(out.iter().zip(targets).map(|(o, t)| pointwise_loss_grad(task, *o, *t) * inv));
        scratch.grads.clear();
        scratch.grads.resize(self.layout.total, 0.0);
        self.backward(
            batch,
            &scratch.forward,
            mask,
            &scratch.dout,
            Some(&mut scratch.grads),
            None,
            (&mut scratch.delta, &mut scratch.delta_prev),
        );
        let lambda = self.config.lambda;
        if lambda > 0.0 {
            let r = self.layout.fc[0].w.clone();
            for (g, w) in scratch.grads[r.clone()].iter_mut().zip(&self.params[r]) {
                if *w != 0.0 {
                    *g += lambda * w.signum();
                }
            }
        }
        Ok(data + self.l1_penalty())
    }

    /// One Adam step on a mini-batch. Returns the penalized batch loss.
    pub fn train_step(&mut self, batch: &Batch, targets: &[f64], learning_rate: f64) -> Result<f64> {
        self.check_batch(batch)?;
        let mask = (self.config.dropout_prob > 0.0).then(|| self.sample_dropout_mask(batch.rows()));
        let mut scratch = std::mem::take(&mut self.scratch);
        let result = self.loss_and_gradient_with(batch, targets, mask.as_ref(), &mut scratch);
        let loss = match result {
            Ok(loss) => loss,
            Err(e) => {
                self.scratch = scratch;
                return Err(e);
            }
        };
        if !loss.is_finite() || scratch.grads.iter().any(|g| !g.is_finite()) {
            self.scratch = scratch;
            return Err(Error::NonFiniteLoss {
                context: format!("training step {}", self.adam.steps() + 1),
            });
        }
        self.adam.step(&mut self.params, &scratch.grads, learning_rate);
        self.scratch = scratch;
        Ok(loss)
    }

    /// Gradient of the scalar output with respect to each augmented input,
    /// in evaluation mode (rows × input_dim, row-major).
    pub fn input_gradients(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let fwd = self.forward(batch, None)?;
        let rows = batch.rows();
        let mut dx = vec![0.0; rows * self.config.input_dim()];
        let dout = vec![1.0; rows];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        self.backward(batch, &fwd, None, &dout, None, Some(&mut dx), (&mut a, &mut b));
        Ok(dx)
    }

    /// Importance `Z_k = mean over rows |∂ output / ∂ x_k|`, evaluated with
    /// dropout off. Rows are processed in chunks to bound memory.
    pub fn input_gradient_importance(&self, batch: &Batch) -> Result<Vec<f64>> {
        let rows = batch.rows();
        if rows == 0 {
            return Err(Error::Config("importance needs at least one sample row".into()));
        }
        self.check_batch(batch)?;
        let d = self.config.input_dim();
        let mut z = vec![0.0; d];
        const CHUNK: usize = 256;
        let mut start = 0;
        let mut xs = RowMajor::default();
        let mut cs = RowMajor::default();
        let mut idx = Vec::with_capacity(CHUNK);
        while start < rows {
            let end = (start + CHUNK).min(rows);
            idx.clear();
            idx.extend(start..end);
            batch.x.gather_into(&idx, &mut xs);
            let cov = batch.covariates.map(|c| {
                c.gather_into(&idx, &mut cs);
                &cs
            });
            let dx = self.input_gradients(&Batch::new(&xs, cov))?;
            for row in dx.chunks_exact(d) {
                for (z, g) in z.iter_mut().zip(row) {
                    *z += g.abs();
                }
            }
            start = end;
        }
        let inv = 1.0 / rows as f64;
        z.iter_mut().for_each(|v| *v *= inv);
        Ok(z)
    }

    /// Weight-based importance: `|w_pair[m, j]|` times the magnitude of the
    /// path from pairwise unit `j` to the output, `|W_head|ᵀ |W_L| ⋯ |W_1|`.
    pub fn pairwise_weight_importance(&self) -> Vec<f64> {
        let cfg = &self.config;
        let (p, h) = (cfg.p, cfg.hidden);
        let head_w = &self.params[self.layout.head.w.clone()];
        let mut path: Vec<f64> = head_w[..h].iter().map(|v| v.abs()).collect();
        for dense in self.layout.fc.iter().rev() {
            let w = &self.params[dense.w.clone()];
            path = (0..dense.fan_in)
                .map(|i| {
                    w[i * h..(i + 1) * h]
                        .iter()
                        .zip(&path)
                        .map(|(w, v)| w.abs() * v)
                        .sum()
                })
                .collect();
        }
        let w_pair = &self.params[self.layout.pair.clone()];
        (0..=cfg.copies)
            .flat_map(|m| (0..p).map(move |j| (m, j)))
            .map(|(m, j)| w_pair[m * p + j].abs() * path[j])
            .collect()
    }

    /// Write a checkpoint: magic, config JSON, then the parameter block, all
    /// lengths and floats little-endian 64-bit.
    pub fn write_checkpoint(&self, out: &mut impl Write) -> std::io::Result<()> {
        let json = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Restore a checkpoint. Optimizer state starts fresh.
    pub fn read_checkpoint(input: &mut impl Read) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|_| bad("truncated config length"))?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json).map_err(|_| bad("truncated config"))?;
        let config: NetworkConfig = serde_json::from_slice(&json)?;
        let mut net = Network::new(config)?;
        input.read_exact(&mut len).map_err(|_| bad("truncated parameter count"))?;
        if u64::from_le_bytes(len) as usize != net.params.len() {
            return Err(bad("parameter count does not match config"));
        }
        let mut buf = [0u8; 8];
        for v in net.params.iter_mut() {
            input.read_exact(&mut buf).map_err(|_| bad("truncated parameters"))?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Network::read_checkpoint(&mut std::io::BufReader::new(file))
    }
}
