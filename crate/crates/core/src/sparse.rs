//! Channel-sparsity training objective at toy scale.
//!
//! A small fully convolutional network (two 3x3 conv + ReLU layers and a 1x1
//! two-class head) is trained by full-batch gradient descent on
//! `R = L_task + lambda * L_sp * gamma`, where `L_sp` penalizes the positive
//! part of each channel's kernels and bias, and `gamma` closes the penalty
//! once the fraction of active channels falls to the target `beta`.
//! `R_sp` (the active ratio) is monitored, not differentiated; `gamma` is
//! held constant within a step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Height x width x channels tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize, ch: usize) -> T {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize, ch: usize) -> &mut T {
        &mut self.data[(r * self.width + c) * self.channels + ch]
    }

    /// Sum of every pixel of channel `ch`.
    pub fn channel_sum(&self, ch: usize) -> T {
        self.data.iter().skip(ch).step_by(self.channels).copied().sum()
    }
}

pub fn relu<T: Scalar>(t: &Tensor3<T>) -> Tensor3<T> {
    Tensor3 {
        height: t.height,
        width: t.width,
        channels: t.channels,
        data: t.data.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

/// Kernels of one convolutional layer, `size x size x in x out`, plus biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerParams<T> {
    pub id: String,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Indexed `[ky][kx][c][k]`.
    pub kernels: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> ConvLayerParams<T> {
    pub fn new(id: impl Into<String>, kernel_size: usize, in_channels: usize, out_channels: usize, kernels: Vec<T>, biases: Vec<T>) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {kernel_size} must be odd")));
        }
        if kernels.len() != kernel_size * kernel_size * in_channels * out_channels || biases.len() != out_channels {
            return Err(Error::Shape("kernel or bias length does not match the declared shape".into()));
        }
        if kernels.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Ingestion("non-finite conv parameter".into()));
        }
        Ok(Self {
            id: id.into(),
            kernel_size,
            in_channels,
            out_channels,
            kernels,
            biases,
        })
    }

    pub fn zeros(id: impl Into<String>, kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            id: id.into(),
            kernel_size,
            in_channels,
            out_channels,
            kernels: vec![T::zero(); kernel_size * kernel_size * in_channels * out_channels],
            biases: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    pub fn index(&self, ky: usize, kx: usize, c: usize, k: usize) -> usize {
        ((ky * self.kernel_size + kx) * self.in_channels + c) * self.out_channels + k
    }

    pub fn weight(&self, ky: usize, kx: usize, c: usize, k: usize) -> T {
        self.kernels[self.index(ky, kx, c, k)]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }
}

/// Same-padded (zeros), stride-1 cross-correlation summed over input channels, plus bias.
pub fn conv_forward<T: Scalar>(z: &Tensor3<T>, p: &ConvLayerParams<T>) -> Result<Tensor3<T>> {
    if z.channels != p.in_channels {
        return Err(Error::Shape(format!(
            "layer `{}` expects {} input channels, got {}",
            p.id, p.in_channels, z.channels
        )));
    }
    let r = p.kernel_size / 2;
    let (h, w, kout) = (z.height, z.width, p.out_channels);
    let mut out = Tensor3::zeros(h, w, kout);
    for i in 0..h {
        for j in 0..w {
            let o = &mut out.data[(i * w + j) * kout..(i * w + j + 1) * kout];
            o.copy_from_slice(&p.biases);
            for ky in 0..p.kernel_size {
                let Some(si) = (i + ky).checked_sub(r).filter(|&v| v < h) else { continue };
                for kx in 0..p.kernel_size {
                    let Some(sj) = (j + kx).checked_sub(r).filter(|&v| v < w) else { continue };
                    let src = &z.data[(si * w + sj) * z.channels..(si * w + sj + 1) * z.channels];
                    for (c, &zv) in src.iter().enumerate() {
                        if zv == T::zero() {
                            continue;
                        }
                        let base = p.index(ky, kx, c, 0);
                        for (ov, &kv) in o.iter_mut().zip(&p.kernels[base..base + kout]) {
                            *ov = *ov + kv * zv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// Returns `(d_input, d_params)`.
pub fn conv_backward<T: Scalar>(z: &Tensor3<T>, p: &ConvLayerParams<T>, dy: &Tensor3<T>) -> (Tensor3<T>, ConvLayerParams<T>) {
    let r = p.kernel_size / 2;
    let (h, w, kout) = (z.height, z.width, p.out_channels);
    let mut dz = Tensor3::zeros(h, w, z.channels);
    let mut dp = ConvLayerParams::zeros(p.id.clone(), p.kernel_size, p.in_channels, kout);
    for i in 0..h {
        for j in 0..w {
            let g = &dy.data[(i * w + j) * kout..(i * w + j + 1) * kout];
            for (b, &gv) in dp.biases.iter_mut().zip(g) {
                *b = *b + gv;
            }
            for ky in 0..p.kernel_size {
                let Some(si) = (i + ky).checked_sub(r).filter(|&v| v < h) else { continue };
                for kx in 0..p.kernel_size {
                    let Some(sj) = (j + kx).checked_sub(r).filter(|&v| v < w) else { continue };
                    for c in 0..z.channels {
                        let zv = z.at(si, sj, c);
                        let base = p.index(ky, kx, c, 0);
                        let mut acc = T::zero();
                        for k in 0..kout {
                            dp.kernels[base + k] = dp.kernels[base + k] + g[k] * zv;
                            acc = acc + g[k] * p.kernels[base + k];
                        }
                        *dz.at_mut(si, sj, c) = dz.at(si, sj, c) + acc;
                    }
                }
            }
        }
    }
    (dz, dp)
}

/// Fraction of channels, over all given post-ReLU activations, whose pixel sum is positive.
pub fn active_ratio<T: Scalar>(activations: &[Tensor3<T>]) -> Result<T> {
    let mut active = 0usize;
    let mut total = 0usize;
    for a in activations {
        if a.data.iter().any(|&v| v < T::zero()) {
            return Err(Error::ContractViolation("negative activation; expected post-ReLU values".into()));
        }
        for ch in 0..a.channels {
            total += 1;
            if a.channel_sum(ch) > T::zero() {
                active += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Shape("no channels to measure".into()));
    }
    Ok(T::from_usize_lossy(active) / T::from_usize_lossy(total))
}

/// Mean over all channels of `sum(max(0, kernel)) + max(0, bias)`.
pub fn sparsity_loss<T: Scalar>(layers: &[&ConvLayerParams<T>]) -> T {
    let mut sum = T::zero();
    let mut channels = 0usize;
    for p in layers {
        channels += p.out_channels;
        sum = sum + p.kernels.iter().chain(&p.biases).map(|&v| v.max(T::zero())).sum::<T>();
    }
    if channels == 0 {
        return T::zero();
    }
    sum / T::from_usize_lossy(channels)
}

/// Subgradient of [`sparsity_loss`]: `1 / channels` on every positive entry.
pub fn sparsity_loss_grad<T: Scalar>(layers: &[&ConvLayerParams<T>]) -> Vec<ConvLayerParams<T>> {
    let channels: usize = layers.iter().map(|p| p.out_channels).sum();
    let unit = T::one() / T::from_usize_lossy(channels.max(1));
    let step = |v: &T| if *v > T::zero() { unit } else { T::zero() };
    layers
        .iter()
        .map(|p| ConvLayerParams {
            kernels: p.kernels.iter().map(step).collect(),
            biases: p.biases.iter().map(step).collect(),
            ..(*p).clone()
        })
        .collect()
}

/// `((r_sp - beta) / (1 - beta))^alpha`, zero once `r_sp <= beta`.
pub fn gamma<T: Scalar>(r_sp: T, beta: T, alpha: T) -> Result<T> {
    if !(beta < T::one()) || beta < T::zero() {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    if !(alpha > T::zero()) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    if r_sp <= beta {
        return Ok(T::zero());
    }
    Ok(((r_sp - beta) / (T::one() - beta)).powf(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Target fraction of active channels.
    pub beta: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Builds a config from a target sparsity ratio (fraction of inactive channels).
    pub fn from_target_sparsity(sparsity: f64, alpha: f64, lambda: f64) -> Self {
        Self {
            beta: 1.0 - sparsity,
            alpha,
            lambda,
        }
    }
}

pub fn regularized_objective<T: Scalar>(task_loss: T, l_sp: T, cfg: &SparsityConfig, r_sp: T) -> Result<T> {
    let g = gamma(r_sp, T::from_f64_lossy(cfg.beta), T::from_f64_lossy(cfg.alpha))?;
    Ok(task_loss + T::from_f64_lossy(cfg.lambda) * l_sp * g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub sparsity_loss: f64,
    pub r_sp: f64,
    pub r_sp0: f64,
    pub gamma: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,L_task,L_sp,R_sp,R_sp0,gamma,R";

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                e.epoch, e.task_loss, e.sparsity_loss, e.r_sp, e.r_sp0, e.gamma, e.objective
            ));
        }
        out
    }
}

/// Single-channel images with per-pixel binary labels.
#[derive(Debug, Clone)]
pub struct ToyDataset<T> {
    pub images: Vec<Tensor3<T>>,
    pub labels: Vec<Vec<u8>>,
}

impl<T: Scalar> ToyDataset<T> {
    /// Noisy bright disks on a dark background; label 1 inside the disk.
    pub fn blobs(count: usize, size: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let radius = rng.random_range(2.5..(size as f64 / 4.0).max(3.0));
            let cy = rng.random_range(radius..size as f64 - radius);
            let cx = rng.random_range(radius..size as f64 - radius);
            let mut img = Vec::with_capacity(size * size);
            let mut lab = Vec::with_capacity(size * size);
            for r in 0..size {
                for c in 0..size {
                    let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
                    let inside = d2 <= radius * radius;
                    let base = if inside { 1.0 } else { 0.0 };
                    img.push(T::from_f64_lossy((base + normal.sample(&mut rng)).max(0.0)));
                    lab.push(u8::from(inside));
                }
            }
            images.push(Tensor3::new(size, size, 1, img).expect("shape"));
            labels.push(lab);
        }
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Two hidden conv layers (the sparsified set) and a 1x1 two-class head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNet<T> {
    pub conv1: ConvLayerParams<T>,
    pub conv2: ConvLayerParams<T>,
    pub head: ConvLayerParams<T>,
}

struct ForwardCache<T> {
    a1: Tensor3<T>,
    a2: Tensor3<T>,
    logits: Tensor3<T>,
}

impl<T: Scalar> ToyNet<T> {
    pub fn new(in_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |id: &str, ks: usize, c: usize, k: usize, bias: f64| {
            let bound = (6.0 / (ks * ks * c + k) as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("valid range");
            let kernels = (0..ks * ks * c * k).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect();
            ConvLayerParams::new(id, ks, c, k, kernels, vec![T::from_f64_lossy(bias); k]).expect("shape")
        };
        Self {
            conv1: layer("conv1", 3, in_channels, hidden, 0.05),
            conv2: layer("conv2", 3, hidden, hidden, 0.05),
            head: layer("head", 1, hidden, 2, 0.0),
        }
    }

    /// Layers whose channels are counted and penalized.
    pub fn sparse_layers(&self) -> [&ConvLayerParams<T>; 2] {
        [&self.conv1, &self.conv2]
    }

    fn forward_cached(&self, x: &Tensor3<T>) -> Result<ForwardCache<T>> {
        let a1 = relu(&conv_forward(x, &self.conv1)?);
        let a2 = relu(&conv_forward(&a1, &self.conv2)?);
        let logits = conv_forward(&a2, &self.head)?;
        Ok(ForwardCache { a1, a2, logits })
    }

    /// Post-ReLU activations of the sparsified layers.
    pub fn activations(&self, x: &Tensor3<T>) -> Result<[Tensor3<T>; 2]> {
        let c = self.forward_cached(x)?;
        Ok([c.a1, c.a2])
    }

    /// Mean per-pixel cross-entropy over the dataset.
    pub fn task_loss(&self, data: &ToyDataset<T>) -> Result<T> {
        let mut total = T::zero();
        for (x, y) in data.images.iter().zip(&data.labels) {
            let c = self.forward_cached(x)?;
            total = total + pixel_cross_entropy(&c.logits, y).0;
        }
        Ok(total / T::from_usize_lossy(data.len().max(1)))
    }

    /// Mean per-sample active ratio over the sparsified layers.
    pub fn active_ratio(&self, data: &ToyDataset<T>) -> Result<T> {
        let mut total = T::zero();
        for x in &data.images {
            total = total + active_ratio(&self.activations(x)?)?;
        }
        Ok(total / T::from_usize_lossy(data.len().max(1)))
    }

    pub fn sparsity_loss(&self) -> T {
        sparsity_loss(&self.sparse_layers())
    }

    /// Task loss, active ratio and task-loss gradients in one pass.
    pub fn task_gradient(&self, data: &ToyDataset<T>) -> Result<(T, T, ToyNet<T>)> {
        let n = T::from_usize_lossy(data.len().max(1));
        let mut grad = self.zeros_like();
        let mut loss = T::zero();
        let mut ratio = T::zero();
        for (x, y) in data.images.iter().zip(&data.labels) {
            let c = self.forward_cached(x)?;
            ratio = ratio + active_ratio(&[c.a1.clone(), c.a2.clone()])?;
            let (l, mut dlogits) = pixel_cross_entropy(&c.logits, y);
            loss = loss + l;
            dlogits.data.iter_mut().for_each(|v| *v = *v / n);
            let (da2, dh) = conv_backward(&c.a2, &self.head, &dlogits);
            let dy2 = relu_backward(&c.a2, da2);
            let (da1, d2) = conv_backward(&c.a1, &self.conv2, &dy2);
            let dy1 = relu_backward(&c.a1, da1);
            let (_, d1) = conv_backward(x, &self.conv1, &dy1);
            grad.accumulate(&d1, &d2, &dh);
        }
        Ok((loss / n, ratio / n, grad))
    }

    fn zeros_like(&self) -> Self {
        let z = |p: &ConvLayerParams<T>| ConvLayerParams::zeros(p.id.clone(), p.kernel_size, p.in_channels, p.out_channels);
        Self {
            conv1: z(&self.conv1),
            conv2: z(&self.conv2),
            head: z(&self.head),
        }
    }

    fn accumulate(&mut self, d1: &ConvLayerParams<T>, d2: &ConvLayerParams<T>, dh: &ConvLayerParams<T>) {
        for (dst, src) in [(&mut self.conv1, d1), (&mut self.conv2, d2), (&mut self.head, dh)] {
            for (a, &b) in dst.kernels.iter_mut().zip(&src.kernels) {
                *a = *a + b;
            }
            for (a, &b) in dst.biases.iter_mut().zip(&src.biases) {
                *a = *a + b;
            }
        }
    }

    pub fn params(&self) -> Vec<T> {
        [&self.conv1, &self.conv2, &self.head]
            .iter()
            .flat_map(|p| p.kernels.iter().chain(&p.biases).copied())
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [&mut self.conv1, &mut self.conv2, &mut self.head]
            .into_iter()
            .flat_map(|p| p.kernels.iter_mut().chain(p.biases.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

fn relu_backward<T: Scalar>(activated: &Tensor3<T>, mut grad: Tensor3<T>) -> Tensor3<T> {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}

/// Mean two-class softmax cross-entropy over pixels and its logit gradient.
fn pixel_cross_entropy<T: Scalar>(logits: &Tensor3<T>, labels: &[u8]) -> (T, Tensor3<T>) {
    let px = logits.height * logits.width;
    let inv = T::one() / T::from_usize_lossy(px);
    let mut grad = Tensor3::zeros(logits.height, logits.width, 2);
    let mut loss = T::zero();
    for (p, &y) in labels.iter().enumerate().take(px) {
        let (z0, z1) = (logits.data[2 * p], logits.data[2 * p + 1]);
        let m = z0.max(z1);
        let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
        let lse = m + (e0 + e1).ln();
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        loss = loss + lse - if y == 1 { z1 } else { z0 };
        grad.data[2 * p] = (p0 - if y == 0 { T::one() } else { T::zero() }) * inv;
        grad.data[2 * p + 1] = (p1 - if y == 1 { T::one() } else { T::zero() }) * inv;
    }
    (loss * inv, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.5,
        }
    }
}

/// Full-batch gradient descent on the gated objective.
///
/// Each epoch logs the state before its update; the final network is returned
/// with the history.
pub fn train_toy<T: Scalar>(
    data: &ToyDataset<T>,
    mut net: ToyNet<T>,
    cfg: &SparsityConfig,
    opts: TrainOptions,
) -> Result<(ToyNet<T>, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let lr = T::from_f64_lossy(opts.learning_rate);
    let lambda = T::from_f64_lossy(cfg.lambda);
    let mut history = TrainHistory::default();
    for epoch in 0..opts.epochs {
        let (task, r_sp, grad) = net.task_gradient(data)?;
        let l_sp = net.sparsity_loss();
        let g = gamma(r_sp, T::from_f64_lossy(cfg.beta), T::from_f64_lossy(cfg.alpha))?;
        let objective = task + lambda * l_sp * g;
        let rec = EpochRecord {
            epoch,
            task_loss: task.to_f64_lossy(),
            sparsity_loss: l_sp.to_f64_lossy(),
            r_sp: r_sp.to_f64_lossy(),
            r_sp0: 1.0 - r_sp.to_f64_lossy(),
            gamma: g.to_f64_lossy(),
            objective: objective.to_f64_lossy(),
        };
        if !objective.is_finite() || !net.is_finite() {
            return Err(Error::Training {
                epoch,
                history: Box::new(history),
            });
        }
        history.epochs.push(rec);

        let sp_scale = lambda * g;
        let sp_grad = if sp_scale > T::zero() {
            Some(sparsity_loss_grad(&net.sparse_layers()))
        } else {
            None
        };
        let task_grads = grad.params();
        let mut sparse_grads: Vec<T> = match &sp_grad {
            Some(gs) => gs
                .iter()
                .flat_map(|p| p.kernels.iter().chain(&p.biases).copied())
                .collect(),
            None => Vec::new(),
        };
        sparse_grads.resize(task_grads.len(), T::zero());
        for ((p, &gt), &gs) in net.params_mut().zip(&task_grads).zip(&sparse_grads) {
            *p = *p - lr * (gt + sp_scale * gs);
        }
    }
    Ok((net, history))
}

/// Draws a parameter value at least `margin` away from zero (off the `max(0, .)` kink).
pub fn sample_off_kink<R: Rng>(rng: &mut R, scale: f64, margin: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(-scale..scale);
        if v.abs() > margin {
            return v;
        }
    }
}
