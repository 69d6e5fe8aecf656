//! Joint training of the sampling layer and the reconstruction network.
//!
//! One step follows the constrained-update recipe: snapshot the free
//! sampling parameters, replace them by `F(S(theta))` for the forward and
//! backward passes, update the reconstruction weights, restore the
//! snapshot, then update it with the backpropagated gradient scaled
//! elementwise by the normalization derivative.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::recon::{self, ReconstructionParams, STACK_WIDTH};
use crate::rng::{self, Stream};
use crate::sampling::{
    constrain, measurement_dim, normalization_derivative, SamplingLayerState,
};
use crate::tensor::{mse_loss_scaled, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decline {
    /// Log-linear between the phase-2 endpoints.
    Geometric,
    Linear,
}

/// Three-phase step size: constant, declining, constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub phase1_epochs: usize,
    pub phase1_rate: f64,
    pub phase2_epochs: usize,
    pub phase2_start: f64,
    pub phase2_end: f64,
    pub phase3_rate: f64,
    pub decline: Decline,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            phase1_epochs: 30,
            phase1_rate: 1e-3,
            phase2_epochs: 40,
            phase2_start: 1e-4,
            phase2_end: 1e-6,
            phase3_rate: 1e-6,
            decline: Decline::Geometric,
        }
    }
}

impl LrSchedule {
    /// A single rate for every epoch.
    pub fn constant(rate: f64) -> Self {
        Self {
            phase1_epochs: usize::MAX / 2,
            phase1_rate: rate,
            phase2_epochs: 0,
            phase2_start: rate,
            phase2_end: rate,
            phase3_rate: rate,
            decline: Decline::Geometric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.phase1_rate,
            self.phase2_start,
            self.phase2_end,
            self.phase3_rate,
        ];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(invalid("lr_schedule", "rates must be positive and finite"));
        }
        if rates.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("lr_schedule", "rates must be non-increasing across phases"));
        }
        Ok(())
    }

    /// Step size for a 1-based `epoch` of a run with `epochs` epochs.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> Result<f64> {
        if epoch == 0 || epoch > epochs {
            return Err(Error::EpochOutOfRange { epoch, epochs });
        }
        if epoch <= self.phase1_epochs {
            return Ok(self.phase1_rate);
        }
        let e2 = epoch - self.phase1_epochs;
        if e2 <= self.phase2_epochs {
            if self.phase2_epochs == 1 {
                return Ok(self.phase2_start);
            }
            let t = (e2 - 1) as f64 / (self.phase2_epochs - 1) as f64;
            let rate = match self.decline {
                Decline::Geometric => {
                    let (a, b) = (libm::log10(self.phase2_start), libm::log10(self.phase2_end));
                    libm::pow(10.0, a + (b - a) * t)
                }
                Decline::Linear => self.phase2_start + (self.phase2_end - self.phase2_start) * t,
            };
            return Ok(rate);
        }
        Ok(self.phase3_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossDivisor {
    /// `1 / (2N)`: squared errors summed over pixels, averaged over samples.
    Batch,
    /// `1 / (2 N P^2)`: per-pixel mean.
    BatchPixels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub block_size: usize,
    pub sampling_ratio: f64,
    pub alpha: f64,
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_sampling: bool,
    pub decay_recon: bool,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub loss_divisor: LossDivisor,
    pub residual: bool,
    pub stack_width: usize,
    /// Epoch interval of the checkpoint hook; 0 disables periodic calls.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            block_size: 32,
            sampling_ratio: 0.1,
            alpha: 1.0,
            patch_size: 96,
            batch_size: 32,
            epochs: 100,
            iters_per_epoch: 600,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_sampling: true,
            decay_recon: true,
            lr_schedule: LrSchedule::default(),
            seed: 0,
            scale_range: (0.8, 1.2),
            hflip_prob: 0.5,
            loss_divisor: LossDivisor::Batch,
            residual: true,
            stack_width: STACK_WIDTH,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn measurements(&self) -> Result<usize> {
        measurement_dim(self.sampling_ratio, self.block_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(invalid("block_size", "must be positive"));
        }
        self.measurements()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", "must lie in [0, 1]"));
        }
        if self.patch_size < self.block_size || !self.patch_size.is_multiple_of(self.block_size) {
            return Err(invalid("patch_size", "must be a positive multiple of block_size"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid("scale_range", "need 0 < low <= high"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(invalid("hflip_prob", "must lie in [0, 1]"));
        }
        if self.stack_width == 0 {
            return Err(invalid("stack_width", "must be positive"));
        }
        self.lr_schedule.validate()
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    fn divisor(&self, batch: usize) -> f64 {
        match self.loss_divisor {
            LossDivisor::Batch => batch as f64,
            LossDivisor::BatchPixels => (batch * self.patch_size * self.patch_size) as f64,
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub sampling: Vec<f64>,
    pub recon: ReconstructionParams,
}

impl OptimizerState {
    pub fn new(sampling: &SamplingLayerState, recon: &ReconstructionParams) -> Self {
        let mut buf = ReconstructionParams::zeros(recon.block_size(), recon.measurements(), recon.width());
        buf.residual = recon.residual;
        Self {
            sampling: vec![0.0; sampling.theta().len()],
            recon: buf,
        }
    }
}

/// Classical momentum with L2 weight decay:
/// `buf = m * buf - gamma * (grad + wd * param); param += buf`.
pub fn sgd_update(
    param: &mut [f64],
    grad: &[f64],
    buffer: &mut [f64],
    gamma: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert!(param.len() == grad.len() && param.len() == buffer.len());
    for ((p, g), b) in param.iter_mut().zip(grad).zip(buffer.iter_mut()) {
        *b = momentum * *b - gamma * (g + weight_decay * *p);
        *p += *b;
    }
}

/// Augmentation draw for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub scale: f64,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        flip: false,
    };

    pub fn draw(rng: &mut impl Rng, scale_range: (f64, f64), hflip_prob: f64) -> Self {
        let (lo, hi) = scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip = rng.random::<f64>() < hflip_prob;
        Self { scale, flip }
    }
}

/// Bilinear sample of a single-channel `h x w` plane with edge clamping.
fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
    let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
    top + fy * (bot - top)
}

/// `size x size` view of `src` magnified by `scale` about `(cy, cx)`,
/// optionally mirrored left-right.
fn warp(src: &[f64], h: usize, w: usize, cy: f64, cx: f64, size: usize, aug: Augmentation) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        let y = cy + (i as f64 - c) / aug.scale;
        for j in 0..size {
            let jj = if aug.flip { size - 1 - j } else { j };
            let x = cx + (jj as f64 - c) / aug.scale;
            out[i * size + j] = bilinear(src, h, w, y, x);
        }
    }
    out
}

/// Rescale a square patch about its centre (bilinear, replicate border,
/// same output size) and optionally flip it horizontally.
pub fn augment(patch: &Tensor, aug: Augmentation) -> Result<Tensor> {
    let [n, c, h, w] = patch.dims4("augment")?;
    if h != w {
        return Err(invalid("patch", "must be square"));
    }
    if !(aug.scale > 0.0) {
        return Err(invalid("scale", "must be positive"));
    }
    let mut out = Vec::with_capacity(patch.len());
    for plane in patch.data().chunks_exact(h * w) {
        let ctr = (h - 1) as f64 / 2.0;
        out.extend(warp(plane, h, w, ctr, ctr, h, aug));
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Grayscale training images in `[0, 1]` and a deterministic patch sampler.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    images: Vec<Tensor>,
}

impl PatchDataset {
    /// Images are `[1, 1, H, W]` tensors.
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for img in &images {
            let [n, c, _, _] = img.dims4("PatchDataset")?;
            if n != 1 || c != 1 {
                return Err(invalid("image", "expected a single-channel [1, 1, H, W] tensor"));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// Batch for `(epoch, iteration)`: images cycled in an epoch-shuffled
    /// order, uniform patch centres, scale and flip augmentation applied at
    /// extraction, values clamped to `[0, 1]`.
    pub fn batch(&self, cfg: &TrainConfig, epoch: usize, iteration: usize) -> Tensor {
        let p = cfg.patch_size;
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut rng::keyed(cfg.seed, Stream::Patches, epoch as u64, 0));
        let mut pos_rng = rng::keyed(cfg.seed, Stream::Patches, epoch as u64, iteration as u64 + 1);
        let mut aug_rng = rng::keyed(cfg.seed, Stream::Augment, epoch as u64, iteration as u64);

        let mut data = Vec::with_capacity(cfg.batch_size * p * p);
        for b in 0..cfg.batch_size {
            let img = &self.images[order[(iteration * cfg.batch_size + b) % order.len()]];
            let (h, w) = (img.shape()[2], img.shape()[3]);
            let aug = Augmentation::draw(&mut aug_rng, cfg.scale_range, cfg.hflip_prob);
            let half = (p - 1) as f64 / 2.0 / aug.scale;
            let mut centre = |extent: usize| {
                let (lo, hi) = (half, extent as f64 - 1.0 - half);
                if hi > lo {
                    // integer offsets keep unscaled patches on the pixel grid
                    let span = libm::floor(hi - lo) as u64;
                    lo + pos_rng.random_range(0..=span) as f64
                } else {
                    (extent - 1) as f64 / 2.0
                }
            };
            let cy = centre(h);
            let cx = centre(w);
            data.extend(
                warp(img.data(), h, w, cy, cx, p, aug)
                    .into_iter()
                    .map(|v| v.clamp(0.0, 1.0)),
            );
        }
        Tensor::new(&[cfg.batch_size, 1, p, p], data).expect("batch sized above")
    }
}

/// Intermediate values of one [`train_step`], for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub loss: f64,
    /// Snapshot of the free sampling parameters taken before constraining.
    pub saved_theta: Vec<f64>,
    /// Free parameters as restored just before their update.
    pub restored_theta: Vec<f64>,
    /// Raw gradient with respect to the constrained kernel entries.
    pub grad_constrained: Vec<f64>,
    /// The same gradient after elementwise scaling by the normalization
    /// derivative of `S(theta)`.
    pub grad_modulated: Vec<f64>,
}

pub fn train_step(
    batch: &Tensor,
    sampling: &mut SamplingLayerState,
    recon: &mut ReconstructionParams,
    opt: &mut OptimizerState,
    gamma: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    train_step_traced(batch, sampling, recon, opt, gamma, cfg).map(|t| t.loss)
}

pub fn train_step_traced(
    batch: &Tensor,
    sampling: &mut SamplingLayerState,
    recon: &mut ReconstructionParams,
    opt: &mut OptimizerState,
    gamma: f64,
    cfg: &TrainConfig,
) -> Result<StepTrace> {
    // (1) theta_G <- theta_s
    let saved_theta = sampling.theta().to_vec();

    // (2) theta_s <- F(S(theta_s))
    let constrained = constrain(&saved_theta, sampling.rows(), sampling.block_size(), sampling.alpha())?;
    sampling.set_theta(constrained.matrix.entries().to_vec())?;

    // (3) forward + loss, (4) backward
    let phi = &constrained.matrix;
    let pass = recon::forward(batch, phi, recon)?;
    let (loss, grad_out) = mse_loss_scaled(&pass.x_hat, batch, cfg.divisor(batch.shape()[0]))?;
    if !loss.is_finite() {
        sampling.set_theta(saved_theta)?;
        return Err(Error::NonFiniteLoss { iteration: 0, loss });
    }
    let grads = recon::backward(&pass, phi, recon, &grad_out)?;

    // (5) reconstruction update
    let decay_r = if cfg.decay_recon { cfg.weight_decay } else { 0.0 };
    for ((p, g), b) in recon
        .tensors_mut()
        .into_iter()
        .zip(grads.recon.tensors())
        .zip(opt.recon.tensors_mut())
    {
        sgd_update(p.data_mut(), g.data(), b.data_mut(), gamma, cfg.momentum, decay_r);
    }

    // (6) theta_s <- theta_G
    sampling.set_theta(saved_theta.clone())?;
    let restored_theta = sampling.theta().to_vec();

    // (7) update with the gradient scaled by F'(S(theta_G))
    let cols = sampling.block_size() * sampling.block_size();
    let mut grad_modulated = grads.sampling.clone();
    for (g_row, s_row) in grad_modulated
        .chunks_exact_mut(cols)
        .zip(constrained.sparse.chunks_exact(cols))
    {
        for (g, d) in g_row.iter_mut().zip(normalization_derivative(s_row)) {
            *g *= d;
        }
    }
    let decay_s = if cfg.decay_sampling { cfg.weight_decay } else { 0.0 };
    sgd_update(
        sampling.theta_mut(),
        &grad_modulated,
        &mut opt.sampling,
        gamma,
        cfg.momentum,
        decay_s,
    );

    Ok(StepTrace {
        loss,
        saved_theta,
        restored_theta,
        grad_constrained: grads.sampling,
        grad_modulated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based over the whole run.
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sampling: SamplingLayerState,
    pub recon: ReconstructionParams,
    pub history: Vec<LossRecord>,
}

/// Progress callbacks from [`train_with`].
pub enum TrainEvent<'a> {
    Iteration(&'a LossRecord),
    /// Every `checkpoint_every` epochs and once more at the end.
    Checkpoint {
        epoch: usize,
        sampling: &'a SamplingLayerState,
        recon: &'a ReconstructionParams,
        is_final: bool,
    },
}

/// Fresh parameters for `cfg`, seeded from `cfg.seed`.
pub fn initial_state(cfg: &TrainConfig) -> Result<(SamplingLayerState, ReconstructionParams)> {
    cfg.validate()?;
    let n_b = cfg.measurements()?;
    let sampling = SamplingLayerState::random(n_b, cfg.block_size, cfg.alpha, cfg.seed)?;
    let mut recon = ReconstructionParams::random(cfg.block_size, n_b, cfg.stack_width, cfg.seed);
    recon.residual = cfg.residual;
    Ok((sampling, recon))
}

pub fn train(dataset: &PatchDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| Ok(()))
}

pub fn train_with(
    dataset: &PatchDataset,
    cfg: &TrainConfig,
    mut hook: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let (mut sampling, mut recon) = initial_state(cfg)?;
    let mut opt = OptimizerState::new(&sampling, &recon);
    let mut history = Vec::with_capacity(cfg.total_iterations());

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_schedule.lr_at(epoch, cfg.epochs)?;
        for it in 0..cfg.iters_per_epoch {
            let iteration = history.len() + 1;
            let batch = dataset.batch(cfg, epoch, it);
            let loss = train_step(&batch, &mut sampling, &mut recon, &mut opt, lr, cfg).map_err(
                |e| match e {
                    Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { iteration, loss },
                    other => other,
                },
            )?;
            let rec = LossRecord {
                iteration,
                epoch,
                lr,
                loss,
            };
            hook(TrainEvent::Iteration(&rec))?;
            history.push(rec);
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
            hook(TrainEvent::Checkpoint {
                epoch,
                sampling: &sampling,
                recon: &recon,
                is_final: false,
            })?;
        }
    }
    sampling.constrained();
    hook(TrainEvent::Checkpoint {
        epoch: cfg.epochs,
        sampling: &sampling,
        recon: &recon,
        is_final: true,
    })?;
    Ok(TrainOutcome {
        sampling,
        recon,
        history,
    })
}
