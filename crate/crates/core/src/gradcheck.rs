//! End-to-end finite-difference check of every backward path.
//!
//! One random `B x B` image is sampled with a constrained matrix and
//! reconstructed; the analytic gradients of the reconstruction loss are
//! compared with central differences for every reconstruction parameter
//! and every constrained kernel entry. Perturbing a stack weight only moves
//! one output channel of its layer, so only that channel is recomputed;
//! the spliced activations are bit-identical to a full forward pass.

use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::recon::{backward, forward, initial_reconstruction, ConvLayer, Gradients, ReconstructionParams};
use crate::rng::{self, Stream};
use crate::sampling::{constrain, sample_image, MeasurementMatrix, SamplingLayerState};
use crate::tensor::{mse_loss, relu, Tensor, Unfolded};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub block_size: usize,
    pub measurements: usize,
    pub alpha: f64,
    pub width: usize,
    pub residual: bool,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            block_size: 8,
            measurements: 16,
            alpha: 0.5,
            width: crate::recon::STACK_WIDTH,
            residual: true,
            epsilon: 1e-6,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: &'static str,
    pub params: usize,
    /// `max |analytic - numeric| / max |analytic|` over the group.
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest absolute discrepancy.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GroupResult> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn gradcheck(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(seed, cfg, |_| {})
}

/// Like [`gradcheck`], but `tamper` may edit the analytic gradients before
/// they are compared (for negative controls).
pub fn gradcheck_with(
    seed: u64,
    cfg: &GradcheckConfig,
    tamper: impl FnOnce(&mut Gradients),
) -> Result<GradcheckReport> {
    if !(cfg.epsilon > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(invalid("epsilon", "epsilon and tolerance must be positive"));
    }
    let b = cfg.block_size;
    let state = SamplingLayerState::random(cfg.measurements, b, cfg.alpha, rng::keyed(seed, Stream::Gradcheck, 0, 0).random())?;
    let phi = constrain(state.theta(), cfg.measurements, b, cfg.alpha)?.matrix;
    let mut params = ReconstructionParams::random(b, cfg.measurements, cfg.width, seed);
    params.residual = cfg.residual;
    let mut r = rng::keyed(seed, Stream::Gradcheck, 1, 0);
    for layer in [&mut params.init].into_iter().chain(params.stack.iter_mut()) {
        for v in layer.bias.data_mut() {
            *v = 0.1 * (r.random::<f64>() - 0.5);
        }
    }
    let x = Tensor::from_fn(&[1, 1, b, b], |_| r.random::<f64>());

    let pass = forward(&x, &phi, &params)?;
    let (_, g) = mse_loss(&pass.x_hat, &x)?;
    let mut grads = backward(&pass, &phi, &params, &g)?;
    tamper(&mut grads);

    let eval = Evaluator::new(&x, &phi, &params)?;
    let eps = cfg.epsilon;
    let mut groups = Vec::with_capacity(9);

    let numeric = central(phi.entries().len(), eps, |i, d| {
        let mut e = phi.entries().to_vec();
        e[i] += d;
        let m = MeasurementMatrix::new(b, cfg.measurements, cfg.alpha, e, phi.provenance())?;
        eval.loss_after_measurements(&sample_image(&x, &m, 0.0, 0)?, &params)
    })?;
    groups.push(compare("sampling", &grads.sampling, &numeric));

    for (ti, name) in ReconstructionParams::TENSOR_NAMES.iter().enumerate() {
        let len = params.tensors()[ti].len();
        let numeric = central(len, eps, |i, d| eval.perturbed(ti, i, d))?;
        groups.push(compare(name, grads.recon.tensors()[ti].data(), &numeric));
    }

    Ok(GradcheckReport {
        seed,
        tolerance: cfg.tolerance,
        groups,
    })
}

fn central(len: usize, eps: f64, mut f: impl FnMut(usize, f64) -> Result<f64>) -> Result<Vec<f64>> {
    (0..len)
        .map(|i| Ok((f(i, eps)? - f(i, -eps)?) / (2.0 * eps)))
        .collect()
}

fn compare(name: &'static str, analytic: &[f64], numeric: &[f64]) -> GroupResult {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (worst_index, diff) = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .enumerate()
        .fold((0, 0.0f64), |best, (i, d)| if d > best.1 { (i, d) } else { best });
    let max_rel_error = if scale > 0.0 {
        diff / scale
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    GroupResult {
        name,
        params: analytic.len(),
        max_rel_error,
        worst_index,
    }
}

/// Cached activations of the unperturbed network.
struct Evaluator<'a> {
    x: &'a Tensor,
    work: RefCell<ReconstructionParams>,
    measurements: Tensor,
    initial: Tensor,
    pre1: Tensor,
    act2: Tensor,
    unfolded_initial: Unfolded,
    unfolded_act1: Unfolded,
    unfolded_act2: RefCell<Unfolded>,
}

/// `layer` restricted to output channel `o`.
fn channel(layer: &ConvLayer, o: usize) -> ConvLayer {
    let s = layer.weight.shape();
    let per = s[1] * s[2] * s[3];
    ConvLayer {
        weight: Tensor::new(&[1, s[1], s[2], s[3]], layer.weight.data()[o * per..(o + 1) * per].to_vec())
            .expect("slice matches shape"),
        bias: Tensor::new(&[1], alloc::vec![layer.bias.data()[o]]).expect("one bias"),
    }
}

fn splice(full: &Tensor, o: usize, part: &Tensor) -> Tensor {
    let mut out = full.clone();
    let hw = part.len();
    out.data_mut()[o * hw..(o + 1) * hw].copy_from_slice(part.data());
    out
}

impl<'a> Evaluator<'a> {
    fn new(x: &'a Tensor, phi: &MeasurementMatrix, params: &'a ReconstructionParams) -> Result<Self> {
        let measurements = sample_image(x, phi, 0.0, 0)?;
        let initial = initial_reconstruction(&measurements, params)?;
        let pre1 = params.stack[0].forward(&initial)?;
        let act1 = relu(&pre1);
        let pre2 = params.stack[1].forward(&act1)?;
        let act2 = relu(&pre2);
        let spec = params.stack[1].spec();
        Ok(Self {
            x,
            work: RefCell::new(params.clone()),
            unfolded_initial: Unfolded::new(&initial, &spec)?,
            unfolded_act1: Unfolded::new(&act1, &spec)?,
            unfolded_act2: RefCell::new(Unfolded::new(&act2, &spec)?),
            measurements,
            initial,
            pre1,
            act2,
        })
    }

    fn loss(&self, out: Tensor, initial: &Tensor, params: &ReconstructionParams) -> Result<f64> {
        let mut out = out;
        if params.residual {
            out.axpy(1.0, initial)?;
        }
        Ok(mse_loss(&out, self.x)?.0)
    }

    fn loss_after_act2(&self, act2: &Tensor, initial: &Tensor, params: &ReconstructionParams) -> Result<f64> {
        self.loss(params.stack[2].forward(act2)?, initial, params)
    }

    fn loss_after_act1(&self, act1: &Tensor, initial: &Tensor, params: &ReconstructionParams) -> Result<f64> {
        let act2 = relu(&params.stack[1].forward(act1)?);
        self.loss_after_act2(&act2, initial, params)
    }

    fn loss_after_initial(&self, initial: &Tensor, params: &ReconstructionParams) -> Result<f64> {
        let act1 = relu(&params.stack[0].forward(initial)?);
        self.loss_after_act1(&act1, initial, params)
    }

    fn loss_after_measurements(&self, y: &Tensor, params: &ReconstructionParams) -> Result<f64> {
        self.loss_after_initial(&initial_reconstruction(y, params)?, params)
    }

    /// Loss with entry `i` of parameter tensor `ti` shifted by `d`.
    fn perturbed(&self, ti: usize, i: usize, d: f64) -> Result<f64> {
        let mut p = self.work.borrow_mut();
        let slot = &mut p.tensors_mut()[ti].data_mut()[i];
        let saved = *slot;
        *slot += d;
        let loss = self.perturbed_loss(&p, ti, i);
        p.tensors_mut()[ti].data_mut()[i] = saved;
        loss
    }

    fn perturbed_loss(&self, p: &ReconstructionParams, ti: usize, i: usize) -> Result<f64> {
        let per_out = |layer: &ConvLayer| {
            if ti.is_multiple_of(2) {
                let s = layer.weight.shape();
                i / (s[1] * s[2] * s[3])
            } else {
                i
            }
        };
        match ti / 2 {
            0 => self.loss_after_measurements(&self.measurements, p),
            1 => {
                let o = per_out(&p.stack[0]);
                let c = channel(&p.stack[0], o);
                let part = self.unfolded_initial.forward(&c.weight, Some(&c.bias))?;
                let act1 = relu(&splice(&self.pre1, o, &part));
                self.loss_after_act1(&act1, &self.initial, p)
            }
            2 => {
                // only channel o of act2 moves; re-unfold just that channel
                let o = per_out(&p.stack[1]);
                let c = channel(&p.stack[1], o);
                let part = relu(&self.unfolded_act1.forward(&c.weight, Some(&c.bias))?);
                let mut u = self.unfolded_act2.borrow_mut();
                let hw = part.len();
                u.replace_channel(0, o, part.data())?;
                let out = u.forward(&p.stack[2].weight, Some(&p.stack[2].bias));
                u.replace_channel(0, o, &self.act2.data()[o * hw..(o + 1) * hw])?;
                self.loss(out?, &self.initial, p)
            }
            _ => {
                let out = self.unfolded_act2.borrow().forward(&p.stack[2].weight, Some(&p.stack[2].bias))?;
                self.loss(out, &self.initial, p)
            }
        }
    }
}
