//! Reconstruction sub-network.
//!
//! Measurements `[N, n_b, h, w]` go through a 1x1 convolution up to `B^2`
//! channels, are rearranged into `B x B` tiles (reshape + concat), and are
//! refined by three 3x3 convolutions (width 64, ReLU, ReLU, linear) whose
//! output is added back onto the initial reconstruction.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Stream};
use crate::sampling::MeasurementMatrix;
use crate::tensor::{
    conv2d_backward, conv2d_backward_impl, conv2d_forward, relu, relu_backward, ConvGrads, ConvSpec,
    Tensor,
};

pub const STACK_WIDTH: usize = 64;
pub const STACK_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub(crate) fn spec(&self) -> ConvSpec {
        let s = self.weight.shape();
        if s[2] == 1 {
            ConvSpec {
                kernel_size: (1, 1),
                stride: (1, 1),
                out_channels: s[0],
                has_bias: true,
                padding: (0, 0),
            }
        } else {
            ConvSpec::same(s[2], s[0])
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, Some(&self.bias), &self.spec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionParams {
    block_size: usize,
    measurements: usize,
    /// 1x1 convolution `n_b -> B^2`: weight `[B^2, n_b, 1, 1]`, bias `[B^2]`.
    pub init: ConvLayer,
    /// `1 -> w -> w -> 1` channels, 3x3, zero-padded.
    pub stack: [ConvLayer; 3],
    pub residual: bool,
}

impl ReconstructionParams {
    pub fn zeros(block_size: usize, measurements: usize, width: usize) -> Self {
        let nb = block_size * block_size;
        Self {
            block_size,
            measurements,
            init: ConvLayer::zeros(nb, measurements, 1),
            stack: [
                ConvLayer::zeros(width, 1, STACK_KERNEL),
                ConvLayer::zeros(width, width, STACK_KERNEL),
                ConvLayer::zeros(1, width, STACK_KERNEL),
            ],
            residual: true,
        }
    }

    /// 1x1 weights ~ `N(0, 1/n_b)`, stack weights He-style `N(0, 2/fan_in)`,
    /// zero biases.
    pub fn random(block_size: usize, measurements: usize, width: usize, seed: u64) -> Self {
        let mut p = Self::zeros(block_size, measurements, width);
        let mut rng = rng::keyed(seed, Stream::Init, 1, 0);
        let mut fill = |t: &mut Tensor, fan_in: usize, gain: f64| {
            let std = libm::sqrt(gain / fan_in as f64);
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        };
        fill(&mut p.init.weight, measurements, 1.0);
        for layer in p.stack.iter_mut() {
            let s = layer.weight.shape();
            let fan_in = s[1] * s[2] * s[3];
            fill(&mut layer.weight, fan_in, 2.0);
        }
        p
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn measurements(&self) -> usize {
        self.measurements
    }

    pub fn width(&self) -> usize {
        self.stack[0].weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: init weight, init bias, then
    /// weight and bias of each stack layer.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.init.weight,
            &self.init.bias,
            &self.stack[0].weight,
            &self.stack[0].bias,
            &self.stack[1].weight,
            &self.stack[1].bias,
            &self.stack[2].weight,
            &self.stack[2].bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        let [s0, s1, s2] = &mut self.stack;
        [
            &mut self.init.weight,
            &mut self.init.bias,
            &mut s0.weight,
            &mut s0.bias,
            &mut s1.weight,
            &mut s1.bias,
            &mut s2.weight,
            &mut s2.bias,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 8] = [
        "init.weight",
        "init.bias",
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "conv3.weight",
        "conv3.bias",
    ];

    /// Rebuild from tensors in [`Self::tensors`] order; shapes are validated.
    pub fn from_tensors(
        block_size: usize,
        measurements: usize,
        residual: bool,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        if tensors.len() != 8 {
            return Err(invalid("reconstruction params", "expected 8 tensors"));
        }
        let width = tensors[2].shape().first().copied().unwrap_or(0);
        let mut p = Self::zeros(block_size, measurements, width.max(1));
        p.residual = residual;
        for (slot, t) in p.tensors_mut().into_iter().zip(tensors) {
            slot.require_same_shape("ReconstructionParams::from_tensors", &t)?;
            *slot = t;
        }
        Ok(p)
    }

    fn check_matrix(&self, phi: &MeasurementMatrix) -> Result<()> {
        if phi.block_size() != self.block_size {
            return Err(Error::Shape {
                op: "reconstruction",
                axis: "block_size",
                expected: self.block_size,
                actual: phi.block_size(),
            });
        }
        if phi.rows() != self.measurements {
            return Err(Error::Shape {
                op: "reconstruction",
                axis: "measurements",
                expected: self.measurements,
                actual: phi.rows(),
            });
        }
        Ok(())
    }
}

/// `[N, B^2, h, w] -> [N, 1, h*B, w*B]`: the channel vector at block position
/// `(i, j)` fills output block `(i, j)` in row-major order.
pub fn reshape_concat(feature: &Tensor, block_size: usize) -> Result<Tensor> {
    let [n, c, h, w] = feature.dims4("reshape_concat")?;
    let b = block_size;
    if c != b * b {
        return Err(Error::Shape {
            op: "reshape_concat",
            axis: "channels",
            expected: b * b,
            actual: c,
        });
    }
    let (oh, ow) = (h * b, w * b);
    let mut out = Tensor::zeros(&[n, 1, oh, ow]);
    let src = feature.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ch in 0..c {
            let (dy, dx) = (ch / b, ch % b);
            for i in 0..h {
                for j in 0..w {
                    dst[(ni * oh + i * b + dy) * ow + j * b + dx] = src[((ni * c + ch) * h + i) * w + j];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`reshape_concat`]; also its adjoint.
pub fn blocks_to_channels(image: &Tensor, block_size: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = image.dims4("blocks_to_channels")?;
    let b = block_size;
    if c != 1 {
        return Err(Error::Shape {
            op: "blocks_to_channels",
            axis: "channels",
            expected: 1,
            actual: c,
        });
    }
    if ih % b != 0 || iw % b != 0 {
        return Err(Error::NotBlockMultiple {
            axis: if ih % b != 0 { "height" } else { "width" },
            size: if ih % b != 0 { ih } else { iw },
            multiple: b,
        });
    }
    let (h, w, nc) = (ih / b, iw / b, b * b);
    let mut out = Tensor::zeros(&[n, nc, h, w]);
    let src = image.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ch in 0..nc {
            let (dy, dx) = (ch / b, ch % b);
            for i in 0..h {
                for j in 0..w {
                    dst[((ni * nc + ch) * h + i) * w + j] = src[(ni * ih + i * b + dy) * iw + j * b + dx];
                }
            }
        }
    }
    Ok(out)
}

/// 1x1 up-projection followed by [`reshape_concat`].
pub fn initial_reconstruction(measurements: &Tensor, params: &ReconstructionParams) -> Result<Tensor> {
    let feat = params.init.forward(measurements)?;
    reshape_concat(&feat, params.block_size)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub x_hat: Tensor,
    pub measurements: Tensor,
    input: Tensor,
    initial: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
}

impl ForwardPass {
    pub fn initial(&self) -> &Tensor {
        &self.initial
    }
}

fn stack_forward(initial: &Tensor, params: &ReconstructionParams) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let pre1 = params.stack[0].forward(initial)?;
    let act1 = relu(&pre1);
    let pre2 = params.stack[1].forward(&act1)?;
    let act2 = relu(&pre2);
    let mut out = params.stack[2].forward(&act2)?;
    if params.residual {
        out.axpy(1.0, initial)?;
    }
    Ok((out, pre1, act1, pre2, act2))
}

/// `g(x; Phi, theta_r)`: sample `x` with the (already constrained) matrix,
/// then reconstruct.
pub fn forward(x: &Tensor, phi: &MeasurementMatrix, params: &ReconstructionParams) -> Result<ForwardPass> {
    params.check_matrix(phi)?;
    let [_, _, h, w] = x.dims4("forward")?;
    let b = phi.block_size();
    if h % b != 0 || w % b != 0 {
        return Err(Error::NotBlockMultiple {
            axis: if h % b != 0 { "height" } else { "width" },
            size: if h % b != 0 { h } else { w },
            multiple: b,
        });
    }
    let measurements = crate::sampling::sample_image(x, phi, 0.0, 0)?;
    let initial = initial_reconstruction(&measurements, params)?;
    let (x_hat, pre1, act1, pre2, act2) = stack_forward(&initial, params)?;
    Ok(ForwardPass {
        x_hat,
        measurements,
        input: x.clone(),
        initial,
        pre1,
        act1,
        pre2,
        act2,
    })
}

/// Reconstruct from given measurements with the learned network.
pub fn reconstruct(measurements: &Tensor, params: &ReconstructionParams) -> Result<Tensor> {
    let [_, c, _, _] = measurements.dims4("reconstruct")?;
    if c != params.measurements {
        return Err(Error::Shape {
            op: "reconstruct",
            axis: "channels",
            expected: params.measurements,
            actual: c,
        });
    }
    let initial = initial_reconstruction(measurements, params)?;
    Ok(stack_forward(&initial, params)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// d loss / d (constrained kernel entries), `n_b x B^2` row-major.
    pub sampling: Vec<f64>,
    /// Same layout as the reconstruction parameters.
    pub recon: ReconstructionParams,
}

/// Backpropagate `grad_x_hat` through the network of `pass`.
pub fn backward(
    pass: &ForwardPass,
    phi: &MeasurementMatrix,
    params: &ReconstructionParams,
    grad_x_hat: &Tensor,
) -> Result<Gradients> {
    pass.x_hat.require_same_shape("backward", grad_x_hat)?;
    let mut grads = ReconstructionParams::zeros(params.block_size, params.measurements, params.width());
    grads.residual = params.residual;

    let g3 = conv2d_backward(&pass.act2, &params.stack[2].weight, &params.stack[2].spec(), grad_x_hat)?;
    let g_pre2 = relu_backward(&pass.pre2, &g3.input)?;
    let g2 = conv2d_backward(&pass.act1, &params.stack[1].weight, &params.stack[1].spec(), &g_pre2)?;
    let g_pre1 = relu_backward(&pass.pre1, &g2.input)?;
    let ConvGrads {
        input: mut g_initial,
        kernels: g1_kernels,
        bias: g1_bias,
    } = conv2d_backward(&pass.initial, &params.stack[0].weight, &params.stack[0].spec(), &g_pre1)?;
    if params.residual {
        g_initial.axpy(1.0, grad_x_hat)?;
    }

    let g_feat = blocks_to_channels(&g_initial, params.block_size)?;
    let gi = conv2d_backward(&pass.measurements, &params.init.weight, &params.init.spec(), &g_feat)?;
    let gs = conv2d_backward_impl(
        &pass.input,
        &phi.kernels(),
        &ConvSpec::block(phi.block_size(), phi.rows()),
        &gi.input,
        false,
    )?;

    let layer_grads = [
        (gi.kernels, gi.bias),
        (g1_kernels, g1_bias),
        (g2.kernels, g2.bias),
        (g3.kernels, g3.bias),
    ];
    for (layer, (w, b)) in [&mut grads.init]
        .into_iter()
        .chain(grads.stack.iter_mut())
        .zip(layer_grads)
    {
        layer.weight = w;
        layer.bias = b.expect("layers carry biases");
    }

    Ok(Gradients {
        sampling: gs.kernels.into_data(),
        recon: grads,
    })
}
