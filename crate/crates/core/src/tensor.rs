//! Dense `f64` tensors and the handful of network primitives the sampling
//! and reconstruction sub-networks are built from.
//!
//! 4-D tensors use `[batch, channels, height, width]` order. Convolution is
//! cross-correlation (no kernel flip). Every reduction runs in a fixed order
//! (input channel, then kernel row, then kernel column) so results are
//! bit-for-bit reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid("shape", "all extents must be >= 1"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                axis: "data",
                expected: len,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be >= 1");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// A single grayscale image as a `[1, 1, height, width]` tensor.
    pub fn image(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[1, 1, height, width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents of a 4-D tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                actual: self.shape.len(),
            }),
        }
    }

    /// Same data, different shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                axis: "numel",
                expected: self.data.len(),
                actual: len,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.require_same_shape("axpy", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b)))
    }

    pub(crate) fn require_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::Rank {
                op,
                expected: self.shape.len(),
                actual: other.shape.len(),
            });
        }
        for (i, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::Shape {
                    op,
                    axis: axis_name(self.shape.len(), i),
                    expected: a,
                    actual: b,
                });
            }
        }
        Ok(())
    }
}

fn axis_name(rank: usize, i: usize) -> &'static str {
    if rank == 4 {
        ["batch", "channels", "height", "width"][i]
    } else {
        ["axis0", "axis1", "axis2", "axis3", "axis4", "axis5"]
            .get(i)
            .copied()
            .unwrap_or("axis")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: (usize, usize),
    pub stride: (usize, usize),
    pub out_channels: usize,
    pub has_bias: bool,
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Non-overlapping `block x block` tiles, the block sampling geometry.
    pub fn block(block: usize, out_channels: usize) -> Self {
        Self {
            kernel_size: (block, block),
            stride: (block, block),
            out_channels,
            has_bias: false,
            padding: (0, 0),
        }
    }

    /// `k x k`, stride 1, zero padding that preserves spatial size (odd `k`).
    pub fn same(k: usize, out_channels: usize) -> Self {
        Self {
            kernel_size: (k, k),
            stride: (1, 1),
            out_channels,
            has_bias: true,
            padding: (k / 2, k / 2),
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || self.out_channels == 0 {
            return Err(invalid("conv spec", "kernel, stride and channels must be positive"));
        }
        if height + 2 * ph < kh {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "height",
                expected: kh,
                actual: height + 2 * ph,
            });
        }
        if width + 2 * pw < kw {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "width",
                expected: kw,
                actual: width + 2 * pw,
            });
        }
        Ok(((height + 2 * ph - kh) / sh + 1, (width + 2 * pw - kw) / sw + 1))
    }
}

/// Output positions `o` in `0..out` whose input tap `o*stride + k - pad`
/// lands inside `0..input`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= input - 1, exclusive
    let hi = if input + pad <= k {
        0
    } else {
        ((input + pad - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

fn conv_geometry(
    op: &'static str,
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<ConvGeom> {
    let [n, c, h, w] = input.dims4(op)?;
    let [k, kc, kh, kw] = kernels.dims4(op)?;
    let check = |axis, expected, actual| {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                axis,
                expected,
                actual,
            })
        }
    };
    check("kernel out_channels", spec.out_channels, k)?;
    check("kernel in_channels", c, kc)?;
    check("kernel height", spec.kernel_size.0, kh)?;
    check("kernel width", spec.kernel_size.1, kw)?;
    match (spec.has_bias, bias) {
        (true, Some(b)) => check("bias", k, b.len())?,
        (false, None) => {}
        (true, None) => return Err(invalid("bias", "spec has_bias but no bias given")),
        (false, Some(_)) => return Err(invalid("bias", "bias given but spec has no bias")),
    }
    let (oh, ow) = spec.output_size(h, w)?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        k,
        kh,
        kw,
        oh,
        ow,
        spec: *spec,
    })
}

/// Output pixels unfolded per tile; keeps the column buffer cache-sized.
const TILE_PIXELS: usize = 256;

impl ConvGeom {
    fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_PIXELS / self.ow).clamp(1, self.oh)
    }
}

/// Unfold output rows `oy0..oy1` of input channel `ci` (an `h x w` plane)
/// into its `kh * kw` rows of `col`; padding taps are zero.
fn im2col_channel(g: &ConvGeom, plane: &[f64], ci: usize, oy0: usize, oy1: usize, col: &mut [f64]) {
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let p = (oy1 - oy0) * g.ow;
    for ky in 0..g.kh {
        let (vy0, vy1) = valid_range(ky, ph, sh, g.h, g.oh);
        for kx in 0..g.kw {
            let (vx0, vx1) = valid_range(kx, pw, sw, g.w, g.ow);
            let r = (ci * g.kh + ky) * g.kw + kx;
            let dst = &mut col[r * p..][..p];
            dst.fill(0.0);
            for oy in oy0.max(vy0)..oy1.min(vy1) {
                let row = &plane[(oy * sh + ky - ph) * g.w..][..g.w];
                let drow = &mut dst[(oy - oy0) * g.ow..][..g.ow];
                if sw == 1 {
                    let ix0 = vx0 + kx - pw;
                    drow[vx0..vx1].copy_from_slice(&row[ix0..ix0 + vx1 - vx0]);
                } else {
                    for ox in vx0..vx1 {
                        drow[ox] = row[ox * sw + kx - pw];
                    }
                }
            }
        }
    }
}

/// Unfold output rows `oy0..oy1` of one image (`[c, h, w]`) into `col`,
/// laid out `[c * kh * kw][(oy1 - oy0) * ow]`.
fn im2col(g: &ConvGeom, src: &[f64], oy0: usize, oy1: usize, col: &mut [f64]) {
    let plane = g.h * g.w;
    for ci in 0..g.c {
        im2col_channel(g, &src[ci * plane..][..plane], ci, oy0, oy1, col);
    }
}

/// `dst[j] = bias + sum_r w[r] * col[r][j]`, taps in order, zeros skipped.
#[inline]
fn contract(dst: &mut [f64], bias: f64, weights: &[f64], col: &[f64]) {
    let p = dst.len();
    dst.fill(bias);
    for (r, &wv) in weights.iter().enumerate() {
        if wv != 0.0 {
            axpy_slice(dst, wv, &col[r * p..][..p]);
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into one image.
fn col2im(g: &ConvGeom, col: &[f64], oy0: usize, oy1: usize, dst: &mut [f64]) {
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    let p = (oy1 - oy0) * g.ow;
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (vy0, vy1) = valid_range(ky, ph, sh, g.h, g.oh);
            for kx in 0..g.kw {
                let (vx0, vx1) = valid_range(kx, pw, sw, g.w, g.ow);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * p..][..p];
                for oy in oy0.max(vy0)..oy1.min(vy1) {
                    let row = &mut plane[(oy * sh + ky - ph) * g.w..][..g.w];
                    let srow = &src[(oy - oy0) * g.ow..][..g.ow];
                    for ox in vx0..vx1 {
                        row[ox * sw + kx - pw] += srow[ox];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy_slice(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Strided, zero-padded 2-D cross-correlation. Each output starts from its
/// bias and accumulates taps in channel, kernel-row, kernel-column order.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = conv_geometry("conv2d_forward", input, kernels, bias, spec)?;
    let mut out = Tensor::zeros(&[g.n, g.k, g.oh, g.ow]);
    let taps = g.taps();
    let rows = g.rows_per_tile();
    let mut col = vec![0.0; taps * rows * g.ow];
    let image_in = g.c * g.h * g.w;

    for ni in 0..g.n {
        let src = &input.data[ni * image_in..][..image_in];
        for oy0 in (0..g.oh).step_by(rows) {
            let oy1 = (oy0 + rows).min(g.oh);
            let p = (oy1 - oy0) * g.ow;
            im2col(&g, src, oy0, oy1, &mut col);
            for ki in 0..g.k {
                contract(
                    &mut out.data[((ni * g.k + ki) * g.oh + oy0) * g.ow..][..p],
                    bias.map_or(0.0, |b| b.data[ki]),
                    &kernels.data[ki * taps..][..taps],
                    &col[..taps * p],
                );
            }
        }
    }
    Ok(out)
}

/// An input unfolded once for a fixed kernel size, stride and padding, so
/// several kernel sets can be applied without repeating the unfolding.
/// [`Unfolded::forward`] is bit-identical to [`conv2d_forward`].
#[derive(Debug, Clone)]
pub struct Unfolded {
    geom: ConvGeom,
    cols: Vec<f64>,
}

impl Unfolded {
    pub fn new(input: &Tensor, spec: &ConvSpec) -> Result<Self> {
        let [n, c, h, w] = input.dims4("unfold")?;
        let (oh, ow) = spec.output_size(h, w)?;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k: spec.out_channels,
            kh: spec.kernel_size.0,
            kw: spec.kernel_size.1,
            oh,
            ow,
            spec: *spec,
        };
        let per = geom.taps() * oh * ow;
        let mut cols = vec![0.0; n * per];
        for (ni, col) in cols.chunks_exact_mut(per.max(1)).enumerate().take(n) {
            im2col(&geom, &input.data[ni * c * h * w..][..c * h * w], 0, oh, col);
        }
        Ok(Self { geom, cols })
    }

    /// Re-unfold one input channel of one image from a new `h x w` plane.
    pub fn replace_channel(&mut self, image: usize, channel: usize, plane: &[f64]) -> Result<()> {
        let g = &self.geom;
        if image >= g.n || channel >= g.c || plane.len() != g.h * g.w {
            return Err(invalid("replace_channel", "image, channel or plane size out of range"));
        }
        let per = g.taps() * g.oh * g.ow;
        im2col_channel(g, plane, channel, 0, g.oh, &mut self.cols[image * per..][..per]);
        Ok(())
    }

    /// Apply `kernels` (`[K, C, kh, kw]`, any `K`) and optional bias.
    pub fn forward(&self, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let spec = ConvSpec {
            out_channels: kernels.shape().first().copied().unwrap_or(0),
            has_bias: bias.is_some(),
            ..self.geom.spec
        };
        let probe = Tensor {
            shape: vec![self.geom.n, self.geom.c, self.geom.h, self.geom.w],
            data: Vec::new(),
        };
        let g = conv_geometry("unfolded_forward", &probe, kernels, bias, &spec)?;
        let taps = g.taps();
        let p = g.oh * g.ow;
        let mut out = Tensor::zeros(&[g.n, g.k, g.oh, g.ow]);
        for ni in 0..g.n {
            let col = &self.cols[ni * taps * p..][..taps * p];
            for ki in 0..g.k {
                contract(
                    &mut out.data[(ni * g.k + ki) * p..][..p],
                    bias.map_or(0.0, |b| b.data[ki]),
                    &kernels.data[ki * taps..][..taps],
                    col,
                );
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Option<Tensor>,
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    spec: &ConvSpec,
    grad_output: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, kernels, spec, grad_output, true)
}

pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    kernels: &Tensor,
    spec: &ConvSpec,
    grad_output: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    // bias presence is irrelevant to the gradient shapes except grad_bias
    let nobias = ConvSpec {
        has_bias: false,
        ..*spec
    };
    let g = conv_geometry("conv2d_backward", input, kernels, None, &nobias)?;
    let [gn, gk_, goh, gow] = grad_output.dims4("conv2d_backward")?;
    for (axis, expected, actual) in [
        ("batch", g.n, gn),
        ("channels", g.k, gk_),
        ("height", g.oh, goh),
        ("width", g.ow, gow),
    ] {
        if expected != actual {
            return Err(Error::Shape {
                op: "conv2d_backward",
                axis,
                expected,
                actual,
            });
        }
    }

    let taps = g.taps();
    let rows = g.rows_per_tile();
    let image_in = g.c * g.h * g.w;
    let plane_out = g.oh * g.ow;
    let go = grad_output.data();
    let wt = kernels.data();

    let mut gin = vec![0.0; if want_input { input.len() } else { 0 }];
    let mut gk = vec![0.0; wt.len()];
    let mut col = vec![0.0; taps * rows * g.ow];
    let mut gcol = vec![0.0; if want_input { col.len() } else { 0 }];

    for ni in 0..g.n {
        let src = &input.data[ni * image_in..][..image_in];
        for oy0 in (0..g.oh).step_by(rows) {
            let oy1 = (oy0 + rows).min(g.oh);
            let p = (oy1 - oy0) * g.ow;
            im2col(&g, src, oy0, oy1, &mut col);
            if want_input {
                gcol[..taps * p].fill(0.0);
            }
            for ki in 0..g.k {
                let gs = &go[(ni * g.k + ki) * plane_out + oy0 * g.ow..][..p];
                let wk = &wt[ki * taps..][..taps];
                let gkk = &mut gk[ki * taps..][..taps];
                for r in 0..taps {
                    gkk[r] += dot4(gs, &col[r * p..][..p]);
                    if want_input && wk[r] != 0.0 {
                        axpy_slice(&mut gcol[r * p..][..p], wk[r], gs);
                    }
                }
            }
            if want_input {
                col2im(&g, &gcol, oy0, oy1, &mut gin[ni * image_in..][..image_in]);
            }
        }
    }

    let grad_bias = spec.has_bias.then(|| {
        let mut gb = vec![0.0; g.k];
        for ni in 0..g.n {
            for (ki, b) in gb.iter_mut().enumerate() {
                *b += go[(ni * g.k + ki) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        Tensor {
            shape: vec![g.k],
            data: gb,
        }
    });

    Ok(ConvGrads {
        input: if want_input {
            Tensor {
                shape: input.shape.clone(),
                data: gin,
            }
        } else {
            Tensor::zeros(&[1])
        },
        kernels: Tensor {
            shape: kernels.shape.clone(),
            data: gk,
        },
        bias: grad_bias,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes the gradient where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    input.require_same_shape("relu_backward", grad_output)?;
    Ok(Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&grad_output.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// `(1 / 2N) * sum_i ||pred_i - target_i||^2` with `N` the leading (batch)
/// extent, and its gradient `(pred - target) / N`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    mse_loss_scaled(pred, target, pred.shape()[0] as f64)
}

/// [`mse_loss`] with an explicit divisor in place of the batch size.
pub fn mse_loss_scaled(pred: &Tensor, target: &Tensor, divisor: f64) -> Result<(f64, Tensor)> {
    pred.require_same_shape("mse_loss", target)?;
    if !(divisor > 0.0) {
        return Err(invalid("divisor", "must be positive"));
    }
    let diff: Vec<f64> = pred.data.iter().zip(&target.data).map(|(p, t)| p - t).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let grad = Tensor {
        shape: pred.shape.clone(),
        data: diff.into_iter().map(|d| d / divisor).collect(),
    };
    Ok((sq / (2.0 * divisor), grad))
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = at.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}
