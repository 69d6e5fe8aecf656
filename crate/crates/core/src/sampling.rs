//! The constrained sampling layer.
//!
//! A measurement matrix has one row per measurement and one column per
//! pixel of a `B x B` block, pixels taken in row-major order. Row `k` is the
//! `k`-th `B x B` kernel of a stride-`B` convolution, so the same buffer
//! serves as the matrix and as the convolution weights.
//!
//! The forward constraint is `F(S(theta))`: `S` zeroes the globally smallest
//! `round((1 - alpha) * rows * cols)` magnitudes, `F` rescales every row to
//! unit L2 norm.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{conv2d_forward, ConvSpec, Tensor};

/// Rows whose post-sparsity energy is below this are left as-is and flagged.
pub const ROW_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Learned,
    Gaussian,
    Imported,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Learned => 0,
            Provenance::Gaussian => 1,
            Provenance::Imported => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Provenance::Learned),
            1 => Some(Provenance::Gaussian),
            2 => Some(Provenance::Imported),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Provenance::Learned => "learned",
            Provenance::Gaussian => "gaussian",
            Provenance::Imported => "imported",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    rows: usize,
    block_size: usize,
    alpha: f64,
    entries: Vec<f64>,
    provenance: Provenance,
}

impl MeasurementMatrix {
    pub fn new(
        block_size: usize,
        rows: usize,
        alpha: f64,
        entries: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if block_size == 0 || rows == 0 {
            return Err(invalid("matrix", "block size and row count must be positive"));
        }
        check_alpha(alpha)?;
        let cols = block_size * block_size;
        if entries.len() != rows * cols {
            return Err(Error::Shape {
                op: "MeasurementMatrix::new",
                axis: "entries",
                expected: rows * cols,
                actual: entries.len(),
            });
        }
        Ok(Self {
            rows,
            block_size,
            alpha,
            entries,
            provenance,
        })
    }

    /// Measurements per block (`n_b`).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Pixels per block (`n_B = B^2`).
    pub fn cols(&self) -> usize {
        self.block_size * self.block_size
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Target sparsity degree: fraction of entries allowed to be nonzero.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let c = self.cols();
        &self.entries[k * c..(k + 1) * c]
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|&&v| v != 0.0).count()
    }

    /// Measured sparsity degree `nnz / (rows * cols)`.
    pub fn sparsity_degree(&self) -> f64 {
        self.nnz() as f64 / self.entries.len() as f64
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|k| libm::sqrt(self.row(k).iter().map(|v| v * v).sum()))
            .collect()
    }

    /// `n_b x n_B` identity-like matrix (ones on the leading diagonal).
    pub fn identity(block_size: usize, rows: usize, provenance: Provenance) -> Result<Self> {
        let cols = block_size * block_size;
        let mut e = vec![0.0; rows * cols];
        for k in 0..rows.min(cols) {
            e[k * cols + k] = 1.0;
        }
        Self::new(block_size, rows, 1.0, e, provenance)
    }

    /// Rows reshaped as stride-`B` convolution kernels `[rows, 1, B, B]`.
    pub fn kernels(&self) -> Tensor {
        Tensor::new(
            &[self.rows, 1, self.block_size, self.block_size],
            self.entries.clone(),
        )
        .expect("entries sized at construction")
    }

    /// `Phi * v` for one row-major vectorized block.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|k| self.row(k).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Phi^T * y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for (k, &yk) in y.iter().enumerate().take(self.rows) {
            for (o, a) in out.iter_mut().zip(self.row(k)) {
                *o += a * yk;
            }
        }
        out
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(invalid("alpha", "sparsity degree must lie in [0, 1]"))
    }
}

/// Number of entries the sparsity constraint zeroes.
pub fn zero_count(alpha: f64, len: usize) -> usize {
    let z = libm::round((1.0 - alpha) * len as f64);
    (z.max(0.0) as usize).min(len)
}

/// Zero the `round((1 - alpha) * len)` smallest magnitudes of `theta`; ties
/// go to the lower flat index. Returns the sparsified values and `mu`, the
/// largest zeroed magnitude (0 when nothing is zeroed).
pub fn sparsity_constraint(theta: &[f64], alpha: f64) -> Result<(Vec<f64>, f64)> {
    check_alpha(alpha)?;
    let z = zero_count(alpha, theta.len());
    let mut s = theta.to_vec();
    if z == 0 {
        return Ok((s, 0.0));
    }
    let mut order: Vec<usize> = (0..theta.len()).collect();
    let by_magnitude = |a: &usize, b: &usize| -> Ordering {
        libm::fabs(theta[*a])
            .total_cmp(&libm::fabs(theta[*b]))
            .then(a.cmp(b))
    };
    let (zeroed, pivot, _) = order.select_nth_unstable_by(z - 1, by_magnitude);
    let mu = libm::fabs(theta[*pivot]);
    s[*pivot] = 0.0;
    for &i in zeroed.iter() {
        s[i] = 0.0;
    }
    Ok((s, mu))
}

/// Scale a row to unit L2 norm. Rows with energy below [`ROW_NORM_EPS`] come
/// back unchanged with the flag set.
pub fn normalize_row(row: &[f64]) -> (Vec<f64>, bool) {
    let omega: f64 = row.iter().map(|v| v * v).sum();
    if omega < ROW_NORM_EPS {
        return (row.to_vec(), true);
    }
    let norm = libm::sqrt(omega);
    (row.iter().map(|v| v / norm).collect(), false)
}

/// Per-coordinate modulation used for the sampling-kernel update:
/// `(sqrt(w) - s_j^2 / sqrt(w)) / sqrt(w)` with `w = sum_i s_i^2`.
///
/// This is the diagonal factor `1 - s_j^2 / w`, not the true Jacobian
/// diagonal `(1 - s_j^2 / w) / sqrt(w)`. Degenerate rows get all ones.
pub fn normalization_derivative(row: &[f64]) -> Vec<f64> {
    let omega: f64 = row.iter().map(|v| v * v).sum();
    if omega < ROW_NORM_EPS {
        return vec![1.0; row.len()];
    }
    let sw = libm::sqrt(omega);
    // rounding can push a lone coordinate a few ulps below zero
    row.iter()
        .map(|s| ((sw - s * s / sw) / sw).clamp(0.0, 1.0))
        .collect()
}

/// `S` then `F` applied to a row-major matrix with `cols` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RowConstraint {
    /// `F(S(theta))`.
    pub entries: Vec<f64>,
    /// `S(theta)` before row normalization.
    pub sparse: Vec<f64>,
    pub mu: f64,
    pub zero_rows: Vec<bool>,
}

pub fn constrain_rows(theta: &[f64], cols: usize, alpha: f64) -> Result<RowConstraint> {
    if cols == 0 || !theta.len().is_multiple_of(cols) {
        return Err(invalid("theta", "length must be a multiple of the column count"));
    }
    let (sparse, mu) = sparsity_constraint(theta, alpha)?;
    let mut entries = Vec::with_capacity(sparse.len());
    let mut zero_rows = Vec::with_capacity(sparse.len() / cols);
    for row in sparse.chunks_exact(cols) {
        let (f, flagged) = normalize_row(row);
        entries.extend_from_slice(&f);
        zero_rows.push(flagged);
    }
    Ok(RowConstraint {
        entries,
        sparse,
        mu,
        zero_rows,
    })
}

/// Result of applying both constraints to a sampling parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Constrained {
    pub matrix: MeasurementMatrix,
    pub sparse: Vec<f64>,
    pub mu: f64,
    pub zero_rows: Vec<bool>,
}

/// `F(S(theta))` for a `rows x B^2` parameter matrix.
pub fn constrain(theta: &[f64], rows: usize, block_size: usize, alpha: f64) -> Result<Constrained> {
    let cols = block_size * block_size;
    if theta.len() != rows * cols {
        return Err(Error::Shape {
            op: "constrain",
            axis: "theta",
            expected: rows * cols,
            actual: theta.len(),
        });
    }
    let rc = constrain_rows(theta, cols, alpha)?;
    Ok(Constrained {
        matrix: MeasurementMatrix::new(block_size, rows, alpha, rc.entries, Provenance::Learned)?,
        sparse: rc.sparse,
        mu: rc.mu,
        zero_rows: rc.zero_rows,
    })
}

/// Unconstrained sampling parameters plus a cache of their constrained view.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingLayerState {
    theta: Vec<f64>,
    rows: usize,
    block_size: usize,
    alpha: f64,
    cached: Option<Constrained>,
}

impl SamplingLayerState {
    pub fn new(theta: Vec<f64>, rows: usize, block_size: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if rows == 0 || block_size == 0 {
            return Err(invalid("sampling layer", "rows and block size must be positive"));
        }
        if theta.len() != rows * block_size * block_size {
            return Err(Error::Shape {
                op: "SamplingLayerState::new",
                axis: "theta",
                expected: rows * block_size * block_size,
                actual: theta.len(),
            });
        }
        Ok(Self {
            theta,
            rows,
            block_size,
            alpha,
            cached: None,
        })
    }

    /// Kernels drawn i.i.d. from `N(0, 1 / B^2)`.
    pub fn random(rows: usize, block_size: usize, alpha: f64, seed: u64) -> Result<Self> {
        let cols = block_size * block_size;
        let mut rng = rng::named(seed, Stream::Init);
        let std = 1.0 / libm::sqrt(cols as f64);
        let theta = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                std * v
            })
            .collect();
        Self::new(theta, rows, block_size, alpha)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable access to the unconstrained parameters; drops the cache.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.cached = None;
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Shape {
                op: "set_theta",
                axis: "theta",
                expected: self.theta.len(),
                actual: theta.len(),
            });
        }
        self.theta = theta;
        self.cached = None;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Cached `F(S(theta))`, recomputed when the parameters changed.
    pub fn constrained(&mut self) -> &Constrained {
        if self.cached.is_none() {
            let c = constrain(&self.theta, self.rows, self.block_size, self.alpha)
                .expect("state validated at construction");
            self.cached = Some(c);
        }
        self.cached.as_ref().unwrap()
    }

    pub fn constrained_matrix(&mut self) -> &MeasurementMatrix {
        &self.constrained().matrix
    }

    pub fn cached(&self) -> Option<&Constrained> {
        self.cached.as_ref()
    }

    /// Rows whose sparsified energy underflowed on the last constraint pass.
    pub fn zero_row_flags(&self) -> Option<&[bool]> {
        self.cached.as_ref().map(|c| &c.zero_rows[..])
    }
}

/// `n_b = floor(ratio * B^2)`.
pub fn measurement_dim(sampling_ratio: f64, block_size: usize) -> Result<usize> {
    if !(sampling_ratio > 0.0 && sampling_ratio <= 1.0) {
        return Err(invalid("sampling_ratio", "must lie in (0, 1]"));
    }
    if block_size == 0 {
        return Err(invalid("block_size", "must be positive"));
    }
    let exact = sampling_ratio * (block_size * block_size) as f64;
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    let n = libm::floor(exact + 1e-9) as usize;
    if n == 0 {
        return Err(Error::RatioTooSmall {
            ratio: sampling_ratio,
            block_size,
        });
    }
    Ok(n)
}

/// Block measurements of `[N, 1, H, W]` images: output `[N, n_b, H/B, W/B]`
/// holds `Phi * vec(block)` per block, plus `N(0, sigma^2)` noise when
/// `noise_sigma > 0`.
pub fn sample_image(
    image: &Tensor,
    phi: &MeasurementMatrix,
    noise_sigma: f64,
    seed: u64,
) -> Result<Tensor> {
    let [_, c, h, w] = image.dims4("sample_image")?;
    if c != 1 {
        return Err(Error::Shape {
            op: "sample_image",
            axis: "channels",
            expected: 1,
            actual: c,
        });
    }
    let b = phi.block_size();
    if h % b != 0 {
        return Err(Error::NotBlockMultiple {
            axis: "height",
            size: h,
            multiple: b,
        });
    }
    if w % b != 0 {
        return Err(Error::NotBlockMultiple {
            axis: "width",
            size: w,
            multiple: b,
        });
    }
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise_sigma", "must be non-negative"));
    }
    let mut y = conv2d_forward(image, &phi.kernels(), None, &ConvSpec::block(b, phi.rows()))?;
    if noise_sigma > 0.0 {
        let mut rng = rng::named(seed, Stream::Noise);
        for v in y.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sigma * e;
        }
    }
    Ok(y)
}
