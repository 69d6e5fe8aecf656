//! Block-wise l1/DCT recovery with ISTA or FISTA.
//!
//! Solves `min_x 1/2 ||Phi x - y||^2 + lambda ||DCT2(x)||_1` per block. The
//! DCT is orthonormal, so the proximal step is transform, shrink, inverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::recon::reshape_concat;
use crate::rng::{self, gaussian_vec, Stream};
use crate::sampling::MeasurementMatrix;
use crate::tensor::Tensor;

/// Step sizes use `LIPSCHITZ_MARGIN * L_est`; the power-iteration estimate
/// approaches the top eigenvalue from below.
pub const LIPSCHITZ_MARGIN: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    /// `x0 = Phi^T y`
    Backprojection,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// FISTA momentum when set, plain ISTA otherwise.
    pub accelerated: bool,
    pub lipschitz_iters: usize,
    pub start: Start,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            max_iters: 500,
            rel_tol: 1e-6,
            accelerated: true,
            lipschitz_iters: 100,
            start: Start::Backprojection,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda", "must be positive"));
        }
        if self.max_iters == 0 || self.lipschitz_iters == 0 {
            return Err(invalid("max_iters", "iteration counts must be positive"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(invalid("rel_tol", "must be positive"));
        }
        Ok(())
    }
}

/// Orthonormal type-II DCT on `B x B` blocks, via the `B x B` basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dct2 {
    size: usize,
    /// `basis[k * B + n] = a_k cos(pi (2n + 1) k / 2B)`
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(size: usize) -> Self {
        assert!(size > 0);
        let b = size as f64;
        let mut basis = vec![0.0; size * size];
        for k in 0..size {
            let a = if k == 0 { libm::sqrt(1.0 / b) } else { libm::sqrt(2.0 / b) };
            for n in 0..size {
                basis[k * size + n] =
                    a * libm::cos(core::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2.0 * b));
            }
        }
        Self { size, basis }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `C X C^T`
    pub fn forward(&self, block: &[f64]) -> Vec<f64> {
        assert_eq!(block.len(), self.size * self.size, "dct2 expects a square block");
        self.sandwich(block, false)
    }

    /// `C^T X C`
    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.size * self.size, "idct2 expects a square block");
        self.sandwich(coeffs, true)
    }

    fn sandwich(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let b = self.size;
        let c = |i: usize, j: usize| {
            if transpose {
                self.basis[j * b + i]
            } else {
                self.basis[i * b + j]
            }
        };
        // rows: t = M x
        let mut t = vec![0.0; b * b];
        for i in 0..b {
            for k in 0..b {
                let m = c(i, k);
                for j in 0..b {
                    t[i * b + j] += m * x[k * b + j];
                }
            }
        }
        // columns: out = t M^T
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                out[i * b + j] = (0..b).map(|k| t[i * b + k] * c(j, k)).sum();
            }
        }
        out
    }
}

pub fn dct2(block: &[f64], size: usize) -> Vec<f64> {
    Dct2::new(size).forward(block)
}

pub fn idct2(coeffs: &[f64], size: usize) -> Vec<f64> {
    Dct2::new(size).inverse(coeffs)
}

/// `sign(v) * max(|v| - t, 0)`
pub fn soft_threshold(v: &[f64], t: f64) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let m = libm::fabs(x) - t;
            if m > 0.0 {
                libm::copysign(m, x)
            } else {
                0.0
            }
        })
        .collect()
}

/// Power-iteration estimate of the largest eigenvalue of `Phi^T Phi`.
pub fn lipschitz(phi: &MeasurementMatrix, iters: usize) -> f64 {
    let mut v = gaussian_vec(&mut rng::named(0, Stream::Power), phi.cols(), 1.0);
    let norm = |u: &[f64]| libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let pv = phi.apply(&v);
        estimate = pv.iter().map(|x| x * x).sum::<f64>();
        let w = phi.apply_transpose(&pv);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    let pv = phi.apply(&v);
    estimate.max(pv.iter().map(|x| x * x).sum::<f64>())
}

/// Reusable per-matrix solver state (DCT basis and step size).
#[derive(Debug, Clone)]
pub struct IstaSolver<'a> {
    phi: &'a MeasurementMatrix,
    dct: Dct2,
    step_lipschitz: f64,
    cfg: SolverConfig,
}

impl<'a> IstaSolver<'a> {
    pub fn new(phi: &'a MeasurementMatrix, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let l = lipschitz(phi, cfg.lipschitz_iters);
        if !(l > 1e-12) {
            return Err(Error::DegenerateOperator);
        }
        Ok(Self {
            phi,
            dct: Dct2::new(phi.block_size()),
            step_lipschitz: LIPSCHITZ_MARGIN * l,
            cfg: cfg.clone(),
        })
    }

    /// Constant used in the `1/L` gradient step.
    pub fn step_lipschitz(&self) -> f64 {
        self.step_lipschitz
    }

    pub fn objective(&self, x: &[f64], y: &[f64]) -> f64 {
        let r: f64 = self
            .phi
            .apply(x)
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let l1: f64 = self.dct.forward(x).iter().map(|c| libm::fabs(*c)).sum();
        0.5 * r + self.cfg.lambda * l1
    }

    fn prox_grad(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        let residual: Vec<f64> = self.phi.apply(z).iter().zip(y).map(|(a, b)| a - b).collect();
        let grad = self.phi.apply_transpose(&residual);
        let inv_l = 1.0 / self.step_lipschitz;
        let u: Vec<f64> = z.iter().zip(&grad).map(|(a, g)| a - inv_l * g).collect();
        let coeffs = soft_threshold(&self.dct.forward(&u), self.cfg.lambda * inv_l);
        self.dct.inverse(&coeffs)
    }

    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.run(y, |_| {})
    }

    /// Like [`Self::solve`] but records the objective of every iterate,
    /// starting with `x0`.
    pub fn solve_traced(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut objectives = Vec::new();
        let x = self.run(y, |x| objectives.push(self.objective(x, y)))?;
        Ok((x, objectives))
    }

    fn run(&self, y: &[f64], mut observe: impl FnMut(&[f64])) -> Result<Vec<f64>> {
        if y.len() != self.phi.rows() {
            return Err(Error::Shape {
                op: "ista_block",
                axis: "measurements",
                expected: self.phi.rows(),
                actual: y.len(),
            });
        }
        let mut x = match self.cfg.start {
            Start::Backprojection => self.phi.apply_transpose(y),
            Start::Zero => vec![0.0; self.phi.cols()],
        };
        observe(&x);
        let mut z = x.clone();
        let mut t = 1.0f64;
        for _ in 0..self.cfg.max_iters {
            let next = self.prox_grad(&z, y);
            observe(&next);
            let diff = libm::sqrt(next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            let size = libm::sqrt(x.iter().map(|a| a * a).sum::<f64>());
            if self.cfg.accelerated {
                let t_next = (1.0 + libm::sqrt(1.0 + 4.0 * t * t)) / 2.0;
                let beta = (t - 1.0) / t_next;
                z = next.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
                t = t_next;
            } else {
                z.clone_from(&next);
            }
            x = next;
            if diff == 0.0 || diff <= self.cfg.rel_tol * size {
                break;
            }
        }
        Ok(x)
    }
}

/// Recover one vectorized block from its measurements.
pub fn ista_block(y: &[f64], phi: &MeasurementMatrix, cfg: &SolverConfig) -> Result<Vec<f64>> {
    IstaSolver::new(phi, cfg)?.solve(y)
}

/// Solve every block of `[N, n_b, h, w]` measurements independently and
/// tile the results into `[N, 1, h*B, w*B]` images.
pub fn reconstruct_image(measurements: &Tensor, phi: &MeasurementMatrix, cfg: &SolverConfig) -> Result<Tensor> {
    let [n, c, h, w] = measurements.dims4("reconstruct_image")?;
    if c != phi.rows() {
        return Err(Error::Shape {
            op: "reconstruct_image",
            axis: "channels",
            expected: phi.rows(),
            actual: c,
        });
    }
    let solver = IstaSolver::new(phi, cfg)?;
    let nb = phi.cols();
    let src = measurements.data();
    let mut feat = Tensor::zeros(&[n, nb, h, w]);
    let mut y = vec![0.0; c];
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                for (k, v) in y.iter_mut().enumerate() {
                    *v = src[((ni * c + k) * h + i) * w + j];
                }
                let x = solver.solve(&y)?;
                let dst = feat.data_mut();
                for (p, v) in x.into_iter().enumerate() {
                    dst[((ni * nb + p) * h + i) * w + j] = v;
                }
            }
        }
    }
    reshape_concat(&feat, phi.block_size())
}
