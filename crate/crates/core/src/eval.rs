//! Gaussian baselines, block padding and the matrix comparison grid.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::recon::{reconstruct, ReconstructionParams};
use crate::rng::{self, gaussian_vec, Stream};
use crate::sampling::{measurement_dim, normalize_row, sample_image, MeasurementMatrix, Provenance};
use crate::solver::{reconstruct_image, SolverConfig};
use crate::tensor::Tensor;

/// I.i.d. `N(0, 1)` entries, each row then scaled to unit L2 norm.
pub fn generate_grm(block_size: usize, rows: usize, seed: u64) -> Result<MeasurementMatrix> {
    let cols = block_size * block_size;
    let raw = gaussian_vec(&mut rng::named(seed, Stream::Grm), rows * cols, 1.0);
    let mut entries = Vec::with_capacity(raw.len());
    for row in raw.chunks_exact(cols.max(1)) {
        entries.extend(normalize_row(row).0);
    }
    MeasurementMatrix::new(block_size, rows, 1.0, entries, Provenance::Gaussian)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Repeat the last row and column up to the next multiple of `B`.
    Replicate,
    /// Drop the trailing partial blocks.
    Crop,
}

/// Make both image dimensions multiples of `block_size`. Returns the
/// adjusted image and the original `(height, width)`.
pub fn blockify(image: &Tensor, block_size: usize, mode: PadMode) -> Result<(Tensor, (usize, usize))> {
    let [n, c, h, w] = image.dims4("blockify")?;
    let b = block_size;
    let (nh, nw) = match mode {
        PadMode::Replicate => (h.div_ceil(b) * b, w.div_ceil(b) * b),
        PadMode::Crop => {
            if h < b || w < b {
                return Err(Error::ImageTooSmall {
                    height: h,
                    width: w,
                    min: b,
                });
            }
            (h / b * b, w / b * b)
        }
    };
    if (nh, nw) == (h, w) {
        return Ok((image.clone(), (h, w)));
    }
    let src = image.data();
    let out = Tensor::from_fn(&[n, c, nh, nw], |i| {
        let x = (i % nw).min(w - 1);
        let y = (i / nw % nh).min(h - 1);
        let plane = i / (nh * nw);
        src[(plane * h + y) * w + x]
    });
    Ok((out, (h, w)))
}

/// Crop back to the original dimensions recorded by [`blockify`].
pub fn unblockify(image: &Tensor, original: (usize, usize)) -> Result<Tensor> {
    let [n, c, h, w] = image.dims4("unblockify")?;
    let (oh, ow) = original;
    if oh > h || ow > w || oh == 0 || ow == 0 {
        return Err(Error::Shape {
            op: "unblockify",
            axis: if oh > h { "height" } else { "width" },
            expected: oh.max(ow),
            actual: if oh > h { h } else { w },
        });
    }
    let src = image.data();
    Ok(Tensor::from_fn(&[n, c, oh, ow], |i| {
        let x = i % ow;
        let y = i / ow % oh;
        let plane = i / (oh * ow);
        src[(plane * h + y) * w + x]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reconstructor {
    Ista,
    Learned,
}

impl Reconstructor {
    pub fn label(self) -> &'static str {
        match self {
            Reconstructor::Ista => "ista",
            Reconstructor::Learned => "learned",
        }
    }
}

/// A matrix under evaluation, optionally with the reconstruction network it
/// was trained with.
#[derive(Debug, Clone)]
pub struct MatrixEntry {
    pub label: String,
    pub matrix: MeasurementMatrix,
    pub learned: Option<ReconstructionParams>,
}

#[derive(Debug, Clone)]
pub struct EvalImage {
    pub name: String,
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub solver: SolverConfig,
    pub pad_mode: PadMode,
    /// Keep reconstructed images in the report rows.
    pub keep_images: bool,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            pad_mode: PadMode::Replicate,
            keep_images: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub image: String,
    pub matrix: String,
    pub provenance: Provenance,
    pub ratio: f64,
    pub reconstructor: Reconstructor,
    pub psnr_db: f64,
    pub ssim: f64,
    pub reconstruction: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub matrix: String,
    pub provenance: Provenance,
    pub ratio: f64,
    pub reconstructor: Reconstructor,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub images: usize,
}

/// Mean of a non-Gaussian matrix minus the mean of the Gaussian baseline(s)
/// at the same ratio and reconstructor.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub matrix: String,
    pub ratio: f64,
    pub reconstructor: Reconstructor,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub rows: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub gains: Vec<GainRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Difference that treats two equal values (including two `+inf`) as zero.
fn gain(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

/// Pair each matrix with the ratio its row count corresponds to.
pub fn match_ratios(matrices: &[MatrixEntry], ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.is_empty() {
        return Err(crate::error::invalid("ratios", "at least one sampling ratio is required"));
    }
    matrices
        .iter()
        .map(|m| {
            let b = m.matrix.block_size();
            for &r in ratios {
                if measurement_dim(r, b)? == m.matrix.rows() {
                    return Ok(r);
                }
            }
            Err(Error::GeometryMismatch {
                ratio: ratios[0],
                block_size: b,
                expected: measurement_dim(ratios[0], b)?,
                actual: m.matrix.rows(),
            })
        })
        .collect()
}

/// Fail early when the learned reconstructor is requested but no matrix
/// carries trained parameters.
pub fn check_reconstructors(matrices: &[MatrixEntry], reconstructors: &[Reconstructor]) -> Result<()> {
    if reconstructors.contains(&Reconstructor::Learned) && matrices.iter().all(|m| m.learned.is_none()) {
        return Err(Error::MissingReconstructor {
            matrix: matrices.first().map(|m| m.label.clone()).unwrap_or_default(),
        });
    }
    Ok(())
}

/// Score one image against every matrix (paired with `ratios[i]`, see
/// [`match_ratios`]) and reconstructor. Learned cells are produced only for
/// matrices that carry trained parameters.
pub fn evaluate_image(
    img: &EvalImage,
    matrices: &[MatrixEntry],
    ratios: &[f64],
    reconstructors: &[Reconstructor],
    cfg: &ComparisonConfig,
) -> Result<Vec<CellResult>> {
    let mut rows = Vec::new();
    for (entry, &ratio) in matrices.iter().zip(ratios) {
        let phi = &entry.matrix;
        let (padded, dims) = blockify(&img.image, phi.block_size(), cfg.pad_mode)?;
        let reference = unblockify(&padded, dims)?;
        let y = sample_image(&padded, phi, 0.0, 0)?;
        for &rec in reconstructors {
            let out = match (rec, &entry.learned) {
                (Reconstructor::Ista, _) => reconstruct_image(&y, phi, &cfg.solver)?,
                (Reconstructor::Learned, Some(params)) => reconstruct(&y, params)?,
                (Reconstructor::Learned, None) => continue,
            };
            let out = unblockify(&out, dims)?;
            rows.push(CellResult {
                image: img.name.clone(),
                matrix: entry.label.clone(),
                provenance: phi.provenance(),
                ratio,
                reconstructor: rec,
                psnr_db: psnr(&out, &reference)?,
                ssim: ssim(&out, &reference)?,
                reconstruction: cfg.keep_images.then_some(out),
            });
        }
    }
    Ok(rows)
}

/// Means per (matrix, ratio, reconstructor) and gains of every
/// non-Gaussian matrix over the Gaussian mean at the same cell.
pub fn summarize(
    rows: &[CellResult],
    matrices: &[MatrixEntry],
    ratios: &[f64],
    reconstructors: &[Reconstructor],
) -> (Vec<SummaryRow>, Vec<GainRow>) {
    let mut summary = Vec::new();
    for (entry, &ratio) in matrices.iter().zip(ratios) {
        for &rec in reconstructors {
            let cells: Vec<&CellResult> = rows
                .iter()
                .filter(|r| r.matrix == entry.label && r.ratio == ratio && r.reconstructor == rec)
                .collect();
            if cells.is_empty() {
                continue;
            }
            summary.push(SummaryRow {
                matrix: entry.label.clone(),
                provenance: entry.matrix.provenance(),
                ratio,
                reconstructor: rec,
                mean_psnr_db: mean(cells.iter().map(|c| c.psnr_db)),
                mean_ssim: mean(cells.iter().map(|c| c.ssim)),
                images: cells.len(),
            });
        }
    }

    let mut gains = Vec::new();
    for s in summary.iter().filter(|s| s.provenance != Provenance::Gaussian) {
        let base: Vec<&SummaryRow> = summary
            .iter()
            .filter(|b| {
                b.provenance == Provenance::Gaussian && b.ratio == s.ratio && b.reconstructor == s.reconstructor
            })
            .collect();
        if base.is_empty() {
            continue;
        }
        gains.push(GainRow {
            matrix: s.matrix.clone(),
            ratio: s.ratio,
            reconstructor: s.reconstructor,
            psnr_db: gain(s.mean_psnr_db, mean(base.iter().map(|b| b.mean_psnr_db))),
            ssim: gain(s.mean_ssim, mean(base.iter().map(|b| b.mean_ssim))),
        });
    }
    (summary, gains)
}

/// Score every (image, matrix, reconstructor) cell, then summarize. Rows
/// come out in image, matrix, reconstructor order.
pub fn run_comparison(
    images: &[EvalImage],
    matrices: &[MatrixEntry],
    ratios: &[f64],
    reconstructors: &[Reconstructor],
    cfg: &ComparisonConfig,
) -> Result<ComparisonReport> {
    let paired = match_ratios(matrices, ratios)?;
    check_reconstructors(matrices, reconstructors)?;
    let mut rows = Vec::new();
    for img in images {
        rows.extend(evaluate_image(img, matrices, &paired, reconstructors, cfg)?);
    }
    let (summary, gains) = summarize(&rows, matrices, &paired, reconstructors);
    Ok(ComparisonReport { rows, summary, gains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn grm_rows_are_unit_and_seeded() {
        let a = generate_grm(32, 102, 3).unwrap();
        assert_eq!(a.nnz(), 104_448);
        assert!(a.row_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
        assert_eq!(a, generate_grm(32, 102, 3).unwrap());
        assert_ne!(a, generate_grm(32, 102, 4).unwrap());
        assert_eq!(a.provenance(), Provenance::Gaussian);
    }

    #[test]
    fn blockify_modes() {
        let img = Tensor::from_fn(&[1, 1, 96, 96], |i| i as f64);
        let (p, dims) = blockify(&img, 32, PadMode::Replicate).unwrap();
        assert_eq!(p, img);
        assert_eq!(dims, (96, 96));

        let img = Tensor::from_fn(&[1, 1, 33, 33], |i| i as f64);
        let (p, dims) = blockify(&img, 32, PadMode::Replicate).unwrap();
        assert_eq!(p.shape(), &[1, 1, 64, 64]);
        let d = p.data();
        assert_eq!(d[40 * 64 + 10], img.data()[32 * 33 + 10]);
        assert_eq!(d[5 * 64 + 63], img.data()[5 * 33 + 32]);
        assert_eq!(unblockify(&p, dims).unwrap(), img);

        let (c, _) = blockify(&img, 32, PadMode::Crop).unwrap();
        assert_eq!(c.shape(), &[1, 1, 32, 32]);
        assert!(blockify(&Tensor::zeros(&[1, 1, 20, 40]), 32, PadMode::Crop).is_err());
    }

    fn identity_entry(label: &str, prov: Provenance) -> MatrixEntry {
        let phi = MeasurementMatrix::identity(4, 16, prov).unwrap();
        let mut p = ReconstructionParams::zeros(4, 16, 2);
        for k in 0..16 {
            p.init.weight.data_mut()[k * 16 + k] = 1.0;
        }
        MatrixEntry {
            label: label.to_string(),
            matrix: phi,
            learned: Some(p),
        }
    }

    fn images() -> Vec<EvalImage> {
        (0..2)
            .map(|s| EvalImage {
                name: alloc::format!("img{s}"),
                image: Tensor::from_fn(&[1, 1, 14, 13], move |i| ((i * 7 + s) % 11) as f64 / 10.0),
            })
            .collect()
    }

    #[test]
    fn perfect_reconstruction_gives_infinite_psnr_and_zero_gain() {
        let m = [
            identity_entry("dsmm", Provenance::Learned),
            identity_entry("grm", Provenance::Gaussian),
        ];
        let r = run_comparison(&images(), &m, &[1.0], &[Reconstructor::Learned], &ComparisonConfig::default())
            .unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|c| c.psnr_db == f64::INFINITY && (c.ssim - 1.0).abs() < 1e-12));
        assert_eq!(r.gains.len(), 1);
        assert_eq!(r.gains[0].psnr_db, 0.0);
        assert!(r.gains[0].ssim.abs() < 1e-12);
    }

    #[test]
    fn duplicate_image_gives_identical_rows_and_means_recompute() {
        let mut imgs = images();
        imgs.push(imgs[0].clone());
        let m = [MatrixEntry {
            label: "grm".to_string(),
            matrix: generate_grm(4, 8, 1).unwrap(),
            learned: None,
        }];
        let r = run_comparison(&imgs, &m, &[0.5], &[Reconstructor::Ista], &ComparisonConfig::default()).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0].psnr_db.to_bits(), r.rows[2].psnr_db.to_bits());
        assert_eq!(r.rows[0].ssim.to_bits(), r.rows[2].ssim.to_bits());
        let mean_psnr = r.rows.iter().map(|c| c.psnr_db).sum::<f64>() / 3.0;
        assert!((r.summary[0].mean_psnr_db - mean_psnr).abs() < 1e-12);
        assert!(r.gains.is_empty());
    }

    #[test]
    fn geometry_and_reconstructor_errors() {
        let m = [MatrixEntry {
            label: "grm".to_string(),
            matrix: generate_grm(32, 100, 1).unwrap(),
            learned: None,
        }];
        let err = run_comparison(&images(), &m, &[0.1], &[Reconstructor::Ista], &ComparisonConfig::default())
            .unwrap_err();
        assert_eq!(
            err,
            Error::GeometryMismatch {
                ratio: 0.1,
                block_size: 32,
                expected: 102,
                actual: 100
            }
        );
        let m = [MatrixEntry {
            label: "grm".to_string(),
            matrix: generate_grm(4, 8, 1).unwrap(),
            learned: None,
        }];
        let err = run_comparison(&images(), &m, &[0.5], &[Reconstructor::Learned], &ComparisonConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingReconstructor { .. }));
        let ok = match_ratios(
            &[MatrixEntry {
                label: "x".to_string(),
                matrix: generate_grm(32, 102, 1).unwrap(),
                learned: None,
            }],
            &[0.1],
        )
        .unwrap();
        assert_eq!(ok, vec![0.1]);
    }
}
