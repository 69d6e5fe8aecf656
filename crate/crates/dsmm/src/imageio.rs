//! Grayscale PNG/PGM reading and 8-bit writing.
//!
//! Pixels are scaled to `[0, 1]`. Colour inputs are reduced to luma with
//! the ITU-R BT.601 weights `0.299 R + 0.587 G + 0.114 B`; alpha is dropped.

use std::path::{Path, PathBuf};

use dsmm_core::Tensor;
use image::{DynamicImage, GrayImage, ImageFormat};

use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;

pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// Image extensions scanned in data directories.
const EXTENSIONS: [&str; 3] = ["png", "pgm", "pnm"];

pub fn to_tensor(img: &DynamicImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect(),
        DynamicImage::ImageLumaA16(g) => g.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0.map(f64::from);
                (BT601[0] * r + BT601[1] * g + BT601[2] * b).clamp(0.0, 1.0)
            })
            .collect(),
    };
    Tensor::image(h, w, data).expect("pixel count matches dimensions")
}

pub fn load_gray(path: &Path) -> CliResult<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::input(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::input(path, e))?
        .decode()
        .map_err(|e| CliError::input(path, e))?;
    Ok(to_tensor(&img))
}

/// Quantize to 8 bits: `round(255 * clamp(v, 0, 1))`.
pub fn to_gray8(image: &Tensor) -> CliResult<GrayImage> {
    let s = image.shape();
    let (h, w) = match s {
        [1, 1, h, w] | [h, w] => (*h, *w),
        _ => {
            return Err(CliError::Config(format!(
                "expected a single-channel image, got shape {s:?}"
            )))
        }
    };
    let raw = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape"))
}

/// Write as PNG, or binary PGM when the extension is `pgm`/`pnm`.
pub fn save_gray(path: &Path, image: &Tensor) -> CliResult<()> {
    let gray = to_gray8(image)?;
    let format = match extension(path).as_deref() {
        Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(gray)
        .write_to(&mut bytes, format)
        .map_err(|e| CliError::output(path, e))?;
    write_atomic(path, bytes.get_ref())
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Image files of `dir` in lexicographic file-name order.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::input(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::input(dir, e))?.path();
        if path.is_file() && extension(&path).is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(CliError::input(dir, "no PNG or PGM images found"));
    }
    Ok(files)
}

/// All images of `dir` with their file stems.
pub fn load_dir(dir: &Path) -> CliResult<Vec<(String, Tensor)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_gray(&p)?))
        })
        .collect()
}
