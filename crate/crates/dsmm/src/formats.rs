//! Binary and text containers for matrices, checkpoints and measurements.
//!
//! All binary integers and floats are little-endian.
//!
//! `DSMM1` measurement matrix:
//!
//! | field        | type                     |
//! |--------------|--------------------------|
//! | magic        | `b"DSMM"`                |
//! | version      | u32 = 1                  |
//! | n_b          | u32 (rows)               |
//! | n_B          | u32 (columns, `B*B`)     |
//! | block size   | u32                      |
//! | alpha        | f64                      |
//! | provenance   | u8: 0 learned, 1 gaussian, 2 imported |
//! | entries      | `n_b * n_B` f64, row-major |
//!
//! Sparse text: a header line `n_b n_B B alpha nnz`, then one
//! `row col value` line per nonzero entry (0-indexed, row-major order),
//! values written with 17 significant digits.
//!
//! `DSMN1` checkpoint:
//!
//! | field        | type                                  |
//! |--------------|---------------------------------------|
//! | magic        | `b"DSMN"`                             |
//! | version      | u32 = 1                               |
//! | n_b          | u32                                   |
//! | block size   | u32                                   |
//! | alpha        | f64                                   |
//! | residual     | u8 (0 or 1)                           |
//! | epoch        | u32, epochs completed                 |
//! | theta        | `n_b * B*B` f64, unconstrained, row-major |
//! | tensor count | u32 = 8                               |
//! | per tensor   | u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f64 data |
//!
//! Tensors appear in the order `init.weight`, `init.bias`, `conv1.weight`,
//! `conv1.bias`, `conv2.weight`, `conv2.bias`, `conv3.weight`, `conv3.bias`.
//!
//! Measurements text: a header line `n_b blocks_y blocks_x height width`
//! (the last two are the image size before padding), then
//! `n_b * blocks_y * blocks_x` values in channel, row, column order.

use std::fmt::Write as _;
use std::path::Path;

use dsmm_core::recon::ReconstructionParams;
use dsmm_core::{MeasurementMatrix, Provenance, SamplingLayerState, Tensor};

use crate::error::{CliError, CliResult};

pub const MATRIX_MAGIC: &[u8; 4] = b"DSMM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSMN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated file at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("line {line}: {message}")]
    Text { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    pub fn at(self, path: &Path) -> CliError {
        CliError::format(path, self)
    }
}

type FResult<T> = Result<T, FormatError>;

fn invalid(e: impl ToString) -> FormatError {
    FormatError::Invalid(e.to_string())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> FResult<()> {
    let v = u32::try_from(v).map_err(|_| invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        let rest = self.bytes.len() - self.offset;
        if rest < n {
            return Err(FormatError::Truncated {
                offset: self.bytes.len(),
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &'static [u8; 4]) -> FResult<()> {
        let expected = std::str::from_utf8(magic).expect("ascii magic");
        match self.take(4) {
            Ok(m) if m == magic => {}
            _ => return Err(FormatError::BadMagic { expected }),
        }
        let version = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if version == VERSION {
            Ok(())
        } else {
            Err(FormatError::BadVersion(version))
        }
    }

    fn u8(&mut self) -> FResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> FResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> FResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> FResult<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| invalid("entry count overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> FResult<()> {
        if self.offset == self.bytes.len() {
            Ok(())
        } else {
            Err(invalid(format!("{} trailing bytes at offset {}", self.bytes.len() - self.offset, self.offset)))
        }
    }
}

pub fn encode_matrix(m: &MeasurementMatrix) -> FResult<Vec<u8>> {
    let mut out = Vec::with_capacity(29 + 8 * m.entries().len());
    out.extend_from_slice(MATRIX_MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, m.rows())?;
    put_u32(&mut out, m.cols())?;
    put_u32(&mut out, m.block_size())?;
    out.extend_from_slice(&m.alpha().to_le_bytes());
    out.push(m.provenance().code());
    put_f64s(&mut out, m.entries());
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> FResult<MeasurementMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(MATRIX_MAGIC)?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let b = r.u32()?;
    let alpha = r.f64()?;
    let prov = r.u8()?;
    let provenance = Provenance::from_code(prov).ok_or_else(|| invalid(format!("unknown provenance code {prov}")))?;
    if b.checked_mul(b) != Some(cols) {
        return Err(invalid(format!("n_B = {cols} is not block_size^2 for B = {b}")));
    }
    let entries = r.f64s(rows.checked_mul(cols).ok_or_else(|| invalid("matrix too large"))?)?;
    r.finish()?;
    MeasurementMatrix::new(b, rows, alpha, entries, provenance).map_err(invalid)
}

/// Scientific notation with 17 significant digits; parses back exactly.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn encode_sparse_text(m: &MeasurementMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {} {}",
        m.rows(),
        m.cols(),
        m.block_size(),
        fmt17(m.alpha()),
        m.nnz()
    );
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            if v != 0.0 {
                let _ = writeln!(out, "{r} {c} {}", fmt17(v));
            }
        }
    }
    out
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> FResult<T> {
    tok.ok_or_else(|| FormatError::Text {
        line,
        message: format!("missing {what}"),
    })?
    .parse()
    .map_err(|_| FormatError::Text {
        line,
        message: format!("bad {what}"),
    })
}

/// Sparse text back to a dense matrix with provenance `imported`.
pub fn decode_sparse_text(text: &str) -> FResult<MeasurementMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| invalid("empty file"))?;
    let mut h = header.split_whitespace();
    let rows: usize = parse(h.next(), 1, "n_b")?;
    let cols: usize = parse(h.next(), 1, "n_B")?;
    let b: usize = parse(h.next(), 1, "block size")?;
    let alpha: f64 = parse(h.next(), 1, "alpha")?;
    let nnz: usize = parse(h.next(), 1, "nnz")?;
    if b.checked_mul(b) != Some(cols) {
        return Err(invalid(format!("n_B = {cols} is not block_size^2 for B = {b}")));
    }
    let mut entries = vec![0.0; rows.checked_mul(cols).ok_or_else(|| invalid("matrix too large"))?];
    let mut last: Option<usize> = None;
    let mut count = 0;
    for (i, l) in lines {
        let line = i + 1;
        let mut t = l.split_whitespace();
        let r: usize = parse(t.next(), line, "row")?;
        let c: usize = parse(t.next(), line, "col")?;
        let v: f64 = parse(t.next(), line, "value")?;
        if t.next().is_some() {
            return Err(FormatError::Text {
                line,
                message: "expected exactly three fields".into(),
            });
        }
        if r >= rows || c >= cols {
            return Err(FormatError::Text {
                line,
                message: format!("index ({r}, {c}) outside {rows} x {cols}"),
            });
        }
        let flat = r * cols + c;
        if last.is_some_and(|p| flat <= p) {
            return Err(FormatError::Text {
                line,
                message: "triples must be unique and sorted row-major".into(),
            });
        }
        last = Some(flat);
        entries[flat] = v;
        count += 1;
    }
    if count != nnz {
        return Err(invalid(format!("header declares {nnz} entries, found {count}")));
    }
    MeasurementMatrix::new(b, rows, alpha, entries, Provenance::Imported).map_err(invalid)
}

/// Training state saved between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub sampling: SamplingLayerState,
    pub recon: ReconstructionParams,
    pub epoch: usize,
}

impl Checkpoint {
    /// The constrained matrix `F(S(theta))`, labelled as learned.
    pub fn matrix(&self) -> MeasurementMatrix {
        let mut s = self.sampling.clone();
        s.constrained_matrix().clone().with_provenance(Provenance::Learned)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> FResult<Vec<u8>> {
    let s = &ck.sampling;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, s.rows())?;
    put_u32(&mut out, s.block_size())?;
    out.extend_from_slice(&s.alpha().to_le_bytes());
    out.push(u8::from(ck.recon.residual));
    put_u32(&mut out, ck.epoch)?;
    put_f64s(&mut out, s.theta());
    put_u32(&mut out, 8)?;
    for (name, t) in ReconstructionParams::TENSOR_NAMES.iter().zip(ck.recon.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        put_f64s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> FResult<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let rows = r.u32()?;
    let b = r.u32()?;
    let alpha = r.f64()?;
    let residual = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(invalid(format!("residual flag must be 0 or 1, got {v}"))),
    };
    let epoch = r.u32()?;
    let cols = b.checked_mul(b).ok_or_else(|| invalid("block size too large"))?;
    let theta = r.f64s(rows.checked_mul(cols).ok_or_else(|| invalid("matrix too large"))?)?;
    let count = r.u32()?;
    if count != 8 {
        return Err(invalid(format!("expected 8 tensors, found {count}")));
    }
    let mut tensors = Vec::with_capacity(8);
    for want in ReconstructionParams::TENSOR_NAMES {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| invalid("tensor name is not UTF-8"))?;
        if name != want {
            return Err(invalid(format!("expected tensor {want:?}, found {name:?}")));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<FResult<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| invalid("tensor too large"))?;
        let data = r.f64s(n)?;
        tensors.push(Tensor::new(&dims, data).map_err(invalid)?);
    }
    r.finish()?;
    let sampling = SamplingLayerState::new(theta, rows, b, alpha).map_err(invalid)?;
    let recon = ReconstructionParams::from_tensors(b, rows, residual, tensors).map_err(invalid)?;
    Ok(Checkpoint {
        sampling,
        recon,
        epoch,
    })
}

/// Block measurements together with the unpadded image size.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    /// `[1, n_b, blocks_y, blocks_x]`.
    pub values: Tensor,
    pub height: usize,
    pub width: usize,
}

pub fn encode_measurements(m: &Measurements) -> CliResult<String> {
    let [_, c, h, w] = m.values.dims4("measurements")?;
    let mut out = format!("{c} {h} {w} {} {}\n", m.height, m.width);
    for v in m.values.data() {
        let _ = writeln!(out, "{}", fmt17(*v));
    }
    Ok(out)
}

pub fn decode_measurements(text: &str) -> FResult<Measurements> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| invalid("empty file"))?;
    let mut h = header.split_whitespace();
    let c: usize = parse(h.next(), 1, "n_b")?;
    let by: usize = parse(h.next(), 1, "blocks_y")?;
    let bx: usize = parse(h.next(), 1, "blocks_x")?;
    let height: usize = parse(h.next(), 1, "height")?;
    let width: usize = parse(h.next(), 1, "width")?;
    let values = lines
        .map(|(i, l)| parse::<f64>(Some(l.trim()), i + 1, "value"))
        .collect::<FResult<Vec<_>>>()?;
    let values = Tensor::new(&[1, c, by, bx], values).map_err(invalid)?;
    Ok(Measurements {
        values,
        height,
        width,
    })
}

/// What a matrix argument on the command line resolved to.
#[derive(Debug, Clone)]
pub enum MatrixSource {
    Matrix(MeasurementMatrix),
    Checkpoint(Checkpoint),
}

impl MatrixSource {
    pub fn matrix(&self) -> MeasurementMatrix {
        match self {
            MatrixSource::Matrix(m) => m.clone(),
            MatrixSource::Checkpoint(c) => c.matrix(),
        }
    }

    pub fn recon(&self) -> Option<&ReconstructionParams> {
        match self {
            MatrixSource::Matrix(_) => None,
            MatrixSource::Checkpoint(c) => Some(&c.recon),
        }
    }
}

/// Read a DSMM1 matrix, a DSMN1 checkpoint or sparse text, by content.
pub fn read_matrix_source(path: &Path) -> CliResult<MatrixSource> {
    let bytes = crate::fsutil::read(path)?;
    if bytes.starts_with(MATRIX_MAGIC) {
        decode_matrix(&bytes).map(MatrixSource::Matrix).map_err(|e| e.at(path))
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        decode_checkpoint(&bytes).map(MatrixSource::Checkpoint).map_err(|e| e.at(path))
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| {
            FormatError::BadMagic {
                expected: "DSMM",
            }
            .at(path)
        })?;
        let first = text.split_whitespace().next().unwrap_or("");
        if first.parse::<usize>().is_err() {
            return Err(FormatError::BadMagic { expected: "DSMM" }.at(path));
        }
        decode_sparse_text(text).map(MatrixSource::Matrix).map_err(|e| e.at(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsmm_core::sampling::constrain;

    fn sample_matrix() -> MeasurementMatrix {
        let st = SamplingLayerState::random(5, 4, 0.5, 7).unwrap();
        constrain(st.theta(), 5, 4, 0.5)
            .unwrap()
            .matrix
            .with_provenance(Provenance::Learned)
    }

    #[test]
    fn matrix_binary_round_trip_is_bitwise() {
        let m = sample_matrix();
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(bytes.len(), 29 + 8 * 5 * 16);
        assert_eq!(&bytes[..4], b"DSMM");
        let back = decode_matrix(&bytes).unwrap();
        assert_eq!(back.provenance(), Provenance::Learned);
        for (a, b) in m.entries().iter().zip(back.entries()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, m);
    }

    #[test]
    fn matrix_header_errors() {
        let m = sample_matrix();
        let mut bytes = encode_matrix(&m).unwrap();
        let len = bytes.len();
        assert_eq!(
            decode_matrix(&bytes[..len - 3]).unwrap_err(),
            FormatError::Truncated {
                offset: len - 3,
                needed: 3
            }
        );
        bytes[4] = 2;
        assert_eq!(decode_matrix(&bytes).unwrap_err(), FormatError::BadVersion(2));
        bytes[0] = b'X';
        assert!(decode_matrix(&bytes).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn sparse_text_lists_nnz_triples_and_round_trips() {
        let m = sample_matrix();
        let text = encode_sparse_text(&m);
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(header[..3], ["5", "16", "4"]);
        assert_eq!(header[4].parse::<usize>().unwrap(), m.nnz());
        assert_eq!(lines.count(), m.nnz());
        assert_eq!(m.nnz(), 40);
        let back = decode_sparse_text(&text).unwrap();
        assert_eq!(back.entries(), m.entries());
        assert_eq!(back.alpha(), m.alpha());
        assert_eq!(back.provenance(), Provenance::Imported);
    }

    #[test]
    fn sparse_text_rejects_disorder_and_count_mismatch() {
        let bad = "1 4 2 1.0 2\n0 1 1.0\n0 0 2.0\n";
        assert!(matches!(decode_sparse_text(bad), Err(FormatError::Text { line: 3, .. })));
        let short = "1 4 2 1.0 3\n0 1 1.0\n";
        assert!(decode_sparse_text(short).is_err());
        let outside = "1 4 2 1.0 1\n0 4 1.0\n";
        assert!(decode_sparse_text(outside).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let sampling = SamplingLayerState::random(3, 4, 0.25, 9).unwrap();
        let mut recon = ReconstructionParams::random(4, 3, 5, 9);
        recon.residual = false;
        let ck = Checkpoint {
            sampling,
            recon,
            epoch: 12,
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        assert_eq!(back.matrix().provenance(), Provenance::Learned);
    }

    #[test]
    fn measurements_round_trip() {
        let m = Measurements {
            values: Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64).sin() / 3.0),
            height: 15,
            width: 16,
        };
        let back = decode_measurements(&encode_measurements(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
