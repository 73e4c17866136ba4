//! `CCVM1` matrix container and the classifier model file built on it.
//!
//! Matrix frame layout: the 5-byte magic `CCVM1`, little-endian `u32` rows,
//! little-endian `u32` cols, then `rows * cols` little-endian `f64` values in
//! row-major order.
//!
//! A model file is three consecutive frames: a labels frame, the `K x D`
//! weight frame, and a `K x 1` bias frame. The labels frame reuses the matrix
//! header with `rows = K` and `cols = 0`, followed by `K + 1` length-prefixed
//! (`u32` LE) UTF-8 strings: the feature backend name, then each label.

use nalgebra::DMatrix;
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"CCVM1";
const HEADER_LEN: usize = 5 + 4 + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic, not a CCVM1 container")]
    BadMagic,
    #[error("truncated container: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after container")]
    TrailingBytes(usize),
    #[error("label is not valid UTF-8")]
    BadLabel,
    #[error("inconsistent model frames: {0}")]
    Inconsistent(String),
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * 8);
    write_matrix(&mut out, m);
    out
}

fn write_header(out: &mut Vec<u8>, rows: usize, cols: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
}

fn write_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    write_header(out, m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let needed = self.pos + n;
        if needed > self.buf.len() {
            return Err(ContainerError::Truncated {
                needed,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn header(&mut self) -> Result<(usize, usize), ContainerError> {
        if self.take(5)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        Ok((self.u32()? as usize, self.u32()? as usize))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>, ContainerError> {
        let (rows, cols) = self.header()?;
        let body = self.take(rows * cols * 8)?;
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }

    fn string(&mut self) -> Result<String, ContainerError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ContainerError::BadLabel)
    }

    fn finish(&self) -> Result<(), ContainerError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(ContainerError::TrailingBytes(n)),
        }
    }
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DMatrix<f64>, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let m = r.matrix()?;
    r.finish()?;
    Ok(m)
}

/// Raw contents of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFrames {
    pub backend: String,
    pub labels: Vec<String>,
    pub weights: DMatrix<f64>,
    pub biases: Vec<f64>,
}

pub fn encode_model(frames: &ModelFrames) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, frames.labels.len(), 0);
    for s in std::iter::once(&frames.backend).chain(&frames.labels) {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    write_matrix(&mut out, &frames.weights);
    write_matrix(
        &mut out,
        &DMatrix::from_column_slice(frames.biases.len(), 1, &frames.biases),
    );
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFrames, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (k, cols) = r.header()?;
    if cols != 0 {
        return Err(ContainerError::Inconsistent(format!(
            "labels frame must have 0 columns, found {cols}"
        )));
    }
    let backend = r.string()?;
    let labels = (0..k).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let weights = r.matrix()?;
    let b = r.matrix()?;
    r.finish()?;
    if weights.nrows() != k || b.nrows() != k || b.ncols() != 1 {
        return Err(ContainerError::Inconsistent(format!(
            "{k} labels, W is {}x{}, b is {}x{}",
            weights.nrows(),
            weights.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(ModelFrames {
        backend,
        labels,
        weights,
        biases: b.iter().copied().collect(),
    })
}
