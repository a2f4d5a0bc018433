//! Binary tensor frames.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "DMT1" | rank: u8 | dims: rank × u32 | payload: Π dims × f32
//! ```
//!
//! Grids are written as rank-3 `[H, W, C]` frames; masks use `C = 1` and
//! flows `C = 2`. Rank-2 frames decode as single-channel grids.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{FlowField, MaskGrid, TensorGrid};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"DMT1";

/// Upper bound on decoded payload elements, so corrupt dims cannot force a
/// huge allocation.
const MAX_ELEMENTS: u64 = 1 << 30;

/// A decoded frame before it is interpreted as a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

impl RawFrame {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&TENSOR_MAGIC);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes one frame from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(RawFrame, usize)> {
        let mut cursor = bytes;
        let frame = Self::read_from(&mut cursor)?;
        Ok((frame, bytes.len() - cursor.len()))
    }

    pub fn read_from(reader: &mut impl Read) -> Result<RawFrame> {
        let mut magic = [0u8; 4];
        read_exact(reader, &mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(malformed(format!("bad tensor magic {magic:02x?}")));
        }
        let mut rank = [0u8; 1];
        read_exact(reader, &mut rank)?;
        let rank = rank[0] as usize;
        if rank == 0 {
            return Err(malformed("tensor rank must be positive"));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let mut b = [0u8; 4];
            read_exact(reader, &mut b)?;
            let d = u32::from_le_bytes(b);
            if d == 0 {
                return Err(malformed("tensor dimension of zero"));
            }
            count = count.saturating_mul(d as u64);
            dims.push(d);
        }
        if count > MAX_ELEMENTS {
            return Err(malformed(format!("tensor with {count} elements exceeds limit")));
        }
        let mut payload = vec![0u8; count as usize * 4];
        read_exact(reader, &mut payload)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(RawFrame { dims, values })
    }

    pub fn to_grid(&self) -> Result<TensorGrid> {
        let (h, w, c) = match self.dims.as_slice() {
            [h, w] => (*h, *w, 1),
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(Error::shape(format!(
                    "grid frames must have rank 2 or 3, got dims {other:?}"
                )))
            }
        };
        TensorGrid::new(
            h as usize,
            w as usize,
            c as usize,
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_grid(grid: &TensorGrid) -> Result<RawFrame> {
        let values: Vec<f32> = grid.data().iter().map(|&v| v as f32).collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "value at flat index {pos} does not fit in f32"
            )));
        }
        let (h, w, c) = grid.dims();
        Ok(RawFrame {
            dims: vec![h as u32, w as u32, c as u32],
            values,
        })
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Protocol {
        code: crate::backend::protocol::ERR_MALFORMED,
        message: msg.into(),
    }
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            malformed("truncated tensor frame")
        } else {
            Error::Io(e)
        }
    })
}

pub fn encode_grid(grid: &TensorGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(5 + 12 + grid.data().len() * 4);
    RawFrame::from_grid(grid)?.encode(&mut out);
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<(TensorGrid, usize)> {
    let (frame, used) = RawFrame::decode(bytes)?;
    Ok((frame.to_grid()?, used))
}

pub fn write_grid(writer: &mut impl Write, grid: &TensorGrid) -> Result<()> {
    writer.write_all(&encode_grid(grid)?)?;
    Ok(())
}

pub fn write_grid_file(path: impl AsRef<Path>, grid: &TensorGrid) -> Result<()> {
    fs::write(path, encode_grid(grid)?)?;
    Ok(())
}

pub fn read_grid_file(path: impl AsRef<Path>) -> Result<TensorGrid> {
    let bytes = fs::read(path)?;
    let (grid, used) = decode_grid(&bytes)?;
    if used != bytes.len() {
        return Err(malformed(format!(
            "{} trailing bytes after tensor frame",
            bytes.len() - used
        )));
    }
    Ok(grid)
}

pub fn write_flow_file(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_grid_file(path, &flow.to_grid())
}

pub fn read_flow_file(path: impl AsRef<Path>) -> Result<FlowField> {
    FlowField::from_grid(&read_grid_file(path)?)
}

pub fn write_mask_file(path: impl AsRef<Path>, mask: &MaskGrid) -> Result<()> {
    write_grid_file(path, &mask.to_grid())
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<MaskGrid> {
    MaskGrid::from_grid(&read_grid_file(path)?)
}
