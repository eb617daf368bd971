//! Raw frame pipe: each frame is `frame_index: u32`, `D: u32`, then `D`
//! little-endian `f32` values.

use std::io::{self, Read, Write};

use s2svc::scalar::Scalar;
use s2svc::tensor::Tensor;

/// Reads one frame; `Ok(None)` at a clean end of input.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u32, Vec<f32>)>> {
    let mut header = [0u8; 8];
    let mut got = 0;
    while got < header.len() {
        let n = r.read(&mut header[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header"))
            };
        }
        got += n;
    }
    let index = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
    let dim = u32::from_le_bytes(header[4..].try_into().expect("4 bytes")) as usize;
    let mut payload = vec![0u8; dim * 4];
    r.read_exact(&mut payload)?;
    let values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(Some((index, values)))
}

pub fn write_frame(w: &mut impl Write, index: u32, values: &[f32]) -> io::Result<()> {
    w.write_all(&index.to_le_bytes())?;
    w.write_all(&(values.len() as u32).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes every column of `frames` starting at frame number `first`.
pub fn write_columns<T: Scalar>(w: &mut impl Write, first: u32, frames: &Tensor<T>) -> io::Result<()> {
    for c in 0..frames.cols() {
        let col: Vec<f32> = frames.col(c).into_iter().map(|v| v.to_f64_lossy() as f32).collect();
        write_frame(w, first + c as u32, &col)?;
    }
    Ok(())
}
