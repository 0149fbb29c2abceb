//! TNSR1 binary tensor files.
//!
//! Layout: magic `TNSR1`, one dtype tag byte, one rank byte, `rank` dims as
//! little-endian `u64`, then the raw little-endian element buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use crate::dtype::ElementType;
use crate::error::TensorError;
use crate::tensor::{Tensor, TensorData};

pub const MAGIC: &[u8; 5] = b"TNSR1";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype().tag(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.byte_len() as usize);
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::F16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::I8(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::I16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated {what}")),
        _ => TensorError::Io(e),
    })
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let mut hdr = [0u8; 2];
    read_exact(&mut r, &mut hdr, "header")?;
    let dtype =
        ElementType::from_tag(hdr[0]).ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", hdr[0])))?;
    let rank = hdr[1] as usize;
    if rank == 0 {
        return Err(TensorError::Format("rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_exact(&mut r, &mut d, "dims")?;
        let d = usize::try_from(u64::from_le_bytes(d))
            .map_err(|_| TensorError::Format("dimension overflows usize".into()))?;
        shape.push(d);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| TensorError::Format(format!("invalid shape {shape:?}")))?;
    let width = dtype.byte_width();
    let mut raw = vec![0u8; count * width];
    read_exact(&mut r, &mut raw, "element data")?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Format("trailing bytes after element data".into()));
    }
    let chunks = raw.chunks_exact(width);
    let data = match dtype {
        ElementType::Fp32 => TensorData::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        ElementType::Fp16 => TensorData::F16(chunks.map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect()),
        ElementType::Int8 => TensorData::I8(chunks.map(|c| c[0] as i8).collect()),
        ElementType::Int16 => TensorData::I16(chunks.map(|c| i16::from_le_bytes(c.try_into().unwrap())).collect()),
        ElementType::Int32 => TensorData::I32(chunks.map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Tensor::new(shape, data)
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
        read_tensor(BufReader::new(File::open(path)?))
    }
}
