//! `.tsr` tensor files: 8-byte magic `TSR0\0\0\0\0`, u32 rank, rank × u64 dims,
//! then the f64 payload. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;

pub const MAGIC: [u8; 8] = *b"TSR0\0\0\0\0";

#[derive(Debug, thiserror::Error)]
pub enum TsrError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    Magic([u8; 8]),
    #[error("invalid header: {0}")]
    Header(String),
}

pub fn write_tsr<W: Write>(mut w: W, t: &Tensor) -> Result<(), TsrError> {
    w.write_all(&MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tsr<R: Read>(mut r: R) -> Result<Tensor, TsrError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TsrError::Magic(magic));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(TsrError::Header(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    let mut n: usize = 1;
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        if d == 0 || d > (1 << 40) {
            return Err(TsrError::Header(format!("dimension {d} out of range")));
        }
        let d = d as usize;
        n = n
            .checked_mul(d)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| TsrError::Header("element count overflows".into()))?;
        shape.push(d);
    }
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TsrError::Header("trailing bytes after payload".into()));
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<(), TsrError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tsr(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor, TsrError> {
    let f = std::fs::File::open(path)?;
    read_tsr(std::io::BufReader::new(f))
}
