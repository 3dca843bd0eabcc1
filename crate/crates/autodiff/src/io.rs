//! The `MLT1` binary tensor format.
//!
//! Layout: the magic bytes `MLT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MLT1";

impl Tensor {
    pub fn write_mlt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in self.shape() {
            let e =
                u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.numel() * 8);
        for v in self.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_mlt<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 32 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = read_u32(r)? as usize;
            if e == 0 {
                return Err(Error::Format("zero extent".into()));
            }
            shape.push(e);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let mut bytes = vec![
            0u8;
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("payload too large".into()))?
        ];
        read_exact(r, &mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn to_mlt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_mlt(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_mlt_bytes(mut bytes: &[u8]) -> Result<Self> {
        let t = Self::read_mlt(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(t)
    }

    /// Size in bytes of the `MLT1` encoding of this tensor.
    pub fn encoded_len(&self) -> usize {
        encoded_len(self.shape())
    }
}

pub fn encoded_len(shape: &[usize]) -> usize {
    8 + 4 * shape.len() + 8 * numel(shape)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor data".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
