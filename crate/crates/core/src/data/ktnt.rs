//! The KTNT tensor container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KTNT"
//! 4       2     version (u16 LE) = 1
//! 6       1     dtype code (0 = f32)
//! 7       1     rank (>= 1)
//! 8       4·r   dims, u32 LE each
//! ...     4·n   payload, row-major f32 LE
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KTNT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn header_len(rank: usize) -> usize {
    8 + 4 * rank
}

/// Serialize `t` (rounded to f32).
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = t.rank();
    if rank == 0 || rank > u8::MAX as usize {
        return Err(Error::Shape(format!("cannot encode a rank-{rank} tensor")));
    }
    let mut out = Vec::with_capacity(header_len(rank) + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse just the header, returning `(dims, payload offset)`.
pub fn decode_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"KTNT\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::format(
            6,
            format!("unsupported dtype code {}", bytes[6]),
        ));
    }
    let rank = bytes[7] as usize;
    if rank == 0 {
        return Err(Error::format(7, "rank must be >= 1"));
    }
    let hl = header_len(rank);
    if bytes.len() < hl {
        return Err(Error::format(bytes.len(), "truncated dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let o = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(o, "zero extent"));
        }
        dims.push(d);
    }
    Ok((dims, hl))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (dims, hl) = decode_header(bytes)?;
    let n: usize = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(8, "dims overflow"))?;
    let want = hl + 4 * n;
    if bytes.len() != want {
        return Err(Error::format(
            bytes.len().min(want),
            format!("payload length {} != expected {}", bytes.len() - hl, 4 * n),
        ));
    }
    let data = bytes[hl..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so readers never observe a partial file
    let tmp = path.with_extension("ktnt.partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_declares_payload_length() {
        let t = Tensor::zeros(&[40, 20, 128]);
        let b = encode(&t).unwrap();
        assert_eq!(b.len() - header_len(3), 409_600);
        assert_eq!(decode_header(&b).unwrap().0, vec![40, 20, 128]);
    }

    #[test]
    fn rejects_rank_zero_and_bad_magic() {
        let mut b = encode(&Tensor::zeros(&[2])).unwrap();
        b[7] = 0;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 7, .. })));
        let mut b = encode(&Tensor::zeros(&[2])).unwrap();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn rejects_truncation_and_bad_version() {
        let b = encode(&Tensor::full(&[3, 3], 1.5)).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(decode(&v), Err(Error::Format { offset: 4, .. })));
    }
}
