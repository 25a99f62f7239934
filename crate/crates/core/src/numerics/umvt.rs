//! `UMVT` tensor dump format.
//!
//! Layout: magic `UMVT`, version byte (1), rank byte, `rank` little-endian
//! `u32` dims, dtype byte (0 = f32), then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UMVT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Size in bytes of the encoded record for `dims`.
pub fn encoded_len(dims: &[usize]) -> usize {
    4 + 1 + 1 + 4 * dims.len() + 1 + 4 * dims.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit a byte", t.rank())));
    }
    let mut buf = Vec::with_capacity(encoded_len(t.dims()));
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected UMVT".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported UMVT version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", dtype[0])));
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn to_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(t.dims()));
    write_tensor(&mut out, t)?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    read_tensor(bytes)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, to_bytes(t)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert_eq!(&b[..4], b"UMVT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
        assert_eq!(b[14], 0);
        assert_eq!(&b[15..19], &0f32.to_le_bytes());
        assert_eq!(b.len(), encoded_len(&[2, 3]));
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap();
        let mut b = to_bytes(&t).unwrap();
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Format(_))));
        let mut b = to_bytes(&t).unwrap();
        b[4] = 2;
        assert!(from_bytes(&b).is_err());
        let b = to_bytes(&t).unwrap();
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 1..5), seed in any::<u32>()) {
            let t = Tensor::from_fn(&dims, |i| (i as f32 * 0.37 + seed as f32).sin());
            let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
