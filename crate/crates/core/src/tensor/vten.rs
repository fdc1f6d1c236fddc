//! VTEN v1 tensor file format.
//!
//! Layout: magic bytes `VTEN`, u8 version (= 1), u8 rank, `rank` u32
//! little-endian extents, then the payload as little-endian IEEE 754 f32,
//! row-major. Videos, perturbations and model weights all use this framing.

use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VTEN";
const VERSION: u8 = 1;

/// Hard cap on element count so corrupt extents fail cleanly.
const MAX_ELEMENTS: u64 = 1 << 30;

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("VTEN header"))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)
        .map_err(|_| Error::Truncated("VTEN header"))?;
    if head[0] != VERSION {
        return Err(Error::UnsupportedVersion(head[0]));
    }
    let rank = head[1] as usize;
    if rank > MAX_RANK {
        return Err(Error::RankTooHigh(rank));
    }
    let mut extents = Vec::with_capacity(rank);
    let mut raw_extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Truncated("VTEN extents"))?;
        let e = u32::from_le_bytes(b);
        raw_extents.push(e);
        extents.push(e as usize);
    }
    let count = extents.iter().map(|&e| e as u64).product::<u64>();
    if count > MAX_ELEMENTS {
        return Err(Error::ExtentOverflow(raw_extents));
    }
    let mut payload = vec![0u8; count as usize * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Truncated("VTEN payload"))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(extents, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor_to(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, t).unwrap();
        read_tensor_from(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn roundtrip_bit_exact_on_f32_grid() {
        let mut t = Tensor::new(vec![2, 2], vec![0.125, -3.5, 0.1, 1e-7]).unwrap();
        t.quantize_f32();
        assert_eq!(roundtrip(&t), t);
    }

    #[test]
    fn bad_magic_detected() {
        let buf = b"NOPE\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            read_tensor_from(&mut buf.as_slice()),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn wrong_version_detected() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[4] = 9;
        assert!(matches!(
            read_tensor_from(&mut buf.as_slice()),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncated_payload_detected() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            read_tensor_from(&mut buf.as_slice()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn extent_overflow_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VTEN");
        buf.push(1);
        buf.push(2);
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_tensor_from(&mut buf.as_slice()),
            Err(Error::ExtentOverflow(_))
        ));
    }
}
