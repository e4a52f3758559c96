//! GRCT tensor files: `"GRCT"`, version byte, dtype byte (0 = f32,
//! 1 = f64), rank byte, `rank` little-endian `u32` extents, then the
//! row-major little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"GRCT";
pub const VERSION: u8 = 1;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * t.dtype().size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype_code(t.dtype()), t.rank() as u8]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing GRCT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported GRCT version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated GRCT header".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("extent product overflows".into()))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != numel.checked_mul(dtype.size_of()) {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match {shape:?} at {dtype}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::new(&shape, data)
        .map_err(|e| Error::Format(e.to_string()))
        .map(|t| t.with_dtype(dtype))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..7], b"GRCT\x01\x01\x02");
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[15..23], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 16);
    }

    #[test]
    fn round_trip_both_dtypes() {
        let t = Tensor::from_fn(&[2, 3, 1, 2], |i| (i as f64).sin() * 1e3).unwrap();
        for d in [DType::F32, DType::F64] {
            let t = t.clone().with_dtype(d);
            let back = decode(&encode(&t).unwrap()).unwrap();
            assert_eq!(back.dtype(), d);
            assert_eq!(back.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&t));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = encode(&Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 9;
        assert!(decode(&bad).is_err());
        let mut bad = good;
        bad[6] = 5;
        assert!(decode(&bad).is_err());
    }
}
