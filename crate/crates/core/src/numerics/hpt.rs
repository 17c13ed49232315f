//! `.hpt` tensor files.
//!
//! Layout: `HPT1` magic, one dtype byte (`0x00` = f32), one rank byte, two
//! zero bytes, `rank` little-endian `u32` dimensions, then the row-major
//! little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HPT1";
pub const DTYPE_F32: u8 = 0x00;
const HEADER_LEN: usize = 8;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(format!("bad magic {:02x?}", &bytes[..4]));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(format!("unsupported dtype code {:#04x}", bytes[4]));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err("rank 0 tensors are not supported".into());
    }
    if bytes[6..8] != [0, 0] {
        return Err("reserved header bytes are not zero".into());
    }
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err("truncated dimension list".into());
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dimension product overflows")?;
    let payload = &bytes[dims_end..];
    if payload.len() != count * 4 {
        return Err(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 4
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_hpt(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_hpt(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new([2, 1], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(
            bytes,
            [
                0x48, 0x50, 0x54, 0x31, 0x00, 0x02, 0x00, 0x00, // header
                2, 0, 0, 0, 1, 0, 0, 0, // dims
                0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0, // payload
            ]
        );
    }

    #[test]
    fn rejects_foreign_files() {
        let mut bytes = encode(&Tensor::vector(vec![1.0f32]));
        bytes[3] = b'2';
        assert!(decode(&bytes).unwrap_err().contains("magic"));
        let mut bytes = encode(&Tensor::vector(vec![1.0f32]));
        bytes[4] = 0x01;
        assert!(decode(&bytes).unwrap_err().contains("dtype"));
        let bytes = encode(&Tensor::vector(vec![1.0f32, 2.0]));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = (0..len)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97)) & 0x3fff_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = encode(&t);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
