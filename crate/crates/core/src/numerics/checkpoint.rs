//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CCKP" | version: u32 = 1 | record*
//! record = name_len: u64 | name: UTF-8 | rows: u64 | cols: u64 | rows*cols f64 (row-major)
//! ```
//!
//! Records run to end of file.

use std::io::{Read, Write};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CCKP";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Matrix)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn encode(tensors: &[(String, Matrix)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"CCKP\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let len = c.u64("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rows = c.u64("rows")? as usize;
        let cols = c.u64("cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let data = c
            .take(count, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Matrix)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("a".into(), Matrix::from_vec(1, 1, vec![2.5]).unwrap())]);
        assert_eq!(&bytes[..4], b"CCKP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(bytes[16], b'a');
        assert_eq!(&bytes[33..41], &2.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 41);
    }

    #[test]
    fn bad_magic_names_expected() {
        let mut bytes = encode(&[]);
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("CCKP"), "{err}");
    }

    #[test]
    fn wrong_version_and_truncation() {
        let mut bytes = encode(&[("w".into(), Matrix::zeros(2, 2))]);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode(&v2).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(decode(&bytes).unwrap_err().to_string().contains("truncated"));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shapes in prop::collection::vec((0usize..4, 0usize..4), 0..5),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<(String, Matrix)> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| {
                    let data = (0..r * c)
                        .map(|k| f64::from_bits(crate::rng::derive(seed, (i * 31 + k) as u64) >> 2))
                        .collect();
                    (format!("t{i}.ü"), Matrix::from_vec(r, c, data).unwrap())
                })
                .collect();
            let back = decode(&encode(&tensors)).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((na, a), (nb, b)) in back.iter().zip(&tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.as_slice().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.as_slice().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
