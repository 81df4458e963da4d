//! Item embedding table and the AEMB file format.
//!
//! Layout: `"AEMB"`, `n_items: u32`, `dim: u32`, `n_items·dim` f32 values in
//! row-major order, then a u64 byte-sum of the f32 payload. All integers and
//! floats are little-endian. Values are widened to f64 on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{byte_sum, put_u32, put_u64, read_file, to_u32, write_file, Reader};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"AEMB";

/// Continuous semantic embeddings, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Matrix,
}

impl EmbeddingTable {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::Config(format!(
                "embedding table must be non-empty, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite {
                context: "embedding table".into(),
            });
        }
        Ok(EmbeddingTable { matrix })
    }

    pub fn n_items(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, item: usize) -> &[f64] {
        self.matrix.row(item)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Serializes to AEMB bytes. Values are narrowed to f32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(12 + self.matrix.len() * 4 + 8);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, to_u32(self.n_items(), "n_items")?);
        put_u32(&mut buf, to_u32(self.dim(), "dim")?);
        let payload_start = buf.len();
        for v in self.matrix.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let sum = byte_sum(&buf[payload_start..]);
        put_u64(&mut buf, sum);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let n = r.u32("n_items")? as usize;
        let dim = r.u32("dim")? as usize;
        if n == 0 || dim == 0 {
            return Err(r.error(4, format!("empty shape {n}x{dim}")));
        }
        let payload_start = r.pos();
        let count = n
            .checked_mul(dim)
            .ok_or_else(|| r.error(4, "shape overflow"))?;
        let need = count * 4 + 8;
        if r.remaining() < need {
            return Err(r.error(
                payload_start,
                format!(
                    "truncated: header declares {n}x{dim} ({need} bytes with checksum), {} present",
                    r.remaining()
                ),
            ));
        }
        let raw = r.take(count * 4, "f32 payload")?;
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(r.error(payload_start + i * 4, "non-finite embedding value"));
            }
            data.push(v as f64);
        }
        r.checksum_trailer(payload_start)?;
        EmbeddingTable::new(Matrix::from_vec(n, dim, data)?)
    }
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &table.to_bytes()?)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    EmbeddingTable::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        let vals: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.5) as f64).collect();
        EmbeddingTable::new(Matrix::from_vec(3, 4, vals).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.aemb");
        let t = table();
        save_embeddings(&t, &p).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.matrix().data().iter().zip(t.matrix().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_claiming_more_rows_is_truncation() {
        let t = EmbeddingTable::new(Matrix::filled(9, 2, 0.5)).unwrap();
        let mut bytes = t.to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&10u32.to_le_bytes());
        let err = EmbeddingTable::from_bytes(&bytes, Path::new("x")).unwrap_err();
        match err {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 12);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_nan_are_rejected() {
        let mut bytes = table().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingTable::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = table().to_bytes().unwrap();
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingTable::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { offset: 16, .. })
        ));
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let mut bytes = table().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        assert!(EmbeddingTable::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
