//! MHQ1 codebook snapshots and the text codes export.
//!
//! Snapshot layout: `"MHQ1"`, then `D, M, L, K, d` as u32, then `W_P`
//! row-major, then for each codebook (subspace-major) its centroids, EMA
//! counts and EMA sums as f64, then a u64 byte-sum of everything after the
//! magic. Little-endian throughout.

use std::fmt::Write as _;
use std::path::Path;

use super::{Codebook, CodebookSet, SemanticCode};
use crate::error::{Error, Result};
use crate::format::{byte_sum, put_f64s, put_u32, put_u64, read_file, to_u32, write_file, Reader};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"MHQ1";

pub fn snapshot_bytes(cb: &CodebookSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for (v, what) in [
        (cb.dim(), "D"),
        (cb.subspaces, "M"),
        (cb.levels, "L"),
        (cb.codebook_size(), "K"),
        (cb.input_dim(), "d"),
    ] {
        put_u32(&mut buf, to_u32(v, what)?);
    }
    put_f64s(&mut buf, cb.projection.data());
    for b in &cb.books {
        put_f64s(&mut buf, b.centroids.data());
        put_f64s(&mut buf, &b.ema_count);
        put_f64s(&mut buf, b.ema_sum.data());
    }
    let sum = byte_sum(&buf[4..]);
    put_u64(&mut buf, sum);
    Ok(buf)
}

fn from_bytes(bytes: &[u8], path: &Path) -> Result<CodebookSet> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let dim = r.u32("D")? as usize;
    let m = r.u32("M")? as usize;
    let l = r.u32("L")? as usize;
    let k = r.u32("K")? as usize;
    let d = r.u32("d")? as usize;
    if dim == 0 || m == 0 || l == 0 || k == 0 || d == 0 || dim % m != 0 {
        return Err(r.error(4, format!("invalid header D={dim} M={m} L={l} K={k} d={d}")));
    }
    let sub = dim / m;
    let per_book = k * sub * 2 + k;
    let need = (dim * d + m * l * per_book) * 8 + 8;
    if r.remaining() != need {
        return Err(r.error(
            r.pos(),
            format!("payload is {} bytes, header implies {need}", r.remaining()),
        ));
    }
    let projection = Matrix::from_vec(dim, d, r.f64s(dim * d, "projection")?)?;
    let mut books = Vec::with_capacity(m * l);
    for _ in 0..m * l {
        let centroids = Matrix::from_vec(k, sub, r.f64s(k * sub, "centroids")?)?;
        let ema_count = r.f64s(k, "ema counts")?;
        let ema_sum = Matrix::from_vec(k, sub, r.f64s(k * sub, "ema sums")?)?;
        books.push(Codebook {
            centroids,
            ema_count,
            ema_sum,
        });
    }
    r.checksum_trailer(4)?;
    CodebookSet::new(projection, m, l, books)
}

pub fn save_codebooks(cb: &CodebookSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &snapshot_bytes(cb)?)
}

pub fn load_codebooks(path: impl AsRef<Path>) -> Result<CodebookSet> {
    let path = path.as_ref();
    from_bytes(&read_file(path)?, path)
}

/// `item<TAB>i11 i12 ...`, one line per item in id order.
pub fn save_codes(codes: &[SemanticCode], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for (item, c) in codes.iter().enumerate() {
        let _ = write!(s, "{item}\t");
        for (j, i) in c.indices().iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{i}");
        }
        s.push('\n');
    }
    write_file(path.as_ref(), s.as_bytes())
}

/// Reads a codes export; items must appear as `0..n` in order.
pub fn load_codes(path: impl AsRef<Path>) -> Result<Vec<SemanticCode>> {
    let path = path.as_ref();
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to() as u64,
        message: "invalid UTF-8".into(),
    })?;
    let mut out: Vec<SemanticCode> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (item, rest) = line.split_once('\t').ok_or_else(|| err("expected item<TAB>codes".into()))?;
        let item: usize = item.trim().parse().map_err(|_| err(format!("bad item id '{item}'")))?;
        if item != out.len() {
            return Err(err(format!("expected item {}, found {item}", out.len())));
        }
        let idx = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad code index '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = out.first() {
            if first.len() != idx.len() {
                return Err(err(format!("code length {} differs from {}", idx.len(), first.len())));
            }
        }
        out.push(SemanticCode(idx));
    }
    Ok(out)
}
