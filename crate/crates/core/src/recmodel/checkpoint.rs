//! AREC checkpoints.
//!
//! Layout: `"AREC"`, version `u32`, config text length `u32` and the
//! `key=value` config text, the 32-byte SHA-256 of the codebook snapshot the
//! model was trained against (zeros when none), tensor count `u32`, then per
//! tensor its name length `u32`, name, `rows u32`, `cols u32` and f64 values.
//! A u64 byte-sum of everything after the magic closes the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelShape, RecConfig, RecModel, Variant};
use crate::error::{Error, Result};
use crate::format::{byte_sum, put_f64s, put_u32, put_u64, read_file, to_u32, write_file, Reader};
use crate::nn::Parameterized;

const MAGIC: &[u8; 4] = b"AREC";
const VERSION: u32 = 1;

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RecModel,
    pub mhq_hash: [u8; 32],
}

fn config_text(model: &RecModel) -> String {
    let c = &model.config;
    let s = &model.shape;
    let mut t = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(t, "{k}={v}");
    };
    kv("variant", c.variant.to_string());
    kv("d_m", c.d_m.to_string());
    kv("layers", c.layers.to_string());
    kv("heads", c.heads.to_string());
    kv("max_len", c.max_len.to_string());
    kv("dropout", format!("{:?}", c.dropout));
    kv("lr", format!("{:?}", c.lr));
    kv("momentum", format!("{:?}", c.momentum));
    kv("batch", c.batch.to_string());
    kv("max_epochs", c.max_epochs.to_string());
    kv("patience", c.patience.to_string());
    kv("experts", c.experts.to_string());
    kv("per_position", c.per_position.to_string());
    kv("seed", c.seed.to_string());
    kv("input_dim", s.input_dim.to_string());
    kv("code_len", s.code_len.to_string());
    kv("codebook_size", s.codebook_size.to_string());
    t
}

fn parse_config(text: &str) -> std::result::Result<(RecConfig, ModelShape), String> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad config line '{line}'"))?;
        map.insert(k, v);
    }
    fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, k: &str) -> std::result::Result<T, String> {
        map.get(k)
            .ok_or_else(|| format!("missing config key '{k}'"))?
            .parse()
            .map_err(|_| format!("bad value for '{k}'"))
    }
    let variant: Variant = map
        .get("variant")
        .ok_or("missing config key 'variant'")?
        .parse()
        .map_err(|e: Error| e.to_string())?;
    let config = RecConfig {
        d_m: get(&map, "d_m")?,
        layers: get(&map, "layers")?,
        heads: get(&map, "heads")?,
        max_len: get(&map, "max_len")?,
        dropout: get(&map, "dropout")?,
        lr: get(&map, "lr")?,
        momentum: get(&map, "momentum")?,
        batch: get(&map, "batch")?,
        max_epochs: get(&map, "max_epochs")?,
        patience: get(&map, "patience")?,
        experts: get(&map, "experts")?,
        per_position: get(&map, "per_position")?,
        variant,
        seed: get(&map, "seed")?,
    };
    let shape = ModelShape {
        input_dim: get(&map, "input_dim")?,
        code_len: get(&map, "code_len")?,
        codebook_size: get(&map, "codebook_size")?,
    };
    Ok((config, shape))
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let text = config_text(&ckpt.model);
    put_u32(&mut buf, to_u32(text.len(), "config length")?);
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&ckpt.mhq_hash);
    let params = ckpt.model.parameters();
    put_u32(&mut buf, to_u32(params.len(), "tensor count")?);
    for (name, m) in params {
        put_u32(&mut buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, to_u32(m.rows(), "rows")?);
        put_u32(&mut buf, to_u32(m.cols(), "cols")?);
        put_f64s(&mut buf, m.data());
    }
    let sum = byte_sum(&buf[4..]);
    put_u64(&mut buf, sum);
    Ok(buf)
}

fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(4, format!("unsupported checkpoint version {version}")));
    }
    let text_at = r.pos();
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| r.error(text_at + 4, "config text is not UTF-8"))?;
    let (config, shape) = parse_config(text).map_err(|m| r.error(text_at + 4, m))?;
    let mut model = RecModel::new(&config, shape).map_err(|e| r.error(text_at + 4, e.to_string()))?;
    let mut mhq_hash = [0u8; 32];
    mhq_hash.copy_from_slice(r.take(32, "codebook hash")?);
    let count_at = r.pos();
    let count = r.u32("tensor count")? as usize;
    let expected: Vec<(String, (usize, usize))> = model
        .parameters()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    if count != expected.len() {
        return Err(r.error(count_at, format!("{count} tensors, model needs {}", expected.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (name, (rows, cols)) in &expected {
        let at = r.pos();
        let nlen = r.u32("name length")? as usize;
        let found = r.take(nlen, "tensor name")?;
        if found != name.as_bytes() {
            return Err(r.error(at, format!("expected tensor '{name}'")));
        }
        let shape_at = r.pos();
        let (rr, cc) = (r.u32("rows")? as usize, r.u32("cols")? as usize);
        if (rr, cc) != (*rows, *cols) {
            return Err(r.error(shape_at, format!("tensor '{name}' is {rr}x{cc}, expected {rows}x{cols}")));
        }
        values.push(r.f64s(rr * cc, name)?);
    }
    r.checksum_trailer(4)?;
    for (p, v) in model.parameters_mut().into_iter().zip(values) {
        p.data_mut().copy_from_slice(&v);
    }
    Ok(Checkpoint { model, mhq_hash })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_bytes(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    from_bytes(&read_file(path)?, path)
}
