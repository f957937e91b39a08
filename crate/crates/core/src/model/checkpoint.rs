//! Self-describing checkpoint files.
//!
//! ```text
//! LENGEN-CKPT\n
//! version 1\n
//! dtype f32\n
//! config.<key> <value>\n   (one line per ModelConfig field)
//! meta.<key> <value>\n     (optional free-form metadata)
//! tensors <count>\n
//! end\n
//! then per tensor: u32 name length, name bytes, u32 rank, u64 dims, values (little endian)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{layout, ModelConfig, ModelParams, Param, PeKind};
use crate::engine::{Scalar, Tensor};
use crate::taskgen::S_VOCAB;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "LENGEN-CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
}

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("depth", c.depth.to_string()),
        ("d_model", c.d_model.to_string()),
        ("heads", c.heads.to_string()),
        ("ffn_mult", c.ffn_mult.to_string()),
        ("pe_kind", c.pe_kind.to_string()),
        ("shared_layers", c.shared_layers.to_string()),
        ("k_clip", c.k_clip.to_string()),
        ("shared_rel_tables", c.shared_rel_tables.to_string()),
        ("max_positions", c.max_positions.to_string()),
        ("s_vocab", c.s_vocab.to_string()),
        ("n_out", c.n_out.to_string()),
        ("dropout", format!("{:?}", c.dropout)),
    ]
}

/// Free-form key/value annotations stored in the header.
pub type Metadata = BTreeMap<String, String>;

/// Serializes parameters in their own precision.
pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    checkpoint_bytes_with_meta(params, &Metadata::new())
}

/// Serializes parameters plus metadata. Keys and values must not contain newlines;
/// keys must not contain spaces.
pub fn checkpoint_bytes_with_meta<T: Scalar>(params: &ModelParams<T>, meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = format!("{MAGIC}\nversion {CHECKPOINT_VERSION}\ndtype {}\n", T::NAME);
    for (k, v) in config_lines(&params.config) {
        header.push_str(&format!("config.{k} {v}\n"));
    }
    for (k, v) in meta {
        assert!(!k.contains([' ', '\n']) && !v.contains('\n'), "metadata {k:?} is not a single-line token");
        header.push_str(&format!("meta.{k} {v}\n"));
    }
    header.push_str(&format!("tensors {}\nend\n", params.params.len()));
    out.extend_from_slice(header.as_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.to_le_bytes_vec(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<(), CheckpointError> {
    save_checkpoint_with_meta(params, &Metadata::new(), path)
}

pub fn save_checkpoint_with_meta<T: Scalar>(
    params: &ModelParams<T>,
    meta: &Metadata,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes_with_meta(params, meta);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!("unexpected end of file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn line(&mut self) -> Result<&'b str, CheckpointError> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Corrupt("unterminated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Corrupt("header is not utf-8".into()))
    }
}

fn parse_config(kv: &BTreeMap<String, String>) -> Result<ModelConfig, CheckpointError> {
    fn get<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<V, CheckpointError> {
        kv.get(key)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing config.{key}")))?
            .parse()
            .map_err(|_| CheckpointError::Corrupt(format!("bad value for config.{key}")))
    }
    let pe_kind: String = get(kv, "pe_kind")?;
    Ok(ModelConfig {
        depth: get(kv, "depth")?,
        d_model: get(kv, "d_model")?,
        heads: get(kv, "heads")?,
        ffn_mult: get(kv, "ffn_mult")?,
        pe_kind: pe_kind.parse::<PeKind>().map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
        shared_layers: get(kv, "shared_layers")?,
        k_clip: get(kv, "k_clip")?,
        shared_rel_tables: get(kv, "shared_rel_tables")?,
        max_positions: get(kv, "max_positions")?,
        s_vocab: get(kv, "s_vocab")?,
        n_out: get(kv, "n_out")?,
        dropout: get(kv, "dropout")?,
    })
}

/// Parses a checkpoint, converting values to `T` when the stored precision differs.
pub fn parse_checkpoint<T: Scalar>(buf: &[u8]) -> Result<ModelParams<T>, CheckpointError> {
    parse_checkpoint_with_meta(buf).map(|(p, _)| p)
}

pub fn parse_checkpoint_with_meta<T: Scalar>(buf: &[u8]) -> Result<(ModelParams<T>, Metadata), CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if !buf.starts_with(MAGIC.as_bytes()) || r.line()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut kv = BTreeMap::new();
    loop {
        let line = r.line()?;
        if line == "end" {
            break;
        }
        let (k, v) =
            line.split_once(' ').ok_or_else(|| CheckpointError::Corrupt(format!("bad header line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let version: u32 = kv
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Corrupt("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let dtype = kv.get("dtype").map(String::as_str).unwrap_or("f32");
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(CheckpointError::Corrupt(format!("unknown dtype {other:?}"))),
    };
    let cfg_kv: BTreeMap<String, String> =
        kv.iter().filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone()))).collect();
    let stored = parse_config(&cfg_kv)?;
    let count: usize = kv
        .get("tensors")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Corrupt("missing tensor count".into()))?;

    // Shapes are checked against what this library builds, so foreign vocabularies fail here.
    let mut expected_cfg = stored.clone();
    expected_cfg.s_vocab = S_VOCAB;
    let specs = layout(&expected_cfg).1;
    if count != specs.len() {
        return Err(CheckpointError::Corrupt(format!("expected {} tensors, header lists {count}", specs.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, kind, shape) in specs {
        let n = r.u32("name length")? as usize;
        let found_name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
        if found_name != name {
            return Err(CheckpointError::Corrupt(format!("expected tensor {name}, found {found_name}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("implausible rank {rank} for {name}")));
        }
        let found: Vec<usize> = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<_, _>>()?;
        if found != shape {
            return Err(CheckpointError::ShapeMismatch { name, expected: shape, found });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width, &format!("values of {name}"))?;
        let data: Vec<T> = if width == T::BYTES {
            raw.chunks_exact(width).map(T::from_le_slice).collect()
        } else if width == 4 {
            raw.chunks_exact(4).map(|c| T::from_f64(f32::from_le_slice(c) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_slice(c))).collect()
        };
        params.push(Param { name, kind, tensor: Tensor::from_vec(shape, data) });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let meta = kv.iter().filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone()))).collect();
    Ok((ModelParams::from_parts(stored, params), meta))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>, CheckpointError> {
    parse_checkpoint(&fs::read(path)?)
}

pub fn load_checkpoint_with_meta<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, Metadata), CheckpointError> {
    parse_checkpoint_with_meta(&fs::read(path)?)
}
