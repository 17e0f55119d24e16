//! `SKDM` model files.
//!
//! Layout (little-endian): magic `SKDM`, u8 version, u8 kind (1 teacher,
//! 2 student), u16 reserved, u32 metadata length + JSON metadata, u32 tensor
//! count, then per tensor: u16 name length + name, u8 role (0 param,
//! 1 buffer), u8 ndim, ndim × u32 dims, f32 values; trailing CRC32 of all
//! preceding bytes.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use edgekd_tensor::Tensor;
use indexmap::IndexMap;

use super::{Model, ModelConfig, ModelError, ModelKind, Result, Role};

pub const SKDM_MAGIC: &[u8; 4] = b"SKDM";
pub const SKDM_VERSION: u8 = 1;

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Teacher => 1,
        ModelKind::Student => 2,
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut meta = model.metadata.clone();
    meta.insert("config".into(), serde_json::to_value(&model.config).map_err(|e| ModelError::Malformed(e.to_string()))?);
    meta.insert("frozen".into(), model.frozen.into());
    let meta = serde_json::to_vec(&meta).map_err(|e| ModelError::Malformed(e.to_string()))?;

    let payload: usize = model.params.values().chain(model.buffers.values()).map(|t| t.numel() * 4 + 64).sum();
    let mut out = Vec::with_capacity(16 + meta.len() + payload + 4);
    out.extend_from_slice(SKDM_MAGIC);
    out.extend_from_slice(&[SKDM_VERSION, kind_code(model.kind()), 0, 0]);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&((model.params.len() + model.buffers.len()) as u32).to_le_bytes());
    let tensors = model
        .params
        .iter()
        .map(|(n, t)| (n, t, 0u8))
        .chain(model.buffers.iter().map(|(n, t)| (n, t, 1u8)));
    for (name, t, role) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(role);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(ModelError::Malformed(format!("unexpected end of data at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(ModelError::Malformed(format!("{} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != SKDM_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    if bytes.len() > 4 && bytes[4] != SKDM_VERSION {
        return Err(ModelError::VersionMismatch(bytes[4]));
    }
    if bytes.len() < 12 {
        let computed = crc32fast::hash(bytes);
        return Err(ModelError::ChecksumMismatch { stored: 0, computed });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 5 };
    let kind = match r.u8()? {
        1 => ModelKind::Teacher,
        2 => ModelKind::Student,
        k => return Err(ModelError::Malformed(format!("unknown model kind {k}"))),
    };
    r.u16()?;
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| ModelError::Malformed(format!("metadata: {e}")))?;
    let mut metadata = meta;
    let config: ModelConfig = metadata
        .remove("config")
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| ModelError::Malformed(format!("config: {e}")))?
        .ok_or_else(|| ModelError::Malformed("metadata lacks config".into()))?;
    if config.kind != kind {
        return Err(ModelError::Malformed(format!("header kind {kind:?}, config kind {:?}", config.kind)));
    }
    let frozen = metadata.remove("frozen").and_then(|v| v.as_bool()).unwrap_or(false);

    let count = r.u32()? as usize;
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let role = match r.u8()? {
            0 => Role::Param,
            1 => Role::Buffer,
            x => return Err(ModelError::Malformed(format!("{name}: role {x}"))),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| ModelError::Malformed(format!("{name}: size overflow")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Arc::new(Tensor::new(&shape, data)?);
        let dup = match role {
            Role::Param => params.insert(name.clone(), t),
            Role::Buffer => buffers.insert(name.clone(), t),
        };
        if dup.is_some() {
            return Err(ModelError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut model = Model::from_tensors(config, params, buffers)?;
    model.frozen = frozen;
    model.metadata = metadata;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
