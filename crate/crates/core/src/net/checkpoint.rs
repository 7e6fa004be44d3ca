//! Binary tensor container shared by classifier checkpoints and cluster sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "WOODTNSR"
//! version   u32      1
//! meta_len  u32      length of the UTF-8 JSON metadata that follows
//! meta      bytes    architecture descriptor (checkpoints) or cluster metadata
//! count     u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u32 x ndim
//!   payload  f32 x product(dims)
//! ```
//!
//! Values are stored as `f32`; loading widens them back to `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Architecture, ClassifierState, Tensor};

pub const MAGIC: &[u8; 8] = b"WOODTNSR";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(meta_json: &str, tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, meta_json.len())?;
    out.extend_from_slice(meta_json.as_bytes());
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        put_u32(&mut out, t.name.len())?;
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` shape/data mismatch", t.name)));
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((meta, tensors))
}

pub fn write(path: impl AsRef<Path>, meta_json: &str, tensors: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(meta_json, tensors)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<(String, Vec<Tensor>)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_classifier(state: &ClassifierState, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::to_string(&state.arch).expect("architecture serializes");
    write(path, &meta, &state.params)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierState> {
    let (meta, tensors) = read(path)?;
    let arch: Architecture = serde_json::from_str(&meta)
        .map_err(|e| Error::Checkpoint(format!("bad architecture descriptor: {e}")))?;
    let template = ClassifierState::zeros(arch)?;
    if template.params.len() != tensors.len()
        || template
            .params
            .iter()
            .zip(&tensors)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(Error::Checkpoint(
            "tensor list does not match the architecture".into(),
        ));
    }
    Ok(ClassifierState {
        arch: template.arch,
        params: tensors,
    })
}
