//! Versioned weight file: magic `NNW1`, a model tag, named shaped f32
//! tensors, and a trailing CRC32 over everything before it.

use crate::layers::Params;
use crate::tensor::Real;
use crate::NnError;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NNW1";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize every state tensor of `model` (visit order) with a model tag.
pub fn save_model<T: Real>(model: &mut dyn Params<T>, tag: &str) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_state("model", &mut |name, t| {
        entries.push((name.to_string(), t.shape.clone(), t.map_to_f32()));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let tag_bytes = tag.as_bytes();
    assert!(tag_bytes.len() <= u8::MAX as usize, "tag too long");
    out.push(tag_bytes.len() as u8);
    out.extend_from_slice(tag_bytes);
    put_u32(&mut out, entries.len() as u32);
    for (name, shape, values) in &entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(shape.len() as u8);
        for d in shape {
            put_u32(&mut out, *d as u32);
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub struct WeightFile {
    pub tag: String,
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format("truncated weight file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse and checksum-verify a weight file.
pub fn parse(bytes: &[u8]) -> Result<WeightFile, NnError> {
    if bytes.len() < 13 {
        return Err(NnError::Format("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(NnError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Format("bad magic (expected NNW1)".into()));
    }
    let tag_len = r.u8()? as usize;
    let tag = String::from_utf8(r.take(tag_len)?.to_vec())
        .map_err(|_| NnError::Format("tag is not utf-8".into()))?;
    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NnError::Format("name is not utf-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.insert(name, (shape, values));
    }
    if r.pos != body.len() {
        return Err(NnError::Format("trailing bytes after entries".into()));
    }
    Ok(WeightFile { tag, entries })
}

/// Load weights into `model`, checking that every state tensor matches by
/// name and shape. Returns the stored model tag.
pub fn load_model<T: Real>(bytes: &[u8], model: &mut dyn Params<T>) -> Result<String, NnError> {
    let file = parse(bytes)?;
    let mut missing: Vec<String> = Vec::new();
    let mut used = 0usize;
    let mut shape_err: Option<NnError> = None;
    model.visit_state("model", &mut |name, t| {
        if shape_err.is_some() {
            return;
        }
        match file.entries.get(name) {
            None => missing.push(name.to_string()),
            Some((shape, values)) => {
                if *shape != t.shape {
                    shape_err = Some(NnError::Shape {
                        layer: name.to_string(),
                        expected: t.shape.clone(),
                        got: shape.clone(),
                    });
                    return;
                }
                for (dst, src) in t.data.iter_mut().zip(values.iter()) {
                    *dst = T::from_f32(*src);
                }
                used += 1;
            }
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(NnError::Format(format!(
            "weight file lacks tensors: {}",
            missing.join(", ")
        )));
    }
    if used != file.entries.len() {
        return Err(NnError::Format(format!(
            "weight file has {} unused tensors (architecture mismatch)",
            file.entries.len() - used
        )));
    }
    Ok(file.tag)
}

pub fn save_to_file<T: Real>(
    path: &Path,
    model: &mut dyn Params<T>,
    tag: &str,
) -> Result<(), NnError> {
    std::fs::write(path, save_model(model, tag))?;
    Ok(())
}

pub fn load_from_file<T: Real>(path: &Path, model: &mut dyn Params<T>) -> Result<String, NnError> {
    let bytes = std::fs::read(path)?;
    load_model(&bytes, model)
}
