//! The `RDPM0001` container shared by checkpoints and record files.
//!
//! Layout: 8 magic bytes, a little-endian `u64` manifest length, the JSON
//! manifest, then a section-specific little-endian body. The manifest
//! always carries a `section` tag naming the body layout.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"RDPM0001";

pub fn write_header<M: Serialize>(out: &mut Vec<u8>, manifest: &M) -> Result<()> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::invalid("container", e.to_string()))?;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

/// Cursor over a container body with offset-aware errors.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Validates the magic, parses the manifest and leaves the cursor at
    /// the start of the body.
    pub fn open<M: DeserializeOwned>(bytes: &'a [u8], what: &'static str) -> Result<(M, Self)> {
        let mut r = Self { bytes, pos: 0, what };
        let magic = r.take(8)?;
        if magic != MAGIC {
            let msg = if magic.starts_with(b"RDPM") {
                format!("unsupported container version {:?}", String::from_utf8_lossy(magic))
            } else {
                "not an RDPM container".to_string()
            };
            return Err(Error::format(what, 0, msg));
        }
        let len = r.u64()? as usize;
        let start = r.pos;
        let json = r.take(len)?;
        let manifest =
            serde_json::from_slice(json).map_err(|e| Error::format(what, start as u64, format!("manifest: {e}")))?;
        Ok((manifest, r))
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::format(self.what, self.pos as u64, msg)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!("truncated: need {n} bytes, have {}", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamsManifest<C> {
    section: String,
    config: C,
    tensors: Vec<TensorEntry>,
}

/// Serializes a model as its config plus every parameter in set order.
pub fn params_to_bytes<C: Serialize>(section: &str, config: &C, params: &ParamSet) -> Result<Vec<u8>> {
    let manifest = ParamsManifest {
        section: section.to_string(),
        config,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let mut out = Vec::with_capacity(params.num_values() * 8 + 4096);
    write_header(&mut out, &manifest)?;
    for p in params.iter() {
        put_f64s(&mut out, &p.data);
    }
    Ok(out)
}

/// Inverse of [`params_to_bytes`]; `section` must match.
pub fn params_from_bytes<C: DeserializeOwned>(
    section: &str,
    bytes: &[u8],
    what: &'static str,
) -> Result<(C, ParamSet)> {
    let (manifest, mut reader): (ParamsManifest<serde_json::Value>, _) = Reader::open(bytes, what)?;
    if manifest.section != section {
        return Err(Error::format(
            what,
            8,
            format!("section {:?} where {section:?} was expected", manifest.section),
        ));
    }
    let config =
        serde_json::from_value(manifest.config).map_err(|e| Error::format(what, 16, format!("config: {e}")))?;
    let mut params = ParamSet::new();
    for entry in manifest.tensors {
        let n = entry.shape.iter().product();
        let data = reader.f64s(n)?;
        if params.find(&entry.name).is_some() {
            return Err(reader.error(format!("duplicate tensor {}", entry.name)));
        }
        params.add(entry.name, &entry.shape, data);
    }
    reader.finish()?;
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct M {
        section: String,
        n: u32,
    }

    #[test]
    fn header_round_trip() {
        let m = M {
            section: "x".into(),
            n: 3,
        };
        let mut out = Vec::new();
        write_header(&mut out, &m).unwrap();
        put_f64s(&mut out, &[1.5, -2.0]);
        let (back, mut r): (M, _) = Reader::open(&out, "test").unwrap();
        assert_eq!(back, m);
        assert_eq!(r.f64s(2).unwrap(), vec![1.5, -2.0]);
        r.finish().unwrap();
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut out = Vec::new();
        write_header(
            &mut out,
            &M {
                section: "x".into(),
                n: 1,
            },
        )
        .unwrap();
        out[7] = b'2';
        let err = Reader::open::<M>(&out, "test").err().unwrap();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
