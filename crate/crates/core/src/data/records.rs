//! Persisted tokenizations: per image, the class label, the seed that
//! regenerates its `T` noise tensors, and `T x h x w` code indices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Reader};
use crate::error::{Error, Result};

const SECTION: &str = "records";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordGeometry {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub codebook_size: usize,
}

impl RecordGeometry {
    pub fn codes_per_record(&self) -> usize {
        self.steps * self.height * self.width
    }

    fn payload_len(&self) -> usize {
        4 + 8 + 2 * self.codes_per_record()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredRecord {
    pub label: u32,
    pub noise_seed: u64,
    /// Step-major: `codes[(t - 1) * h * w + i]`.
    pub codes: Vec<u16>,
}

impl StoredRecord {
    /// Codes of step `t` (1-based).
    pub fn step_codes(&self, geometry: &RecordGeometry, t: usize) -> &[u16] {
        let n = geometry.height * geometry.width;
        &self.codes[(t - 1) * n..t * n]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordSet {
    pub geometry: RecordGeometry,
    pub records: Vec<StoredRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    section: String,
    #[serde(flatten)]
    geometry: RecordGeometry,
    count: usize,
}

impl RecordSet {
    pub fn new(geometry: RecordGeometry) -> Self {
        Self {
            geometry,
            records: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.codebook_size == 0 || g.codebook_size > usize::from(u16::MAX) + 1 {
            return Err(Error::invalid(
                "records",
                format!("codebook size {} not representable", g.codebook_size),
            ));
        }
        for (index, r) in self.records.iter().enumerate() {
            if r.codes.len() != g.codes_per_record() {
                return Err(Error::Record {
                    index,
                    msg: format!("{} codes, geometry needs {}", r.codes.len(), g.codes_per_record()),
                });
            }
            if let Some(c) = r.codes.iter().find(|&&c| usize::from(c) >= g.codebook_size) {
                return Err(Error::Record {
                    index,
                    msg: format!("code {c} >= codebook size {}", g.codebook_size),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        container::write_header(
            &mut out,
            &Manifest {
                section: SECTION.into(),
                geometry: self.geometry,
                count: self.records.len(),
            },
        )?;
        for r in &self.records {
            out.extend_from_slice(&(self.geometry.payload_len() as u64).to_le_bytes());
            out.extend_from_slice(&r.label.to_le_bytes());
            out.extend_from_slice(&r.noise_seed.to_le_bytes());
            for c in &r.codes {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, mut reader): (Manifest, _) = Reader::open(bytes, "records")?;
        if manifest.section != SECTION {
            return Err(Error::format(
                "records",
                8,
                format!("section {:?} is not {SECTION:?}", manifest.section),
            ));
        }
        let geometry = manifest.geometry;
        let expected = geometry.payload_len();
        let mut records = Vec::with_capacity(manifest.count.min(1 << 20));
        for index in 0..manifest.count {
            let len = reader.u64().map_err(|e| Error::Record {
                index,
                msg: e.to_string(),
            })? as usize;
            if len != expected {
                return Err(Error::Record {
                    index,
                    msg: format!("length field {len} does not match geometry ({expected} bytes)"),
                });
            }
            let payload = reader.take(len).map_err(|e| Error::Record {
                index,
                msg: e.to_string(),
            })?;
            let label = u32::from_le_bytes(payload[..4].try_into().unwrap());
            let noise_seed = u64::from_le_bytes(payload[4..12].try_into().unwrap());
            let codes = payload[12..]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            records.push(StoredRecord {
                label,
                noise_seed,
                codes,
            });
        }
        reader.finish()?;
        let set = Self { geometry, records };
        set.validate()?;
        Ok(set)
    }
}

pub fn save_records(path: impl AsRef<Path>, set: &RecordSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<RecordSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RecordSet::from_bytes(&bytes)
}
