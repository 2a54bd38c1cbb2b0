//! Single-file checkpoints.
//!
//! Layout (little-endian): magic `HPFFCKPT`, u32 version, u32 header length,
//! JSON header, u32 entry count, then per entry: u32 name length, UTF-8 name,
//! u32 rank, u32 dims, and `prod(dims)` f32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_preset, Model};
use crate::partition::Partition;
use crate::tensor::Element;

const MAGIC: &[u8; 8] = b"HPFFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub method: String,
    pub modules: usize,
    pub config_hash: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub entries: Vec<Entry>,
}

fn to_f32<T: Element>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

fn model_entries<T: Element>(model: &Model<T>, out: &mut Vec<Entry>) {
    for s in model.norm_stats() {
        let c = s.stats.mean().len();
        out.push(Entry {
            name: format!("{}.running_mean", s.name),
            shape: vec![c],
            values: to_f32(&s.stats.mean()),
        });
        out.push(Entry {
            name: format!("{}.running_var", s.name),
            shape: vec![c],
            values: to_f32(&s.stats.var()),
        });
    }
}

impl Checkpoint {
    /// Every parameter of the partition plus batch-norm running statistics.
    pub fn from_partition<T: Element>(p: &Partition<T>, header: CheckpointHeader) -> Self {
        let mut entries: Vec<Entry> = p
            .all_params()
            .iter()
            .map(|q| Entry {
                name: q.name().to_string(),
                shape: q.shape().dims().to_vec(),
                values: to_f32(&q.values()),
            })
            .collect();
        model_entries(&p.model, &mut entries);
        Self { header, entries }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format(path, "entry name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, values });
        }
        if r.at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies matching entries into `model`. Every backbone parameter and
    /// running statistic must be present with the same shape.
    pub fn restore_model<T: Element>(&self, model: &Model<T>) -> Result<()> {
        let lit = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<T>>();
        for p in model.params() {
            let e = self.get(p.name()).ok_or_else(|| {
                Error::contract(format!("checkpoint lacks parameter {}", p.name()))
            })?;
            if e.shape != p.shape().dims() {
                return Err(Error::contract(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    p.name(),
                    e.shape,
                    p.shape()
                )));
            }
            p.set_values(lit(&e.values))?;
        }
        for s in model.norm_stats() {
            let get = |suffix: &str| {
                let name = format!("{}.{suffix}", s.name);
                self.get(&name)
                    .filter(|e| e.values.len() == s.stats.mean().len())
                    .ok_or_else(|| Error::contract(format!("checkpoint lacks or misshapes {name}")))
            };
            s.stats.set(lit(&get("running_mean")?.values), lit(&get("running_var")?.values));
        }
        Ok(())
    }

    /// Rebuilds the backbone described by the header and loads its weights.
    pub fn build_model<T: Element>(&self) -> Result<Model<T>> {
        let h = &self.header;
        let model = build_preset(&h.arch, &h.input_shape, h.num_classes, 0)?;
        self.restore_model(&model)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
