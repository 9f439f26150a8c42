//! Binary checkpoint format.
//!
//! ```text
//! "ADSTCKPT"  u32 version  u32 n_records
//! per record: u32 name_len, name (UTF-8), u32 rank, rank × u32 dims,
//!             prod(dims) × f64 payload
//! ```
//!
//! All integers and floats are little-endian. Two metadata records come
//! first: `meta.arch` (the encoded [`ArchConfig`]) and `meta.route`
//! (0 = source attention, 1 = target attention for target-domain data).
//! Parameter records follow in registration order, including batch-norm
//! running statistics.

use std::path::Path;

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::{AdastModel, ArchConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ARCH_RECORD: &str = "meta.arch";
const ROUTE_RECORD: &str = "meta.route";

/// A model plus the attention path its target-domain predictions use.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AdastModel,
    pub target_route: Domain,
}

impl Checkpoint {
    pub fn new(model: AdastModel, target_route: Domain) -> Self {
        Self {
            model,
            target_route,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let params = self.model.params.entries();
        out.extend_from_slice(&((params.len() + 2) as u32).to_le_bytes());
        let arch = self.model.arch().encode();
        write_record(&mut out, ARCH_RECORD, &[arch.len()], &arch);
        let route = [f64::from(u8::from(self.target_route == Domain::Target))];
        write_record(&mut out, ROUTE_RECORD, &[1], &route);
        for e in params {
            write_record(&mut out, &e.name, e.tensor.shape(), e.tensor.data());
        }
        out
    }

    /// Rebuilds the architecture from `meta.arch` and overwrites every
    /// parameter by name. Missing, extra or misshapen records are errors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            records.push(r.record()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }

        let mut meta = |name: &str| -> Result<Tensor> {
            let i = records.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::Compatibility {
                    what: "checkpoint",
                    msg: format!("missing record {name}"),
                }
            })?;
            Ok(records.remove(i).1)
        };
        let arch_values = meta(ARCH_RECORD)?;
        let arch = ArchConfig::decode(arch_values.data()).ok_or_else(|| Error::Compatibility {
            what: "checkpoint",
            msg: "unreadable architecture record".into(),
        })?;
        let target_route = match meta(ROUTE_RECORD)?.data() {
            [0.0] => Domain::Source,
            [1.0] => Domain::Target,
            other => {
                return Err(Error::Compatibility {
                    what: "checkpoint",
                    msg: format!("bad route record {other:?}"),
                })
            }
        };

        let mut model = AdastModel::new(arch, 0)?;
        if records.len() != model.params.len() {
            return Err(Error::Compatibility {
                what: "checkpoint",
                msg: format!(
                    "{} parameter records, architecture has {}",
                    records.len(),
                    model.params.len()
                ),
            });
        }
        for (name, tensor) in records {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Compatibility {
                    what: "checkpoint",
                    msg: format!("unknown parameter {name}"),
                })?;
            let slot = model.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(Error::Compatibility {
                    what: "checkpoint",
                    msg: format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                });
            }
            slot.data_mut().copy_from_slice(tensor.data());
        }
        Ok(Self {
            model,
            target_route,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                msg: format!(
                    "truncated: wanted {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "record name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: at,
                msg: format!("{name}: dimensions overflow"),
            })?;
        let payload = self.take(numel.saturating_mul(8))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&dims, data).map_err(|e| Error::Format {
            offset: at,
            msg: format!("{name}: {e}"),
        })?;
        Ok((name, tensor))
    }
}
