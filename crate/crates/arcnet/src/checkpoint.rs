//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "ARCNETCK"
//! version u32      1
//! config  u32 length + JSON (the model configuration)
//! meta    u32 length + JSON (epoch, validation loss, seed, note)
//! count   u32      number of tensors
//! tensor  u16 name length + UTF-8 name
//!         u8  kind (0 = parameter, 1 = state buffer, 2 = extra)
//!         u8  rank, then u32 dims
//!         f64 values (little-endian), product(dims) of them
//! ```
//!
//! Values are stored as raw IEEE-754 doubles, so a save/load round trip is
//! bit-exact and a restored model reproduces the original logits.

use crate::error::{Error, Result};
use crate::model::{ArcNet, ArcNetConfig};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ARCNETCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
    #[serde(default)]
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ArcNetConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub extras: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot a model's parameters and state buffers.
    pub fn from_model(model: &ArcNet, meta: CheckpointMeta) -> Checkpoint {
        let collect = |set: &crate::netblocks::ParamSet| -> Vec<NamedTensor> {
            set.entries()
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: set.values()[e.offset..e.offset + e.len()].to_vec(),
                })
                .collect()
        };
        Checkpoint {
            config: model.config().clone(),
            meta,
            params: collect(model.params()),
            buffers: collect(model.buffers()),
            extras: Vec::new(),
        }
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn restore_model(&self) -> Result<ArcNet> {
        let mut model = ArcNet::build(self.config.clone(), 0)?;
        restore_set(&self.params, model.params_mut(), "parameter")?;
        restore_set(&self.buffers, model.buffers_mut(), "buffer")?;
        Ok(model)
    }

    pub fn push_extra(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.extras.push(NamedTensor {
            name: name.into(),
            shape,
            values,
        });
    }

    pub fn extra(&self, name: &str) -> Option<&NamedTensor> {
        self.extras.iter().find(|t| t.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config_json =
            serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&config_json);
        let meta_json =
            serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_json);

        let total = self.params.len() + self.buffers.len() + self.extras.len();
        out.extend_from_slice(&(total as u32).to_le_bytes());
        for (kind, tensors) in [(0u8, &self.params), (1, &self.buffers), (2, &self.extras)] {
            for t in tensors {
                let name = t.name.as_bytes();
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name);
                out.push(kind);
                out.push(t.shape.len() as u8);
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                let expect: usize = t.shape.iter().product();
                debug_assert_eq!(expect, t.values.len());
                for v in &t.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let config_len = r.u32()? as usize;
        let config: ArcNetConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut extras = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let kind = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = NamedTensor {
                name,
                shape,
                values,
            };
            match kind {
                0 => params.push(t),
                1 => buffers.push(t),
                2 => extras.push(t),
                k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            meta,
            params,
            buffers,
            extras,
        })
    }
}

fn restore_set(
    tensors: &[NamedTensor],
    set: &mut crate::netblocks::ParamSet,
    what: &str,
) -> Result<()> {
    let entries = set.entries().to_vec();
    if tensors.len() != entries.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} {what} tensors, model expects {}",
            tensors.len(),
            entries.len()
        )));
    }
    for e in &entries {
        let t = tensors.iter().find(|t| t.name == e.name).ok_or_else(|| {
            Error::ConfigMismatch(format!("checkpoint is missing {what} '{}'", e.name))
        })?;
        if t.shape != e.shape {
            return Err(Error::ConfigMismatch(format!(
                "{what} '{}' has shape {:?}, model expects {:?}",
                e.name, t.shape, e.shape
            )));
        }
        set.values_mut()[e.offset..e.offset + e.len()].copy_from_slice(&t.values);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
