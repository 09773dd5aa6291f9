//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "FCGN"
//! version      u32
//! entry count  u32
//! entry*       name_len u32 | name (UTF-8) | dtype u8 | ndim u32 | dims u64 * ndim
//!              | payload_len u64 | payload
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u64, 3 = UTF-8 text (ndim 1, dim = byte length).

use std::fs;
use std::path::Path;

use crate::equilibrium::EquilibriumState;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::train::{ModelState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"FCGN";
pub const FORMAT_VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_U64: u8 = 2;
const TAG_TEXT: u8 = 3;

/// Payload of one table entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

/// Ordered `(name, entry)` table, the raw content of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntryTable {
    pub entries: Vec<(String, Entry)>,
}

impl EntryTable {
    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint {
                offset: 0,
                msg: format!("missing entry {name:?}"),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (tag, dims, payload): (u8, Vec<usize>, Vec<u8>) = match entry {
                Entry::F32(t) => (
                    TAG_F32,
                    t.shape().to_vec(),
                    t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                ),
                Entry::F64(v) => (
                    TAG_F64,
                    vec![v.len()],
                    v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                ),
                Entry::U64(v) => (
                    TAG_U64,
                    vec![v.len()],
                    v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                ),
                Entry::Text(s) => (TAG_TEXT, vec![s.len()], s.as_bytes().to_vec()),
            };
            out.push(tag);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: "bad magic bytes".into(),
            });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut table = EntryTable::default();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.err(start, "entry name is not UTF-8"))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let ndim = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u64("dimension")? as usize);
            }
            let payload_at = r.pos;
            let len = r.u64("payload length")? as usize;
            let payload = r.take(len, "payload")?;
            let elems: usize = dims.iter().product();
            let expect_len = |width: usize| -> Result<()> {
                if elems.checked_mul(width) != Some(len) {
                    return Err(r.err(payload_at, "payload length does not match shape"));
                }
                Ok(())
            };
            let entry = match tag {
                TAG_F32 => {
                    expect_len(4)?;
                    let data = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Entry::F32(Tensor::from_vec(&dims, data)?)
                }
                TAG_F64 => {
                    expect_len(8)?;
                    Entry::F64(
                        payload
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                }
                TAG_U64 => {
                    expect_len(8)?;
                    Entry::U64(
                        payload
                            .chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                }
                TAG_TEXT => {
                    expect_len(1)?;
                    Entry::Text(
                        std::str::from_utf8(payload)
                            .map_err(|_| r.err(payload_at, "text entry is not UTF-8"))?
                            .to_string(),
                    )
                }
                other => return Err(r.err(start, &format!("unknown dtype tag {other}"))),
            };
            table.push(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after last entry"));
        }
        Ok(table)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint {
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err(self.pos, &format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hyperparameters of the run; paths are not stored.
    pub config: TrainConfig,
    pub state: TrainState,
}

fn push_model(table: &mut EntryTable, prefix: &str, model: &ModelState) {
    for (kind, set) in [("param", &model.params), ("adam_m", &model.m), ("adam_v", &model.v)] {
        for (name, t) in set.iter() {
            table.push(format!("{prefix}.{kind}.{name}"), Entry::F32(t.clone()));
        }
    }
}

fn read_model(table: &EntryTable, prefix: &str) -> Result<ModelState> {
    let mut sets = [ParameterSet::new(), ParameterSet::new(), ParameterSet::new()];
    for (name, entry) in &table.entries {
        let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) else {
            continue;
        };
        let (kind, param) = rest.split_once('.').ok_or_else(|| Error::Checkpoint {
            offset: 0,
            msg: format!("malformed entry name {name:?}"),
        })?;
        let slot = match kind {
            "param" => 0,
            "adam_m" => 1,
            "adam_v" => 2,
            _ => {
                return Err(Error::Checkpoint {
                    offset: 0,
                    msg: format!("unknown tensor kind in {name:?}"),
                })
            }
        };
        let Entry::F32(t) = entry else {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("{name:?} is not an f32 tensor"),
            });
        };
        sets[slot].insert(param, t.clone())?;
    }
    let [params, m, v] = sets;
    if params.is_empty() || !params.same_layout(&m) || !params.same_layout(&v) {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: format!("{prefix}: parameters and optimizer moments disagree"),
        });
    }
    Ok(ModelState { params, m, v })
}

impl Checkpoint {
    pub fn to_table(&self) -> EntryTable {
        let mut table = EntryTable::default();
        table.push("config", Entry::Text(self.config.snapshot_text()));
        table.push("step", Entry::U64(vec![self.state.step]));
        let eq = &self.state.eq;
        table.push("equilibrium", Entry::F64(vec![eq.k, eq.gamma, eq.lambda_k]));
        table.push("equilibrium.step", Entry::U64(vec![eq.step]));
        push_model(&mut table, "g", &self.state.g);
        push_model(&mut table, "d", &self.state.d);
        table
    }

    pub fn from_table(table: &EntryTable) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint {
            offset: 0,
            msg: msg.to_string(),
        };
        let Entry::Text(config) = table.get("config")? else {
            return Err(bad("config entry is not text"));
        };
        let config = TrainConfig::parse(config)?;
        let Entry::U64(step) = table.get("step")? else {
            return Err(bad("step entry is not u64"));
        };
        let Entry::F64(eq) = table.get("equilibrium")? else {
            return Err(bad("equilibrium entry is not f64"));
        };
        let Entry::U64(eq_step) = table.get("equilibrium.step")? else {
            return Err(bad("equilibrium.step entry is not u64"));
        };
        let (&[step], &[k, gamma, lambda_k], &[eq_step]) = (&step[..], &eq[..], &eq_step[..])
        else {
            return Err(bad("scalar entries have the wrong length"));
        };
        let eq = EquilibriumState {
            k,
            gamma,
            lambda_k,
            step: eq_step,
        };
        eq.validate()?;
        Ok(Checkpoint {
            config,
            state: TrainState {
                step,
                g: read_model(table, "g")?,
                d: read_model(table, "d")?,
                eq,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_table().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_table(&EntryTable::from_bytes(bytes)?)
    }
}

/// Writes atomically: a temporary sibling file is renamed over `path`, so an
/// interrupted write never replaces the previous checkpoint.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("fcgn.tmp");
    fs::write(&tmp, checkpoint.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EntryTable {
        let mut t = EntryTable::default();
        t.push(
            "w",
            Entry::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)),
        );
        t.push("k", Entry::F64(vec![0.25, f64::MIN_POSITIVE]));
        t.push("n", Entry::U64(vec![7]));
        t.push("cfg", Entry::Text("a = 1\n".into()));
        t
    }

    #[test]
    fn table_round_trip() {
        let t = table();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"FCGN");
        assert_eq!(EntryTable::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = table().to_bytes();
        for cut in [0, 3, 8, 11, 20, bytes.len() - 1] {
            let err = EntryTable::from_bytes(&bytes[..cut]).unwrap_err();
            match err {
                Error::Checkpoint { offset, .. } => assert!(offset <= cut),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let mut bytes = table().to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            EntryTable::from_bytes(&bytes),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn bad_magic_refused() {
        let mut bytes = table().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            EntryTable::from_bytes(&bytes),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }
}
