//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SGNW"  u32 version
//! plan:   u32 stage count, u64 per stage, u64 squeeze_k, u64 input_channels,
//!         u8 enable_msfrb, u8 enable_am, u64 conv_kernel
//! u32 tensor count
//! per tensor: u16 name length, name (UTF-8), u8 rank, u64 per dim, f64 per value
//! ```
//!
//! Every tensor of the store is written, BatchNorm running statistics
//! included.

use std::path::Path;

use thiserror::Error;

use crate::model::{ChannelPlan, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a weight file: bad magic")]
    Magic,
    #[error("unsupported weight file version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("malformed weight file at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("channel plan mismatch: file has {found:?}, model has {expected:?}")]
    Plan {
        expected: Box<ChannelPlan>,
        found: Box<ChannelPlan>,
    },
    #[error("tensor {index}: {reason}")]
    Tensor { index: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, WeightsError>;

/// Decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub plan: ChannelPlan,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_plan(out: &mut Vec<u8>, plan: &ChannelPlan) {
    out.extend((plan.stage_channels.len() as u32).to_le_bytes());
    for &c in &plan.stage_channels {
        out.extend((c as u64).to_le_bytes());
    }
    out.extend((plan.squeeze_k as u64).to_le_bytes());
    out.extend((plan.input_channels as u64).to_le_bytes());
    out.push(plan.enable_msfrb as u8);
    out.push(plan.enable_am as u8);
    out.extend((plan.conv_kernel as u64).to_le_bytes());
}

pub fn encode<N: Network>(net: &N) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    put_plan(&mut out, net.plan());
    let store = net.store();
    out.extend((store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(WeightsError::Truncated {
                offset: self.bytes.len(),
                what: what.to_string(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const K: usize>(&mut self, what: &str) -> Result<[u8; K]> {
        Ok(self.take(K, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| WeightsError::Malformed {
            offset: at,
            reason: format!("{what} {v} does not fit in memory"),
        })
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WeightsError::Malformed {
                offset: at,
                reason: format!("{what} flag byte {b}"),
            }),
        }
    }
}

fn read_plan(r: &mut Reader<'_>) -> Result<ChannelPlan> {
    let stages = r.u32("plan stage count")? as usize;
    let stage_channels = (0..stages)
        .map(|_| r.usize("plan stage channels"))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelPlan {
        stage_channels,
        squeeze_k: r.usize("plan squeeze_k")?,
        input_channels: r.usize("plan input_channels")?,
        enable_msfrb: r.flag("plan enable_msfrb")?,
        enable_am: r.flag("plan enable_am")?,
        conv_kernel: r.usize("plan conv_kernel")?,
    })
}

pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(WeightsError::Magic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WeightsError::Version { found: version });
    }
    let plan = read_plan(&mut r)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u16(&format!("tensor {i} name length"))? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, &format!("tensor {i} name"))?)
            .map_err(|e| WeightsError::Malformed {
                offset: at,
                reason: format!("tensor {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u8(&format!("{name} rank"))? as usize;
        let shape = (0..rank)
            .map(|_| r.usize(&format!("{name} dims")))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(8)).ok_or(WeightsError::Malformed {
            offset: r.pos,
            reason: format!("{name} shape {shape:?} overflows"),
        })?;
        let payload = r.take(bytes_needed, &format!("{name} payload"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| WeightsError::Tensor {
            index: i,
            reason: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Malformed {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(WeightFile { plan, tensors })
}

/// Copies decoded tensors into `net`. Nothing is modified unless the plan,
/// names and shapes all match.
pub fn apply<N: Network>(net: &mut N, file: WeightFile) -> Result<()> {
    if &file.plan != net.plan() {
        return Err(WeightsError::Plan {
            expected: Box::new(net.plan().clone()),
            found: Box::new(file.plan),
        });
    }
    let store = net.store();
    if file.tensors.len() != store.len() {
        return Err(WeightsError::Tensor {
            index: file.tensors.len().min(store.len()),
            reason: format!("file has {} tensors, model has {}", file.tensors.len(), store.len()),
        });
    }
    for (i, ((name, t), (want, have))) in file.tensors.iter().zip(store.iter()).enumerate() {
        if name != want || t.shape() != have.shape() {
            return Err(WeightsError::Tensor {
                index: i,
                reason: format!("file has {name} {:?}, model has {want} {:?}", t.shape(), have.shape()),
            });
        }
    }
    let store = net.store_mut();
    for (name, t) in file.tensors {
        store.set(&name, t).expect("names and shapes checked");
    }
    Ok(())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> WeightsError + '_ {
    move |source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_weights<N: Network>(net: &N, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(io(path))
}

/// Reads a weight file without a model to check it against.
pub fn read_weights(path: &Path) -> Result<WeightFile> {
    decode(&std::fs::read(path).map_err(io(path))?)
}

pub fn load_weights<N: Network>(net: &mut N, path: &Path) -> Result<()> {
    apply(net, read_weights(path)?)
}
