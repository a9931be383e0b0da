//! "VXCK" network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VXCK" | version u16 | spec_len u32 | spec text (UTF-8, `key = value` lines, key-sorted)
//! | param_count u32 | param record * param_count
//! | stats_count u32 | stats record * stats_count
//! record = name_len u32 | name (UTF-8) | rank u32 | extent u32 * rank | f32 * product(extents)
//! ```
//!
//! Every batch-norm layer contributes two stats records,
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

/// Network hyperparameters that round-trip through the checkpoint text block.
pub trait SpecText: Sized {
    fn to_kv(&self) -> BTreeMap<String, String>;
    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self>;
}

/// Renders key-sorted `key = value` lines.
pub fn render_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if kv.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(kv)
}

pub(crate) fn kv_get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    raw.parse().map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

pub(crate) fn kv_list<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    let raw = kv.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("invalid list item `{s}` for `{key}`"))))
        .collect()
}

pub(crate) fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Decoded checkpoint contents before they are bound to a network.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub spec: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
    pub stats: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn from_store(spec: BTreeMap<String, String>, store: &ParamStore) -> Self {
        let params = store.iter().map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"))).collect();
        let mut stats = Vec::new();
        for s in store.stats() {
            let c = s.mean.len();
            stats.push((format!("{}{MEAN_SUFFIX}", s.name), Tensor::new([c], s.mean.clone()).expect("valid shape")));
            stats.push((format!("{}{VAR_SUFFIX}", s.name), Tensor::new([c], s.var.clone()).expect("valid shape")));
        }
        Self { spec, params, stats }
    }

    /// Copies parameters and running statistics into `store`, matching by
    /// name and requiring identical shapes and complete coverage.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, network expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store.find(name).ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
            dst.zero_grad();
        }
        if self.stats.len() != 2 * store.stats().len() {
            return Err(Error::Format("running-stats block does not match the network".into()));
        }
        for s in store.stats_mut() {
            for (suffix, dst) in [(MEAN_SUFFIX, &mut s.mean), (VAR_SUFFIX, &mut s.var)] {
                let key = format!("{}{suffix}", s.name);
                let (_, t) = self
                    .stats
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Format(format!("missing stats record `{key}`")))?;
                if t.len() != dst.len() {
                    return Err(Error::Format(format!("stats record `{key}` has the wrong length")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = render_kv(&self.spec);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for block in [&self.params, &self.stats] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            for (name, t) in block {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &e in t.shape() {
                    out.extend_from_slice(&(e as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"VXCK\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = u16::from_le_bytes(read_array(&mut r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text = read_string(&mut r, "spec block")?;
        let spec = parse_kv(&text).map_err(|e| Error::Format(format!("spec block: {e}")))?;
        let params = read_records(&mut r, "parameter")?;
        let stats = read_records(&mut r, "stats")?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { spec, params, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r, what)?) as usize)
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)?;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b, what)?;
    String::from_utf8(b).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

fn read_records(r: &mut impl Read, what: &str) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r, what)?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = read_string(r, what)?;
        let rank = read_u32(r, what)?;
        if rank > 8 {
            return Err(Error::Format(format!("record `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r, what)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read_exact(r, &mut bytes, &name)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
