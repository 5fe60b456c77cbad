//! Binary checkpoint container.
//!
//! Layout: the magic line `MSPCKPT1`, a text header, then raw little-endian
//! `f64` buffers back to back.
//!
//! ```text
//! MSPCKPT1
//! version 1
//! step <n>
//! config_bytes <b>
//! <b bytes of key = value text>
//! buffers <m>
//! <name> f64 <d0>x<d1>... <byte offset> <byte length>     (m lines)
//! end
//! <data>
//! ```
//!
//! Buffer names carry a section prefix: `param/`, `adam_m/`, `adam_v/`,
//! `ema/`. Offsets are relative to the first data byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::train::TrainState;
use crate::config::RunConfig;
use crate::error::{MspError, Result};
use crate::neural::{AdamWState, EmaTracker, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &str = "MSPCKPT1";
const VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub step: u64,
    pub config_text: String,
    pub buffers: BTreeMap<String, Tensor>,
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut header = format!(
        "{MAGIC}\nversion {VERSION}\nstep {}\nconfig_bytes {}\n{}buffers {}\n",
        c.step,
        c.config_text.len(),
        c.config_text,
        c.buffers.len()
    );
    let mut offset = 0usize;
    for (name, t) in &c.buffers {
        if name.contains(char::is_whitespace) {
            return Err(MspError::Contract(format!("buffer name '{name}' contains whitespace")));
        }
        let dims = t.shape().iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        let len = t.numel() * 8;
        header.push_str(&format!("{name} f64 {dims} {offset} {len}\n"));
        offset += len;
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for t in c.buffers.values() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let io = |e| MspError::io(path, e);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end =
            rest.iter().position(|&b| b == b'\n').ok_or_else(|| MspError::Incompatible("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| MspError::Incompatible("header is not UTF-8".into()))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| MspError::Incompatible(format!("expected '{key} <value>', found '{line}'")))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| MspError::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.line().ok() != Some(MAGIC) {
        return Err(MspError::Incompatible(format!("{}: bad magic", path.display())));
    }
    let version: u32 = cur.field("version")?;
    if version != VERSION {
        return Err(MspError::Incompatible(format!("container version {version}, expected {VERSION}")));
    }
    let step: u64 = cur.field("step")?;
    let config_bytes: usize = cur.field("config_bytes")?;
    let cfg_end = cur
        .pos
        .checked_add(config_bytes)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| MspError::Incompatible("config block truncated".into()))?;
    let config_text = std::str::from_utf8(&bytes[cur.pos..cfg_end])
        .map_err(|_| MspError::Incompatible("config block is not UTF-8".into()))?
        .to_string();
    cur.pos = cfg_end;
    let count: usize = cur.field("buffers")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = cur.line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        let bad = || MspError::Incompatible(format!("malformed buffer line '{line}'"));
        let [name, dtype, dims, off, len] = parts[..] else { return Err(bad()) };
        if dtype != "f64" {
            return Err(MspError::Incompatible(format!("unsupported dtype '{dtype}'")));
        }
        let shape: Vec<usize> = dims.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad())?;
        let off: usize = off.parse().map_err(|_| bad())?;
        let len: usize = len.parse().map_err(|_| bad())?;
        if shape.iter().product::<usize>() * 8 != len {
            return Err(bad());
        }
        entries.push((name.to_string(), shape, off, len));
    }
    if cur.line()? != "end" {
        return Err(MspError::Incompatible("missing header terminator".into()));
    }
    let data = &bytes[cur.pos..];
    let mut buffers = BTreeMap::new();
    for (name, shape, off, len) in entries {
        let chunk = off
            .checked_add(len)
            .and_then(|e| data.get(off..e))
            .ok_or_else(|| MspError::Incompatible(format!("buffer '{name}' out of range")))?;
        let vals = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        if buffers.insert(name.clone(), Tensor::new(shape, vals)?).is_some() {
            return Err(MspError::Incompatible(format!("duplicate buffer '{name}'")));
        }
    }
    Ok(Container { step, config_text, buffers })
}

fn section(buffers: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    buffers.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone()))).collect()
}

/// Replace every value in `like` from `found`, requiring identical names
/// and shapes.
fn fill(like: &ParamStore, found: BTreeMap<String, Tensor>, what: &str) -> Result<ParamStore> {
    if !like.names().eq(found.keys().map(String::as_str)) {
        return Err(MspError::Incompatible(format!("{what} buffer names do not match the model")));
    }
    let mut out = ParamStore::new();
    for ((name, proto), (_, t)) in like.iter().zip(found) {
        if proto.shape() != t.shape() {
            return Err(MspError::Incompatible(format!(
                "{what} '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                proto.shape()
            )));
        }
        out.insert(name, t.with_requires_grad(proto.requires_grad()))?;
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut buffers = BTreeMap::new();
    for (name, t) in state.model.params.iter() {
        let mut t = t.clone();
        t.zero_grad();
        buffers.insert(format!("param/{name}"), t);
    }
    for (name, t) in state.model.params.iter() {
        let shape = t.shape().to_vec();
        let m = state.optimizer.first[name].clone();
        let v = state.optimizer.second[name].clone();
        buffers.insert(format!("adam_m/{name}"), Tensor::new(shape.clone(), m)?);
        buffers.insert(format!("adam_v/{name}"), Tensor::new(shape, v)?);
    }
    for (name, t) in state.ema.shadow.iter() {
        buffers.insert(format!("ema/{name}"), t.clone());
    }
    write_container(path, &Container { step: state.step, config_text: state.config.to_text(), buffers })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let c = read_container(path)?;
    let config =
        RunConfig::parse(&c.config_text, None).map_err(|e| MspError::Incompatible(format!("embedded config: {e}")))?;
    let fresh = TrainState::new(&config)?;
    let params = fill(&fresh.model.params, section(&c.buffers, "param/"), "parameter")?;
    let moments = |prefix: &str| -> Result<BTreeMap<String, Vec<f64>>> {
        Ok(fill(&fresh.model.params, section(&c.buffers, prefix), prefix)?
            .iter()
            .map(|(k, v)| (k.to_string(), v.data().to_vec()))
            .collect())
    };
    let optimizer = AdamWState {
        config: fresh.optimizer.config,
        step: c.step,
        first: moments("adam_m/")?,
        second: moments("adam_v/")?,
    };
    let mut shadow = fill(&fresh.ema.shadow, section(&c.buffers, "ema/"), "EMA")?;
    for (_, t) in shadow.iter_mut() {
        t.set_requires_grad(false);
    }
    let ema = EmaTracker { shadow, ..fresh.ema };
    let mut model = fresh.model;
    model.params = params;
    Ok(TrainState { config, model, optimizer, ema, step: c.step })
}

/// Encoder-only weights for downstream use; decoder, heads, optimizer and
/// EMA state are dropped.
pub fn extract_encoder(state: &TrainState) -> ParamStore {
    state.model.encoder_params()
}

/// Write an encoder store alone (`param/` section only).
pub fn save_encoder(store: &ParamStore, config: &RunConfig, path: &Path) -> Result<()> {
    let buffers = store
        .iter()
        .map(|(k, v)| {
            let mut t = v.clone();
            t.zero_grad();
            (format!("param/{k}"), t)
        })
        .collect();
    write_container(path, &Container { step: 0, config_text: config.to_text(), buffers })
}

/// Encoder weights and configuration from either a full checkpoint or an
/// encoder-only file.
pub fn load_encoder(path: &Path) -> Result<(ParamStore, RunConfig)> {
    let c = read_container(path)?;
    let config =
        RunConfig::parse(&c.config_text, None).map_err(|e| MspError::Incompatible(format!("embedded config: {e}")))?;
    let fresh = TrainState::new(&config)?;
    let enc: BTreeMap<String, Tensor> = section(&c.buffers, "param/")
        .into_iter()
        .filter(|(k, _)| k.starts_with(super::model::ENCODER_PREFIX))
        .collect();
    Ok((fill(&fresh.model.encoder_params(), enc, "encoder")?, config))
}
