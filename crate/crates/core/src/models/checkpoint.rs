//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"SSMD1" | kind: u8 | S: u32 | D: u32 | n_dims: u32 | dims: [u32]
//! n_blocks: u32 | per block: name_len: u32, name, rank: u32, shape: [u32], data: [f64]
//! ```
//!
//! A JSON sidecar (`<path>.json`) carries human-readable hyperparameters;
//! loading never depends on it.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use super::hybrid::{HybridConfig, HybridModel, HybridParams, Tensor};
use super::tabular::{DraftMode, TabularModel};
use super::DraftTargetModel;
use crate::error::{Error, Result};
use crate::types::SequenceSpec;

pub const MAGIC: &[u8; 5] = b"SSMD1";

/// Blocks with this prefix are carried alongside model parameters (optimizer
/// state, step counters) and are not part of the model.
pub const EXTRA_PREFIX: &str = "opt.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Hybrid = 0,
    Tabular = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ModelKind,
    pub alphabet: u32,
    pub len: u32,
    pub dims: Vec<u32>,
    pub blocks: Vec<Tensor>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(c.kind as u8);
    put_u32(&mut out, c.alphabet);
    put_u32(&mut out, c.len);
    put_u32(&mut out, to_u32(c.dims.len())?);
    for &d in &c.dims {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, to_u32(c.blocks.len())?);
    for b in &c.blocks {
        if b.shape.iter().product::<usize>() != b.data.len() {
            return Err(Error::Format(format!("block '{}' shape does not match data", b.name)));
        }
        put_u32(&mut out, to_u32(b.name.len())?);
        out.extend_from_slice(b.name.as_bytes());
        put_u32(&mut out, to_u32(b.shape.len())?);
        for &s in &b.shape {
            put_u32(&mut out, to_u32(s)?);
        }
        for &v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Container> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(5)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let kind = match c.take(1)?[0] {
        0 => ModelKind::Hybrid,
        1 => ModelKind::Tabular,
        k => return Err(Error::Format(format!("unknown model kind {k}"))),
    };
    let alphabet = c.u32()?;
    let len = c.u32()?;
    let nd = c.u32()? as usize;
    let dims = (0..nd).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let nb = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(nb.min(1 << 16));
    for _ in 0..nb {
        let nl = c.u32()? as usize;
        let name = String::from_utf8(c.take(nl)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Tensor { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(Container {
        kind,
        alphabet,
        len,
        dims,
        blocks,
    })
}

pub fn write_container(path: &Path, c: &Container, sidecar: &serde_json::Value) -> Result<()> {
    let bytes = encode(c)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn hybrid_container(model: &HybridModel, extras: Vec<Tensor>) -> Result<Container> {
    let cfg = model.config();
    let mut blocks = model.params().tensors().to_vec();
    blocks.extend(extras);
    Ok(Container {
        kind: ModelKind::Hybrid,
        alphabet: to_u32(cfg.alphabet)?,
        len: to_u32(cfg.len)?,
        dims: vec![
            to_u32(cfg.hidden)?,
            to_u32(cfg.heads)?,
            to_u32(cfg.nc_blocks)?,
            to_u32(cfg.c_blocks)?,
            to_u32(cfg.mlp_ratio)?,
        ],
        blocks,
    })
}

/// Saves a hybrid model plus `extras` (names must start with [`EXTRA_PREFIX`]).
pub fn save_hybrid(path: &Path, model: &HybridModel, extras: Vec<Tensor>, meta: serde_json::Value) -> Result<()> {
    if let Some(bad) = extras.iter().find(|t| !t.name.starts_with(EXTRA_PREFIX)) {
        return Err(Error::Format(format!("extra block '{}' lacks the '{EXTRA_PREFIX}' prefix", bad.name)));
    }
    let sidecar = json!({
        "format": "SSMD1",
        "kind": "hybrid",
        "config": model.config(),
        "num_params": model.params().num_params(),
        "meta": meta,
    });
    write_container(path, &hybrid_container(model, extras)?, &sidecar)
}

pub fn hybrid_from_container(c: Container) -> Result<(HybridModel, Vec<Tensor>)> {
    if c.kind != ModelKind::Hybrid {
        return Err(Error::Format("not a hybrid checkpoint".into()));
    }
    let [hidden, heads, nc_blocks, c_blocks, mlp_ratio] = c.dims[..] else {
        return Err(Error::Format(format!("hybrid header needs 5 dims, found {}", c.dims.len())));
    };
    let cfg = HybridConfig {
        alphabet: c.alphabet as usize,
        len: c.len as usize,
        hidden: hidden as usize,
        heads: heads as usize,
        nc_blocks: nc_blocks as usize,
        c_blocks: c_blocks as usize,
        mlp_ratio: mlp_ratio as usize,
    };
    let (extras, params): (Vec<Tensor>, Vec<Tensor>) = c.blocks.into_iter().partition(|t| t.name.starts_with(EXTRA_PREFIX));
    Ok((HybridModel::from_parts(cfg, HybridParams::from_tensors(params))?, extras))
}

pub fn load_hybrid(path: &Path) -> Result<(HybridModel, Vec<Tensor>)> {
    hybrid_from_container(read_container(path)?)
}

pub fn save_tabular(path: &Path, model: &TabularModel) -> Result<()> {
    let spec = model.spec();
    let (nc, cc) = model.block_counts();
    let eps = match model.mode() {
        DraftMode::ExactMarginal => -1.0,
        DraftMode::Perturbed { epsilon } => epsilon,
    };
    let c = Container {
        kind: ModelKind::Tabular,
        alphabet: to_u32(spec.alphabet())?,
        len: to_u32(spec.len())?,
        dims: vec![to_u32(nc)?, to_u32(cc)?],
        blocks: vec![
            Tensor {
                name: "joint".into(),
                shape: vec![model.joint().len()],
                data: model.joint().to_vec(),
            },
            Tensor {
                name: "draft_epsilon".into(),
                shape: vec![1],
                data: vec![eps],
            },
        ],
    };
    let sidecar = json!({
        "format": "SSMD1",
        "kind": "tabular",
        "alphabet": spec.alphabet(),
        "len": spec.len(),
        "draft_mode": model.mode(),
        "block_counts": [nc, cc],
    });
    write_container(path, &c, &sidecar)
}

pub fn load_tabular(path: &Path) -> Result<TabularModel> {
    let c = read_container(path)?;
    if c.kind != ModelKind::Tabular {
        return Err(Error::Format("not a tabular checkpoint".into()));
    }
    let spec = SequenceSpec::new(c.alphabet as usize, c.len as usize)?;
    let find = |n: &str| {
        c.blocks
            .iter()
            .find(|b| b.name == n)
            .ok_or_else(|| Error::Format(format!("missing block '{n}'")))
    };
    let joint = find("joint")?.data.clone();
    let eps = *find("draft_epsilon")?
        .data
        .first()
        .ok_or_else(|| Error::Format("empty draft_epsilon".into()))?;
    let mode = if eps < 0.0 {
        DraftMode::ExactMarginal
    } else {
        DraftMode::Perturbed { epsilon: eps }
    };
    let mut m = TabularModel::new(spec, joint, mode)?;
    if let [nc, cc] = c.dims[..] {
        m = m.with_block_counts(nc as usize, cc as usize);
    }
    Ok(m)
}
