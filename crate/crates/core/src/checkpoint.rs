//! Binary checkpoints: a JSON header followed by named f32 tensors.
//!
//! Layout (little endian):
//! `"MFVL" | u32 version | u32 header_len | header JSON | records...`
//! where each record is
//! `u16 name_len | name | u8 dtype (0 = f32) | u8 rank | u32 dims[rank] | f32 data`.
//! Records hold every parameter in store order, then `adam.m/<name>` and
//! `adam.v/<name>` for each.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MFVL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
    adam_step: u64,
}

/// Everything needed to resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: Adam,
    pub train: TrainConfig,
    pub state: TrainState,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(0);
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank too high for {name}")))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large in {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(())
}

/// Serializes model weights, optimizer moments and run state.
pub fn to_bytes(model: &Model, opt: &Adam, train: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    if opt.m.len() != model.params.len() || opt.v.len() != model.params.len() {
        return Err(Error::Contract("optimizer state does not match the model".into()));
    }
    let header = serde_json::to_vec(&Header {
        model: model.cfg.clone(),
        train: train.clone(),
        state: state.clone(),
        adam_step: opt.step,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, name, t) in model.params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    for (id, name, _) in model.params.iter() {
        put_tensor(&mut out, &format!("adam.m/{name}"), &opt.m[id.0])?;
        put_tensor(&mut out, &format!("adam.v/{name}"), &opt.v[id.0])?;
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, opt: &Adam, train: &TrainConfig, state: &TrainState) -> Result<()> {
    let bytes = to_bytes(model, opt, train, state)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let len = r.u16("record name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "record name")?)
        .map_err(|_| Error::Format("record name is not UTF-8".into()))?
        .to_string();
    let dtype = r.u8("dtype")?;
    if dtype != 0 {
        return Err(Error::Format(format!("unsupported dtype {dtype} in {name}")));
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape overflow in {name}")))?;
    let bytes = r.take(count.saturating_mul(4), &name)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((name, Tensor::new(&shape, data)?))
}

/// Parses a checkpoint. With `expected`, the stored tensors must fit that
/// architecture; a mismatch is a dimension error.
pub fn from_bytes(buf: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;

    let cfg = expected.cloned().unwrap_or_else(|| header.model.clone());
    let mut model = Model::new(&cfg, 0)?;
    let mut opt = Adam::new(&model.params);
    opt.step = header.adam_step;

    let mut slots: HashMap<String, (usize, u8)> = HashMap::new();
    for (id, name, _) in model.params.iter() {
        slots.insert(name.to_string(), (id.0, 0));
        slots.insert(format!("adam.m/{name}"), (id.0, 1));
        slots.insert(format!("adam.v/{name}"), (id.0, 2));
    }
    let mut seen = vec![false; slots.len()];
    let mut order: HashMap<String, usize> = HashMap::new();
    for (i, k) in slots.keys().enumerate() {
        order.insert(k.clone(), i);
    }
    while !r.done() {
        let (name, t) = read_tensor(&mut r)?;
        let Some(&(idx, kind)) = slots.get(&name) else {
            return Err(Error::Format(format!("unknown tensor {name}")));
        };
        let slot = order[&name];
        if seen[slot] {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        seen[slot] = true;
        let id = crate::autodiff::ParamId(idx);
        let want = model.params.get(id).shape().to_vec();
        if t.shape() != want.as_slice() {
            return Err(dim_err!("{name}: stored {:?}, architecture expects {want:?}", t.shape()));
        }
        match kind {
            0 => model.params.set(id, t)?,
            1 => opt.m[idx] = t,
            _ => opt.v[idx] = t,
        }
    }
    if let Some((name, _)) = order.iter().find(|(_, &i)| !seen[i]) {
        return Err(Error::Format(format!("missing tensor {name}")));
    }
    Ok(Checkpoint {
        model,
        opt,
        train: header.train,
        state: header.state,
    })
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?, expected)
}
