//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SD4R"  u32 version  u32 flags (bit 0: optimizer state present)  u64 epoch
//! u32 head count, then per head:
//!     u32 layer count, (layers + 1) x u32 widths, layers x u8 activation
//!     u64 parameter count, parameters as f64
//! if bit 0: per head u64 count and the momentum buffer as f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HeadGrads, HeadSet, Sd4rModel, Trainer};
use crate::nn::{Activation, Mlp};

pub const MAGIC: &[u8; 4] = b"SD4R";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Sd4rModel,
    pub velocity: Option<HeadGrads>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn into_trainer(self) -> Trainer {
        let velocity = self.velocity.unwrap_or_else(|| HeadGrads::zeros(&self.model.heads));
        Trainer {
            model: self.model,
            velocity,
            epoch: self.epoch,
        }
    }
}

impl From<&Trainer> for Checkpoint {
    fn from(t: &Trainer) -> Self {
        Checkpoint {
            model: t.model.clone(),
            velocity: Some(t.velocity.clone()),
            epoch: t.epoch,
        }
    }
}

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
    }
}

fn act_from(c: u8) -> Result<Activation> {
    match c {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Sigmoid),
        _ => Err(Error::Checkpoint(format!("unknown activation code {c}"))),
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend((v.len() as u64).to_le_bytes());
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(u32::from(ck.velocity.is_some()).to_le_bytes());
    out.extend((ck.epoch as u64).to_le_bytes());
    out.extend(7u32.to_le_bytes());
    for mlp in ck.model.heads.iter() {
        let widths = mlp.widths();
        out.extend(((widths.len() - 1) as u32).to_le_bytes());
        for w in widths {
            out.extend((w as u32).to_le_bytes());
        }
        out.extend(mlp.activations().into_iter().map(act_code));
        put_f64s(&mut out, &mlp.params());
    }
    if let Some(v) = &ck.velocity {
        for g in v.iter() {
            put_f64s(&mut out, &g.flat());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Checkpoint(format!("expected {expected} values, found {n}")));
        }
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let flags = r.u32()?;
    let epoch = r.u64()? as usize;
    let heads = r.u32()?;
    if heads != 7 {
        return Err(Error::Checkpoint(format!("expected 7 heads, found {heads}")));
    }
    let mut mlps = Vec::with_capacity(7);
    for _ in 0..7 {
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {layers}")));
        }
        let widths = (0..=layers).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        if widths.iter().any(|&w| w == 0 || w > 1 << 16) {
            return Err(Error::Checkpoint(format!("implausible widths {widths:?}")));
        }
        let acts = r.take(layers)?.iter().map(|&c| act_from(c)).collect::<Result<Vec<_>>>()?;
        let mut mlp = Mlp::zeros(&widths, &acts);
        let p = r.f64s(mlp.param_count())?;
        mlp.set_params(&p)?;
        mlps.push(mlp);
    }
    let heads = HeadSet::from_vec(mlps).expect("seven heads");
    let velocity = if flags & 1 == 1 {
        let mut v = HeadGrads::zeros(&heads);
        for (g, m) in v.iter_mut().zip(heads.iter()) {
            let flat = r.f64s(m.param_count())?;
            g.set_flat(&flat)?;
        }
        Some(v)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = Sd4rModel { heads };
    if !model.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(Checkpoint { model, velocity, epoch })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
