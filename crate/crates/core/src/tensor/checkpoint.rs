//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u64`:
//! magic line, metadata length + UTF-8 metadata, step count, entry count,
//! then per entry: name length + name, rank, dims, `f64` values.
//! Optimizer moments are stored as ordinary entries named `opt.m.{param}`
//! and `opt.v.{param}`.

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamW, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CKPT_MAGIC: &str = "nfkit-ckpt-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form text, typically a serialized model config.
    pub metadata: String,
    pub step_count: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, opt: Option<&AdamW<S>>, metadata: String) -> Self {
        let to64 = |x: &[S]| x.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        let mut entries: Vec<Entry> = store
            .iter()
            .map(|(_, name, t)| Entry { name: name.to_string(), shape: t.shape().to_vec(), values: to64(t.data()) })
            .collect();
        let mut step_count = 0;
        if let Some(opt) = opt {
            step_count = opt.step_count();
            let (m, v) = opt.moments();
            for (kind, moments) in [("m", m), ("v", v)] {
                for ((_, name, t), mom) in store.iter().zip(moments) {
                    entries.push(Entry {
                        name: format!("opt.{kind}.{name}"),
                        shape: t.shape().to_vec(),
                        values: to64(mom),
                    });
                }
            }
        }
        Self { metadata, step_count, entries }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copy parameter values into `store`, matching by name and shape.
    pub fn restore_store<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            let e = self.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if e.shape != shape {
                return Err(Error::Dimension(format!("{name}: checkpoint shape {:?}, model {:?}", e.shape, shape)));
            }
            store.get_mut(id).set_data(e.values.iter().map(|&v| S::lit(v)).collect())?;
        }
        Ok(())
    }

    pub fn restore_optimizer<S: Scalar>(&self, opt: &mut AdamW<S>, store: &ParamStore<S>) -> Result<()> {
        let load = |kind: &str| -> Result<Vec<Vec<S>>> {
            store
                .iter()
                .map(|(_, name, t)| {
                    let key = format!("opt.{kind}.{name}");
                    let e = self.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                    if e.values.len() != t.numel() {
                        return Err(Error::Dimension(format!("{key} has {} values", e.values.len())));
                    }
                    Ok(e.values.iter().map(|&v| S::lit(v)).collect())
                })
                .collect()
        };
        let m = load("m")?;
        let v = load("v")?;
        opt.restore(self.step_count, m, v)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let u = |w: &mut dyn Write, x: u64| w.write_all(&x.to_le_bytes());
        w.write_all(CKPT_MAGIC.as_bytes())?;
        w.write_all(b"\n")?;
        u(w, self.metadata.len() as u64)?;
        w.write_all(self.metadata.as_bytes())?;
        u(w, self.step_count)?;
        u(w, self.entries.len() as u64)?;
        for e in &self.entries {
            u(w, e.name.len() as u64)?;
            w.write_all(e.name.as_bytes())?;
            u(w, e.shape.len() as u64)?;
            for &d in &e.shape {
                u(w, d as u64)?;
            }
            let mut buf = Vec::with_capacity(e.values.len() * 8);
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let header = format!("{CKPT_MAGIC}\n");
        if cur.take(header.len())? != header.as_bytes() {
            return Err(Error::Format(format!("not an {CKPT_MAGIC} checkpoint")));
        }
        let meta_len = cur.len_field()?;
        let metadata = cur.string(meta_len)?;
        let step_count = cur.u64()?;
        let count = cur.len_field()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.len_field()?;
            let name = cur.string(name_len)?;
            let rank = cur.len_field()?;
            let shape = (0..rank).map(|_| cur.len_field()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let raw = cur.take(numel.checked_mul(8).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let values: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(Entry { name, shape, values });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { metadata, step_count, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_field(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length field overflows".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        ckpt.write_to(&mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    Checkpoint::read_from(&mut f)
}
