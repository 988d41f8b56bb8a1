//! `MCFR` checkpoint files: magic, `u16` version, `u32`-length-prefixed
//! canonical JSON config, then one record per parameter (`u16` name length,
//! name, `u8` rank, `u32` dims, `f32` little-endian data).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::McfrConfig;
use super::model::McfrModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MCFR";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(m: &McfrModel, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let json = m.config().canonical_json();
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    let mut res = Ok(());
    m.for_each_param(|name, _, t| {
        if res.is_err() {
            return;
        }
        res = (|| {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        })();
    });
    res
}

pub fn save_checkpoint(m: &McfrModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(m, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

pub fn read_checkpoint(mut r: impl Read) -> Result<McfrModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = c.u32("config length")? as usize;
    let json = std::str::from_utf8(c.take(len, "config")?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: McfrConfig =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    while !c.done() {
        let n = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = count
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let data = c
            .take(bytes, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if records.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    let mut model = McfrModel::new(config, 0).map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    let mut err = None;
    model.for_each_param_mut(|name, _, param| {
        if err.is_some() {
            return;
        }
        match records.remove(name) {
            None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(t) if t.shape() != param.shape() => {
                err = Some(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, config expects {:?}",
                    t.shape(),
                    param.shape()
                )))
            }
            Some(t) => *param = t,
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<McfrModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
