//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! | field        | encoding                                   |
//! |--------------|--------------------------------------------|
//! | magic        | 8 bytes `GAMECKPT`                         |
//! | version      | u32, currently 1                           |
//! | config       | u32 byte length, then `ModelConfig` as JSON |
//! | entry count  | u32                                        |
//! | each entry   | u16 name length, UTF-8 name, u8 rank, u32 per dimension, f32 data |
//!
//! Entries appear in parameter-layout order. Loading rejects any other magic,
//! version, entry name, shape or trailing bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GameError, Result};
use crate::model::{Model, ModelConfig, ParamLayout};

pub const MAGIC: &[u8; 8] = b"GAMECKPT";
pub const VERSION: u32 = 1;

fn data_err(msg: impl Into<String>) -> GameError {
    GameError::Data(msg.into())
}

pub fn write_model(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.layout.entries.len() as u32).to_le_bytes())?;
    for e in &model.layout.entries {
        w.write_all(&(e.name.len() as u16).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.shape.len() as u8])?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.len() * 4);
        for x in &model.params[e.range()] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(data_err("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn read_model(mut r: impl Read) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { buf: &bytes, pos: 0 };
    if rd.take(8)? != MAGIC {
        return Err(data_err("not a model checkpoint (bad magic)"));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(data_err(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let clen = rd.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(rd.take(clen)?)
        .map_err(|e| data_err(format!("bad checkpoint config: {e}")))?;
    config.validate().map_err(|e| data_err(format!("invalid checkpoint config: {e}")))?;
    let layout = ParamLayout::new(&config);
    let count = rd.u32()? as usize;
    if count != layout.entries.len() {
        return Err(data_err(format!("checkpoint has {count} entries, layout needs {}", layout.entries.len())));
    }
    let mut params = vec![0.0f32; layout.total];
    for e in &layout.entries {
        let nlen = rd.u16()? as usize;
        let name = std::str::from_utf8(rd.take(nlen)?).map_err(|_| data_err("entry name is not UTF-8"))?;
        if name != e.name {
            return Err(data_err(format!("expected entry {}, found {name}", e.name)));
        }
        let rank = rd.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32()? as usize);
        }
        if shape != e.shape {
            return Err(data_err(format!("entry {name} has shape {shape:?}, expected {:?}", e.shape)));
        }
        let raw = rd.take(e.len() * 4)?;
        for (dst, src) in params[e.range()].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    if rd.pos != bytes.len() {
        return Err(data_err("trailing bytes after checkpoint"));
    }
    Model::from_params(config, params)
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    atomic_write(path, &buf)
}

pub fn load(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}
