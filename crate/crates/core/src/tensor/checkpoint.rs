//! Checkpoint container.
//!
//! A checkpoint is two files:
//!
//! * `<path>` (binary), all integers little-endian:
//!   1. magic `b"HRGCKPT\0"` (8 bytes)
//!   2. `u32` format version (currently 1)
//!   3. `u32` record count
//!   4. per record, in order: `u32` name length in bytes, the UTF-8 name,
//!      four `u32` extents `N C H W`, then `N*C*H*W` `f32` values.
//! * `<path>.manifest` (text), one entry per line:
//!   * `format hrg-checkpoint 1`
//!   * `meta <key> <value>` for each metadata pair, sorted by key; the value
//!     runs to the end of the line
//!   * `record <index> <name> <N> <C> <H> <W>` for each record, in binary
//!     order
//!
//! Records are written in the order given, so identical inputs produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HRGCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<(String, Tensor<f32>)>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.records.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().0 {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest(&self) -> String {
        let mut s = format!("format hrg-checkpoint {VERSION}\n");
        for (k, v) in &self.meta {
            s.push_str(&format!("meta {k} {v}\n"));
        }
        for (i, (name, t)) in self.records.iter().enumerate() {
            let [n, c, h, w] = t.shape().0;
            s.push_str(&format!("record {i} {name} {n} {c} {h} {w}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for (name, _) in &self.records {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("checkpoint record name {name:?}")));
            }
        }
        for k in self.meta.keys() {
            if k.is_empty() || k.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("checkpoint meta key {k:?}")));
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let mp = manifest_path(path);
        fs::write(&mp, self.manifest()).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let bad = |msg: &str| Error::parse(path, msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_at(&mut r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32_at(&mut r)?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u32_at(&mut r)? as usize;
            if r.len() < len {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|_| bad("record name is not UTF-8"))?
                .to_string();
            r = &r[len..];
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = u32_at(&mut r)? as usize;
            }
            let shape = Shape(dims);
            let nbytes = shape.numel() * 4;
            if r.len() < nbytes {
                return Err(bad(&format!("truncated payload for {name}")));
            }
            let data = r[..nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[nbytes..];
            records.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(Checkpoint {
            meta: BTreeMap::new(),
            records,
        })
    }

    /// Load a checkpoint and its manifest, checking that they agree.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ck = Self::from_bytes(&bytes, path)?;
        let mp = manifest_path(path);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(&format!("format hrg-checkpoint {VERSION}")) {
            return Err(Error::parse(&mp, "missing or unsupported format line"));
        }
        let mut seen = 0;
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("record ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let ok = f.len() == 6
                    && f[0].parse::<usize>().ok() == Some(seen)
                    && ck.records.get(seen).is_some_and(|(n, t)| {
                        n == f[1]
                            && t.shape()
                                .0
                                .iter()
                                .zip(&f[2..])
                                .all(|(d, s)| s.parse::<usize>().ok() == Some(*d))
                    });
                if !ok {
                    return Err(Error::parse(&mp, format!("record line disagrees with payload: {line}")));
                }
                seen += 1;
            } else if !line.trim().is_empty() {
                return Err(Error::parse(&mp, format!("unrecognized line: {line}")));
            }
        }
        if seen != ck.records.len() {
            return Err(Error::parse(
                &mp,
                format!("manifest lists {seen} records, payload has {}", ck.records.len()),
            ));
        }
        Ok(ck)
    }
}
