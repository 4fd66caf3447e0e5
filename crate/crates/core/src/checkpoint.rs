//! Binary checkpoint format.
//!
//! Layout: magic `SDDETR01`, record count (u32 LE), then per record —
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
//! f32 LE payload — followed by a UTF-8 `key=value` config block running
//! to end of file.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SDDETR01";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let expect: usize = r.dims.iter().product();
            if expect != r.data.len() {
                return Err(Error::Checkpoint(format!(
                    "record `{}` dims {:?} disagree with {} values",
                    r.name,
                    r.dims,
                    r.data.len()
                )));
            }
            buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(r.name.as_bytes());
            buf.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &r.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (k, v) in &self.config {
            buf.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated checkpoint at byte {off}",
                    off = *off
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let read_u32 = |off: &mut usize| -> Result<u32> {
            let s = take(off, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        if take(&mut off, 8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = read_u32(&mut off)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut off)? as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let rank = read_u32(&mut off)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut off)? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = take(&mut off, n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(Record { name, dims, data });
        }
        let tail = String::from_utf8(bytes[off..].to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in tail.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            config.push((k.to_string(), v.to_string()));
        }
        Ok(Checkpoint { records, config })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_roundtrip_bitwise() {
        let ckpt = Checkpoint {
            records: vec![
                Record {
                    name: "a.w".into(),
                    dims: vec![2, 3],
                    data: vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 3.25e7, -0.125],
                },
                Record {
                    name: "b".into(),
                    dims: vec![1],
                    data: vec![42.0],
                },
            ],
            config: vec![("mode".into(), "split_cross".into()), ("seed".into(), "7".into())],
        };
        let dir = std::env::temp_dir().join("sdd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        ckpt.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(ckpt, back);
        // Writing the reloaded checkpoint reproduces the bytes exactly.
        let path2 = dir.join("t2.ckpt");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("sdd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
