//! Checkpoint file: a key-value text manifest followed by one little-endian blob.
//!
//! ```text
//! bdatp-checkpoint 1
//! precision = f32
//! meta.update = 12
//! entry = encoder.visual.conv1.weight shape=32,1,8,8 offset=0
//! blob_bytes = 8192
//! end
//! <blob>
//! ```
//! Offsets are in bytes from the start of the blob; entries are stored in
//! manifest order and round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Array, Precision, Scalar};
use crate::error::{Error, Result};

const MAGIC: &str = "bdatp-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Array<T>)>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint { meta: BTreeMap::new(), entries: Vec::new() }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array<T>) {
        self.entries.push((name.into(), value));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta key {key}")))
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn take(&mut self, name: &str) -> Result<Array<T>> {
        let i = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(format!("missing entry {name}")))?;
        Ok(self.entries.remove(i).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nprecision = {}\n", T::PRECISION.as_str());
        for (k, v) in &self.meta {
            head.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut offset = 0usize;
        for (name, a) in &self.entries {
            let shape: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("entry = {name} shape={} offset={offset}\n", shape.join(",")));
            offset += a.len() * T::BYTES;
        }
        head.push_str(&format!("blob_bytes = {offset}\nend\n"));
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, a) in &self.entries {
            for &v in a.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a bdatp checkpoint"));
        }
        let mut meta = BTreeMap::new();
        let mut layout: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut blob_bytes = None;
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed manifest line: {line}")))?;
            match key {
                "precision" => {
                    let p = Precision::parse(value).ok_or_else(|| bad(format!("unknown precision {value}")))?;
                    if p != T::PRECISION {
                        return Err(bad(format!(
                            "checkpoint precision {} does not match requested {}",
                            value,
                            T::PRECISION.as_str()
                        )));
                    }
                }
                "entry" => {
                    let mut parts = value.split(' ');
                    let name = parts.next().ok_or_else(|| bad("entry without name"))?.to_string();
                    let mut shape = None;
                    let mut offset = None;
                    for p in parts {
                        if let Some(s) = p.strip_prefix("shape=") {
                            shape = Some(
                                s.split(',')
                                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {s}"))))
                                    .collect::<Result<Vec<_>>>()?,
                            );
                        } else if let Some(o) = p.strip_prefix("offset=") {
                            offset = Some(o.parse::<usize>().map_err(|_| bad(format!("bad offset {o}")))?);
                        }
                    }
                    layout.push((
                        name,
                        shape.ok_or_else(|| bad("entry without shape"))?,
                        offset.ok_or_else(|| bad("entry without offset"))?,
                    ));
                }
                "blob_bytes" => {
                    blob_bytes = Some(value.parse::<usize>().map_err(|_| bad("bad blob_bytes"))?);
                }
                k => match k.strip_prefix("meta.") {
                    Some(m) => {
                        meta.insert(m.to_string(), value.to_string());
                    }
                    None => return Err(bad(format!("unknown manifest key {k}"))),
                },
            }
        }
        let blob = &bytes[pos..];
        let blob_bytes = blob_bytes.ok_or_else(|| bad("missing blob_bytes"))?;
        if blob.len() != blob_bytes {
            return Err(bad(format!("blob holds {} bytes, manifest says {blob_bytes}", blob.len())));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for (name, shape, offset) in layout {
            let n: usize = shape.iter().product();
            let end = offset + n * T::BYTES;
            if end > blob.len() {
                return Err(bad(format!("entry {name} runs past the blob")));
            }
            let data = blob[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            entries.push((name, Array::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
