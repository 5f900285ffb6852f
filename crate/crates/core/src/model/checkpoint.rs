//! Self-describing checkpoint container.
//!
//! ```text
//! hcprune-checkpoint 1
//! kind <dense|gated|compact>
//! meta <key> <value...>          (zero or more)
//! tensor <name> <d0,d1|-> <byte offset> <element count>
//! end
//! <little-endian f64 payload>
//! ```
//!
//! Offsets are relative to the first payload byte. Every model flavour
//! uses the same container; what differs is the `kind` line, the `meta`
//! entries and the tensor names.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::EncoderConfig;

pub const MAGIC: &str = "hcprune-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| bad(format!("missing meta {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?.parse().map_err(|_| bad(format!("meta {key} unparsable")))
    }

    pub fn set_config(&mut self, c: &EncoderConfig) {
        self.set_meta("n_layers", c.n_layers);
        self.set_meta("d_hidden", c.d_hidden);
        self.set_meta("n_heads", c.n_heads);
        self.set_meta("d_head", c.d_head);
        self.set_meta("d_ffn", c.d_ffn);
        self.set_meta("max_seq_len", c.max_seq_len);
        self.set_meta("input_dim", c.input_dim);
    }

    pub fn config(&self) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            n_layers: self.meta_parse("n_layers")?,
            d_hidden: self.meta_parse("d_hidden")?,
            n_heads: self.meta_parse("n_heads")?,
            d_head: self.meta_parse("d_head")?,
            d_ffn: self.meta_parse("d_ffn")?,
            max_seq_len: self.meta_parse("max_seq_len")?,
            input_dim: self.meta_parse("input_dim")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("tensor {name} {dims} {offset} {}\n", t.len()));
            offset += t.len() * 8;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(())
        };
        next(&mut r, &mut line)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint"));
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("no version"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        next(&mut r, &mut line)?;
        let kind = line.strip_prefix("kind ").ok_or_else(|| bad("missing kind"))?.trim().to_string();
        let mut meta = BTreeMap::new();
        let mut dir: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        loop {
            next(&mut r, &mut line)?;
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("bad tensor line: {l}")));
                }
                let dims = if f[1] == "-" {
                    vec![]
                } else {
                    f[1].split(',').map(|d| d.parse().map_err(|_| bad(format!("bad dims {}", f[1])))).collect::<Result<_>>()?
                };
                let off = f[2].parse().map_err(|_| bad("bad offset"))?;
                let n = f[3].parse().map_err(|_| bad("bad count"))?;
                dir.push((f[0].to_string(), dims, off, n));
            } else {
                return Err(bad(format!("unrecognized header line: {l}")));
            }
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, dims, off, n) in dir {
            let end = off + n * 8;
            if end > payload.len() {
                return Err(bad(format!("tensor {name} overruns payload")));
            }
            let data = payload[off..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, data).map_err(|e| bad(e.to_string()))?));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}
