//! Model checkpoint container.
//!
//! Layout: 8 magic bytes, a text header of `key=value` lines terminated by
//! `end\n`, then the parameters of every entry as little-endian `f32`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::NormStats;

const MAGIC: &[u8; 8] = b"DITSCK\x00\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint has no entry named {0:?}")]
    MissingEntry(String),
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    WrongKind { found: String, expected: String },
    #[error("normalization fingerprint {found:016x} does not match dataset {expected:016x}")]
    NormMismatch { found: u64, expected: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub arch: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

pub(crate) fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_floats(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.parse().ok()).collect()
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, name: &str, arch: String, params: &[f64]) {
        self.entries.push(Entry {
            name: name.to_string(),
            arch,
            params: params.to_vec(),
        });
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("missing key {key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.get(key)?
            .parse()
            .map_err(|_| CheckpointError::MalformedHeader(format!("bad value for {key}")))
    }

    pub fn entry(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                found: self.kind.clone(),
                expected: kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn set_norm(&mut self, norm: &NormStats) {
        self.set("norm.state_mean", fmt_floats(&norm.state_mean));
        self.set("norm.state_std", fmt_floats(&norm.state_std));
        self.set("norm.reward_mean", format!("{:?}", norm.reward_mean));
        self.set("norm.reward_std", format!("{:?}", norm.reward_std));
        self.set("norm.fingerprint", format!("{:016x}", norm.fingerprint()));
    }

    pub fn norm(&self) -> Result<NormStats, CheckpointError> {
        let floats = |k: &str| {
            parse_floats(self.get(k)?).ok_or_else(|| CheckpointError::MalformedHeader(format!("bad floats in {k}")))
        };
        let norm = NormStats {
            state_mean: floats("norm.state_mean")?,
            state_std: floats("norm.state_std")?,
            reward_mean: self.get_parsed("norm.reward_mean")?,
            reward_std: self.get_parsed("norm.reward_std")?,
        };
        let stored = u64::from_str_radix(self.get("norm.fingerprint")?, 16)
            .map_err(|_| CheckpointError::MalformedHeader("bad fingerprint".into()))?;
        if stored != norm.fingerprint() {
            return Err(CheckpointError::NormMismatch {
                found: stored,
                expected: norm.fingerprint(),
            });
        }
        Ok(norm)
    }

    pub fn encode(&self) -> Vec<u8> {
        let n_params: usize = self.entries.iter().map(|e| e.params.len()).sum();
        let mut header = String::new();
        let _ = writeln!(header, "version={FORMAT_VERSION}");
        let _ = writeln!(header, "kind={}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(header, "meta.{k}={v}");
        }
        for e in &self.entries {
            let _ = writeln!(header, "entry={}|{}|{}", e.name, e.arch, e.params.len());
        }
        let _ = writeln!(header, "payload_bytes={}", n_params * 4);
        header.push_str("end\n");
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + n_params * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        for e in &self.entries {
            for &p in &e.params {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::MalformedHeader(m.to_string());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let rest = &bytes[MAGIC.len()..];
        let header_len = rest
            .windows(4)
            .position(|w| w == b"end\n")
            .ok_or_else(|| bad("missing end marker"))?;
        let header = std::str::from_utf8(&rest[..header_len]).map_err(|_| bad("header is not utf-8"))?;
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        let mut payload_bytes = None;
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "version" => {
                    if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                        return Err(bad("unsupported version"));
                    }
                }
                "kind" => ck.kind = v.to_string(),
                "entry" => {
                    let parts: Vec<&str> = v.split('|').collect();
                    if parts.len() != 3 {
                        return Err(bad(line));
                    }
                    let len: usize = parts[2].parse().map_err(|_| bad(line))?;
                    shapes.push((parts[0].to_string(), parts[1].to_string(), len));
                }
                "payload_bytes" => payload_bytes = Some(v.parse::<usize>().map_err(|_| bad(line))?),
                _ => {
                    let key = k.strip_prefix("meta.").ok_or_else(|| bad(line))?;
                    ck.meta.insert(key.to_string(), v.to_string());
                }
            }
        }
        let payload_bytes = payload_bytes.ok_or_else(|| bad("missing payload_bytes"))?;
        let declared: usize = shapes.iter().map(|s| s.2 * 4).sum();
        if declared != payload_bytes {
            return Err(bad("entry sizes disagree with payload_bytes"));
        }
        let payload = &rest[header_len + 4..];
        if payload.len() < payload_bytes {
            return Err(CheckpointError::Truncated {
                expected: payload_bytes,
                found: payload.len(),
            });
        }
        let mut pos = 0;
        for (name, arch, len) in shapes {
            let params = payload[pos..pos + 4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos += 4 * len;
            ck.entries.push(Entry { name, arch, params });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}
