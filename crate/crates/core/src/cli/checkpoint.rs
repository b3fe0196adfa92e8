//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GECOCKPT"
//! version    u32
//! kind       u8       0 = separator, 1 = score
//! arch       u32 length + UTF-8 JSON
//! step       u64      optimizer steps taken
//! config     u32 length + UTF-8 TOML snapshot
//! params     u64 count + f64 values
//! ema        u8 flag [+ u64 count + f64 values]
//! extras     u32 count, each: u32 name length + name + u64 count + f64 values
//! meta       u32 length + UTF-8 JSON
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::models::{ScoreArch, ScoreModel, SeparatorArch, SeparatorModel};

pub const MAGIC: &[u8; 8] = b"GECOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Separator,
    Score,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Separator => 0,
            ModelKind::Score => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub arch: String,
    pub step: u64,
    pub config: String,
    /// Inference parameters.
    pub params: Vec<f64>,
    pub ema: Option<Vec<f64>>,
    /// Named auxiliary vectors (optimizer moments, raw training params).
    pub extras: Vec<(String, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    fn new(kind: ModelKind, arch: String, params: Vec<f64>, config: &str) -> Self {
        Self {
            kind,
            arch,
            step: 0,
            config: config.to_string(),
            params,
            ema: None,
            extras: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn separator(model: &SeparatorModel, config: &str) -> Self {
        let arch = serde_json::to_string(&model.arch).expect("serializable");
        Self::new(ModelKind::Separator, arch, model.params.clone(), config)
    }

    pub fn score(model: &ScoreModel, config: &str) -> Self {
        let arch = serde_json::to_string(&model.arch).expect("serializable");
        Self::new(ModelKind::Score, arch, model.params.clone(), config)
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_separator(&self) -> Result<SeparatorModel> {
        if self.kind != ModelKind::Separator {
            return Err(Error::Config("checkpoint holds a score model, not a separator".into()));
        }
        let arch: SeparatorArch =
            serde_json::from_str(&self.arch).map_err(|e| Error::Config(format!("separator arch: {e}")))?;
        SeparatorModel::from_params(arch, self.params.clone())
    }

    pub fn to_score(&self) -> Result<ScoreModel> {
        if self.kind != ModelKind::Score {
            return Err(Error::Config("checkpoint holds a separator, not a score model".into()));
        }
        let arch: ScoreArch =
            serde_json::from_str(&self.arch).map_err(|e| Error::Config(format!("score arch: {e}")))?;
        ScoreModel::from_params(arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 8 * self.params.len() * 2);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.kind.tag());
        put_str(&mut b, &self.arch);
        b.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut b, &self.config);
        put_vec(&mut b, &self.params);
        match &self.ema {
            Some(e) => {
                b.push(1);
                put_vec(&mut b, e);
            }
            None => b.push(0),
        }
        b.extend_from_slice(&(self.extras.len() as u32).to_le_bytes());
        for (name, v) in &self.extras {
            put_str(&mut b, name);
            put_vec(&mut b, v);
        }
        put_str(&mut b, &self.meta.to_string());
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::format(0, "file too short for a checkpoint"));
        }
        let body_len = bytes.len() - 32;
        if &bytes[..8] != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest.as_slice() != &bytes[body_len..] {
            return Err(Error::format(body_len as u64, "checksum mismatch"));
        }
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 8,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let kind = match r.u8()? {
            0 => ModelKind::Separator,
            1 => ModelKind::Score,
            k => return Err(Error::format(12, format!("unknown model kind {k}"))),
        };
        let arch = r.string()?;
        let step = r.u64()?;
        let config = r.string()?;
        let params = r.vec()?;
        let ema = match r.u8()? {
            0 => None,
            1 => Some(r.vec()?),
            f => return Err(Error::format(r.pos as u64 - 1, format!("bad EMA flag {f}"))),
        };
        let n_extra = r.u32()?;
        let mut extras = Vec::with_capacity(n_extra as usize);
        for _ in 0..n_extra {
            let name = r.string()?;
            extras.push((name, r.vec()?));
        }
        let meta_at = r.pos;
        let meta_text = r.string()?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| Error::format(meta_at as u64, format!("meta: {e}")))?;
        if r.pos != body_len {
            return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
        }
        let ck = Self {
            kind,
            arch,
            step,
            config,
            params,
            ema,
            extras,
            meta,
        };
        // Parameter count must match the recorded architecture.
        match kind {
            ModelKind::Separator => {
                ck.to_separator()?;
            }
            ModelKind::Score => {
                ck.to_score()?;
            }
        }
        Ok(ck)
    }

    /// Writes atomically; refuses to replace an existing file unless `force`.
    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(Error::Exists(path.to_path_buf()));
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_vec(b: &mut Vec<u8>, v: &[f64]) {
    b.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| Error::format(at as u64, "invalid UTF-8"))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::format(at as u64, format!("vector of {n} values exceeds file size")));
        }
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
