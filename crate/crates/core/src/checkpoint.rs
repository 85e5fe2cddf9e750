//! Binary checkpoints.
//!
//! Layout, little-endian: magic `QFVK`, version u32, stage tag u8, config echo
//! string, meta count u32 then `(key string, value u64)` pairs, block count u32
//! then `(name string, rows u32, cols u32, f64 data)` blocks.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::nn::{Adam, ParamSet};
use crate::tape::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"QFVK";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    PriorContinuous,
    PriorDiscrete,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::PriorContinuous => "prior-cont",
            Stage::PriorDiscrete => "prior-disc",
        }
    }

    fn code(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::PriorContinuous => 2,
            Stage::PriorDiscrete => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Stage::Stage1),
            2 => Some(Stage::PriorContinuous),
            3 => Some(Stage::PriorDiscrete),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: String,
    pub meta: Vec<(String, u64)>,
    pub blocks: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: impl Into<String>) -> Self {
        Checkpoint {
            stage,
            config: config.into(),
            meta: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: u64) {
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<u64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn require_meta(&self, key: &str) -> Result<u64> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("{} checkpoint lacks meta field {key:?}", self.stage.tag())))
    }

    pub fn push_block(&mut self, name: impl Into<String>, value: Mat) {
        self.blocks.push((name.into(), value));
    }

    pub fn block(&self, name: &str) -> Option<&Mat> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn push_params(&mut self, params: &ParamSet) {
        for (name, m) in params.iter() {
            self.push_block(name, m.clone());
        }
    }

    /// Blocks whose names start with `prefix`, with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, m) in &self.blocks {
            if let Some(rest) = name.strip_prefix(prefix) {
                p.add(rest, m.clone());
            }
        }
        p
    }

    pub fn push_adam(&mut self, params: &ParamSet, adam: &Adam) {
        self.set_meta("adam_t", adam.t);
        for ((name, _), (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
            self.push_block(format!("adam.m/{name}"), m.clone());
            self.push_block(format!("adam.v/{name}"), v.clone());
        }
    }

    /// Restores Adam moments saved by [`Checkpoint::push_adam`].
    pub fn load_adam(&self, params: &ParamSet, adam: &mut Adam) -> Result<()> {
        adam.t = self.require_meta("adam_t")?;
        adam.m.clear();
        adam.v.clear();
        for (name, value) in params.iter() {
            for (store, kind) in [(&mut adam.m, "m"), (&mut adam.v, "v")] {
                let key = format!("adam.{kind}/{name}");
                let m = self
                    .block(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer block {key:?}")))?;
                if m.shape() != value.shape() {
                    return Err(Error::Format(format!("optimizer block {key:?} has the wrong shape")));
                }
                store.push(m.clone());
            }
        }
        Ok(())
    }

    /// Hex digest over block names and data.
    pub fn blocks_digest(&self) -> String {
        digest_blocks(self.blocks.iter().map(|(n, m)| (n.as_str(), m)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(self.stage.code());
        w.string(&self.config);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.string(k);
            w.u64(*v);
        }
        w.u32(self.blocks.len() as u32);
        for (name, m) in &self.blocks {
            w.string(name);
            w.mat(m);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint header");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let code = r.u8()?;
        let stage =
            Stage::from_code(code).ok_or_else(|| Error::Format(format!("unknown checkpoint stage tag {code}")))?;
        let config = r.string()?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for i in 0..n_meta {
            r.rename(format!("checkpoint meta field {i}"));
            meta.push((r.string()?, r.u64()?));
        }
        r.rename("checkpoint block count".into());
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for i in 0..n_blocks {
            r.rename(format!("checkpoint block {i}"));
            let name = r.string()?;
            r.rename(format!("checkpoint block {i} ({name})"));
            blocks.push((name, r.mat()?));
        }
        r.rename("checkpoint".into());
        r.expect_end()?;
        Ok(Checkpoint {
            stage,
            config,
            meta,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn digest_blocks<'a>(blocks: impl Iterator<Item = (&'a str, &'a Mat)>) -> String {
    let mut h = Sha256::new();
    for (name, m) in blocks {
        h.update(name.as_bytes());
        h.update((m.rows as u64).to_le_bytes());
        h.update((m.cols as u64).to_le_bytes());
        for v in &m.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn params_digest(params: &ParamSet) -> String {
    digest_blocks(params.iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Stage::PriorDiscrete, "seed = 1\n");
        c.set_meta("classes", 32);
        c.push_block("a", Mat::from_vec(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        c.push_block("b", Mat::zeros(0, 3));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back.stage, Stage::PriorDiscrete);
        assert_eq!(back.meta("classes"), Some(32));
        for ((n1, m1), (n2, m2)) in c.blocks.iter().zip(&back.blocks) {
            assert_eq!(n1, n2);
            assert_eq!(m1.shape(), m2.shape());
            let b1: Vec<u64> = m1.data.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = m2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.encode(), c.encode());
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(m)) if m.contains("version")));
        let bytes = sample().encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("block 1"), "{err}");
        assert!(Checkpoint::decode(b"QFVC").is_err());
    }
}
