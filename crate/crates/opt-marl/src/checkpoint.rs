//! Binary checkpoints: magic + version header, the full run config as
//! embedded TOML, live/target parameter vectors and the optimizer state as
//! little-endian f64, and a trailing SHA-256 over everything before it.
//! Reload is bit-exact.

use std::io::{Cursor, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{OptError, Result};

const MAGIC: &[u8; 8] = b"OPTCKPT1";
const VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub params: Vec<f64>,
    pub target_params: Vec<f64>,
    pub opt_sq: Vec<f64>,
}

fn write_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    buf.write_u64::<LittleEndian>(xs.len() as u64).unwrap();
    for &x in xs {
        buf.write_f64::<LittleEndian>(x).unwrap();
    }
}

fn read_f64s(cur: &mut Cursor<&[u8]>) -> Result<Vec<f64>> {
    let n = cur.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(cur.read_f64::<LittleEndian>()?);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(VERSION).unwrap();
        buf.write_u64::<LittleEndian>(self.env_steps).unwrap();
        buf.write_u64::<LittleEndian>(self.grad_steps).unwrap();
        let toml = self.config.to_toml_string();
        buf.write_u64::<LittleEndian>(toml.len() as u64).unwrap();
        buf.extend_from_slice(toml.as_bytes());
        write_f64s(&mut buf, &self.params);
        write_f64s(&mut buf, &self.target_params);
        write_f64s(&mut buf, &self.opt_sq);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(OptError::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expect = Sha256::digest(body);
        if digest != expect.as_slice() {
            return Err(OptError::Checkpoint("hash mismatch: file corrupted".into()));
        }
        if &body[..8] != MAGIC {
            return Err(OptError::Checkpoint("bad magic: not a checkpoint".into()));
        }
        let mut cur = Cursor::new(&body[8..]);
        let version = cur.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(OptError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let env_steps = cur.read_u64::<LittleEndian>()?;
        let grad_steps = cur.read_u64::<LittleEndian>()?;
        let toml_len = cur.read_u64::<LittleEndian>()? as usize;
        let mut toml_bytes = vec![0u8; toml_len];
        cur.read_exact(&mut toml_bytes)?;
        let toml_text = String::from_utf8(toml_bytes)
            .map_err(|_| OptError::Checkpoint("config is not utf-8".into()))?;
        let config = RunConfig::from_toml_str(&toml_text)?;
        let params = read_f64s(&mut cur)?;
        let target_params = read_f64s(&mut cur)?;
        let opt_sq = read_f64s(&mut cur)?;
        if cur.position() as usize != body.len() - 8 {
            return Err(OptError::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            config,
            env_steps,
            grad_steps,
            params,
            target_params,
            opt_sq,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
