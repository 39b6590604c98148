//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `DRPANCKP`, `u32` version, the TOML config
//! snapshot, step and epoch counters, the per-epoch score-map history, then
//! one block per network (spec hash, named tensors, optimizer moments). A
//! SHA-256 of everything before it closes the file. Encoding is a pure
//! function of the contents, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DRPANCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkRecord {
    pub name: String,
    pub spec_hash: String,
    pub tensors: Vec<TensorRecord>,
    pub adam_steps: u64,
    pub adam_first: Vec<Tensor<f32>>,
    pub adam_second: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub epoch: u64,
    pub scoremap_history: Vec<f64>,
    pub networks: Vec<NetworkRecord>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u8(T::DTYPE_TAG);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format!("implausible length {n}"))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
    fn tensor<T: Scalar>(&mut self) -> std::result::Result<Tensor<T>, String> {
        let tag = self.u8()?;
        if tag != T::DTYPE_TAG {
            return Err(format!("dtype tag {tag}, expected {}", T::DTYPE_TAG));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(T::BYTES).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(shape, data).map_err(|e| e.to_string())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_toml);
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.scoremap_history.len() as u64);
        for &v in &self.scoremap_history {
            w.f64(v);
        }
        w.u64(self.networks.len() as u64);
        for net in &self.networks {
            w.str(&net.name);
            w.str(&net.spec_hash);
            w.u64(net.tensors.len() as u64);
            for t in &net.tensors {
                w.str(&t.name);
                w.u8(t.trainable as u8);
                w.tensor(&t.tensor);
            }
            w.u64(net.adam_steps);
            w.u64(net.adam_first.len() as u64);
            for t in net.adam_first.iter().chain(&net.adam_second) {
                w.tensor(t);
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err("file too short".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let config_toml = r.str()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let n = r.len()?;
        let scoremap_history = (0..n).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
        let nets = r.len()?;
        let mut networks = Vec::with_capacity(nets);
        for _ in 0..nets {
            let name = r.str()?;
            let spec_hash = r.str()?;
            let count = r.len()?;
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                let name = r.str()?;
                let trainable = r.u8()? != 0;
                tensors.push(TensorRecord {
                    name,
                    trainable,
                    tensor: r.tensor()?,
                });
            }
            let adam_steps = r.u64()?;
            let moments = r.len()?;
            let adam_first = (0..moments).map(|_| r.tensor()).collect::<std::result::Result<_, _>>()?;
            let adam_second = (0..moments).map(|_| r.tensor()).collect::<std::result::Result<_, _>>()?;
            networks.push(NetworkRecord {
                name,
                spec_hash,
                tensors,
                adam_steps,
                adam_first,
                adam_second,
            });
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Checkpoint {
            config_toml,
            step,
            epoch,
            scoremap_history,
            networks,
        })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn network(&self, name: &str) -> Option<&NetworkRecord> {
        self.networks.iter().find(|n| n.name == name)
    }
}
