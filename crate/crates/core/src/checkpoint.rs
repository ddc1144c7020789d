//! Binary checkpoints. The byte layout is described in `docs/checkpoint.md`;
//! every integer and float is little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"ADASPAN\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub frames: u64,
    pub episodes: u64,
    /// `(name, tensor)` in parameter-id order.
    pub params: Vec<(String, Tensor)>,
    pub square_avg: Vec<Vec<f64>>,
    pub momentum_buf: Vec<Vec<f64>>,
    pub recent_returns: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    w.write_u64::<LE>(xs.len() as u64).unwrap();
    for &x in xs {
        w.write_f64::<LE>(x).unwrap();
    }
}

fn read_f64s(r: &mut &[u8]) -> Result<Vec<f64>> {
    let n = r.read_u64::<LE>()? as usize;
    if n > r.len() / 8 {
        return Err(bad("array length exceeds file size"));
    }
    let mut xs = vec![0.0; n];
    r.read_f64_into::<LE>(&mut xs)?;
    Ok(xs)
}

fn read_string(r: &mut &[u8]) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    if n > r.len() {
        return Err(bad("string length exceeds file size"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    String::from_utf8(head.to_vec()).map_err(|_| bad("string is not UTF-8"))
}

fn write_string(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LE>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_learner(learner: &Learner, config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            step: learner.step,
            frames: learner.frames,
            episodes: learner.episodes,
            params: learner
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            square_avg: learner.optimizer.square_avg.clone(),
            momentum_buf: learner.optimizer.momentum_buf.clone(),
            recent_returns: learner.recent_returns.iter().copied().collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(FORMAT_VERSION).unwrap();
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        w.write_u32::<LE>(cfg.len() as u32).unwrap();
        w.extend_from_slice(cfg.as_bytes());
        w.write_u64::<LE>(self.step).unwrap();
        w.write_u64::<LE>(self.frames).unwrap();
        w.write_u64::<LE>(self.episodes).unwrap();
        w.write_u32::<LE>(self.params.len() as u32).unwrap();
        for (name, t) in &self.params {
            write_string(&mut w, name);
            w.write_u32::<LE>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64).unwrap();
            }
            for &x in t.data() {
                w.write_f64::<LE>(x).unwrap();
            }
        }
        for bufs in [&self.square_avg, &self.momentum_buf] {
            w.write_u32::<LE>(bufs.len() as u32).unwrap();
            for b in bufs {
                write_f64s(&mut w, b);
            }
        }
        write_f64s(&mut w, &self.recent_returns);
        let sum = fnv1a(&w);
        w.write_u64::<LE>(sum).unwrap();
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = (&trailer[..]).read_u64::<LE>()?;
        if stored != fnv1a(body) {
            return Err(bad("checksum mismatch; file is truncated or corrupt"));
        }
        let mut r = &body[8..];
        let version = r.read_u32::<LE>()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let cfg = read_string(&mut r)?;
        let config: RunConfig = serde_json::from_str(&cfg)?;
        let step = r.read_u64::<LE>()?;
        let frames = r.read_u64::<LE>()?;
        let episodes = r.read_u64::<LE>()?;
        let n = r.read_u32::<LE>()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let rank = r.read_u32::<LE>()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.read_u64::<LE>()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > r.len() / 8 {
                return Err(bad(format!("tensor {name} exceeds file size")));
            }
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LE>(&mut data)?;
            params.push((name, Tensor::new(&shape, data)?));
        }
        let mut opt = Vec::with_capacity(2);
        for _ in 0..2 {
            let k = r.read_u32::<LE>()? as usize;
            let mut bufs = Vec::with_capacity(k.min(4096));
            for _ in 0..k {
                bufs.push(read_f64s(&mut r)?);
            }
            opt.push(bufs);
        }
        let recent_returns = read_f64s(&mut r)?;
        if !r.is_empty() {
            return Err(bad("trailing bytes after the last section"));
        }
        let momentum_buf = opt.pop().unwrap();
        let square_avg = opt.pop().unwrap();
        Ok(Self {
            config,
            step,
            frames,
            episodes,
            params,
            square_avg,
            momentum_buf,
            recent_returns,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Copies parameters into `store`, which must have the same names and
    /// shapes in the same order.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.params) {
            let expected = store.name(id);
            let shape = store.get(id).shape();
            if expected != name || shape != t.shape() {
                return Err(bad(format!(
                    "tensor {name} {:?} does not match model tensor {expected} {shape:?}",
                    t.shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Builds a learner from the embedded config and restores its state.
    pub fn into_learner(&self) -> Result<Learner> {
        let mut learner = self.config.build_learner()?;
        self.restore(&mut learner)?;
        Ok(learner)
    }

    pub fn restore(&self, learner: &mut Learner) -> Result<()> {
        self.restore_params(&mut learner.store)?;
        let same_layout = |bufs: &[Vec<f64>]| {
            bufs.len() == self.params.len()
                && bufs.iter().zip(&self.params).all(|(b, (_, t))| b.len() == t.numel())
        };
        if !same_layout(&self.square_avg) {
            return Err(bad("optimizer state does not match the parameters"));
        }
        if !self.momentum_buf.is_empty() && !same_layout(&self.momentum_buf) {
            return Err(bad("momentum state does not match the parameters"));
        }
        learner.optimizer.square_avg = self.square_avg.clone();
        if !self.momentum_buf.is_empty() {
            learner.optimizer.momentum_buf = self.momentum_buf.clone();
        }
        learner.step = self.step;
        learner.frames = self.frames;
        learner.episodes = self.episodes;
        learner.recent_returns = self.recent_returns.iter().copied().collect();
        Ok(())
    }
}
