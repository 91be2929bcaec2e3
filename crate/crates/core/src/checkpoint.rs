//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "TMOECKPT"
//! version      u32       1
//! digest       32 bytes  SHA-256 of the model configuration (canonical JSON)
//! step         u64       training step counter
//! adam_t       u64       optimizer update counter
//! blob_count   u32
//! blob_count × {
//!     name_len u32, name (UTF-8)
//!     ndim     u32, ndim × u64 dims
//!     values   product(dims) × f64
//! }
//! ```
//!
//! Blob names are `param/<name>`, `adam.m/<name>`, `adam.v/<name>` for
//! every parameter in canonical order, followed by `stats/<layer>/<i>` for
//! the routing history of the static-average grouping mode.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grouping::RoutingStats;
use crate::model::{ModelConfig, ParamStore};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"TMOECKPT";
pub const VERSION: u32 = 1;

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn put_blob<W: Write>(w: &mut W, name: &str, shape: &[usize], values: &[f64]) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in values {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, state: &TrainState, cfg: &ModelConfig) -> Result<()> {
    let names = state.params.names();
    let stats: Vec<(usize, Vec<Vec<f64>>)> = (0..cfg.num_layers)
        .map(|l| (l, state.stats.history(l).cloned().collect()))
        .collect();
    let count = 3 * names.len() + stats.iter().map(|(_, h)| h.len()).sum::<usize>();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&cfg.digest())?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.optim.t.to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in names.iter().zip(state.params.tensors()) {
        put_blob(w, &format!("param/{name}"), t.shape(), t.data())?;
    }
    for (prefix, moments) in [("adam.m", &state.optim.m), ("adam.v", &state.optim.v)] {
        for ((name, t), m) in names.iter().zip(state.params.tensors()).zip(moments) {
            put_blob(w, &format!("{prefix}/{name}"), t.shape(), m)?;
        }
    }
    for (l, hist) in &stats {
        for (i, h) in hist.iter().enumerate() {
            put_blob(w, &format!("stats/{l}/{i}"), &[h.len()], h)?;
        }
    }
    Ok(())
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &ModelConfig) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut w, state, cfg)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| corrupt(format!("truncated while reading {what}")))?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn blob(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u32("blob name length")? as usize;
        if len > 4096 {
            return Err(corrupt(format!("blob name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        self.inner
            .read_exact(&mut name)
            .map_err(|_| corrupt("truncated blob name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("blob name is not UTF-8"))?;
        let ndim = self.u32("blob rank")? as usize;
        if ndim > 8 {
            return Err(corrupt(format!("blob {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64("blob dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| corrupt(format!("blob {name} is too large")))?;
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(self.bytes(&name)?));
        }
        Ok((name, shape, values))
    }
}

/// Reads a checkpoint written for `cfg`; a different configuration digest
/// is rejected.
pub fn read_checkpoint<R: Read>(r: R, cfg: &ModelConfig) -> Result<TrainState> {
    let mut rd = Reader { inner: r };
    if &rd.bytes::<8>("magic")? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    if rd.bytes::<32>("config digest")? != cfg.digest() {
        return Err(corrupt("configuration digest does not match"));
    }
    let step = rd.u64("step")?;
    let adam_t = rd.u64("optimizer counter")?;
    let count = rd.u32("blob count")? as usize;

    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut stats = RoutingStats::new(cfg.num_layers, cfg.grouping.static_window);
    let mut history: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.num_layers];
    for _ in 0..count {
        let (name, shape, values) = rd.blob()?;
        let (kind, rest) = name
            .split_once('/')
            .ok_or_else(|| corrupt(format!("unrecognized blob {name}")))?;
        match kind {
            "param" => params.push((rest.to_string(), Tensor::new(shape, values)?)),
            "adam.m" => m.push(values),
            "adam.v" => v.push(values),
            "stats" => {
                let layer: usize = rest
                    .split('/')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .filter(|&l| l < cfg.num_layers)
                    .ok_or_else(|| corrupt(format!("bad stats blob {name}")))?;
                history[layer].push(values);
            }
            _ => return Err(corrupt(format!("unrecognized blob {name}"))),
        }
    }
    let mut extra = [0u8; 1];
    if rd.inner.read(&mut extra)? != 0 {
        return Err(corrupt("trailing bytes after the last blob"));
    }
    let params = ParamStore::from_named(cfg, params).map_err(|e| corrupt(e.to_string()))?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    for moments in [&m, &v] {
        if moments.len() != sizes.len() || moments.iter().zip(&sizes).any(|(x, &n)| x.len() != n) {
            return Err(corrupt("optimizer moments do not match the parameters"));
        }
    }
    for (l, h) in history.into_iter().enumerate() {
        stats.restore(l, h);
    }
    Ok(TrainState {
        params,
        optim: AdamState { m, v, t: adam_t },
        step,
        stats,
    })
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    read_checkpoint(BufReader::new(fs::File::open(path)?), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{train_step, Batch};

    fn toy() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            d_model: 8,
            num_layers: 2,
            heads: 2,
            expert_hidden: 4,
            num_experts: 8,
            top_k: 2,
            max_seq_len: 8,
            grouping: crate::grouping::GroupingStrategy {
                mode: crate::grouping::GroupingMode::StaticAverage,
                static_window: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn batch() -> Batch {
        Batch::from_sequences(&[vec![1, 2, 0, 1, 2], vec![3, 4, 0, 3, 4]], &[3, 3]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = toy();
        let mut st = TrainState::new(&cfg).unwrap();
        for _ in 0..3 {
            train_step(&mut st, &cfg, &batch()).unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &st, &cfg).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_checkpoint(buf.as_slice(), &cfg).unwrap();
        assert_eq!(back, st);
        let mut a = st.clone();
        let mut b = back;
        let ra = train_step(&mut a, &cfg, &batch()).unwrap();
        let rb = train_step(&mut b, &cfg, &batch()).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = toy();
        let st = TrainState::new(&cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &st, &cfg).unwrap();
        let other = ModelConfig { seed: 5, ..toy() };
        assert!(
            matches!(read_checkpoint(buf.as_slice(), &other), Err(Error::Checkpoint(m)) if m.contains("digest"))
        );
        assert!(read_checkpoint(&buf[..buf.len() - 3], &cfg).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice(), &cfg).is_err());
        let mut bad = buf.clone();
        bad[8] = 2;
        assert!(
            matches!(read_checkpoint(bad.as_slice(), &cfg), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint(long.as_slice(), &cfg).is_err());
    }

    #[test]
    fn file_round_trip() {
        let cfg = toy();
        let st = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&path, &st, &cfg).unwrap();
        assert_eq!(load_checkpoint(&path, &cfg).unwrap(), st);
        assert!(!path.with_extension("tmp").exists());
    }
}
