//! Binary checkpoint persistence. Little-endian layout:
//!
//! ```text
//! magic "RDIF" | u32 version | u32 config_len | config text (key=value)
//! u64 epoch | [u8; 32] rng seed | u128 rng word position
//! u32 tensor count | per tensor: u32 name_len, name, u64 rows, u64 cols, f64 data
//! u8 adam flag | (u64 step | per tensor: m data, v data)
//! ```
//!
//! Round trips are lossless: tensors are stored as raw f64 so a reloaded
//! model reproduces bit-identical forward scores.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::RecDiffModel;

pub const MAGIC: &[u8; 4] = b"RDIF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Array2<f64>)>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn from_model(
        model: &RecDiffModel,
        epoch: u64,
        adam: Option<&AdamState>,
        rng: &ChaCha8Rng,
    ) -> Self {
        let tensors = model
            .store
            .ids()
            .map(|id| (model.store.name(id).to_string(), model.store.value(id).clone()))
            .collect();
        let adam = adam.map(|a| {
            let (m, v) = a.moments();
            AdamSnapshot { step: a.step, m: m.to_vec(), v: v.to_vec() }
        });
        Checkpoint {
            config_text: model.cfg.canonical_text(),
            epoch,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            tensors,
            adam,
        }
    }

    /// Restore parameter values (and optionally Adam moments) into a model
    /// built from the same config and dataset shapes. Name or shape
    /// mismatches are rejected.
    pub fn apply_to(&self, model: &mut RecDiffModel, adam: Option<&mut AdamState>) -> Result<()> {
        if self.tensors.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.tensors {
            let id = model.store.id_of(name).ok_or_else(|| {
                Error::Data(format!("checkpoint tensor '{name}' unknown to this model"))
            })?;
            model.store.set_value(id, value.clone())?;
        }
        if let (Some(adam), Some(snap)) = (adam, self.adam.as_ref()) {
            if snap.m.len() != model.store.len() {
                return Err(Error::Data("adam snapshot size mismatch".into()));
            }
            adam.restore_moments(snap.m.clone(), snap.v.clone(), snap.step);
        }
        Ok(())
    }

    pub fn restored_rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for &x in m.iter() {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Data("tensor size overflow".into()))?;
        let raw = self.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Data(format!("bad tensor shape: {e}")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let cfg = ckpt.config_text.as_bytes();
    w.u32(cfg.len() as u32);
    w.bytes(cfg);
    w.u64(ckpt.epoch);
    w.bytes(&ckpt.rng_seed);
    w.u128(ckpt.rng_word_pos);
    w.u32(ckpt.tensors.len() as u32);
    for (name, value) in &ckpt.tensors {
        let nb = name.as_bytes();
        w.u32(nb.len() as u32);
        w.bytes(nb);
        w.matrix(value);
    }
    match &ckpt.adam {
        Some(snap) => {
            w.bytes(&[1u8]);
            w.u64(snap.step);
            for m in &snap.m {
                w.matrix(m);
            }
            for v in &snap.v {
                w.matrix(v);
            }
        }
        None => w.bytes(&[0u8]),
    }
    std::fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader::new(&buf);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint config is not utf-8".into()))?;
    let epoch = r.u64()?;
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(r.take(32)?);
    let rng_word_pos = r.u128()?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not utf-8".into()))?;
        let value = r.matrix()?;
        tensors.push((name, value));
    }
    let adam_flag = r.take(1)?[0];
    let adam = if adam_flag == 1 {
        let step = r.u64()?;
        let m: Result<Vec<_>> = (0..n_tensors).map(|_| r.matrix()).collect();
        let v: Result<Vec<_>> = (0..n_tensors).map(|_| r.matrix()).collect();
        Some(AdamSnapshot { step, m: m?, v: v? })
    } else {
        None
    };
    Ok(Checkpoint { config_text, epoch, rng_seed, rng_word_pos, tensors, adam })
}
