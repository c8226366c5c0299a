//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AVSECKPT" | version u32 | sha256(config json) [32]
//! config_len u64 | config json
//! epoch u64 | step u64 | rng: seed [32], stream u64, word_pos u128
//! n_params u64 | { name | dtype u8 | trainable u8 | ndim u32 | dims u64.. | data }
//! optimizer: kind u8 | t u64 | n_slots u64 | { name | n_moments u8 | { len u64 | f64 data }.. }
//! best_si_sdr f64 | sha256(all preceding bytes) [32]
//! ```
//!
//! `name` is `len u32 | utf8`; parameter `data` is the element count implied
//! by the shape, encoded per `dtype` (0 = f32, 1 = f64). Optimizer moments are
//! always f64 so a resumed run continues bit-identically.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: [u8; 8] = *b"AVSECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

/// Moment buffers of one parameter (empty for plain SGD, one for momentum, two for Adam).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSlot {
    pub name: String,
    pub moments: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: u8,
    pub t: u64,
    pub slots: Vec<OptimizerSlot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
    pub optimizer: OptimizerState,
    pub best_si_sdr: f64,
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

impl NamedTensor {
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Vec<NamedTensor> {
        store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                trainable: e.trainable,
                shape: e.value.shape().to_vec(),
                dtype: T::DTYPE,
                data: e.value.to_f64_vec(),
            })
            .collect()
    }
}

/// Copy named tensors into a freshly built store; every name must match in both directions.
pub fn restore_params<T: Real>(store: &mut ParamStore<T>, tensors: &[NamedTensor]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for t in tensors {
        let id = store
            .id_of(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
        if store.get(id).shape() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in file, {:?} in model",
                t.name,
                t.shape,
                store.get(id).shape()
            )));
        }
        store.set(id, Tensor::from_f64(&t.shape, &t.data));
    }
    Ok(())
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
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn data(&mut self, dtype: DType, v: &[f64]) {
        for &x in v {
            match dtype {
                DType::F32 => self.bytes(&(x as f32).to_le_bytes()),
                DType::F64 => self.bytes(&x.to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("file is truncated or corrupt (needed {n} bytes at offset {})", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // Guard allocation against garbage lengths.
        if n > self.buf.len() as u64 {
            return Err(Error::Checkpoint(format!("corrupt length field {n}")));
        }
        Ok(n as usize)
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("corrupt name".into()))
    }
    fn data(&mut self, dtype: DType, n: usize) -> Result<Vec<f64>> {
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("corrupt shape".into()))?)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match dtype {
                DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.bytes(&config_digest(&self.config));
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        w.u64(json.len() as u64);
        w.bytes(&json);
        w.u64(self.epoch);
        w.u64(self.step);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for t in &self.params {
            w.name(&t.name);
            w.u8(t.dtype.tag());
            w.u8(t.trainable as u8);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.data(t.dtype, &t.data);
        }
        w.u8(self.optimizer.kind);
        w.u64(self.optimizer.t);
        w.u64(self.optimizer.slots.len() as u64);
        for s in &self.optimizer.slots {
            w.name(&s.name);
            w.u8(s.moments.len() as u8);
            for m in &s.moments {
                w.u64(m.len() as u64);
                w.data(DType::F64, m);
            }
        }
        w.bytes(&self.best_si_sdr.to_le_bytes());
        let sum: [u8; 32] = Sha256::digest(&w.0).into();
        w.bytes(&sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 || buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        if buf.len() < 12 + 32 + 32 {
            return Err(Error::Checkpoint("file is truncated or corrupt".into()));
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        let actual: [u8; 32] = Sha256::digest(body).into();
        if actual != sum {
            return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupt".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.len()?;
        let config: ModelConfig = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        if config_digest(&config) != digest {
            return Err(Error::Checkpoint("config digest does not match embedded config".into()));
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let count = r.len()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
            let trainable = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let data = r.data(dtype, shape.iter().product())?;
            params.push(NamedTensor { name, trainable, shape, dtype, data });
        }
        let kind = r.u8()?;
        let t = r.u64()?;
        let nslots = r.len()?;
        let mut slots = Vec::with_capacity(nslots);
        for _ in 0..nslots {
            let name = r.name()?;
            let k = r.u8()? as usize;
            let mut moments = Vec::with_capacity(k);
            for _ in 0..k {
                let len = r.len()?;
                moments.push(r.data(DType::F64, len)?);
            }
            slots.push(OptimizerSlot { name, moments });
        }
        let best_si_sdr = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
        }
        Ok(Self {
            config,
            epoch,
            step,
            rng: RngState { seed, stream, word_pos },
            params,
            optimizer: OptimizerState { kind, t, slots },
            best_si_sdr,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written checkpoint in place.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Load and require the embedded config to equal `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for a different model config (digest {} vs {})",
                hex8(&config_digest(&ck.config)),
                hex8(&config_digest(expected))
            )));
        }
        Ok(ck)
    }
}

fn hex8(d: &[u8; 32]) -> String {
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Preset};

    fn sample() -> Checkpoint {
        let cfg = Preset::Tiny.model();
        let (_, store) = build_model::<f32>(&cfg).unwrap();
        let params = NamedTensor::from_store(&store);
        let slots = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| OptimizerSlot { name: p.name.clone(), moments: vec![vec![0.25; p.data.len()], vec![0.5; p.data.len()]] })
            .collect();
        Checkpoint {
            config: cfg,
            epoch: 3,
            step: 17,
            rng: RngState { seed: [7; 32], stream: 2, word_pos: 12345 },
            params,
            optimizer: OptimizerState { kind: 1, t: 17, slots },
            best_si_sdr: -1.5,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [4, 40, bytes.len() / 2, bytes.len() - 1] {
            let e = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, Error::Checkpoint(_)), "{e}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("corrupt"));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(Checkpoint::from_bytes(&versioned).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert!(Checkpoint::load_for(&path, &ck.config).is_ok());
        let mut other = ck.config.clone();
        other.seed = 99;
        let e = Checkpoint::load_for(&path, &other).unwrap_err();
        assert!(e.to_string().contains("different model config"), "{e}");
        let (_, mut wrong) = build_model::<f32>(&Preset::Overfit.model()).unwrap();
        assert!(restore_params(&mut wrong, &ck.params).is_err());
    }

    #[test]
    fn f32_blobs_restore_exactly() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (_, mut store) = build_model::<f32>(&Preset::Tiny.model()).unwrap();
        let orig = store.clone();
        store.get_mut(store.id_of("decoder.out.weight").unwrap()).scale_in_place(2.0);
        restore_params(&mut store, &back.params).unwrap();
        for (a, b) in store.entries().iter().zip(orig.entries()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}
