//! Versioned binary checkpoints: config echo, stage/step, generator state,
//! named parameters and optimizer moments.
//!
//! Layout (little-endian, 64-bit words): magic, version, config text,
//! stage, step, rng seed bytes, rng stream, rng word position (two words),
//! parameter count, then per parameter its name, rows, cols and values,
//! then an optimizer flag followed by the step count and both moments.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::autograd::ParamStore;
use crate::binio::{Reader, Truncated, Writer};

pub const CKPT_MAGIC: &[u8; 8] = b"DOGSCKPT";
pub const CKPT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported (expected {CKPT_VERSION})")]
    Version(u64),
    #[error("checkpoint is truncated or corrupt")]
    Truncated,
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

impl From<Truncated> for CheckpointError {
    fn from(_: Truncated) -> Self {
        Self::Truncated
    }
}

/// Position of a ChaCha generator, enough to continue its stream exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical config text of the run that wrote the checkpoint.
    pub config: String,
    pub stage: u8,
    pub step: usize,
    pub rng: RngState,
    pub params: Vec<(String, Array2<f64>)>,
    pub optim: Option<OptimState>,
}

fn write_matrix(w: &mut Writer, a: &Array2<f64>) {
    w.usize(a.nrows());
    w.usize(a.ncols());
    w.f64s(a.as_standard_layout().as_slice().expect("standard layout"));
}

fn read_matrix(r: &mut Reader) -> Result<Array2<f64>, CheckpointError> {
    let rows = r.usize()?;
    let cols = r.usize()?;
    let data = r.f64s()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|_| CheckpointError::Truncated)
}

impl Checkpoint {
    pub fn params_of(store: &ParamStore) -> Vec<(String, Array2<f64>)> {
        store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Copies parameter values into `store`. Names and shapes must match
    /// one to one.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameters in checkpoint, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store.id(name).ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
            let slot = store.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(CheckpointError::Mismatch(format!("{name}: shape {:?}, model expects {:?}", value.dim(), slot.dim())));
            }
            slot.assign(value);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CKPT_MAGIC);
        w.u64(CKPT_VERSION);
        w.str(&self.config);
        w.u64(self.stage as u64);
        w.usize(self.step);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u64(self.rng.word_pos as u64);
        w.u64((self.rng.word_pos >> 64) as u64);
        w.usize(self.params.len());
        for (name, value) in &self.params {
            w.str(name);
            write_matrix(&mut w, value);
        }
        w.bool(self.optim.is_some());
        if let Some(o) = &self.optim {
            w.u64(o.t);
            for a in o.m.iter().chain(&o.v) {
                write_matrix(&mut w, a);
            }
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(buf);
        if r.bytes(8).map_err(|_| CheckpointError::BadMagic)? != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u64()?;
        if version != CKPT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = r.str()?;
        let stage = u8::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?;
        let step = r.usize()?;
        let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let n = r.usize()?;
        if n > r.remaining() {
            return Err(CheckpointError::Truncated);
        }
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            params.push((name, read_matrix(&mut r)?));
        }
        let optim = if r.bool()? {
            let t = r.u64()?;
            let m = (0..n).map(|_| read_matrix(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let v = (0..n).map(|_| read_matrix(&mut r)).collect::<Result<Vec<_>, _>>()?;
            Some(OptimState { t, m, v })
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(CheckpointError::Truncated);
        }
        Ok(Self { config, stage, step, rng: RngState { seed, stream, word_pos: lo | (hi << 64) }, params, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
