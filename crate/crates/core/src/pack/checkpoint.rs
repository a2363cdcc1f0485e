//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "PKCK" | u32 version | str model_id
//! u32 n_params   { str name | tensor }*
//! u8 optimizer | f64 lr | u64 step | u32 n_slots { str name | u32 k | tensor* }*
//! u64 steps_done | u64 epoch | u64 position | u64 n | u32 samples_used[n]
//! u64 batch_size | u64 target_steps | str dataset | blob graph (JSON)
//! [u8; 32] sha256 of everything above
//! ```
//!
//! `str` and `blob` are a u64 length followed by bytes; `tensor` is
//! `u32 ndim | u64 dims[ndim] | f64 data[..]`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::handle::{ModelHandle, ProgressCursor};
use crate::error::PackError;
use crate::graph::{ComputationGraph, ParamMap};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PKCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_id: String,
    pub parameters: ParamMap,
    pub optimizer: OptimizerState,
    pub progress: ProgressCursor,
    pub batch_size: usize,
    pub target_steps: u64,
    pub dataset: String,
    /// Graph structure without parameters.
    pub graph: ComputationGraph,
    pub digest: [u8; 32],
}

impl Checkpoint {
    pub fn capture(handle: &ModelHandle) -> Self {
        let mut graph = handle.graph.clone();
        let parameters = graph.take_parameters();
        let mut ck = Self {
            model_id: handle.model_id().to_string(),
            parameters,
            optimizer: handle.optimizer.clone(),
            progress: handle.progress.clone(),
            batch_size: handle.batch_size,
            target_steps: handle.target_steps,
            dataset: handle.dataset.clone(),
            graph,
            digest: [0; 32],
        };
        let body = ck.encode_body();
        ck.digest = Sha256::digest(&body).into();
        ck
    }

    /// Rebuilds a live handle with exactly the captured state.
    pub fn restore(&self) -> Result<ModelHandle, PackError> {
        let mut graph = self.graph.clone();
        graph.set_parameters(self.parameters.clone())?;
        let mut handle = ModelHandle::new(
            graph,
            self.optimizer.clone(),
            self.batch_size,
            self.target_steps,
            self.dataset.clone(),
            self.progress.dataset_len(),
        )?;
        handle.progress = self.progress.clone();
        Ok(handle)
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.model_id);
        w.u32(self.parameters.len() as u32);
        for (name, t) in &self.parameters {
            w.str(name);
            w.tensor(t);
        }
        w.u8(self.optimizer.kind().code());
        w.f64(self.optimizer.learning_rate());
        w.u64(self.optimizer.step_counter());
        w.u32(self.optimizer.slots().len() as u32);
        for (name, slots) in self.optimizer.slots() {
            w.str(name);
            w.u32(slots.len() as u32);
            for t in slots {
                w.tensor(t);
            }
        }
        let p = &self.progress;
        w.u64(p.steps_done);
        w.u64(p.epoch);
        w.u64(p.position as u64);
        w.u64(p.samples_used.len() as u64);
        for &c in &p.samples_used {
            w.u32(c);
        }
        w.u64(self.batch_size as u64);
        w.u64(self.target_steps);
        w.str(&self.dataset);
        w.blob(&serde_json::to_vec(&self.graph).expect("graph serializes"));
        w.out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = self.encode_body();
        let digest: [u8; 32] = Sha256::digest(&body).into();
        body.extend_from_slice(&digest);
        body
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PackError> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(PackError::Checkpoint("truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual: [u8; 32] = Sha256::digest(body).into();
        if actual.as_slice() != digest {
            return Err(PackError::Checkpoint("digest mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PackError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PackError::Checkpoint(format!("unsupported version {version}")));
        }
        let model_id = r.str()?;
        let mut parameters = ParamMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            parameters.insert(name, r.tensor()?);
        }
        let code = r.u8()?;
        let kind = OptimizerKind::from_code(code)
            .ok_or_else(|| PackError::Checkpoint(format!("unknown optimizer code {code}")))?;
        let lr = r.f64()?;
        let step = r.u64()?;
        let mut slots = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let k = r.u32()?;
            let tensors = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
            slots.insert(name, tensors);
        }
        let optimizer = OptimizerState::from_parts(kind, lr, slots, step)?;
        let steps_done = r.u64()?;
        let epoch = r.u64()?;
        let position = r.u64()? as usize;
        let n = r.u64()? as usize;
        let samples_used = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let progress = ProgressCursor { steps_done, epoch, position, samples_used };
        let batch_size = r.u64()? as usize;
        let target_steps = r.u64()?;
        let dataset = r.str()?;
        let graph: ComputationGraph =
            serde_json::from_slice(&r.blob()?).map_err(|e| PackError::Checkpoint(format!("graph structure: {e}")))?;
        if r.pos != body.len() {
            return Err(PackError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let graph = ComputationGraph::from_parts(
            graph.model_id().to_string(),
            graph.input_ports().to_vec(),
            graph.nodes().to_vec(),
            graph.outputs().clone(),
            graph.param_shapes().clone(),
            ParamMap::new(),
        )?;
        Ok(Self {
            model_id,
            parameters,
            optimizer,
            progress,
            batch_size,
            target_steps,
            dataset,
            graph,
            digest: digest.try_into().expect("32 bytes"),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PackError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| PackError::Checkpoint(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PackError> {
        let bytes = std::fs::read(path).map_err(|e| PackError::Checkpoint(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }
    fn str(&mut self, s: &str) {
        self.blob(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackError> {
        if n > self.bytes.len() - self.pos {
            return Err(PackError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PackError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64, PackError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64, PackError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn blob(&mut self) -> Result<Vec<u8>, PackError> {
        let n = self.u64()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> Result<String, PackError> {
        String::from_utf8(self.blob()?).map_err(|_| PackError::Checkpoint("invalid utf-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor, PackError> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|&l| l.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| PackError::Checkpoint(format!("implausible tensor shape {shape:?}")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(PackError::from)
    }
}
