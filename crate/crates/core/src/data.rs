//! Datasets, epoch orders, batching and memoized preprocessing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::seed_key;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

const BINARY_MAGIC: &[u8; 4] = b"PTDS";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    id: String,
    features: Tensor,
    labels: Vec<u32>,
    class_count: u32,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u32>, class_count: u32) -> Result<Self, DataError> {
        if features.shape().len() != 2 {
            return Err(DataError::InvalidParameters(format!("features must be N x D, got {:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(DataError::InvalidParameters(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelOutOfRange { index, label, classes: class_count });
        }
        if !features.is_finite() {
            return Err(DataError::InvalidParameters("features contain non-finite values".into()));
        }
        let id = content_id(&features, &labels, class_count);
        Ok(Self { id, features, labels, class_count })
    }

    /// Content-derived identifier: identical bytes give identical ids.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Holds out `ceil(fraction * N)` samples (at least one, at most N - 1)
    /// chosen by `seed`. Returns `(train, validation)`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if self.len() < 2 || !(0.0..1.0).contains(&fraction) {
            return Err(DataError::InvalidParameters(format!("cannot hold out {fraction} of {} samples", self.len())));
        }
        let held = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len() - 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derive_rng(&seed_key!["holdout", self.id.as_str(), seed]));
        let (val_idx, train_idx) = order.split_at(held);
        let mut train_idx = train_idx.to_vec();
        let mut val_idx = val_idx.to_vec();
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        Ok((self.subset(&train_idx)?, self.subset(&val_idx)?))
    }

    fn subset(&self, idx: &[usize]) -> Result<Dataset, DataError> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let features =
            Tensor::new(vec![idx.len(), d], data).map_err(|e| DataError::InvalidParameters(e.to_string()))?;
        Dataset::new(features, idx.iter().map(|&i| self.labels[i]).collect(), self.class_count)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path, self.to_binary())?;
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.features.len() * 8 + self.labels.len() * 4);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&self.class_count.to_le_bytes());
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.is_empty() {
            return Err(DataError::Empty);
        }
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != BINARY_MAGIC {
            return Err(DataError::MalformedBinary { offset: 0, reason: "bad magic".into() });
        }
        let version = r.u32()?;
        if version != BINARY_VERSION {
            return Err(DataError::MalformedBinary { offset: 4, reason: format!("unsupported version {version}") });
        }
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let class_count = r.u32()?;
        if n == 0 || d == 0 || class_count == 0 {
            return Err(DataError::MalformedBinary {
                offset: 8,
                reason: format!("header declares N={n}, D={d}, classes={class_count}"),
            });
        }
        let expected = n.checked_mul(d).and_then(|nd| nd.checked_mul(8)).and_then(|b| b.checked_add(n * 4));
        if expected != Some(bytes.len() - r.pos) {
            return Err(DataError::MalformedBinary {
                offset: r.pos,
                reason: format!("payload is {} bytes, header implies {:?}", bytes.len() - r.pos, expected),
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(r.f64()?);
        }
        let labels_start = r.pos;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let l = r.u32()?;
            if l >= class_count {
                return Err(DataError::MalformedBinary {
                    offset: labels_start + 4 * i,
                    reason: format!("label {l} is not below class count {class_count}"),
                });
            }
            labels.push(l);
        }
        let features = Tensor::new(vec![n, d], data).map_err(|e| DataError::InvalidParameters(e.to_string()))?;
        Dataset::new(features, labels, class_count)
    }

    /// Comma-delimited rows; the last column is the integer label. The class
    /// count is one more than the largest label.
    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| DataError::MalformedText { line: lineno + 1, reason };
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() < 2 {
                return Err(err("need at least one feature and a label".into()));
            }
            let (label_cell, feature_cells) = cells.split_last().expect("len >= 2");
            let label: u32 = label_cell.parse().map_err(|_| err(format!("bad label `{label_cell}`")))?;
            let row = feature_cells
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| err(format!("bad number `{c}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(err(format!("expected {} features, found {}", first.len(), row.len())));
                }
            }
            rows.push(row);
            labels.push(label);
        }
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let classes = labels.iter().max().copied().unwrap_or(0) + 1;
        let features = Tensor::from_rows(&rows).map_err(|e| DataError::InvalidParameters(e.to_string()))?;
        Dataset::new(features, labels, classes)
    }
}

fn content_id(features: &Tensor, labels: &[u32], classes: u32) -> String {
    let mut h = Sha256::new();
    h.update((features.rows() as u64).to_le_bytes());
    h.update((features.cols() as u64).to_le_bytes());
    h.update(classes.to_le_bytes());
    for v in features.data() {
        h.update(v.to_le_bytes());
    }
    for l in labels {
        h.update(l.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::MalformedBinary { offset: self.pos, reason: "truncated".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a `PTDS` binary file, or comma-delimited text otherwise.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(DataError::Empty);
    }
    if bytes.starts_with(BINARY_MAGIC) {
        Dataset::from_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| DataError::MalformedBinary {
            offset: e.valid_up_to(),
            reason: "neither PTDS nor UTF-8 text".into(),
        })?;
        Dataset::from_text(text)
    }
}

/// Gaussian class blobs: one unit-variance cloud per class around a center
/// drawn uniformly from `[-3, 3]^d`.
pub fn synth_dataset(n: usize, d: usize, classes: u32, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(DataError::InvalidParameters(format!("n={n}, d={d}, classes={classes} must all be >= 1")));
    }
    let mut centers_rng = derive_rng(&seed_key!["synth-centers", seed]);
    let centers: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..d).map(|_| centers_rng.random_range(-3.0..=3.0)).collect()).collect();
    let mut rng = derive_rng(&seed_key!["synth-samples", seed]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        for c in &centers[label as usize] {
            data.push(c + noise.sample(&mut rng));
        }
        labels.push(label);
    }
    let features = Tensor::new(vec![n, d], data).map_err(|e| DataError::InvalidParameters(e.to_string()))?;
    Dataset::new(features, labels, classes)
}

/// Deterministic per-epoch sample order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPermutation {
    pub dataset_id: String,
    pub epoch: u64,
    order: Vec<usize>,
}

impl EpochPermutation {
    pub fn new(dataset_id: &str, len: usize, epoch: u64) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut derive_rng(&seed_key!["epoch-order", dataset_id, epoch]));
        Self { dataset_id: dataset_id.to_string(), epoch, order }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub indices: Vec<usize>,
}

/// Samples at `permutation[cursor..cursor + batch]`.
pub fn batch_at(dataset: &Dataset, perm: &EpochPermutation, cursor: usize, batch: usize) -> Result<Batch, DataError> {
    if batch == 0 || cursor + batch > dataset.len() || perm.len() != dataset.len() {
        return Err(DataError::OutOfRange { cursor, batch, len: dataset.len() });
    }
    let indices = perm.order[cursor..cursor + batch].to_vec();
    let d = dataset.dim();
    let mut data = Vec::with_capacity(batch * d);
    for &i in &indices {
        data.extend_from_slice(dataset.features.row(i));
    }
    let features = Tensor::new(vec![batch, d], data).expect("non-empty batch");
    let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
    Ok(Batch { features, labels, indices })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PreprocessStage {
    Normalize {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    /// Adds `scale * u`, `u ~ U[-1, 1]`, drawn from a stream keyed by
    /// `(seed, sample index)`.
    Jitter {
        seed: u64,
        scale: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub stages: Vec<PreprocessStage>,
}

impl PreprocessSpec {
    /// Standardizes every column with the dataset's own statistics.
    pub fn normalize_for(dataset: &Dataset) -> Self {
        let (n, d) = (dataset.len(), dataset.dim());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(dataset.features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(dataset.features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Self { stages: vec![PreprocessStage::Normalize { mean, std }] }
    }

    pub fn with_jitter(mut self, seed: u64, scale: f64) -> Self {
        self.stages.push(PreprocessStage::Jitter { seed, scale });
        self
    }

    pub fn is_identity(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn digest(&self) -> [u8; 32] {
        let encoded = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&encoded).into()
    }

    fn apply_sample(&self, raw: &[f64], index: usize) -> Vec<f64> {
        let mut out = raw.to_vec();
        for stage in &self.stages {
            match stage {
                PreprocessStage::Normalize { mean, std } => {
                    for ((v, m), s) in out.iter_mut().zip(mean).zip(std) {
                        *v = (*v - m) / s;
                    }
                }
                PreprocessStage::Jitter { seed, scale } => {
                    let mut rng = derive_rng(&seed_key!["jitter", *seed, index]);
                    for v in out.iter_mut() {
                        *v += scale * rng.random_range(-1.0..=1.0);
                    }
                }
            }
        }
        out
    }

    /// Processes `raw` row by row; row `r` is sample `indices[r]`. Results
    /// are memoized in `cache` under `(dataset_id, spec digest, index)`.
    pub fn apply(&self, dataset_id: &str, raw: &Tensor, indices: &[usize], cache: &PreprocessCache) -> Tensor {
        if self.is_identity() {
            return raw.clone();
        }
        let digest = self.digest();
        let mut data = Vec::with_capacity(raw.len());
        for (r, &index) in indices.iter().enumerate() {
            let key = CacheKey { dataset: dataset_id.to_string(), spec: digest, index };
            let row = cache.get_or_compute(key, || self.apply_sample(raw.row(r), index));
            data.extend_from_slice(&row);
        }
        Tensor::new(raw.shape().to_vec(), data).expect("same shape as raw")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    dataset: String,
    spec: [u8; 32],
    index: usize,
}

/// Memo table for preprocessed samples. Readers run concurrently; a racing
/// duplicate computation produces identical bytes, so last-writer-wins is
/// harmless.
#[derive(Debug, Default)]
pub struct PreprocessCache {
    table: RwLock<HashMap<CacheKey, Arc<Vec<f64>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl PreprocessCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// The process-wide cache.
    pub fn global() -> &'static PreprocessCache {
        static GLOBAL: OnceLock<PreprocessCache> = OnceLock::new();
        GLOBAL.get_or_init(PreprocessCache::new)
    }

    fn get_or_compute(&self, key: CacheKey, compute: impl FnOnce() -> Vec<f64>) -> Arc<Vec<f64>> {
        if let Some(v) = self.table.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Arc::clone(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = Arc::new(compute());
        self.table.write().expect("cache lock").insert(key, Arc::clone(&value));
        value
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Number of samples actually computed.
    pub fn computations(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn clear(&self) {
        self.table.write().expect("cache lock").clear();
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}

/// Supplies batches to packed training.
pub trait BatchSource {
    fn dataset_len(&self, dataset_id: &str) -> Result<usize, DataError>;
    fn fetch(&self, dataset_id: &str, epoch: u64, cursor: usize, batch: usize) -> Result<Batch, DataError>;
}

/// Registry of in-memory datasets with optional per-dataset preprocessing.
pub struct DataStore {
    datasets: BTreeMap<String, Arc<Dataset>>,
    preprocess: BTreeMap<String, PreprocessSpec>,
    cache: Arc<PreprocessCache>,
    orders: Mutex<HashMap<(String, u64), Arc<EpochPermutation>>>,
    fetches: AtomicU64,
}

impl Default for DataStore {
    fn default() -> Self {
        Self::with_cache(Arc::new(PreprocessCache::new()))
    }
}

impl DataStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cache(cache: Arc<PreprocessCache>) -> Self {
        Self {
            datasets: BTreeMap::new(),
            preprocess: BTreeMap::new(),
            cache,
            orders: Mutex::new(HashMap::new()),
            fetches: AtomicU64::new(0),
        }
    }

    /// Registers a dataset and returns its id.
    pub fn insert(&mut self, dataset: Dataset) -> String {
        let id = dataset.id().to_string();
        self.datasets.insert(id.clone(), Arc::new(dataset));
        id
    }

    pub fn set_preprocess(&mut self, dataset_id: &str, spec: PreprocessSpec) {
        self.preprocess.insert(dataset_id.to_string(), spec);
    }

    pub fn get(&self, dataset_id: &str) -> Result<&Arc<Dataset>, DataError> {
        self.datasets.get(dataset_id).ok_or_else(|| DataError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn cache(&self) -> &PreprocessCache {
        &self.cache
    }

    /// Physical batch fetches served so far.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    pub fn permutation(&self, dataset_id: &str, epoch: u64) -> Result<Arc<EpochPermutation>, DataError> {
        let len = self.get(dataset_id)?.len();
        let mut orders = self.orders.lock().expect("order lock");
        let perm = orders
            .entry((dataset_id.to_string(), epoch))
            .or_insert_with(|| Arc::new(EpochPermutation::new(dataset_id, len, epoch)));
        Ok(Arc::clone(perm))
    }
}

impl BatchSource for DataStore {
    fn dataset_len(&self, dataset_id: &str) -> Result<usize, DataError> {
        Ok(self.get(dataset_id)?.len())
    }

    fn fetch(&self, dataset_id: &str, epoch: u64, cursor: usize, batch: usize) -> Result<Batch, DataError> {
        let dataset = self.get(dataset_id)?;
        let perm = self.permutation(dataset_id, epoch)?;
        let mut b = batch_at(dataset, &perm, cursor, batch)?;
        if let Some(spec) = self.preprocess.get(dataset_id) {
            b.features = spec.apply(dataset_id, &b.features, &b.indices, &self.cache);
        }
        self.fetches.fetch_add(1, Ordering::Relaxed);
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(50, 3, 4, 11).unwrap();
        let b = synth_dataset(50, 3, 4, 11).unwrap();
        assert_eq!(a.to_binary(), b.to_binary());
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), synth_dataset(50, 3, 4, 12).unwrap().id());
    }

    #[test]
    fn single_class_has_zero_labels() {
        let d = synth_dataset(20, 2, 1, 3).unwrap();
        assert!(d.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn binary_round_trip() {
        let d = synth_dataset(30, 5, 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ptds");
        d.write_binary(&path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Empty)));
    }

    #[test]
    fn binary_label_out_of_range_reports_offset() {
        let d = synth_dataset(4, 2, 2, 1).unwrap();
        let mut bytes = d.to_binary();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        match Dataset::from_binary(&bytes) {
            Err(DataError::MalformedBinary { offset, .. }) => assert_eq!(offset, n - 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let bytes = synth_dataset(4, 2, 2, 1).unwrap().to_binary();
        assert!(matches!(Dataset::from_binary(&bytes[..bytes.len() - 3]), Err(DataError::MalformedBinary { .. })));
        assert!(matches!(Dataset::from_binary(&bytes[..10]), Err(DataError::MalformedBinary { offset: 8, .. })));
    }

    #[test]
    fn direct_constructor_rejects_bad_labels() {
        let f = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(matches!(Dataset::new(f, vec![0, 2], 2), Err(DataError::LabelOutOfRange { index: 1, .. })));
    }

    #[test]
    fn text_loader_reports_line() {
        let d = Dataset::from_text("1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        assert_eq!((d.len(), d.dim(), d.class_count()), (2, 2, 2));
        match Dataset::from_text("1.0,2.0,0\n\n3.0,x,1\n") {
            Err(DataError::MalformedText { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Dataset::from_text("1,2,0\n1,0\n"), Err(DataError::MalformedText { line: 2, .. })));
    }

    #[test]
    fn full_batch_is_the_permuted_dataset() {
        let d = synth_dataset(17, 2, 2, 5).unwrap();
        let p = EpochPermutation::new(d.id(), d.len(), 0);
        let b = batch_at(&d, &p, 0, d.len()).unwrap();
        assert_eq!(b.indices, p.order());
        assert_eq!(b, batch_at(&d, &p, 0, d.len()).unwrap());
        for (r, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.features.row(r), d.features().row(i));
        }
        assert!(batch_at(&d, &p, 10, 8).is_err());
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let d = synth_dataset(103, 2, 2, 5).unwrap();
        let p = EpochPermutation::new(d.id(), d.len(), 3);
        let mut seen = vec![0u32; d.len()];
        let mut cursor = 0;
        while cursor < d.len() {
            let b = 10.min(d.len() - cursor);
            for i in batch_at(&d, &p, cursor, b).unwrap().indices {
                seen[i] += 1;
            }
            cursor += b;
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_ne!(p, EpochPermutation::new(d.id(), d.len(), 4));
    }

    #[test]
    fn normalize_centres_columns() {
        let d = synth_dataset(200, 3, 2, 9).unwrap();
        let spec = PreprocessSpec::normalize_for(&d);
        let idx: Vec<usize> = (0..d.len()).collect();
        let out = spec.apply(d.id(), d.features(), &idx, &PreprocessCache::new());
        for j in 0..3 {
            let mean: f64 = (0..d.len()).map(|r| out.row(r)[j]).sum::<f64>() / d.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn empty_spec_is_identity() {
        let d = synth_dataset(5, 2, 2, 9).unwrap();
        let cache = PreprocessCache::new();
        let out = PreprocessSpec::default().apply(d.id(), d.features(), &[0, 1, 2, 3, 4], &cache);
        assert_eq!(&out, d.features());
        assert_eq!(cache.computations(), 0);
    }

    #[test]
    fn shared_sample_is_computed_once() {
        let d = synth_dataset(5, 2, 2, 9).unwrap();
        let spec = PreprocessSpec::default().with_jitter(1, 0.5);
        let cache = PreprocessCache::new();
        let row = Tensor::new(vec![1, 2], d.features().row(3).to_vec()).unwrap();
        let a = spec.apply(d.id(), &row, &[3], &cache);
        let b = spec.apply(d.id(), &row, &[3], &cache);
        assert_eq!(a, b);
        assert_eq!((cache.computations(), cache.hits()), (1, 1));
        let uncached = spec.apply(d.id(), &row, &[3], &PreprocessCache::new());
        assert_eq!(a, uncached);
    }

    #[test]
    fn validation_split_partitions_samples() {
        let d = synth_dataset(100, 2, 2, 9).unwrap();
        let (train, val) = d.split_validation(0.1, 4).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let again = d.split_validation(0.1, 4).unwrap();
        assert_eq!(again.1, val);
    }
}
