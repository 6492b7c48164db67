// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron addressing, spatial pooling, activation extraction, and the
//! initialization activation matrix with its binary cache format.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{LineError, Result};
use crate::io::{atomic_write, path_component};
use crate::scoring::{score_avg, ActivationSet};
use crate::synthesis::{ImageBatch, ImageRef};

/// A single unit: channel `index` of layer `layer`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronAddress {
    pub layer: String,
    pub index: usize,
}

impl NeuronAddress {
    pub fn new(layer: impl Into<String>, index: usize) -> Self {
        Self {
            layer: layer.into(),
            index,
        }
    }
}

impl fmt::Display for NeuronAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.index)
    }
}

impl FromStr for NeuronAddress {
    type Err = LineError;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, index) = s
            .rsplit_once(':')
            .ok_or_else(|| LineError::Config(format!("neuron {s:?} is not LAYER:INDEX")))?;
        let index = index
            .parse()
            .map_err(|_| LineError::Config(format!("neuron index in {s:?} is not an integer")))?;
        Ok(Self::new(layer, index))
    }
}

/// Parses a neuron selector: `layer:5`, `layer:0-99`, or `layer:1,4,9-12`.
pub fn parse_neuron_selector(spec: &str) -> Result<Vec<NeuronAddress>> {
    let bad = || LineError::Config(format!("bad neuron selector {spec:?}; expected LAYER:0-99"));
    let (layer, ranges) = spec.rsplit_once(':').ok_or_else(bad)?;
    if layer.is_empty() {
        return Err(bad());
    }
    let mut out = Vec::new();
    for part in ranges.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.parse::<usize>(), b.parse::<usize>()),
            None => (part.parse(), part.parse()),
        };
        let (lo, hi) = (lo.map_err(|_| bad())?, hi.map_err(|_| bad())?);
        if lo > hi {
            return Err(bad());
        }
        out.extend((lo..=hi).map(|i| NeuronAddress::new(layer, i)));
    }
    Ok(out)
}

/// A raw layer output for one image: `[D]` or `[C, H, W]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl LayerTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() {
            return Err(LineError::LayerShape {
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Global spatial mean per channel for `[C, H, W]`; identity for `[D]`.
pub fn pool(raw: &LayerTensor, declared: &[usize]) -> Result<Vec<f64>> {
    if raw.shape != declared {
        return Err(LineError::LayerShape {
            expected: declared.to_vec(),
            got: raw.shape.clone(),
        });
    }
    match raw.shape.as_slice() {
        [_] => Ok(raw.data.clone()),
        [_, h, w] => {
            let plane = h * w;
            if plane == 0 {
                return Err(LineError::LayerShape {
                    expected: declared.to_vec(),
                    got: raw.shape.clone(),
                });
            }
            Ok(raw
                .data
                .chunks_exact(plane)
                .map(|c| c.iter().sum::<f64>() / plane as f64)
                .collect())
        }
        other => Err(LineError::LayerShape {
            expected: declared.to_vec(),
            got: other.to_vec(),
        }),
    }
}

/// The target model, seen as a black box returning pooled activations.
pub trait VisionProvider: Send + Sync {
    /// Declared width `D` of `layer`.
    fn layer_width(&self, layer: &str) -> Result<usize>;

    /// `|images| x |indices|` matrix of pooled activations.
    fn activations(
        &self,
        images: &[ImageRef],
        layer: &str,
        indices: &[usize],
    ) -> Result<Vec<Vec<f64>>>;
}

fn check_neuron(provider: &dyn VisionProvider, neuron: &NeuronAddress) -> Result<()> {
    let width = provider.layer_width(&neuron.layer)?;
    if neuron.index >= width {
        return Err(LineError::Config(format!(
            "neuron index {} out of range for layer {:?} of width {width}",
            neuron.index, neuron.layer
        )));
    }
    Ok(())
}

/// One pooled activation per image of `batch`, in batch order.
pub fn extract(
    provider: &dyn VisionProvider,
    batch: &ImageBatch,
    neuron: &NeuronAddress,
) -> Result<ActivationSet> {
    if batch.images.is_empty() {
        return Err(LineError::EmptyActivation);
    }
    check_neuron(provider, neuron)?;
    let rows = provider.activations(&batch.images, &neuron.layer, &[neuron.index])?;
    if rows.len() != batch.images.len() || rows.iter().any(|r| r.len() != 1) {
        return Err(LineError::Protocol(format!(
            "expected {}x1 activation matrix",
            batch.images.len()
        )));
    }
    ActivationSet::new(rows.into_iter().map(|r| r[0]).collect())
}

/// A labeled natural-image source for initialization and control sets.
pub trait DatasetSource: Send + Sync {
    fn id(&self) -> &str;

    /// Class labels in canonical order.
    fn classes(&self) -> Vec<String>;

    /// Images of `class` in canonical order (sorted identifiers).
    fn images(&self, class: &str) -> Result<Vec<ImageRef>>;
}

/// `K x M` activations of one neuron on the first `M` images of each of the
/// first `K` dataset classes.
#[derive(Debug, Clone, PartialEq)]
pub struct InitMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    class_labels: Vec<String>,
}

const INIT_MAGIC: &[u8; 8] = b"LINEAIM1";

impl InitMatrix {
    pub fn new(rows: Vec<Vec<f64>>, class_labels: Vec<String>) -> Result<Self> {
        if rows.len() != class_labels.len() {
            return Err(LineError::Arity {
                expected: class_labels.len(),
                got: rows.len(),
            });
        }
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 {
            return Err(LineError::EmptyActivation);
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in &rows {
            if row.len() != cols {
                return Err(LineError::Arity {
                    expected: cols,
                    got: row.len(),
                });
            }
            if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
                return Err(LineError::NonFiniteActivation(values.len() + pos));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            values,
            rows: rows.len(),
            cols,
            class_labels,
        })
    }

    pub fn k(&self) -> usize {
        self.rows
    }

    pub fn m(&self) -> usize {
        self.cols
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_set(&self, k: usize) -> ActivationSet {
        ActivationSet::new(self.row(k).to_vec()).expect("rows are non-empty and finite")
    }

    /// Per-class initialization score: mean activation over the class row.
    pub fn class_scores(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|k| score_avg(&self.row_set(k)))
            .collect()
    }

    /// Binary layout: magic `LINEAIM1`, `K` and `M` as little-endian u32,
    /// `K*M` little-endian f64 row-major, then each class label as a
    /// little-endian u32 byte length followed by UTF-8 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 8);
        out.extend_from_slice(INIT_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for label in &self.class_labels {
            out.extend_from_slice(&(label.len() as u32).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| LineError::CorruptCache(why.to_string());
        let mut r = ByteReader(bytes);
        if r.take(8)? != INIT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let k = r.u32()? as usize;
        let m = r.u32()? as usize;
        let mut rows = Vec::with_capacity(k);
        for _ in 0..k {
            let raw = r.take(m * 8)?;
            rows.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        let mut labels = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.u32()? as usize;
            let text =
                std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("label is not UTF-8"))?;
            labels.push(text.to_string());
        }
        if !r.0.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Self::new(rows, labels).map_err(|e| corrupt(&e.to_string()))
    }
}

struct ByteReader<'a>(&'a [u8]);

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(LineError::CorruptCache("truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Builds one [`InitMatrix`] per entry of `indices`, passing each class's
/// first `m` images through the model once for all neurons.
pub fn build_layer_init(
    provider: &dyn VisionProvider,
    dataset: &dyn DatasetSource,
    layer: &str,
    indices: &[usize],
    k: usize,
    m: usize,
) -> Result<Vec<InitMatrix>> {
    let width = provider.layer_width(layer)?;
    if let Some(bad) = indices.iter().find(|&&i| i >= width) {
        return Err(LineError::Config(format!(
            "neuron index {bad} out of range for layer {layer:?} of width {width}"
        )));
    }
    if m == 0 {
        return Err(LineError::Config(
            "init images per class must be at least 1".into(),
        ));
    }
    let classes = dataset.classes();
    if classes.len() < k {
        return Err(LineError::Config(format!(
            "dataset {:?} has {} classes, {k} required",
            dataset.id(),
            classes.len()
        )));
    }
    let classes = &classes[..k];
    // per_neuron[n][class] = row of m activations
    let mut per_neuron: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(k); indices.len()];
    for class in classes {
        let mut images = dataset.images(class)?;
        if images.len() < m {
            return Err(LineError::InsufficientData {
                class: class.clone(),
                available: images.len(),
                required: m,
            });
        }
        images.truncate(m);
        let matrix = provider.activations(&images, layer, indices)?;
        if matrix.len() != m || matrix.iter().any(|r| r.len() != indices.len()) {
            return Err(LineError::Protocol(format!(
                "expected {m}x{} activation matrix",
                indices.len()
            )));
        }
        for (n, rows) in per_neuron.iter_mut().enumerate() {
            rows.push(matrix.iter().map(|r| r[n]).collect());
        }
    }
    per_neuron
        .into_iter()
        .map(|rows| InitMatrix::new(rows, classes.to_vec()))
        .collect()
}

pub fn build_init_matrix(
    provider: &dyn VisionProvider,
    dataset: &dyn DatasetSource,
    neuron: &NeuronAddress,
    k: usize,
    m: usize,
) -> Result<InitMatrix> {
    let mut out = build_layer_init(provider, dataset, &neuron.layer, &[neuron.index], k, m)?;
    Ok(out.pop().expect("one matrix per index"))
}

/// Supplies the initialization matrix for a neuron.
pub trait InitSource: Send + Sync {
    fn init_matrix(&self, neuron: &NeuronAddress) -> Result<InitMatrix>;

    /// Precomputes matrices for a batch of neurons. Optional.
    fn prepare(&self, _neurons: &[NeuronAddress]) -> Result<()> {
        Ok(())
    }
}

/// Fixed matrices, e.g. loaded from a replay fixture.
#[derive(Debug, Default)]
pub struct FixedInit {
    matrices: HashMap<NeuronAddress, InitMatrix>,
}

impl FixedInit {
    pub fn new(matrices: HashMap<NeuronAddress, InitMatrix>) -> Self {
        Self { matrices }
    }
}

impl InitSource for FixedInit {
    fn init_matrix(&self, neuron: &NeuronAddress) -> Result<InitMatrix> {
        self.matrices.get(neuron).cloned().ok_or_else(|| {
            LineError::Config(format!("no initialization matrix for neuron {neuron}"))
        })
    }
}

/// Computes matrices from a dataset through the vision provider, memoized in
/// memory and optionally persisted under
/// `<dir>/<model>/<layer>/<dataset>/<index>.aim`.
pub struct DatasetInit {
    vision: Arc<dyn VisionProvider>,
    dataset: Arc<dyn DatasetSource>,
    k: usize,
    m: usize,
    model_id: String,
    dir: Option<PathBuf>,
    memo: Mutex<HashMap<NeuronAddress, InitMatrix>>,
}

/// Whether [`DatasetInit::ensure`] computed or loaded a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Loaded,
    Built,
    Rebuilt,
}

impl DatasetInit {
    pub fn new(
        vision: Arc<dyn VisionProvider>,
        dataset: Arc<dyn DatasetSource>,
        k: usize,
        m: usize,
        model_id: impl Into<String>,
        dir: Option<PathBuf>,
    ) -> Self {
        Self {
            vision,
            dataset,
            k,
            m,
            model_id: model_id.into(),
            dir,
            memo: Mutex::default(),
        }
    }

    pub fn cache_path(&self, neuron: &NeuronAddress) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| {
            d.join(path_component(&self.model_id))
                .join(path_component(&neuron.layer))
                .join(path_component(self.dataset.id()))
                .join(format!("{}.aim", neuron.index))
        })
    }

    fn load(&self, neuron: &NeuronAddress) -> Option<std::result::Result<InitMatrix, LineError>> {
        let path = self.cache_path(neuron)?;
        let bytes = fs::read(&path).ok()?;
        Some(InitMatrix::from_bytes(&bytes).and_then(|m| {
            if m.k() == self.k && m.m() == self.m {
                Ok(m)
            } else {
                Err(LineError::CorruptCache(format!(
                    "{} has shape {}x{}, expected {}x{}",
                    path.display(),
                    m.k(),
                    m.m(),
                    self.k,
                    self.m
                )))
            }
        }))
    }

    /// Loads or builds matrices for `neurons`, persisting new ones. Corrupt
    /// cache files are rebuilt with a warning.
    pub fn ensure(&self, neurons: &[NeuronAddress]) -> Result<Vec<CacheStatus>> {
        let mut status = vec![CacheStatus::Loaded; neurons.len()];
        let mut missing: HashMap<&str, Vec<usize>> = HashMap::new();
        {
            let mut memo = self.memo.lock().expect("init memo poisoned");
            for (i, n) in neurons.iter().enumerate() {
                if memo.contains_key(n) {
                    continue;
                }
                match self.load(n) {
                    Some(Ok(m)) => {
                        memo.insert(n.clone(), m);
                    }
                    Some(Err(e)) => {
                        log::warn!("regenerating initialization cache for {n}: {e}");
                        status[i] = CacheStatus::Rebuilt;
                        missing.entry(&n.layer).or_default().push(i);
                    }
                    None => {
                        status[i] = CacheStatus::Built;
                        missing.entry(&n.layer).or_default().push(i);
                    }
                }
            }
        }
        let mut layers: Vec<_> = missing.into_iter().collect();
        layers.sort();
        for (layer, positions) in layers {
            let indices: Vec<usize> = positions.iter().map(|&p| neurons[p].index).collect();
            let built = build_layer_init(
                &*self.vision,
                &*self.dataset,
                layer,
                &indices,
                self.k,
                self.m,
            )?;
            let mut memo = self.memo.lock().expect("init memo poisoned");
            for (&p, matrix) in positions.iter().zip(built) {
                if let Some(path) = self.cache_path(&neurons[p]) {
                    atomic_write(&path, &matrix.to_bytes())?;
                }
                memo.insert(neurons[p].clone(), matrix);
            }
        }
        Ok(status)
    }
}

impl InitSource for DatasetInit {
    fn init_matrix(&self, neuron: &NeuronAddress) -> Result<InitMatrix> {
        if let Some(m) = self.memo.lock().expect("init memo poisoned").get(neuron) {
            return Ok(m.clone());
        }
        self.ensure(std::slice::from_ref(neuron))?;
        Ok(self.memo.lock().expect("init memo poisoned")[neuron].clone())
    }

    fn prepare(&self, neurons: &[NeuronAddress]) -> Result<()> {
        self.ensure(neurons).map(|_| ())
    }
}
