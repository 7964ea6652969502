//! Pooled two-layer classifier: time pooling, relu hidden layer, softmax
//! head, cross-entropy, and exact analytic gradients.
//!
//! The network is h = relu(w1 x + b1), probs = softmax(w2 h + b2), with x a
//! pooled D-vector. All arithmetic is in f64; parameters are stored on disk
//! as f32 sections with a JSON sidecar describing shapes and the group
//! vocabulary.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    read_embedding_section, write_embedding_section, Features, LabeledCorpus, UtteranceRecord,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-30;

/// Time-pooling rule applied to a frame matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Average,
    Max,
}

impl Default for PoolMethod {
    fn default() -> Self {
        PoolMethod::Average
    }
}

impl fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolMethod::Average => write!(f, "average"),
            PoolMethod::Max => write!(f, "max"),
        }
    }
}

impl FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(PoolMethod::Average),
            "max" => Ok(PoolMethod::Max),
            other => Err(Error::validation(format!(
                "unknown pool method {other:?}, expected \"average\" or \"max\""
            ))),
        }
    }
}

/// Weights and biases of the two-layer network. Shapes: w1 is H x D, b1 has
/// H entries, w2 is G x H, b2 has G entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl ClassifierParams {
    /// Draws an initialization with entries uniform in
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer.
    pub fn init(input_dim: usize, hidden_dim: usize, n_groups: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::validation(
                "input_dim and hidden_dim must be positive",
            ));
        }
        if n_groups < 2 {
            return Err(Error::validation("need at least 2 groups to classify"));
        }
        let mut uniform = |scale: f64| (rng.next_f64() * 2.0 - 1.0) * scale;
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let w1 = (0..hidden_dim)
            .map(|_| (0..input_dim).map(|_| uniform(s1)).collect())
            .collect();
        let b1 = (0..hidden_dim).map(|_| uniform(s1)).collect();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        let w2 = (0..n_groups)
            .map(|_| (0..hidden_dim).map(|_| uniform(s2)).collect())
            .collect();
        let b2 = (0..n_groups).map(|_| uniform(s2)).collect();
        Ok(ClassifierParams { w1, b1, w2, b2 })
    }

    /// Zero-valued parameters of the given shape.
    pub fn zeros(input_dim: usize, hidden_dim: usize, n_groups: usize) -> Self {
        ClassifierParams {
            w1: vec![vec![0.0; input_dim]; hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![vec![0.0; hidden_dim]; n_groups],
            b2: vec![0.0; n_groups],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.first().map_or(0, |r| r.len())
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.len()
    }

    pub fn n_groups(&self) -> usize {
        self.w2.len()
    }

    /// Checks shape consistency, minimum sizes, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (d, h, g) = (self.input_dim(), self.hidden_dim(), self.n_groups());
        if d == 0 || h == 0 {
            return Err(Error::shape("w1 must be a non-empty H x D matrix"));
        }
        if g < 2 {
            return Err(Error::shape("w2 must have at least 2 rows"));
        }
        if self.w1.iter().any(|r| r.len() != d) {
            return Err(Error::shape("w1 rows have inconsistent lengths"));
        }
        if self.b1.len() != h {
            return Err(Error::shape(format!(
                "b1 has {} entries, expected {h}",
                self.b1.len()
            )));
        }
        if self.w2.iter().any(|r| r.len() != h) {
            return Err(Error::shape(format!("w2 rows must have {h} entries")));
        }
        if self.b2.len() != g {
            return Err(Error::shape(format!(
                "b2 has {} entries, expected {g}",
                self.b2.len()
            )));
        }
        let finite = self
            .w1
            .iter()
            .chain(self.w2.iter())
            .all(|r| r.iter().all(|x| x.is_finite()))
            && self.b1.iter().all(|x| x.is_finite())
            && self.b2.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::validation("parameters contain a non-finite value"));
        }
        Ok(())
    }

    /// In-place `self += scale * other`, used for SGD steps and gradient
    /// accumulation. Shapes must match.
    pub fn axpy(&mut self, scale: f64, other: &ClassifierParams) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (x, y) in self.b1.iter_mut().zip(&other.b1) {
            *x += scale * y;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (x, y) in self.b2.iter_mut().zip(&other.b2) {
            *x += scale * y;
        }
    }
}

/// Pools a T x D frame matrix into a D-vector.
pub fn pool_frames(frames: &[Vec<f32>], method: PoolMethod) -> Result<Vec<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::validation("cannot pool an empty frame matrix"))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::shape("frame rows must be non-empty"));
    }
    for (t, row) in frames.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::shape(format!(
                "frame row {t} has {} entries, expected {dim}",
                row.len()
            )));
        }
    }
    let pooled = match method {
        PoolMethod::Average => {
            let mut acc = vec![0.0f64; dim];
            for row in frames {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v as f64;
                }
            }
            let t = frames.len() as f64;
            acc.iter_mut().for_each(|a| *a /= t);
            acc
        }
        PoolMethod::Max => {
            let mut acc: Vec<f64> = first.iter().map(|v| *v as f64).collect();
            for row in &frames[1..] {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a = a.max(*v as f64);
                }
            }
            acc
        }
    };
    Ok(pooled)
}

/// The network input for a record: its embedding, or its frames pooled by
/// `method`.
pub fn record_input(record: &UtteranceRecord, method: PoolMethod) -> Result<Vec<f64>> {
    match &record.features {
        Features::Embedding(v) => Ok(v.iter().map(|x| *x as f64).collect()),
        Features::Frames(rows) => pool_frames(rows, method),
    }
}

/// Runs the network on a pooled input. Returns the softmax distribution and
/// the post-relu hidden vector.
pub fn forward(pooled: &[f64], params: &ClassifierParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if pooled.len() != params.input_dim() {
        return Err(Error::shape(format!(
            "input has {} entries, params expect {}",
            pooled.len(),
            params.input_dim()
        )));
    }
    let hidden: Vec<f64> = params
        .w1
        .iter()
        .zip(&params.b1)
        .map(|(row, b)| {
            let z: f64 = row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>() + b;
            z.max(0.0)
        })
        .collect();
    let logits: Vec<f64> = params
        .w2
        .iter()
        .zip(&params.b2)
        .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
        .collect();
    Ok((softmax(&logits), hidden))
}

/// Softmax with max-subtraction.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Cross-entropy of a distribution against a true class index, with the
/// picked probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::shape(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of the single-example loss, plus the loss and probabilities from
/// the same forward pass. `pooled` is the network input.
pub fn grad_from_input(
    pooled: &[f64],
    label: usize,
    params: &ClassifierParams,
) -> Result<(ClassifierParams, f64, Vec<f64>)> {
    let (probs, hidden) = forward(pooled, params)?;
    let loss = cross_entropy(&probs, label)?;
    let g = params.n_groups();
    let h = params.hidden_dim();
    let d = params.input_dim();

    // dL/dz2 = probs - onehot(label)
    let mut dz2 = probs.clone();
    dz2[label] -= 1.0;

    let mut grad = ClassifierParams::zeros(d, h, g);
    for (gi, dz) in dz2.iter().enumerate() {
        for (hi, hv) in hidden.iter().enumerate() {
            grad.w2[gi][hi] = dz * hv;
        }
        grad.b2[gi] = *dz;
    }
    // dL/dh = w2^T dz2, masked by relu activity (subgradient 0 at 0)
    for hi in 0..h {
        if hidden[hi] <= 0.0 {
            continue;
        }
        let dh: f64 = (0..g).map(|gi| params.w2[gi][hi] * dz2[gi]).sum();
        for (di, x) in pooled.iter().enumerate() {
            grad.w1[hi][di] = dh * x;
        }
        grad.b1[hi] = dh;
    }
    Ok((grad, loss, probs))
}

/// Gradient of the loss on one frame-matrix example.
pub fn grad(
    frames: &[Vec<f32>],
    label: usize,
    params: &ClassifierParams,
    method: PoolMethod,
) -> Result<(ClassifierParams, f64, Vec<f64>)> {
    let pooled = pool_frames(frames, method)?;
    grad_from_input(&pooled, label, params)
}

/// Hidden-layer embedding of every record, in corpus order. This is the
/// representation used for clustering and projection.
pub fn embed_corpus(
    corpus: &LabeledCorpus,
    params: &ClassifierParams,
    method: PoolMethod,
) -> Result<Vec<Vec<f64>>> {
    corpus
        .records()
        .iter()
        .map(|rec| {
            let x = record_input(rec, method)?;
            forward(&x, params).map(|(_, hidden)| hidden)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// A trained classifier bundled with the group vocabulary its class indices
/// refer to and the pooling it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ClassifierParams,
    pub groups: Vec<String>,
    pub pool: PoolMethod,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    format: String,
    sections: Vec<String>,
    input_dim: usize,
    hidden_dim: usize,
    groups: Vec<String>,
    pool: PoolMethod,
}

const SECTION_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn matrix_rows_f32(m: &[Vec<f64>]) -> Vec<Vec<f32>> {
    m.iter()
        .map(|row| row.iter().map(|x| *x as f32).collect())
        .collect()
}

impl TrainedModel {
    /// Writes the parameters as four consecutive binary sections (w1, b1,
    /// w2, b2; row ids are row indices) and a `<path>.json` sidecar naming
    /// shapes, groups, and pooling.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.validate()?;
        if self.groups.len() != self.params.n_groups() {
            return Err(Error::shape(format!(
                "model has {} group labels but {} classifier rows",
                self.groups.len(),
                self.params.n_groups()
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        let sections: [(usize, Vec<Vec<f32>>); 4] = [
            (self.params.input_dim(), matrix_rows_f32(&self.params.w1)),
            (self.params.b1.len(), matrix_rows_f32(&[self.params.b1.clone()])),
            (self.params.hidden_dim(), matrix_rows_f32(&self.params.w2)),
            (self.params.b2.len(), matrix_rows_f32(&[self.params.b2.clone()])),
        ];
        let ids: Vec<Vec<String>> = sections
            .iter()
            .map(|(_, rows)| (0..rows.len()).map(|i| i.to_string()).collect())
            .collect();
        for ((dim, rows), ids) in sections.iter().zip(&ids) {
            write_embedding_section(
                &mut writer,
                *dim,
                ids.iter()
                    .zip(rows)
                    .map(|(id, row)| (id.as_str(), row.as_slice())),
                path,
            )?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;

        let sidecar = ModelSidecar {
            format: "classifier-params-v1".to_string(),
            sections: SECTION_NAMES.iter().map(|s| s.to_string()).collect(),
            input_dim: self.params.input_dim(),
            hidden_dim: self.params.hidden_dim(),
            groups: self.groups.clone(),
            pool: self.pool,
        };
        let sidecar_path = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::data(format!("{}: serialize: {e}", sidecar_path.display())))?;
        std::fs::write(&sidecar_path, text).map_err(|e| Error::io(&sidecar_path, e))
    }

    /// Reads a model written by [`TrainedModel::save`], checking sidecar
    /// shapes against the binary sections.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar_path = sidecar_path(path);
        let text =
            std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: ModelSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", sidecar_path.display())))?;
        if sidecar.format != "classifier-params-v1" {
            return Err(Error::data(format!(
                "{}: unknown format {:?}",
                sidecar_path.display(),
                sidecar.format
            )));
        }

        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut mats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(4);
        for _ in 0..4 {
            let section = read_embedding_section(&mut reader, path)?;
            let mat: Vec<Vec<f64>> = (0..section.len())
                .map(|i| section.row(i).iter().map(|x| *x as f64).collect())
                .collect();
            mats.push(mat);
        }
        let mut probe = [0u8; 1];
        match reader.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::data(format!(
                    "{}: trailing data after sections",
                    path.display()
                )))
            }
            Err(e) => return Err(Error::io(path, e)),
        }

        let b2 = mats.pop().unwrap().into_iter().next().unwrap_or_default();
        let w2 = mats.pop().unwrap();
        let b1 = mats.pop().unwrap().into_iter().next().unwrap_or_default();
        let w1 = mats.pop().unwrap();
        let params = ClassifierParams { w1, b1, w2, b2 };
        params
            .validate()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if params.input_dim() != sidecar.input_dim
            || params.hidden_dim() != sidecar.hidden_dim
            || params.n_groups() != sidecar.groups.len()
        {
            return Err(Error::data(format!(
                "{}: sections disagree with sidecar shapes",
                path.display()
            )));
        }
        Ok(TrainedModel {
            params,
            groups: sidecar.groups,
            pool: sidecar.pool,
        })
    }
}

/// Path of the JSON sidecar describing a params file.
pub fn sidecar_path(params_path: &Path) -> std::path::PathBuf {
    let mut name = params_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "params".to_string());
    name.push_str(".json");
    params_path.with_file_name(name)
}
