//! Dense 64-bit arrays and named trainable parameters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// Row-major dense array.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err("new", format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    /// A `1 x n` row.
    pub fn row(values: &[f64]) -> Self {
        Self { shape: vec![1, values.len()], data: values.to_vec() }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| normal.sample(rng)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::Usage(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in &grads.entries {
            let dst = self.params[id.0].grad.data_mut();
            match g {
                ParamGrad::Dense(values) => {
                    for (d, v) in dst.iter_mut().zip(values) {
                        *d += scale * v;
                    }
                }
                ParamGrad::Rows { cols, rows } => {
                    for (&r, values) in rows {
                        for (d, v) in dst[r * cols..(r + 1) * cols].iter_mut().zip(values) {
                            *d += scale * v;
                        }
                    }
                }
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.params
            .iter()
            .map(|p| TensorRecord { name: p.name.clone(), shape: p.value.shape().to_vec(), values: p.value.data().to_vec() })
            .collect()
    }

    /// Overwrites values from records; every parameter must be present with its exact shape.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<(), TensorError> {
        let by_name: HashMap<&str, &TensorRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &mut self.params {
            let r = by_name
                .get(p.name.as_str())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if r.shape != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    r.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(r.shape.clone(), r.values.clone())?;
        }
        Ok(())
    }
}

/// Gradient of one parameter: dense, or a sparse set of rows for lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows { cols: usize, rows: BTreeMap<usize, Vec<f64>> },
}

impl ParamGrad {
    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(v) => v.clone(),
            ParamGrad::Rows { cols, rows } => {
                let mut out = vec![0.0; len];
                for (&r, v) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(v);
                }
                out
            }
        }
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub(crate) entries: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.entries.get(&id)
    }

    /// Dense gradient for `id`, zeros when the parameter did not participate.
    pub fn dense(&self, id: ParamId, params: &ParamSet) -> Vec<f64> {
        let len = params.value(id).len();
        self.entries.get(&id).map_or_else(|| vec![0.0; len], |g| g.to_dense(len))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.keys().copied()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in &other.entries {
            match (self.entries.get_mut(id), g) {
                (None, g) => {
                    self.entries.insert(*id, g.clone());
                }
                (Some(ParamGrad::Dense(a)), ParamGrad::Dense(b)) => {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                (Some(ParamGrad::Rows { rows: a, .. }), ParamGrad::Rows { rows: b, .. }) => {
                    for (r, v) in b {
                        match a.get_mut(r) {
                            Some(acc) => acc.iter_mut().zip(v).for_each(|(x, y)| *x += y),
                            None => {
                                a.insert(*r, v.clone());
                            }
                        }
                    }
                }
                (Some(existing), g) => {
                    let len = match (existing.clone(), g) {
                        (ParamGrad::Dense(v), _) => v.len(),
                        (_, ParamGrad::Dense(v)) => v.len(),
                        _ => unreachable!(),
                    };
                    let mut a = existing.to_dense(len);
                    a.iter_mut().zip(g.to_dense(len)).for_each(|(x, y)| *x += y);
                    *existing = ParamGrad::Dense(a);
                }
            }
        }
    }
}

/// Serialized form of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Writes any serializable checkpoint as JSON. Floats round-trip exactly.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TensorError> {
    let text = serde_json::to_string(value).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TensorError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| TensorError::Checkpoint(e.to_string()))
}
