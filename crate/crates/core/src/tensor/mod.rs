//! Dense f64 tensors, named parameter stores, and reverse-mode
//! differentiation on a define-by-run tape.
//!
//! Everything numeric in this crate runs through this module: the networks
//! build their forward passes on a [`tape::Tape`], training harvests
//! gradients into a [`ParamStore`], and [`optim::Adam`] consumes them.
//! All arithmetic is f64; there is no f32 anywhere in the pipeline.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major tensor of f64 values with an optional gradient slot.
///
/// Rank is arbitrary in principle, but every operation in this crate works
/// on rank-1 or rank-2 tensors. A tensor with exactly one element is treated
/// as a scalar by the broadcasting rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` has exactly `shape.product()`
    /// elements.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    /// 2-D tensor from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gradient accumulator, if one has been attached.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attaches a zero gradient slot if absent and returns it mutably.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(0.0);
        }
    }
}

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// An ordered collection of named parameter tensors with gradient slots.
///
/// Iteration order is insertion order, which makes every pass over the
/// parameters (optimizer steps, checkpoint serialization, gradient checks)
/// deterministic. Each store carries a process-unique id so a tape can tell
/// parameters of different networks apart (e.g. main vs. target Q-network).
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
}

impl Clone for ParamStore {
    /// Cloning produces a store with the same contents but a fresh identity,
    /// so gradients harvested for the clone never leak into the original.
    fn clone(&self) -> Self {
        ParamStore {
            id: STORE_COUNTER.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: STORE_COUNTER.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Inserts a parameter under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        tensor.grad_mut(); // every parameter gets a gradient slot
        tensor.zero_grad();
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.values {
            t.zero_grad();
        }
    }

    /// Euclidean norm over all gradient components.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for t in &self.values {
            if let Some(g) = t.grad() {
                for &v in g {
                    sq += v * v;
                }
            }
        }
        sq.sqrt()
    }

    /// Scales every gradient so the global norm does not exceed `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for t in &mut self.values {
                for v in t.grad_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }

    /// Copies parameter values (not gradients) from another store with the
    /// same parameter layout. Used for target-network synchronization.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract(
                "parameter stores have different layouts; cannot copy values",
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            if dst.shape != src.shape {
                return Err(Error::ShapeMismatch {
                    op: "copy_values_from",
                    lhs: dst.shape.clone(),
                    rhs: src.shape.clone(),
                });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Uniform Xavier/Glorot initialization in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor {
        shape: vec![fan_in, fan_out],
        data,
        grad: None,
    }
}

/// Uniform init for a free vector (start token, positional encoding row),
/// scaled like a square Xavier layer of width `dim`.
pub fn uniform_row(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = (6.0 / (2.0 * dim as f64)).sqrt();
    (0..dim).map(|_| rng.gen_range(-bound..bound)).collect()
}
