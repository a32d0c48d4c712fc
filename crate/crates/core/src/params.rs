//! Parameter storage.
//!
//! [`ParamStore`] owns the 32-bit master copy of every learnable tensor.
//! Computation never reads it directly: it reads a [`Weights`] rendering,
//! which is either a plain copy (full precision), or the quantized rendering
//! produced by [`crate::quant`] for mixed-precision training and inference.

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numeric::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionClass {
    /// Subword embeddings: 8-bit codes over a dynamic range.
    Embedding8,
    /// Network parameters: IEEE binary16.
    Param16,
    /// Activations rendered in binary16 between layers.
    Activation16,
    /// Values that stay in 32 bits (optimizer state, shadows).
    Stable32,
}

impl PrecisionClass {
    pub fn code(self) -> u8 {
        match self {
            PrecisionClass::Embedding8 => 0,
            PrecisionClass::Param16 => 1,
            PrecisionClass::Activation16 => 2,
            PrecisionClass::Stable32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => PrecisionClass::Embedding8,
            1 => PrecisionClass::Param16,
            2 => PrecisionClass::Activation16,
            3 => PrecisionClass::Stable32,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub class: PrecisionClass,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// All learnable tensors of a model, in 32-bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, class: PrecisionClass, data: Vec<f32>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "tensor data does not match its shape");
        self.tensors.push(Tensor { name: name.into(), shape, class, data });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn count_params(&self, class: PrecisionClass) -> usize {
        self.tensors.iter().filter(|t| t.class == class).map(Tensor::numel).sum()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Plain widening copy, no quantization.
    pub fn to_weights<T: Scalar>(&self) -> Weights<T> {
        Weights {
            shapes: self.tensors.iter().map(|t| t.shape.clone()).collect(),
            data: self.tensors.iter().map(|t| t.data.iter().map(|&v| T::widen(v)).collect()).collect(),
        }
    }
}

/// Values used in computation (or gradients), parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<T>>,
}

impl<T: Scalar> Weights<T> {
    pub fn zeros_like(other: &Weights<T>) -> Self {
        Self {
            shapes: other.shapes.clone(),
            data: other.data.iter().map(|d| vec![T::zero(); d.len()]).collect(),
        }
    }

    pub fn zeros_for(store: &ParamStore) -> Self {
        Self {
            shapes: store.tensors().iter().map(|t| t.shape.clone()).collect(),
            data: store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect(),
        }
    }

    pub fn from_parts(shapes: Vec<Vec<usize>>, data: Vec<Vec<T>>) -> Self {
        assert_eq!(shapes.len(), data.len());
        Self { shapes, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn vec(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn vec_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, T> {
        let (r, c) = as_matrix(&self.shapes[id.0]);
        ArrayView2::from_shape((r, c), &self.data[id.0]).expect("matrix view")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        let (r, c) = as_matrix(&self.shapes[id.0]);
        ArrayViewMut2::from_shape((r, c), &mut self.data[id.0]).expect("matrix view")
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.data.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.data.iter_mut()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Weights<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.data {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|d| d.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self, id: ParamId) -> T {
        self.data[id.0].iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("tensor of rank {} has no matrix view", shape.len()),
    }
}
