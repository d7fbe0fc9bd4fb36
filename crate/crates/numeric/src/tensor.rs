use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NumericError, Result};
use crate::rng::Rng;

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("Tensor::new", format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite("Tensor::new".into()));
        }
        Ok(Self { shape, data })
    }

    /// Builds without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Interprets a channel-major batch `[c, b, l]` and returns the `[c, l]`
    /// slice for item `b`.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let [c, nb, l] = self.shape[..] else {
            return shape_err("batch_item", format!("expected rank 3, got {:?}", self.shape));
        };
        if b >= nb {
            return shape_err("batch_item", format!("index {b} out of {nb}"));
        }
        let mut out = Vec::with_capacity(c * l);
        for ch in 0..c {
            let start = ch * nb * l + b * l;
            out.extend_from_slice(&self.data[start..start + l]);
        }
        Ok(Tensor::from_parts(vec![c, l], out))
    }

    /// Stacks `[c, l]` matrices into the channel-major batch `[c, b, l]`.
    pub fn stack_channel_major(items: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return Err(NumericError::Empty("stack_channel_major"));
        };
        let [c, l] = first.shape[..] else {
            return shape_err("stack_channel_major", format!("expected [c, l], got {:?}", first.shape));
        };
        let nb = items.len();
        let mut data = vec![0.0; c * nb * l];
        for (b, item) in items.iter().enumerate() {
            if item.shape != first.shape {
                return shape_err(
                    "stack_channel_major",
                    format!("item {b} has shape {:?}, expected {:?}", item.shape, first.shape),
                );
            }
            for ch in 0..c {
                let dst = ch * nb * l + b * l;
                data[dst..dst + l].copy_from_slice(&item.data[ch * l..(ch + 1) * l]);
            }
        }
        Ok(Tensor::from_parts(vec![c, nb, l], data))
    }

    /// Splits a channel-major batch `[c, b, l]` back into `[c, l]` items.
    pub fn unstack_channel_major(&self) -> Result<Vec<Tensor>> {
        let nb = match self.shape[..] {
            [_, nb, _] => nb,
            _ => return shape_err("unstack_channel_major", format!("{:?}", self.shape)),
        };
        (0..nb).map(|b| self.batch_item(b)).collect()
    }
}
