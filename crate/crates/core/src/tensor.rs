use serde::{Deserialize, Serialize};

use crate::error::{dimension, Result};

/// Dense row-major f64 array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dimension(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dimension(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data })
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Scalar value; panics unless the tensor holds exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) view: vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[..self.shape.len() - 1].iter().product(), *self.shape.last().unwrap()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let (_, c) = self.dims2();
        self.data.chunks(c.max(1))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Forward kernels shared by the tape and by tape-free inference, so both
/// paths produce bit-identical values.
pub mod kernels {
    use super::*;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(dimension(format!(
                "matmul needs matrices, got {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let (m, k) = (a.shape[0], a.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 {
            return Err(dimension(format!("transpose needs a matrix, got {:?}", a.shape)));
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = a.dims2();
        if bias.len() != c {
            return Err(dimension(format!("bias of {} values for {c} columns", bias.len())));
        }
        let mut out = a.clone();
        for row in out.data.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(dimension(format!(
                "elementwise op on {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: a.shape.clone(), data })
    }

    pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn relu(a: &Tensor) -> Tensor {
        map(a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn row_sum(a: &Tensor) -> Tensor {
        let (r, _) = a.dims2();
        let data = a.rows().map(|row| row.iter().sum()).collect::<Vec<f64>>();
        debug_assert_eq!(data.len(), r);
        Tensor { shape: vec![r], data }
    }

    pub fn sum(a: &Tensor) -> Tensor {
        Tensor::scalar(a.data.iter().sum())
    }

    /// Divides every row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(a: &Tensor, eps: f64) -> Tensor {
        let mut out = a.clone();
        let (_, c) = a.dims2();
        for row in out.data.chunks_mut(c.max(1)) {
            let denom = norm(row).max(eps);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        out
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let (r, c) = logits.dims2();
        if labels.len() != r {
            return Err(dimension(format!("{} labels for {r} rows", labels.len())));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = 0.0;
        for (row, &y) in logits.rows().zip(labels) {
            if y >= c {
                return Err(dimension(format!("label {y} outside {c} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() + max - row[y];
            probs.extend(exps.iter().map(|e| e / z));
        }
        Ok((total / r as f64, Tensor { shape: vec![r, c], data: probs }))
    }
}
