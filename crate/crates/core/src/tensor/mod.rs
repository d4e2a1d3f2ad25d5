//! Dense row-major `f64` tensors and the primitives the attention, fusion and
//! distillation code is built from.

mod grad;
mod io;
pub mod ops;
mod param;

pub use grad::{central_difference, grad_check, GradReport};
pub use io::{read_tensor_bin, tensor_from_json, tensor_to_json, write_tensor_bin};
pub use param::ParamSet;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::from_vec(&raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Parameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err("from_vec", shape, &[data.len()]);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("positive extents")
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).expect("positive extents")
    }

    /// Builds a matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parameter("ragged matrix rows".into()));
        }
        Tensor::from_vec(&[m, n], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor::from_vec(&[values.len()], values.to_vec()).expect("non-empty vector")
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => dim_err("dims2", &self.shape, &[0, 0]),
        }
    }

    /// Extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => dim_err("dims3", &self.shape, &[0, 0, 0]),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().expect("rank >= 1");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return dim_err("reshape", &self.shape, shape);
        }
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return dim_err("reshape", &self.shape, shape);
        }
        Tensor::from_vec(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        Ok(Tensor::from_fn(&[n, m], |idx| {
            let (j, i) = (idx / m, idx % m);
            self.data[i * n + j]
        }))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return dim_err(op, &self.shape, &other.shape);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return dim_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates rank-N tensors along the leading axis.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail || p.rank() != first.rank() {
                return dim_err("concat", &first.shape, &p.shape);
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::from_vec(&shape, data)
    }

    /// Slices `[start, end)` along the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(Error::Parameter(format!(
                "slice {start}..{end} out of range for {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_vec(&shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Columns `[start, end)` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if start >= end || end > n {
            return Err(Error::Parameter(format!(
                "columns {start}..{end} out of range for {:?}",
                self.shape
            )));
        }
        let w = end - start;
        Ok(Tensor::from_fn(&[m, w], |idx| {
            self.data[(idx / w) * n + start + idx % w]
        }))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hconcat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("hconcat of zero tensors".into()))?;
        let (m, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return dim_err("hconcat", &first.shape, &p.shape);
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_vec(&[m, n], data)
    }

    /// `C×H×W` feature map to `(H·W)×C` token matrix.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        self.reshape(&[c, h * w])?.transpose()
    }

    /// `(H·W)×C` token matrix back to a `C×H×W` feature map.
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (n, c) = tokens.dims2()?;
        if n != h * w {
            return dim_err("from_tokens", tokens.shape(), &[h * w, c]);
        }
        tokens.transpose()?.into_shape(&[c, h, w])
    }
}
