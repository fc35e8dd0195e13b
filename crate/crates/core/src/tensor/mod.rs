//! Dense row-major `f64` tensors, a reverse-mode tape and a finite-difference
//! gradient oracle.
//!
//! Everything else in the crate is built on three pieces:
//!
//! - [`Tensor`] owns data (and optionally an accumulated gradient buffer).
//! - [`Tape`] records a forward computation over [`Var`] handles and
//!   replays it backwards to produce [`Gradients`].
//! - [`finite_diff_grad`] evaluates central differences and is used by the
//!   test suites as an independent check of the tape.

mod dump;
mod gradcheck;
mod kernels;
mod tape;

pub use dump::{read_tensor, write_tensor, TensorDump};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use kernels::{gelu, gelu_grad, softplus, sigmoid};
pub use tape::{backward, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("index {index} out of range for {op} (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("tensor parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor of 64-bit floats stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `rows x cols` matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access for optimizer updates and checkpoint loading.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for dim {d}");
                acc * d + i
            })
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Drops the gradient buffer.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer. Ignored for tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        if !self.requires_grad {
            return Ok(());
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        [n] => Ok((*n, 1)),
        _ => Err(TensorError::Shape {
            op,
            left: t.shape.clone(),
            right: vec![],
        }),
    }
}

/// Standard matrix product `a [m x n] * b [n x p]`. A 1-D `b` is treated as a column.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a, "matmul")?;
    let (n2, p) = as_matrix(b, "matmul")?;
    if a.shape.len() != 2 || n != n2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * p];
    kernels::gemm(
        kernels::MatRef::new(&a.data, m, n, false),
        kernels::MatRef::new(&b.data, n, p, false),
        &mut out,
        0.0,
    );
    let shape = if b.shape.len() == 1 { vec![m] } else { vec![m, p] };
    Tensor::new(shape, out)
}

/// Temperature-scaled softmax of a vector, `exp(v_i / t) / sum_j exp(v_j / t)`.
pub fn softmax(v: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TensorError::Domain {
            op: "softmax",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let scaled: Vec<f64> = v.data.iter().map(|x| x / temperature).collect();
    let mut out = vec![0.0; scaled.len()];
    kernels::softmax_row(&scaled, None, &mut out);
    Tensor::new(v.shape.clone(), out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, classes) = as_matrix(logits, "cross_entropy")?;
    if rows != targets.len() || rows == 0 {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            left: logits.shape.clone(),
            right: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: t,
                limit: classes,
            });
        }
        let row = &logits.data[r * classes..(r + 1) * classes];
        total += kernels::log_sum_exp(row) - row[t];
    }
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let id = Tensor::identity(2);
        let col = Tensor::matrix(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &col).unwrap(), col);

        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = Tensor::matrix(&[&[0.0], &[0.0]]);
        assert_eq!(matmul(&a, &z).unwrap().data(), &[0.0, 0.0]);

        let row = Tensor::matrix(&[&[1.0, 2.0]]);
        let b = Tensor::matrix(&[&[3.0], &[5.0]]);
        assert_eq!(matmul(&row, &b).unwrap().data(), &[13.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(TensorError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]), 1.0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&Tensor::vector(vec![5.0, 0.0]), 1000.0).unwrap();
        assert!((s.data()[0] - 0.50125).abs() < 1e-5);
        assert!((s.data()[1] - 0.49875).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(softmax(&v, 0.0), Err(TensorError::Domain { .. })));
        assert!(matches!(softmax(&v, -1.0), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&Tensor::vector(vec![1000.0, 999.0, -1000.0]), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let c = 5;
        let uniform = Tensor::zeros(&[3, c]);
        let l = cross_entropy(&uniform, &[0, 2, 4]).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-14);

        let confident = Tensor::matrix(&[&[60.0, 0.0, 0.0]]);
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-20);

        let l = cross_entropy(&Tensor::matrix(&[&[1.0, 0.0]]), &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(TensorError::Index { index: 3, limit: 3, .. })
        ));
    }

    #[test]
    fn constructor_checks_numel() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::zeros(&[2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);

        let mut frozen = Tensor::zeros(&[2]);
        frozen.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(frozen.grad().is_none());
    }
}
