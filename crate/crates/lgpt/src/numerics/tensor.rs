use crate::error::{Error, Result};

/// Dense numeric array, row-major f64 storage.
///
/// Invariant: `product(shape) == data.len()`. A rank-0 tensor (empty shape)
/// holds exactly one value and is used for scalars such as losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics if rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row/column extents of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("expected rank 2, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("expected scalar, got shape {:?}", self.shape),
            })
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterpret the same storage under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a[m×k] · b[k×n]`, plain ikj loop. The callers guarantee shape agreement.
pub(crate) fn matmul_into(out: &mut [f64], a: &Tensor, b: &Tensor) {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    debug_assert_eq!(b.shape[0], k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// `a[m×k] · bᵀ` where `b` is `[n×k]`: rows of both operands are contiguous.
pub(crate) fn matmul_bt_into(out: &mut [f64], a: &Tensor, b: &Tensor) {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    debug_assert_eq!(b.shape[1], k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            *o += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut out = vec![0.0; 4];
        matmul_into(&mut out, &a, &id);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_bt_matches_plain() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let b = Tensor::from_rows(&[vec![2.0, 1.0, 0.0], vec![0.0, -1.0, 4.0]]);
        let bt = Tensor::from_rows(&[
            vec![2.0, 0.0],
            vec![1.0, -1.0],
            vec![0.0, 4.0],
        ]);
        let mut out1 = vec![0.0; 4];
        let mut out2 = vec![0.0; 4];
        matmul_bt_into(&mut out1, &a, &b);
        matmul_into(&mut out2, &a, &bt);
        assert_eq!(out1, out2);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 3.5);
    }
}
