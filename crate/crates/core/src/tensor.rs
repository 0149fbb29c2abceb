//! Dense row-major tensors.

use half::f16;

use crate::dtype::ElementType;
use crate::error::TensorError;

/// Typed element buffer backing a [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> ElementType {
        match self {
            TensorData::F32(_) => ElementType::Fp32,
            TensorData::F16(_) => ElementType::Fp16,
            TensorData::I8(_) => ElementType::Int8,
            TensorData::I16(_) => ElementType::Int16,
            TensorData::I32(_) => ElementType::Int32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn zeros(dtype: ElementType, len: usize) -> TensorData {
        match dtype {
            ElementType::Fp32 => TensorData::F32(vec![0.0; len]),
            ElementType::Fp16 => TensorData::F16(vec![f16::ZERO; len]),
            ElementType::Int8 => TensorData::I8(vec![0; len]),
            ElementType::Int16 => TensorData::I16(vec![0; len]),
            ElementType::Int32 => TensorData::I32(vec![0; len]),
        }
    }

    fn gather(&self, start: usize, end: usize) -> TensorData {
        match self {
            TensorData::F32(v) => TensorData::F32(v[start..end].to_vec()),
            TensorData::F16(v) => TensorData::F16(v[start..end].to_vec()),
            TensorData::I8(v) => TensorData::I8(v[start..end].to_vec()),
            TensorData::I16(v) => TensorData::I16(v[start..end].to_vec()),
            TensorData::I32(v) => TensorData::I32(v[start..end].to_vec()),
        }
    }

    fn extend_from(&mut self, other: &TensorData) {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => a.extend_from_slice(b),
            (TensorData::F16(a), TensorData::F16(b)) => a.extend_from_slice(b),
            (TensorData::I8(a), TensorData::I8(b)) => a.extend_from_slice(b),
            (TensorData::I16(a), TensorData::I16(b)) => a.extend_from_slice(b),
            (TensorData::I32(a), TensorData::I32(b)) => a.extend_from_slice(b),
            _ => unreachable!("dtype checked by caller"),
        }
    }

    fn permuted(&self, index: &[usize]) -> TensorData {
        fn pick<T: Copy>(v: &[T], index: &[usize]) -> Vec<T> {
            index.iter().map(|&i| v[i]).collect()
        }
        match self {
            TensorData::F32(v) => TensorData::F32(pick(v, index)),
            TensorData::F16(v) => TensorData::F16(pick(v, index)),
            TensorData::I8(v) => TensorData::I8(pick(v, index)),
            TensorData::I16(v) => TensorData::I16(pick(v, index)),
            TensorData::I32(v) => TensorData::I32(pick(v, index)),
        }
    }

    /// Value at `i` widened to `f64`. Exact for every element type.
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => f64::from(v[i]),
            TensorData::F16(v) => v[i].to_f64(),
            TensorData::I8(v) => f64::from(v[i]),
            TensorData::I16(v) => f64::from(v[i]),
            TensorData::I32(v) => f64::from(v[i]),
        }
    }
}

/// Dense row-major tensor. Values are immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidShape(shape.to_vec()))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Tensor, TensorError> {
        let expected = element_count(&shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, TensorData::F32(values))
    }

    /// Builds an FP16 tensor, rounding each value to binary16.
    pub fn from_f32_as_f16(shape: Vec<usize>, values: &[f32]) -> Result<Tensor, TensorError> {
        let data = values.iter().map(|&x| crate::ops::f32_to_f16_saturating(x)).collect();
        Tensor::new(shape, TensorData::F16(data))
    }

    pub fn from_i8(shape: Vec<usize>, values: Vec<i8>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, TensorData::I8(values))
    }

    pub fn from_i16(shape: Vec<usize>, values: Vec<i16>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, TensorData::I16(values))
    }

    pub fn from_i32(shape: Vec<usize>, values: Vec<i32>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, TensorData::I32(values))
    }

    pub fn zeros(shape: Vec<usize>, dtype: ElementType) -> Result<Tensor, TensorError> {
        let n = element_count(&shape)?;
        Ok(Tensor {
            shape,
            data: TensorData::zeros(dtype, n),
        })
    }

    /// `n × n` FP32 identity.
    pub fn identity(n: usize) -> Result<Tensor, TensorError> {
        let mut values = vec![0.0f32; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Tensor::from_f32(vec![n, n], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> ElementType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Bytes occupied by the element buffer.
    pub fn byte_len(&self) -> u64 {
        self.dtype().bytes(self.len() as u64)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix(self.shape.clone())),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[f16]> {
        match &self.data {
            TensorData::F16(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i16(&self) -> Option<&[i16]> {
        match &self.data {
            TensorData::I16(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    /// All values widened to `f64` (exact for every element type).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.data.get_f64(i)).collect()
    }

    /// All values as `f32`. Exact except for INT32 magnitudes above 2^24.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| f32::from(x)).collect(),
            TensorData::I16(v) => v.iter().map(|&x| f32::from(x)).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn get_f64(&self, index: usize) -> f64 {
        self.data.get_f64(index)
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data)
    }

    /// Rows `[start, start + count)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor, TensorError> {
        let (rows, cols) = self.dims2()?;
        if count == 0 || start + count > rows {
            return Err(TensorError::RowRange { start, count, rows });
        }
        Ok(Tensor {
            shape: vec![count, cols],
            data: self.data.gather(start * cols, (start + count) * cols),
        })
    }

    /// Stacks rank-2 tensors with equal column count and dtype along rows.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty)?;
        let (_, cols) = first.dims2()?;
        let mut rows = 0;
        let mut data = TensorData::zeros(first.dtype(), 0);
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            if p.dtype() != first.dtype() {
                return Err(TensorError::DtypeMismatch {
                    op: "concat_rows",
                    lhs: first.dtype(),
                    rhs: p.dtype(),
                });
            }
            rows += r;
            data.extend_from(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (rows, cols) = self.dims2()?;
        let index: Vec<usize> = (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect();
        Ok(Tensor {
            shape: vec![cols, rows],
            data: self.data.permuted(&index),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_zero_dims() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch {
                expected: 4,
                actual: 3,
                ..
            })
        ));
        assert!(matches!(
            Tensor::from_f32(vec![2, 0], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(Tensor::from_f32(vec![], vec![]).is_err());
    }

    #[test]
    fn slice_and_concat_rows() {
        let t = Tensor::from_f32(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = t.slice_rows(0, 1).unwrap();
        let b = t.slice_rows(1, 2).unwrap();
        assert_eq!(b.as_f32().unwrap(), &[3., 4., 5., 6.]);
        assert_eq!(Tensor::concat_rows(&[a, b]).unwrap(), t);
        assert!(t.slice_rows(2, 2).is_err());
    }

    #[test]
    fn transpose_2x3() {
        let t = Tensor::from_i16(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.as_i16().unwrap(), &[1, 4, 2, 5, 3, 6]);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn concat_rejects_mixed_dtypes() {
        let a = Tensor::zeros(vec![1, 2], ElementType::Fp32).unwrap();
        let b = Tensor::zeros(vec![1, 2], ElementType::Fp16).unwrap();
        assert!(matches!(
            Tensor::concat_rows(&[a, b]),
            Err(TensorError::DtypeMismatch { .. })
        ));
    }
}
