//! Tensor kernels: matrix multiply, row softmax, scaling and element casts.
//!
//! Accumulation always runs row-major with the inner index ascending, so
//! every kernel is bit-reproducible for a given input.

use half::f16;

use crate::dtype::ElementType;
use crate::error::TensorError;
use crate::tensor::{Tensor, TensorData};

/// Rounds to binary16 (nearest-even, subnormals kept) and clamps overflow
/// to the largest finite value instead of infinity.
pub fn f32_to_f16_saturating(x: f32) -> f16 {
    let h = f16::from_f32(x);
    if h.is_infinite() && x.is_finite() {
        if x > 0.0 {
            f16::MAX
        } else {
            f16::MIN
        }
    } else {
        h
    }
}

fn f64_to_f16_saturating(x: f64) -> f16 {
    let h = f16::from_f64(x);
    if h.is_infinite() && x.is_finite() {
        if x > 0.0 {
            f16::MAX
        } else {
            f16::MIN
        }
    } else {
        h
    }
}

fn f64_to_f32_saturating(x: f64) -> f32 {
    let y = x as f32;
    if y.is_infinite() && x.is_finite() {
        if x > 0.0 {
            f32::MAX
        } else {
            f32::MIN
        }
    } else {
        y
    }
}

fn float_output(values: Vec<f32>, dtype: ElementType) -> TensorData {
    match dtype {
        ElementType::Fp16 => TensorData::F16(values.into_iter().map(f32_to_f16_saturating).collect()),
        _ => TensorData::F32(values),
    }
}

/// `a (m×k) · b (k×n)`.
///
/// Floating operands accumulate in `accumulate` (FP32, or FP16 with a
/// binary16 rounding after every add) and the result is narrowed to the
/// operands' dtype, or FP32 when the operand dtypes differ. Integer operands
/// accumulate exactly and fail with [`TensorError::AccumulatorOverflow`] if
/// any partial sum leaves the range of `accumulate`; the result has dtype
/// `accumulate`.
pub fn matmul(a: &Tensor, b: &Tensor, accumulate: ElementType) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.dtype().is_float() != b.dtype().is_float() {
        return Err(TensorError::DtypeMismatch {
            op: "matmul",
            lhs: a.dtype(),
            rhs: b.dtype(),
        });
    }
    if a.dtype().is_float() != accumulate.is_float() {
        return Err(TensorError::BadAccumulator {
            op: "matmul",
            dtype: accumulate,
        });
    }
    let bt = b.transpose()?;
    if a.dtype().is_float() {
        let out_dtype = if a.dtype() == b.dtype() {
            a.dtype()
        } else {
            ElementType::Fp32
        };
        let av = a.to_f32_vec();
        let bv = bt.to_f32_vec();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let col = &bv[j * k..(j + 1) * k];
                let v = match accumulate {
                    ElementType::Fp16 => {
                        let mut acc = f16::ZERO;
                        for (x, y) in row.iter().zip(col) {
                            acc = f64_to_f16_saturating(acc.to_f64() + f64::from(x * y));
                        }
                        acc.to_f32()
                    }
                    _ => {
                        let mut acc = 0.0f32;
                        for (x, y) in row.iter().zip(col) {
                            acc += x * y;
                        }
                        acc
                    }
                };
                out.push(v);
            }
        }
        Tensor::new(vec![m, n], float_output(out, out_dtype))
    } else {
        let (lo, hi) = accumulate.int_range().expect("integer accumulator");
        let av: Vec<i64> = a.to_f64_vec().into_iter().map(|x| x as i64).collect();
        let bv: Vec<i64> = bt.to_f64_vec().into_iter().map(|x| x as i64).collect();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let col = &bv[j * k..(j + 1) * k];
                let mut acc: i64 = 0;
                for (x, y) in row.iter().zip(col) {
                    acc += x * y;
                    if acc < lo || acc > hi {
                        return Err(TensorError::AccumulatorOverflow {
                            dtype: accumulate,
                            row: i,
                            col: j,
                        });
                    }
                }
                out.push(acc);
            }
        }
        let data = match accumulate {
            ElementType::Int8 => TensorData::I8(out.into_iter().map(|x| x as i8).collect()),
            ElementType::Int16 => TensorData::I16(out.into_iter().map(|x| x as i16).collect()),
            _ => TensorData::I32(out.into_iter().map(|x| x as i32).collect()),
        };
        Tensor::new(vec![m, n], data)
    }
}

/// Numerically stable softmax over each row of a floating `m×n` tensor.
///
/// Rows are shifted by their maximum before exponentiation. FP16 input is
/// evaluated in FP32 and rounded back to binary16.
pub fn softmax_rows(s_in: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = s_in.dims2()?;
    if !s_in.dtype().is_float() {
        return Err(TensorError::NotFloating {
            op: "softmax_rows",
            dtype: s_in.dtype(),
        });
    }
    let values = s_in.to_f32_vec();
    let mut out = Vec::with_capacity(m * n);
    for row in values.chunks_exact(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&x| (x - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(vec![m, n], float_output(out, s_in.dtype()))
}

/// Multiplies every element of a floating tensor by `factor`.
pub fn scale(t: &Tensor, factor: f32) -> Result<Tensor, TensorError> {
    if !t.dtype().is_float() {
        return Err(TensorError::NotFloating {
            op: "scale",
            dtype: t.dtype(),
        });
    }
    let out = t.to_f32_vec().into_iter().map(|x| x * factor).collect();
    Tensor::new(t.shape().to_vec(), float_output(out, t.dtype()))
}

/// Converts `t` to element type `to`.
///
/// Float targets round to nearest-even and saturate to ±max finite. Integer
/// targets saturate to the type range; a non-integral (or NaN) float source
/// is rejected because that conversion belongs to the quantizer.
pub fn cast(t: &Tensor, to: ElementType) -> Result<Tensor, TensorError> {
    if t.dtype() == to {
        return Ok(t.clone());
    }
    let shape = t.shape().to_vec();
    let data = match to {
        ElementType::Fp32 => TensorData::F32(match t.data() {
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
            _ => t.to_f64_vec().into_iter().map(f64_to_f32_saturating).collect(),
        }),
        ElementType::Fp16 => TensorData::F16(match t.data() {
            TensorData::F32(v) => v.iter().map(|&x| f32_to_f16_saturating(x)).collect(),
            _ => t.to_f64_vec().into_iter().map(f64_to_f16_saturating).collect(),
        }),
        _ => {
            let (lo, hi) = to.int_range().expect("integer target");
            let mut ints = Vec::with_capacity(t.len());
            for x in t.to_f64_vec() {
                if x.is_nan() || x.fract() != 0.0 {
                    return Err(TensorError::NonIntegralCast { value: x, to });
                }
                ints.push(x.clamp(lo as f64, hi as f64) as i64);
            }
            match to {
                ElementType::Int8 => TensorData::I8(ints.into_iter().map(|x| x as i8).collect()),
                ElementType::Int16 => TensorData::I16(ints.into_iter().map(|x| x as i16).collect()),
                _ => TensorData::I32(ints.into_iter().map(|x| x as i32).collect()),
            }
        }
    };
    Tensor::new(shape, data)
}
