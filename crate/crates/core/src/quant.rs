//! Post-training quantization: min/max calibration, INT8/INT16 affine
//! quantization, integer matmul and fidelity metrics.
//!
//! Weights use symmetric per-channel INT8 and activations asymmetric
//! per-tensor INT16 (W8A16). Rounding is half-to-even throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::AttentionInputs;
use crate::dtype::ElementType;
use crate::error::QuantError;
use crate::ops;
use crate::planner::TilePlan;
use crate::tensor::{Tensor, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    Int8,
    Int16,
}

impl TryFrom<u8> for BitWidth {
    type Error = String;

    fn try_from(bits: u8) -> Result<Self, Self::Error> {
        match bits {
            8 => Ok(BitWidth::Int8),
            16 => Ok(BitWidth::Int16),
            other => Err(format!("unsupported bit width {other}")),
        }
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.bits() as u8
    }
}

impl BitWidth {
    pub const fn bits(self) -> u32 {
        match self {
            BitWidth::Int8 => 8,
            BitWidth::Int16 => 16,
        }
    }

    pub const fn qmin(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub const fn qmax(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    pub const fn dtype(self) -> ElementType {
        match self {
            BitWidth::Int8 => ElementType::Int8,
            BitWidth::Int16 => ElementType::Int16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

impl Granularity {
    fn group_count(self, shape: &[usize]) -> Result<usize, QuantError> {
        match self {
            Granularity::PerTensor => Ok(1),
            Granularity::PerChannel { axis } => shape.get(axis).copied().ok_or(QuantError::BadAxis {
                axis,
                shape: shape.to_vec(),
            }),
        }
    }

    /// Group of every flat element index.
    fn group_index(self, shape: &[usize]) -> Result<impl Fn(usize) -> usize, QuantError> {
        let groups = self.group_count(shape)?;
        let stride = match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { axis } => shape[axis + 1..].iter().product(),
        };
        Ok(move |i: usize| (i / stride) % groups)
    }
}

/// Per-group running min/max over calibration samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub granularity: Granularity,
    pub shape: Vec<usize>,
    pub mins: Vec<f32>,
    pub maxs: Vec<f32>,
    pub samples: usize,
}

impl CalibrationStats {
    pub fn from_sample(sample: &Tensor, granularity: Granularity) -> Result<CalibrationStats, QuantError> {
        let groups = granularity.group_count(sample.shape())?;
        let mut stats = CalibrationStats {
            granularity,
            shape: sample.shape().to_vec(),
            mins: vec![f32::INFINITY; groups],
            maxs: vec![f32::NEG_INFINITY; groups],
            samples: 0,
        };
        stats.observe(sample)?;
        Ok(stats)
    }

    pub fn observe(&mut self, sample: &Tensor) -> Result<(), QuantError> {
        if sample.shape() != self.shape.as_slice() {
            return Err(QuantError::SampleShape {
                expected: self.shape.clone(),
                actual: sample.shape().to_vec(),
            });
        }
        if !sample.dtype().is_float() {
            return Err(QuantError::WrongDtype {
                expected: "floating",
                actual: sample.dtype(),
            });
        }
        let group = self.granularity.group_index(&self.shape)?;
        for (i, x) in sample.to_f32_vec().into_iter().enumerate() {
            let g = group(i);
            self.mins[g] = self.mins[g].min(x);
            self.maxs[g] = self.maxs[g].max(x);
        }
        self.samples += 1;
        Ok(())
    }
}

/// Exact min/max per group over every sample.
pub fn calibrate(samples: &[Tensor], granularity: Granularity) -> Result<CalibrationStats, QuantError> {
    let (first, rest) = samples.split_first().ok_or(QuantError::NoSamples)?;
    let mut stats = CalibrationStats::from_sample(first, granularity)?;
    for s in rest {
        stats.observe(s)?;
    }
    Ok(stats)
}

/// Scales and zero points for one quantized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct QuantParams {
    pub scheme: Scheme,
    pub bit_width: BitWidth,
    pub granularity: Granularity,
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    scheme: Scheme,
    bit_width: BitWidth,
    granularity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<usize>,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
}

impl TryFrom<ParamsRepr> for QuantParams {
    type Error = String;

    fn try_from(r: ParamsRepr) -> Result<Self, Self::Error> {
        let granularity = match (r.granularity.as_str(), r.axis) {
            ("per_tensor", None) => Granularity::PerTensor,
            ("per_channel", Some(axis)) => Granularity::PerChannel { axis },
            (g, a) => return Err(format!("bad granularity {g} with axis {a:?}")),
        };
        let p = QuantParams {
            scheme: r.scheme,
            bit_width: r.bit_width,
            granularity,
            scales: r.scales,
            zero_points: r.zero_points,
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

impl From<QuantParams> for ParamsRepr {
    fn from(p: QuantParams) -> ParamsRepr {
        let (granularity, axis) = match p.granularity {
            Granularity::PerTensor => ("per_tensor".to_string(), None),
            Granularity::PerChannel { axis } => ("per_channel".to_string(), Some(axis)),
        };
        ParamsRepr {
            scheme: p.scheme,
            bit_width: p.bit_width,
            granularity,
            axis,
            scales: p.scales,
            zero_points: p.zero_points,
        }
    }
}

impl QuantParams {
    pub fn validate(&self) -> Result<(), QuantError> {
        let bad = |m: String| Err(QuantError::InvalidParams(m));
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return bad(format!(
                "{} scales vs {} zero points",
                self.scales.len(),
                self.zero_points.len()
            ));
        }
        if matches!(self.granularity, Granularity::PerTensor) && self.scales.len() != 1 {
            return bad("per-tensor params need exactly one group".into());
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("scales must be finite and positive".into());
        }
        let (lo, hi) = (self.bit_width.qmin(), self.bit_width.qmax());
        if self.zero_points.iter().any(|z| *z < lo || *z > hi) {
            return bad(format!("zero points must lie in [{lo}, {hi}]"));
        }
        if self.scheme == Scheme::Symmetric && self.zero_points.iter().any(|&z| z != 0) {
            return bad("symmetric params need zero zero-points".into());
        }
        Ok(())
    }

    fn check_tensor(&self, shape: &[usize]) -> Result<(), QuantError> {
        self.validate()?;
        let groups = self.granularity.group_count(shape)?;
        if groups != self.scales.len() {
            return Err(QuantError::ParamMismatch(format!(
                "{} groups in params, tensor {shape:?} has {groups}",
                self.scales.len()
            )));
        }
        Ok(())
    }

    /// Representable integer range for this scheme. Symmetric params use
    /// the restricted range `[-qmax, qmax]` so negation is exact.
    pub fn q_range(&self) -> (i32, i32) {
        match self.scheme {
            Scheme::Symmetric => (-self.bit_width.qmax(), self.bit_width.qmax()),
            Scheme::Asymmetric => (self.bit_width.qmin(), self.bit_width.qmax()),
        }
    }
}

fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Nearest f32 not below `exact`, so the calibrated range never overflows
/// the integer grid after rounding.
fn scale_up(exact: f64) -> f32 {
    let s = exact as f32;
    if f64::from(s) < exact {
        s.next_up()
    } else {
        s
    }
}

/// Params from calibration stats.
///
/// Symmetric: `scale = max(|min|, |max|) / qmax`, zero point 0.
/// Asymmetric: the range is widened to include 0, `scale = (max − min) /
/// (2^bits − 1)` and `zero_point = qmin − round(min / scale)`. A group whose
/// range is all zero gets scale 1 and zero point 0.
pub fn make_params(stats: &CalibrationStats, scheme: Scheme, bit_width: BitWidth) -> QuantParams {
    let levels = f64::from((1u32 << bit_width.bits()) - 1);
    let (scales, zero_points) = stats
        .mins
        .iter()
        .zip(&stats.maxs)
        .map(|(&lo, &hi)| {
            let (lo, hi) = (f64::from(lo.min(0.0)), f64::from(hi.max(0.0)));
            match scheme {
                Scheme::Symmetric => {
                    let amax = lo.abs().max(hi.abs());
                    if amax == 0.0 {
                        (1.0f32, 0)
                    } else {
                        ((amax / f64::from(bit_width.qmax())) as f32, 0)
                    }
                }
                Scheme::Asymmetric => {
                    if hi - lo == 0.0 {
                        (1.0f32, 0)
                    } else {
                        let scale = scale_up((hi - lo) / levels);
                        let zp = f64::from(bit_width.qmin()) - round_half_even(lo / f64::from(scale));
                        let zp = zp.clamp(f64::from(bit_width.qmin()), f64::from(bit_width.qmax())) as i32;
                        (scale, zp)
                    }
                }
            }
        })
        .unzip();
    QuantParams {
        scheme,
        bit_width,
        granularity: stats.granularity,
        scales,
        zero_points,
    }
}

/// `clamp(round_half_even(x / scale) + zero_point)` per group.
pub fn quantize(t: &Tensor, p: &QuantParams) -> Result<Tensor, QuantError> {
    if !t.dtype().is_float() {
        return Err(QuantError::WrongDtype {
            expected: "floating",
            actual: t.dtype(),
        });
    }
    p.check_tensor(t.shape())?;
    let group = p.granularity.group_index(t.shape())?;
    let (lo, hi) = p.q_range();
    let q: Vec<i32> = t
        .to_f64_vec()
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let g = group(i);
            let v = round_half_even(x / f64::from(p.scales[g])) + f64::from(p.zero_points[g]);
            v.clamp(f64::from(lo), f64::from(hi)) as i32
        })
        .collect();
    let data = match p.bit_width {
        BitWidth::Int8 => TensorData::I8(q.into_iter().map(|v| v as i8).collect()),
        BitWidth::Int16 => TensorData::I16(q.into_iter().map(|v| v as i16).collect()),
    };
    Ok(Tensor::new(t.shape().to_vec(), data)?)
}

/// `(q − zero_point) · scale` as FP32.
pub fn dequantize(q: &Tensor, p: &QuantParams) -> Result<Tensor, QuantError> {
    let values = dequantize_exact(q, p)?.into_iter().map(|v| v as f32).collect();
    Ok(Tensor::from_f32(q.shape().to_vec(), values)?)
}

/// `(q − zero_point) · scale` in f64, before rounding to FP32. Exact for any
/// INT8/INT16 code and f32 scale.
pub fn dequantize_exact(q: &Tensor, p: &QuantParams) -> Result<Vec<f64>, QuantError> {
    if q.dtype() != p.bit_width.dtype() {
        return Err(QuantError::ParamMismatch(format!(
            "{} tensor with {}-bit params",
            q.dtype(),
            p.bit_width.bits()
        )));
    }
    p.check_tensor(q.shape())?;
    let group = p.granularity.group_index(q.shape())?;
    let values = q
        .to_f64_vec()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let g = group(i);
            (v - f64::from(p.zero_points[g])) * f64::from(p.scales[g])
        })
        .collect();
    Ok(values)
}

/// Widest `|x − zp|` for any representable INT16 activation.
const ACT_SPAN: i64 = 1 << 16;
/// Widest `|w|` for any INT8 weight.
const W_SPAN: i64 = 1 << 7;

/// Whether a reduction of length `k` needs a 64-bit accumulator.
pub fn needs_wide_accumulator(k: usize) -> bool {
    (k as i64).saturating_mul(W_SPAN * ACT_SPAN) > i64::from(i32::MAX)
}

/// `x (m×k, INT16) · w (k×n, INT8)` dequantized to FP32.
///
/// Weights must be symmetric, per-tensor or per-channel along the output
/// axis 1. Activations must be per-tensor; their zero point is removed via
/// the weight column sums. Accumulation is 32-bit when `k` allows it and
/// 64-bit otherwise.
pub fn qmatmul(wq: &Tensor, xq: &Tensor, wp: &QuantParams, xp: &QuantParams) -> Result<Tensor, QuantError> {
    let w = wq.as_i8().ok_or(QuantError::WrongDtype {
        expected: "INT8 weights",
        actual: wq.dtype(),
    })?;
    let x = xq.as_i16().ok_or(QuantError::WrongDtype {
        expected: "INT16 activations",
        actual: xq.dtype(),
    })?;
    let (m, k) = xq.dims2()?;
    let (k2, n) = wq.dims2()?;
    if k != k2 {
        return Err(QuantError::ParamMismatch(format!(
            "activation {:?} and weight {:?} inner dims differ",
            xq.shape(),
            wq.shape()
        )));
    }
    if wp.scheme != Scheme::Symmetric {
        return Err(QuantError::InvalidParams("qmatmul weights must be symmetric".into()));
    }
    if matches!(wp.granularity, Granularity::PerChannel { axis } if axis != 1) {
        return Err(QuantError::InvalidParams(
            "weight channels must run along axis 1".into(),
        ));
    }
    if xp.granularity != Granularity::PerTensor {
        return Err(QuantError::InvalidParams("activations must be per-tensor".into()));
    }
    wp.check_tensor(wq.shape())?;
    xp.check_tensor(xq.shape())?;

    let zp = xp.zero_points[0];
    let sx = f64::from(xp.scales[0]);
    let w_scale = |j: usize| {
        f64::from(if wp.scales.len() == 1 {
            wp.scales[0]
        } else {
            wp.scales[j]
        })
    };
    let col_sums: Vec<i64> = (0..n).map(|j| (0..k).map(|t| i64::from(w[t * n + j])).sum()).collect();
    let wide = needs_wide_accumulator(k);

    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &x[i * k..(i + 1) * k];
        for j in 0..n {
            let acc: i64 = if wide {
                let mut acc = 0i64;
                for (t, &xv) in row.iter().enumerate() {
                    acc += i64::from(xv) * i64::from(w[t * n + j]);
                }
                acc - i64::from(zp) * col_sums[j]
            } else {
                let mut acc = 0i32;
                for (t, &xv) in row.iter().enumerate() {
                    acc = acc
                        .checked_add(i32::from(xv) * i32::from(w[t * n + j]))
                        .expect("32-bit accumulator overflow despite k bound");
                }
                let corr = i32::try_from(i64::from(zp) * col_sums[j]).expect("zero-point correction fits 32 bits");
                i64::from(
                    acc.checked_sub(corr)
                        .expect("32-bit accumulator overflow despite k bound"),
                )
            };
            out.push((acc as f64 * sx * w_scale(j)) as f32);
        }
    }
    Ok(Tensor::from_f32(vec![m, n], out)?)
}

/// Agreement between a reference tensor and an approximation of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    pub cosine_similarity: f64,
    /// `+inf` when the two tensors are identical.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub snr_db: f64,
    pub max_abs_err: f64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad snr `{t}`"))),
    }
}

/// Cosine similarity, signal-to-noise ratio in dB and max absolute error.
pub fn fidelity_metrics(reference: &Tensor, test: &Tensor) -> Result<FidelityMetrics, QuantError> {
    if reference.shape() != test.shape() {
        return Err(QuantError::ParamMismatch(format!(
            "shapes {:?} and {:?} differ",
            reference.shape(),
            test.shape()
        )));
    }
    let r = reference.to_f64_vec();
    let t = test.to_f64_vec();
    let ref_energy: f64 = r.iter().map(|x| x * x).sum();
    let test_energy: f64 = t.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(QuantError::Undefined("reference has zero norm".into()));
    }
    let dot: f64 = r.iter().zip(&t).map(|(a, b)| a * b).sum();
    let noise: f64 = r.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
    let max_abs_err = r.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cosine_similarity = if test_energy == 0.0 {
        0.0
    } else {
        dot / (ref_energy * test_energy).sqrt()
    };
    let snr_db = if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (ref_energy / noise).log10()
    };
    Ok(FidelityMetrics {
        cosine_similarity,
        snr_db,
        max_abs_err,
    })
}

/// Numeric precision an attention block runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    W8A16,
}

impl Precision {
    /// Element type of activations moved over DMA.
    pub fn activation_dtype(self) -> ElementType {
        match self {
            Precision::Fp32 => ElementType::Fp32,
            Precision::Fp16 => ElementType::Fp16,
            Precision::W8A16 => ElementType::Int16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::W8A16 => "w8a16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "w8a16" => Ok(Precision::W8A16),
            _ => Err(format!("unknown precision `{s}` (expected fp32, fp16 or w8a16)")),
        }
    }
}

/// Precision per model stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPolicy {
    pub encoder: Precision,
    pub unet: Precision,
    pub decoder: Precision,
}

impl Default for PrecisionPolicy {
    /// FP16 encoder and decoder, W8A16 UNet.
    fn default() -> Self {
        PrecisionPolicy {
            encoder: Precision::Fp16,
            unet: Precision::W8A16,
            decoder: Precision::Fp16,
        }
    }
}

impl PrecisionPolicy {
    pub fn uniform(p: Precision) -> PrecisionPolicy {
        PrecisionPolicy {
            encoder: p,
            unet: p,
            decoder: p,
        }
    }

    /// Policy selected by a single command-line precision: `w8a16` means the
    /// default mixed policy, the float precisions apply everywhere.
    pub fn from_flag(p: Precision) -> PrecisionPolicy {
        match p {
            Precision::W8A16 => PrecisionPolicy::default(),
            other => PrecisionPolicy::uniform(other),
        }
    }
}

/// Attention with INT8 K/V weights and INT16 Q/S_out activations. Softmax
/// runs in FP32 on the dequantized scores.
#[derive(Debug, Clone)]
pub struct W8A16Attention {
    pub k_t: Tensor,
    pub k_params: QuantParams,
    pub v: Tensor,
    pub v_params: QuantParams,
    pub q_params: QuantParams,
    pub s_out_params: QuantParams,
    pub scale: f32,
}

impl W8A16Attention {
    /// Quantizes K and V per channel and calibrates the Q and S_out
    /// activation ranges by running the FP32 block over `calibration`
    /// query samples.
    pub fn calibrate(inputs: &AttentionInputs, calibration: &[Tensor]) -> Result<W8A16Attention, QuantError> {
        inputs
            .validate()
            .map_err(|e| QuantError::InvalidParams(e.to_string()))?;
        let k_t32 = ops::cast(&inputs.k.transpose()?, ElementType::Fp32)?;
        let v32 = ops::cast(&inputs.v, ElementType::Fp32)?;
        let per_col = Granularity::PerChannel { axis: 1 };
        let k_params = make_params(
            &calibrate(std::slice::from_ref(&k_t32), per_col)?,
            Scheme::Symmetric,
            BitWidth::Int8,
        );
        let v_params = make_params(
            &calibrate(std::slice::from_ref(&v32), per_col)?,
            Scheme::Symmetric,
            BitWidth::Int8,
        );

        let q_stats = calibrate(calibration, Granularity::PerTensor)?;
        let mut s_stats: Option<CalibrationStats> = None;
        for q in calibration {
            let s = crate::attention::scores(&ops::cast(q, ElementType::Fp32)?, &k_t32, inputs.scale)
                .map_err(|e| QuantError::InvalidParams(e.to_string()))?;
            let p = ops::softmax_rows(&s)?;
            // Row counts may differ between samples; only the range matters.
            let flat = p.clone().reshape(vec![p.len()])?;
            match &mut s_stats {
                None => s_stats = Some(CalibrationStats::from_sample(&flat, Granularity::PerTensor)?),
                Some(st) => {
                    st.mins[0] = st.mins[0].min(flat.to_f32_vec().into_iter().fold(f32::INFINITY, f32::min));
                    st.maxs[0] = st.maxs[0].max(flat.to_f32_vec().into_iter().fold(f32::NEG_INFINITY, f32::max));
                    st.samples += 1;
                }
            }
        }
        let s_stats = s_stats.ok_or(QuantError::NoSamples)?;
        Ok(W8A16Attention {
            k_t: quantize(&k_t32, &k_params)?,
            k_params,
            v: quantize(&v32, &v_params)?,
            v_params,
            q_params: make_params(&q_stats, Scheme::Asymmetric, BitWidth::Int16),
            s_out_params: make_params(&s_stats, Scheme::Asymmetric, BitWidth::Int16),
            scale: inputs.scale,
        })
    }

    /// Runs the quantized block for a query tensor (or query tile).
    pub fn forward(&self, q: &Tensor) -> Result<Tensor, QuantError> {
        let q32 = ops::cast(q, ElementType::Fp32)?;
        let qq = quantize(&q32, &self.q_params)?;
        let s_in = ops::scale(&qmatmul(&self.k_t, &qq, &self.k_params, &self.q_params)?, self.scale)?;
        let s_out = ops::softmax_rows(&s_in)?;
        let sq = quantize(&s_out, &self.s_out_params)?;
        qmatmul(&self.v, &sq, &self.v_params, &self.s_out_params)
    }

    /// Tile-by-tile execution; equal to [`forward`](Self::forward) bitwise
    /// because quantization params are fixed per tensor.
    pub fn forward_tiled(&self, q: &Tensor, plan: &TilePlan) -> Result<Tensor, QuantError> {
        let parts = plan
            .spans
            .iter()
            .map(|s| self.forward(&q.slice_rows(s.row_start, s.row_count)?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::concat_rows(&parts)?)
    }
}

/// W8A16 attention calibrated on the block's own queries.
pub fn attention_w8a16(inputs: &AttentionInputs) -> Result<Tensor, QuantError> {
    W8A16Attention::calibrate(inputs, std::slice::from_ref(&inputs.q))?.forward(&inputs.q)
}

/// Attention with every operand and intermediate held in binary16; the
/// result is widened back to FP32.
pub fn attention_fp16(inputs: &AttentionInputs) -> Result<Tensor, QuantError> {
    let half = AttentionInputs {
        q: ops::cast(&inputs.q, ElementType::Fp16)?,
        k: ops::cast(&inputs.k, ElementType::Fp16)?,
        v: ops::cast(&inputs.v, ElementType::Fp16)?,
        scale: inputs.scale,
    };
    let out = crate::attention::attention_reference(&half).map_err(|e| QuantError::InvalidParams(e.to_string()))?;
    Ok(ops::cast(&out, ElementType::Fp32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{rng, uniform_tensor};

    fn ulp(x: f32) -> f32 {
        x.abs().next_up() - x.abs()
    }
    use crate::testutil::random_inputs;
    use proptest::prelude::*;

    fn f32t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_f32(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn sym8(scale: f32) -> QuantParams {
        QuantParams {
            scheme: Scheme::Symmetric,
            bit_width: BitWidth::Int8,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            zero_points: vec![0],
        }
    }

    #[test]
    fn calibrate_examples() {
        let s = calibrate(&[f32t(&[2], &[1., 2.]), f32t(&[2], &[-3., 0.])], Granularity::PerTensor).unwrap();
        assert_eq!((s.mins[0], s.maxs[0]), (-3.0, 2.0));
        assert_eq!(s.samples, 2);
        let z = calibrate(&[f32t(&[3], &[0.; 3])], Granularity::PerTensor).unwrap();
        assert_eq!((z.mins[0], z.maxs[0]), (0.0, 0.0));
        let c = calibrate(
            &[f32t(&[2, 2], &[1., 10., -2., 3.])],
            Granularity::PerChannel { axis: 1 },
        )
        .unwrap();
        assert_eq!(c.mins, vec![-2.0, 3.0]);
        assert_eq!(c.maxs, vec![1.0, 10.0]);
        let r = calibrate(
            &[f32t(&[2, 2], &[1., 10., -2., 3.])],
            Granularity::PerChannel { axis: 0 },
        )
        .unwrap();
        assert_eq!(r.mins, vec![1.0, -2.0]);
    }

    #[test]
    fn calibrate_errors() {
        assert!(matches!(
            calibrate(&[], Granularity::PerTensor),
            Err(QuantError::NoSamples)
        ));
        assert!(matches!(
            calibrate(&[f32t(&[2], &[0.; 2]), f32t(&[3], &[0.; 3])], Granularity::PerTensor),
            Err(QuantError::SampleShape { .. })
        ));
        assert!(matches!(
            calibrate(&[f32t(&[2], &[0.; 2])], Granularity::PerChannel { axis: 1 }),
            Err(QuantError::BadAxis { .. })
        ));
    }

    fn stats(lo: f32, hi: f32) -> CalibrationStats {
        calibrate(&[f32t(&[2], &[lo, hi])], Granularity::PerTensor).unwrap()
    }

    #[test]
    fn make_params_examples() {
        let p = make_params(&stats(-1.0, 1.0), Scheme::Symmetric, BitWidth::Int8);
        assert_eq!(p.scales, vec![1.0 / 127.0]);
        assert_eq!(p.zero_points, vec![0]);

        let p = make_params(&stats(0.0, 1.0), Scheme::Asymmetric, BitWidth::Int16);
        // the f32 at or just above 1/65535
        let s = f64::from(p.scales[0]);
        assert!(s >= 1.0 / 65535.0 && s - 1.0 / 65535.0 < f64::from(f32::EPSILON) * s);
        // zero maps to the bottom of the signed range
        assert_eq!(p.zero_points, vec![-32768]);

        for scheme in [Scheme::Symmetric, Scheme::Asymmetric] {
            let p = make_params(&stats(0.0, 0.0), scheme, BitWidth::Int16);
            assert_eq!((p.scales[0], p.zero_points[0]), (1.0, 0));
        }
    }

    #[test]
    fn asymmetric_range_widened_to_zero() {
        let p = make_params(&stats(5.0, 10.0), Scheme::Asymmetric, BitWidth::Int8);
        let q = quantize(&f32t(&[3], &[0.0, 5.0, 10.0]), &p).unwrap();
        assert_eq!(q.as_i8().unwrap()[0] as i32, p.zero_points[0]);
        assert_eq!(q.as_i8().unwrap()[2], 127);
        let back = dequantize(&q, &p).unwrap();
        assert!((back.as_f32().unwrap()[1] - 5.0).abs() <= p.scales[0] / 2.0);
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(&f32t(&[3], &[-1.0, 0.5, 1.0]), &sym8(1.0 / 127.0)).unwrap();
        assert_eq!(q.as_i8().unwrap(), &[-127, 64, 127]);

        let p = QuantParams {
            scheme: Scheme::Asymmetric,
            bit_width: BitWidth::Int16,
            granularity: Granularity::PerTensor,
            scales: vec![0.01],
            zero_points: vec![-123],
        };
        let z = quantize(&f32t(&[4], &[0.0; 4]), &p).unwrap();
        assert_eq!(z.as_i16().unwrap(), &[-123; 4]);

        let sat = quantize(&f32t(&[2], &[10.0, -10.0]), &sym8(1.0 / 127.0)).unwrap();
        assert_eq!(sat.as_i8().unwrap(), &[127, -127]);
    }

    #[test]
    fn half_even_rounding() {
        let q = quantize(&f32t(&[4], &[0.5, 1.5, 2.5, -0.5]), &sym8(1.0)).unwrap();
        assert_eq!(q.as_i8().unwrap(), &[0, 2, 2, 0]);
    }

    #[test]
    fn dequantize_examples() {
        let p = sym8(1.0 / 127.0);
        let q = Tensor::from_i8(vec![3], vec![-127, 64, 127]).unwrap();
        let x = dequantize(&q, &p).unwrap();
        let v = x.as_f32().unwrap();
        assert!((v[0] + 1.0).abs() < 1e-7 && (v[2] - 1.0).abs() < 1e-7);
        assert!((v[1] - 64.0 / 127.0).abs() < 1e-7);
        let z = dequantize(&Tensor::from_i8(vec![1], vec![0]).unwrap(), &p).unwrap();
        assert_eq!(z.as_f32().unwrap(), &[0.0]);

        let wrong = Tensor::from_i16(vec![1], vec![0]).unwrap();
        assert!(matches!(dequantize(&wrong, &p), Err(QuantError::ParamMismatch(_))));
        let per_ch = QuantParams {
            granularity: Granularity::PerChannel { axis: 0 },
            scales: vec![1.0; 2],
            zero_points: vec![0; 2],
            ..p
        };
        assert!(dequantize(&q, &per_ch).is_err());
    }

    #[test]
    fn qmatmul_zero_weights() {
        let w = Tensor::from_i8(vec![3, 2], vec![0; 6]).unwrap();
        let x = Tensor::from_i16(vec![2, 3], vec![100, -5, 30000, 7, 8, 9]).unwrap();
        let xp = QuantParams {
            scheme: Scheme::Asymmetric,
            bit_width: BitWidth::Int16,
            granularity: Granularity::PerTensor,
            scales: vec![0.1],
            zero_points: vec![17],
        };
        let y = qmatmul(&w, &x, &sym8(0.5), &xp).unwrap();
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qmatmul_single_mac() {
        let w = f32t(&[1, 1], &[1.0]);
        let wp = make_params(
            &calibrate(std::slice::from_ref(&w), Granularity::PerTensor).unwrap(),
            Scheme::Symmetric,
            BitWidth::Int8,
        );
        let wq = quantize(&w, &wp).unwrap();
        assert_eq!(wq.as_i8().unwrap(), &[127]);
        let x = f32t(&[1, 1], &[1.0]);
        let xp = make_params(
            &calibrate(std::slice::from_ref(&x), Granularity::PerTensor).unwrap(),
            Scheme::Asymmetric,
            BitWidth::Int16,
        );
        let y = qmatmul(&wq, &quantize(&x, &xp).unwrap(), &wp, &xp).unwrap();
        let step = f64::from(wp.scales[0]) * f64::from(xp.scales[0]);
        assert!((f64::from(y.as_f32().unwrap()[0]) - 1.0).abs() <= step.max(1e-6));
    }

    #[test]
    fn qmatmul_rejects_bad_params() {
        let w = Tensor::from_i8(vec![2, 2], vec![1; 4]).unwrap();
        let x = Tensor::from_i16(vec![1, 2], vec![1; 2]).unwrap();
        let xp = QuantParams {
            scheme: Scheme::Asymmetric,
            bit_width: BitWidth::Int16,
            granularity: Granularity::PerTensor,
            scales: vec![1.0],
            zero_points: vec![0],
        };
        let asym_w = QuantParams {
            scheme: Scheme::Asymmetric,
            ..sym8(1.0)
        };
        assert!(qmatmul(&w, &x, &asym_w, &xp).is_err());
        let row_w = QuantParams {
            granularity: Granularity::PerChannel { axis: 0 },
            scales: vec![1.0; 2],
            zero_points: vec![0; 2],
            ..sym8(1.0)
        };
        assert!(qmatmul(&w, &x, &row_w, &xp).is_err());
        assert!(qmatmul(&w, &Tensor::from_i16(vec![1, 3], vec![1; 3]).unwrap(), &sym8(1.0), &xp).is_err());
        assert!(qmatmul(&x, &w, &sym8(1.0), &xp).is_err());
    }

    #[test]
    fn wide_accumulator_path() {
        assert!(!needs_wide_accumulator(255));
        assert!(needs_wide_accumulator(256));
        let k = 300;
        let w = Tensor::from_i8(vec![k, 1], vec![127; k]).unwrap();
        let x = Tensor::from_i16(vec![1, k], vec![32767; k]).unwrap();
        let xp = QuantParams {
            scheme: Scheme::Asymmetric,
            bit_width: BitWidth::Int16,
            granularity: Granularity::PerTensor,
            scales: vec![1.0],
            zero_points: vec![-32768],
        };
        let y = qmatmul(&w, &x, &sym8(1.0), &xp).unwrap();
        let expected = k as f64 * 127.0 * 65535.0;
        assert_eq!(f64::from(y.as_f32().unwrap()[0]), (expected as f32) as f64);
    }

    #[test]
    fn fidelity_examples() {
        let r = f32t(&[2], &[3.0, 4.0]);
        let same = fidelity_metrics(&r, &r).unwrap();
        assert_eq!(same.cosine_similarity, 1.0);
        assert_eq!(same.snr_db, f64::INFINITY);
        assert_eq!(same.max_abs_err, 0.0);
        let neg = fidelity_metrics(&r, &f32t(&[2], &[-3.0, -4.0])).unwrap();
        assert!((neg.cosine_similarity + 1.0).abs() < 1e-12);
        let m = fidelity_metrics(&r, &f32t(&[2], &[3.0, 3.0])).unwrap();
        assert!((m.snr_db - 13.979400086720377).abs() < 1e-12);
        assert_eq!(m.max_abs_err, 1.0);
        assert!(matches!(
            fidelity_metrics(&f32t(&[2], &[0.; 2]), &r),
            Err(QuantError::Undefined(_))
        ));
        assert!(fidelity_metrics(&r, &f32t(&[3], &[0.; 3])).is_err());
    }

    #[test]
    fn fidelity_json_infinity_sentinel() {
        let r = f32t(&[2], &[3.0, 4.0]);
        let m = fidelity_metrics(&r, &r).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"snr_db\":\"inf\""));
        let back: FidelityMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn params_json_shape() {
        let p = QuantParams {
            granularity: Granularity::PerChannel { axis: 1 },
            scales: vec![0.5, 0.25],
            zero_points: vec![0, 0],
            ..sym8(1.0)
        };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["scheme"], "symmetric");
        assert_eq!(v["bit_width"], 8);
        assert_eq!(v["granularity"], "per_channel");
        assert_eq!(v["axis"], 1);
        assert_eq!(serde_json::from_value::<QuantParams>(v).unwrap(), p);
        let t = serde_json::to_value(sym8(1.0)).unwrap();
        assert!(t.get("axis").is_none());
        let bad = r#"{"scheme":"symmetric","bit_width":4,"granularity":"per_tensor","scales":[1],"zero_points":[0]}"#;
        assert!(serde_json::from_str::<QuantParams>(bad).is_err());
        let neg = r#"{"scheme":"symmetric","bit_width":8,"granularity":"per_tensor","scales":[-1],"zero_points":[0]}"#;
        assert!(serde_json::from_str::<QuantParams>(neg).is_err());
    }

    #[test]
    fn default_policy() {
        let p = PrecisionPolicy::default();
        assert_eq!(
            (p.encoder, p.unet, p.decoder),
            (Precision::Fp16, Precision::W8A16, Precision::Fp16)
        );
        assert_eq!(
            PrecisionPolicy::from_flag(Precision::Fp32),
            PrecisionPolicy::uniform(Precision::Fp32)
        );
        assert_eq!("W8A16".parse::<Precision>().unwrap(), Precision::W8A16);
    }

    #[test]
    fn w8a16_attention_close_to_fp32() {
        let inputs = random_inputs(64, 77, 40, 9);
        let reference = crate::attention::attention_reference(&inputs).unwrap();
        let m = fidelity_metrics(&reference, &attention_w8a16(&inputs).unwrap()).unwrap();
        assert!(m.cosine_similarity >= 0.999, "{m:?}");
        assert!(m.snr_db >= 40.0, "{m:?}");
        let h = fidelity_metrics(&reference, &attention_fp16(&inputs).unwrap()).unwrap();
        assert!(h.snr_db > 50.0, "{h:?}");
    }

    #[test]
    fn w8a16_tiled_matches_untiled() {
        let inputs = random_inputs(20, 7, 8, 4);
        let att = W8A16Attention::calibrate(&inputs, std::slice::from_ref(&inputs.q)).unwrap();
        let plan = TilePlan::with_tile_count(inputs.dims().unwrap(), ElementType::Int16, 3).unwrap();
        assert_eq!(
            att.forward(&inputs.q).unwrap(),
            att.forward_tiled(&inputs.q, &plan).unwrap()
        );
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_step(seed in any::<u64>(), bits16 in any::<bool>(), asym in any::<bool>()) {
            let x = uniform_tensor(&mut rng(seed), vec![4, 6], -3.0, 5.0);
            let scheme = if asym { Scheme::Asymmetric } else { Scheme::Symmetric };
            let bw = if bits16 { BitWidth::Int16 } else { BitWidth::Int8 };
            let p = make_params(&calibrate(std::slice::from_ref(&x), Granularity::PerChannel { axis: 1 }).unwrap(), scheme, bw);
            let q = quantize(&x, &p).unwrap();
            let exact = dequantize_exact(&q, &p).unwrap();
            let stored = dequantize(&q, &p).unwrap();
            for (i, a) in x.as_f32().unwrap().iter().enumerate() {
                let s = f64::from(p.scales[i % 6]);
                let a = f64::from(*a);
                prop_assert!((a - exact[i]).abs() <= s / 2.0);
                // storing as f32 adds at most half an ulp
                let b = f64::from(stored.as_f32().unwrap()[i]);
                prop_assert!((a - b).abs() <= s / 2.0 + f64::from(ulp(b as f32)) / 2.0);
            }
        }

        #[test]
        fn symmetric_is_sign_symmetric(v in prop::collection::vec(-1.0f32..1.0, 1..20)) {
            let n = v.len();
            let p = sym8(1.0 / 127.0);
            let pos = quantize(&f32t(&[n], &v), &p).unwrap();
            let neg: Vec<f32> = v.iter().map(|x| -x).collect();
            let negq = quantize(&f32t(&[n], &neg), &p).unwrap();
            for (a, b) in pos.as_i8().unwrap().iter().zip(negq.as_i8().unwrap()) {
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn qmatmul_matches_dequantized_oracle(seed in any::<u64>()) {
            let mut r = rng(seed);
            let w = uniform_tensor(&mut r, vec![16, 16], -1.0, 1.0);
            let x = uniform_tensor(&mut r, vec![16, 16], -1.0, 1.0);
            let wp = make_params(&calibrate(std::slice::from_ref(&w), Granularity::PerChannel { axis: 1 }).unwrap(), Scheme::Symmetric, BitWidth::Int8);
            let xp = make_params(&calibrate(std::slice::from_ref(&x), Granularity::PerTensor).unwrap(), Scheme::Asymmetric, BitWidth::Int16);
            let (wq, xq) = (quantize(&w, &wp).unwrap(), quantize(&x, &xp).unwrap());
            let fast = qmatmul(&wq, &xq, &wp, &xp).unwrap();
            let oracle = ops::matmul(&dequantize(&xq, &xp).unwrap(), &dequantize(&wq, &wp).unwrap(), ElementType::Fp32).unwrap();
            for (a, b) in fast.as_f32().unwrap().iter().zip(oracle.as_f32().unwrap()) {
                prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
            }
        }
    }
}
