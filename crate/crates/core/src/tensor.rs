//! Dense containers, channel statistics and synthetic fixtures.
//!
//! All arithmetic runs in `f64`. Files may store `f32` payloads; those are
//! widened on load and narrowed again on write.

use std::io::{Read, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

/// Magic prefix of the dense tensor container.
pub const DWT_MAGIC: [u8; 4] = *b"DWT1";

/// Element type tag shared by the `DWT1` and `NMS1` formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, FormatError> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn bits(self) -> u64 {
        self.size_bytes() as u64 * 8
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} contains a non-finite value at flat index {i}"
        )));
    }
    Ok(())
}

/// Dense row-major weight matrix, `rows` output channels by `cols` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "weight data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        check_finite(&data, "weight matrix")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elementwise map; the result is re-validated for finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Layer output `W Xᵀ` as a `rows x samples` row-major buffer.
    pub fn forward(&self, calib: &CalibrationSet) -> Result<Vec<f64>> {
        if calib.cols() != self.cols {
            return Err(Error::Shape(format!(
                "calibration has {} channels, weights expect {}",
                calib.cols(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows * calib.samples()];
        for i in 0..self.rows {
            let w = self.row(i);
            for s in 0..calib.samples() {
                out[i * calib.samples() + s] = dot(w, calib.sample(s));
            }
        }
        Ok(out)
    }

    /// Serialize into a `DWT1` container.
    pub fn to_dwt_bytes(&self, dtype: DType) -> Vec<u8> {
        encode_dwt(self.rows, self.cols, &self.data, dtype)
    }

    pub fn from_dwt_bytes(bytes: &[u8]) -> Result<(Self, DType)> {
        let (rows, cols, dtype, data) = decode_dwt(bytes)?;
        Ok((Self::new(rows, cols, data)?, dtype))
    }

    pub fn write_dwt(&self, mut w: impl Write, dtype: DType) -> Result<()> {
        w.write_all(&self.to_dwt_bytes(dtype))?;
        Ok(())
    }

    pub fn read_dwt(mut r: impl Read) -> Result<(Self, DType)> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_dwt_bytes(&buf)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Activation samples, `samples x cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CalibrationSet {
    pub fn new(samples: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument(
                "calibration set must contain at least one sample".into(),
            ));
        }
        if data.len() != samples * cols {
            return Err(Error::Shape(format!(
                "calibration data has {} entries, expected {samples}x{cols}",
                data.len()
            )));
        }
        check_finite(&data, "calibration set")?;
        Ok(Self {
            samples,
            cols,
            data,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        &self.data[s * self.cols..(s + 1) * self.cols]
    }

    pub fn to_dwt_bytes(&self, dtype: DType) -> Vec<u8> {
        encode_dwt(self.samples, self.cols, &self.data, dtype)
    }

    pub fn from_dwt_bytes(bytes: &[u8]) -> Result<(Self, DType)> {
        let (rows, cols, dtype, data) = decode_dwt(bytes)?;
        Ok((Self::new(rows, cols, data)?, dtype))
    }
}

impl From<WeightMatrix> for CalibrationSet {
    /// Reinterpret a matrix as calibration data (rows become samples).
    ///
    /// Panics if the matrix has no rows.
    fn from(m: WeightMatrix) -> Self {
        assert!(m.rows > 0, "calibration set needs at least one sample");
        Self {
            samples: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

/// Per-input-channel activation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub abs_max: Vec<f64>,
    pub l2_norm: Vec<f64>,
}

impl ChannelStats {
    pub fn cols(&self) -> usize {
        self.abs_max.len()
    }
}

/// Column-wise `max |x|` and `‖x‖₂` over all samples.
///
/// Sums accumulate in sample order.
pub fn channel_stats(calib: &CalibrationSet) -> Result<ChannelStats> {
    if calib.samples == 0 {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let mut abs_max = vec![0.0f64; calib.cols];
    let mut sq = vec![0.0f64; calib.cols];
    for s in 0..calib.samples {
        for (j, &v) in calib.sample(s).iter().enumerate() {
            abs_max[j] = abs_max[j].max(v.abs());
            sq[j] += v * v;
        }
    }
    Ok(ChannelStats {
        abs_max,
        l2_norm: sq.into_iter().map(f64::sqrt).collect(),
    })
}

/// Population variance of a flat slice, two-pass with the compensating
/// `(Σd)²/n` term.
pub fn variance_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "variance of an empty tensor is undefined".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut ss, mut s) = (0.0, 0.0);
    for &v in values {
        let d = v - mean;
        ss += d * d;
        s += d;
    }
    Ok(((ss - s * s / n) / n).max(0.0))
}

/// Population variance over every entry of `w`.
pub fn tensor_variance(w: &WeightMatrix) -> Result<f64> {
    variance_of(&w.data)
}

/// Seeded matrix with a handful of amplified columns.
///
/// Generator: `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha 0.3). Stream 0
/// fills entries row-major with standard normals from Box-Muller: two
/// uniforms `u = (next_u64 >> 11) · 2⁻⁵³` per pair, yielding
/// `r·cos θ` and `r·sin θ` with `r = √(−2 ln(1 − u₁))`, `θ = 2π u₂`.
/// Stream 1 of the same seed picks the outlier columns with
/// `rand::seq::index::sample` (rand 0.8), so the baseline entries do not
/// depend on how many columns are amplified.
pub fn synth_outlier_matrix(
    rows: usize,
    cols: usize,
    outlier_cols: usize,
    outlier_scale: f64,
    seed: u64,
) -> Result<WeightMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic matrix needs non-zero dimensions, got {rows}x{cols}"
        )));
    }
    if outlier_cols > cols {
        return Err(Error::InvalidArgument(format!(
            "{outlier_cols} outlier columns requested for {cols} columns"
        )));
    }
    if !(outlier_scale >= 1.0 && outlier_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "outlier scale must be finite and >= 1, got {outlier_scale}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col_rng = ChaCha8Rng::seed_from_u64(seed);
    col_rng.set_stream(1);
    let mut scale = vec![1.0; cols];
    for j in rand::seq::index::sample(&mut col_rng, cols, outlier_cols) {
        scale[j] = outlier_scale;
    }

    let n = rows * cols;
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        let (a, b) = gaussian_pair(&mut rng);
        data.push(a);
        data.push(b);
    }
    data.truncate(n);
    for (k, v) in data.iter_mut().enumerate() {
        *v *= scale[k % cols];
    }
    WeightMatrix::new(rows, cols, data)
}

fn unit_uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn gaussian_pair(rng: &mut impl RngCore) -> (f64, f64) {
    let u1 = unit_uniform(rng);
    let u2 = unit_uniform(rng);
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Uniform `[-1, 1)` vector, used by tests and the CLI for probe inputs.
pub fn synth_uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn encode_dwt(rows: usize, cols: usize, data: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + data.len() * dtype.size_bytes());
    out.extend_from_slice(&DWT_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.push(dtype.tag());
    write_values(&mut out, data, dtype);
    out
}

pub(crate) fn write_values(out: &mut Vec<u8>, data: &[f64], dtype: DType) {
    match dtype {
        DType::F32 => data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => data
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub(crate) fn read_values(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

fn decode_dwt(bytes: &[u8]) -> Result<(usize, usize, DType, Vec<f64>)> {
    const HEADER: usize = 13;
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated {
            context: "DWT1 header",
            needed: HEADER,
            available: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DWT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DWT_MAGIC,
            found: magic,
        }
        .into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dtype = DType::from_tag(bytes[12])?;
    let payload = &bytes[HEADER..];
    let needed = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size_bytes()))
        .ok_or_else(|| FormatError::HeaderMismatch(format!("{rows}x{cols} overflows")))?;
    if payload.len() < needed {
        return Err(FormatError::Truncated {
            context: "DWT1 payload",
            needed,
            available: payload.len(),
        }
        .into());
    }
    if payload.len() > needed {
        return Err(FormatError::TrailingBytes(payload.len() - needed).into());
    }
    Ok((rows, cols, dtype, read_values(payload, dtype)))
}
