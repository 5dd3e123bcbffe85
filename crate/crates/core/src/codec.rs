//! `NMS1`: packed storage for a pruned layer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "NMS1"
//!      4     2  version (u16) = 1
//!      6     4  rows (u32)
//!     10     4  cols (u32)
//!     14     2  residual N (u16, kept per block)
//!     16     2  residual M (u16, block length)
//!     18     2  salient K (u16, 0 = no salient store; block length is 256)
//!     20     1  dtype (0 = f32, 1 = f64)
//!     21     8  correction factor (f64)
//!     29        four streams, each a u64 byte length followed by the bytes:
//!               residual values, residual ranks, salient values, salient ranks
//! ```
//!
//! Values are the kept entries in row-major order (ascending column within
//! each block). Rank streams hold one colex rank per block,
//! `ceil(log2 C(M, N))` bits each, packed least-significant bit first into
//! bytes starting at bit 0; every row starts on a byte boundary and padding
//! bits are zero.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::patterns::{NMMask, PatternCodec, PatternShape};
use crate::pipeline::{PrunedLayer, SalientStore, SALIENT_BLOCK};
use crate::tensor::{read_values, write_values, DType, WeightMatrix};

pub const NMS_MAGIC: [u8; 4] = *b"NMS1";
pub const NMS_VERSION: u16 = 1;
/// Fixed header bytes before the first stream prefix.
pub const HEADER_LEN: usize = 29;

struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            bit_len: 0,
        }
    }

    fn push(&mut self, value: u128, bits: u32) {
        for i in 0..bits {
            if self.bit_len % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit_len % 8);
            }
            self.bit_len += 1;
        }
    }

    fn align(&mut self) {
        self.bit_len = self.bytes.len() * 8;
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read(&mut self, bits: u32) -> u128 {
        let mut v = 0u128;
        for i in 0..bits {
            let bit = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (bit as u128) << i;
            self.pos += 1;
        }
        v
    }

    /// Skip to the next byte boundary; true when the skipped bits were zero.
    fn align(&mut self) -> bool {
        let mut clean = true;
        while self.pos % 8 != 0 {
            clean &= (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1 == 0;
            self.pos += 1;
        }
        clean
    }
}

/// Bytes of one row's rank stream.
pub fn rank_row_bytes(blocks_per_row: usize, bits_per_block: u32) -> usize {
    (blocks_per_row * bits_per_block as usize).div_ceil(8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsHeader {
    pub rows: usize,
    pub cols: usize,
    pub residual: PatternShape,
    pub salient: Option<PatternShape>,
    pub dtype: DType,
    pub correction_factor: f64,
}

impl NmsHeader {
    fn residual_codec(&self) -> Result<PatternCodec> {
        PatternCodec::new(self.residual)
    }

    fn salient_codec(&self) -> Result<Option<PatternCodec>> {
        self.salient.map(PatternCodec::new).transpose()
    }

    fn expected_lengths(&self) -> Result<[usize; 4]> {
        let rc = self.residual_codec()?;
        let r_bpr = self.cols / self.residual.m_block();
        let residual_values = self.rows * r_bpr * self.residual.n_keep() * self.dtype.size_bytes();
        let residual_ranks = self.rows * rank_row_bytes(r_bpr, rc.bits_per_block());
        let (salient_values, salient_ranks) = match self.salient_codec()? {
            None => (0, 0),
            Some(sc) => {
                let s_bpr = self.cols / SALIENT_BLOCK;
                (
                    self.rows * s_bpr * sc.shape().n_keep() * self.dtype.size_bytes(),
                    self.rows * rank_row_bytes(s_bpr, sc.bits_per_block()),
                )
            }
        };
        Ok([residual_values, residual_ranks, salient_values, salient_ranks])
    }

    fn validate(&self) -> Result<(), FormatError> {
        let mismatch = |m: String| Err(FormatError::HeaderMismatch(m));
        if self.cols % self.residual.m_block() != 0 {
            return mismatch(format!(
                "{} columns not divisible by residual block {}",
                self.cols,
                self.residual.m_block()
            ));
        }
        if let Some(s) = self.salient {
            if s.m_block() != SALIENT_BLOCK || self.cols % SALIENT_BLOCK != 0 {
                return mismatch(format!("salient {s} incompatible with {} columns", self.cols));
            }
        }
        if !(self.correction_factor > 0.0 && self.correction_factor.is_finite()) {
            return mismatch(format!("correction factor {}", self.correction_factor));
        }
        Ok(())
    }
}

/// In-memory image of an `NMS1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncodedTensor {
    pub header: NmsHeader,
    pub residual_values: Vec<u8>,
    pub residual_ranks: Vec<u8>,
    pub salient_values: Vec<u8>,
    pub salient_ranks: Vec<u8>,
}

fn encode_ranks(mask: &NMMask, codec: &PatternCodec) -> Vec<u8> {
    let mut w = BitWriter::new();
    let bpr = mask.blocks_per_row();
    for (b, rank) in mask.ranks().into_iter().enumerate() {
        w.push(rank, codec.bits_per_block());
        if (b + 1) % bpr == 0 {
            w.align();
        }
    }
    w.bytes
}

fn encode_values(values: impl Iterator<Item = f64>, dtype: DType) -> Result<Vec<u8>> {
    let values: Vec<f64> = values.collect();
    if dtype == DType::F32 {
        if let Some(i) = values.iter().position(|v| !(*v as f32).is_finite()) {
            return Err(Error::Numerical(format!(
                "value {} at index {i} overflows f32",
                values[i]
            )));
        }
    }
    let mut out = Vec::with_capacity(values.len() * dtype.size_bytes());
    write_values(&mut out, &values, dtype);
    Ok(out)
}

/// Ranks of every block, validated against the codec, row-major.
fn decode_ranks(
    bytes: &[u8],
    rows: usize,
    blocks_per_row: usize,
    codec: &PatternCodec,
) -> Result<Vec<u128>, FormatError> {
    let mut r = BitReader::new(bytes);
    let mut ranks = Vec::with_capacity(rows * blocks_per_row);
    for row in 0..rows {
        for block in 0..blocks_per_row {
            let rank = r.read(codec.bits_per_block());
            if rank >= codec.config_count() {
                return Err(FormatError::InvalidRank {
                    row,
                    block,
                    rank,
                    limit: codec.config_count(),
                });
            }
            ranks.push(rank);
        }
        if !r.align() {
            return Err(FormatError::HeaderMismatch(format!(
                "non-zero padding bits after rank row {row}"
            )));
        }
    }
    Ok(ranks)
}

fn decode_values(bytes: &[u8], dtype: DType) -> Result<Vec<f64>, FormatError> {
    let values = read_values(bytes, dtype);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    Ok(values)
}

/// Pack a pruned layer. `F32` narrows values (round to nearest).
pub fn encode(layer: &PrunedLayer, dtype: DType) -> Result<SparseEncodedTensor> {
    layer.check_invariants()?;
    let header = NmsHeader {
        rows: layer.rows(),
        cols: layer.cols(),
        residual: layer.residual_mask.shape(),
        salient: layer.salient.as_ref().map(|s| s.shape()),
        dtype,
        correction_factor: layer.correction_factor,
    };
    if header.rows > u32::MAX as usize || header.cols > u32::MAX as usize {
        return Err(Error::Shape("NMS1 stores rows and cols as u32".into()));
    }
    header.validate()?;

    let rc = header.residual_codec()?;
    let residual = layer.residual.data();
    let residual_values = encode_values(layer.residual_mask.kept_indices().map(|k| residual[k]), dtype)?;
    let residual_ranks = encode_ranks(&layer.residual_mask, &rc);

    let (salient_values, salient_ranks) = match (&layer.salient, header.salient_codec()?) {
        (Some(s), Some(sc)) => (
            encode_values(s.values().iter().copied(), dtype)?,
            encode_ranks(s.mask(), &sc),
        ),
        _ => (Vec::new(), Vec::new()),
    };
    Ok(SparseEncodedTensor {
        header,
        residual_values,
        residual_ranks,
        salient_values,
        salient_ranks,
    })
}

/// Unpack into a dense residual, its mask and the salient store.
pub fn decode(t: &SparseEncodedTensor) -> Result<PrunedLayer> {
    t.check_lengths()?;
    let h = &t.header;
    let rc = h.residual_codec()?;
    let ranks = decode_ranks(&t.residual_ranks, h.rows, h.cols / h.residual.m_block(), &rc)?;
    let residual_mask = NMMask::from_rank_stream(&ranks, h.residual, h.rows, h.cols)?;
    let values = decode_values(&t.residual_values, h.dtype)?;
    let mut dense = vec![0.0; h.rows * h.cols];
    for (k, v) in residual_mask.kept_indices().zip(values) {
        dense[k] = v;
    }
    let residual = WeightMatrix::new(h.rows, h.cols, dense)?;

    let salient = match h.salient_codec()? {
        None => None,
        Some(sc) => {
            let ranks = decode_ranks(&t.salient_ranks, h.rows, h.cols / SALIENT_BLOCK, &sc)?;
            let mask = NMMask::from_rank_stream(&ranks, sc.shape(), h.rows, h.cols)?;
            Some(SalientStore::new(mask, decode_values(&t.salient_values, h.dtype)?)?)
        }
    };
    let layer = PrunedLayer {
        residual,
        residual_mask,
        salient,
        correction_factor: h.correction_factor,
    };
    layer
        .check_invariants()
        .map_err(|e| FormatError::HeaderMismatch(e.to_string()))?;
    Ok(layer)
}

/// Kept-set lookup for one codec: a flat table for small shapes, on-the-fly
/// unranking otherwise.
struct KeptLookup {
    codec: PatternCodec,
    table: Option<Vec<u16>>,
}

impl KeptLookup {
    const TABLE_LIMIT: u128 = 1 << 16;

    fn new(codec: PatternCodec) -> Result<Self> {
        let table = if codec.config_count() <= Self::TABLE_LIMIT {
            let mut t = Vec::with_capacity(codec.config_count() as usize * codec.shape().n_keep());
            for r in 0..codec.config_count() {
                t.extend(codec.unrank(r)?.into_iter().map(|c| c as u16));
            }
            Some(t)
        } else {
            None
        };
        Ok(Self { codec, table })
    }

    fn for_each(&self, rank: u128, mut f: impl FnMut(usize)) -> Result<()> {
        let n = self.codec.shape().n_keep();
        match &self.table {
            Some(t) => t[rank as usize * n..(rank as usize + 1) * n]
                .iter()
                .for_each(|&c| f(c as usize)),
            None => self.codec.unrank(rank)?.into_iter().for_each(f),
        }
        Ok(())
    }
}

fn accumulate_stream(
    y: &mut [f64],
    x: &[f64],
    values: &[u8],
    ranks: &[u8],
    lookup: &KeptLookup,
    h: &NmsHeader,
) -> Result<()> {
    let m = lookup.codec.shape().m_block();
    let n = lookup.codec.shape().n_keep();
    let bpr = h.cols / m;
    let bits = lookup.codec.bits_per_block();
    let row_bytes = rank_row_bytes(bpr, bits);
    let vsize = h.dtype.size_bytes();
    let read_value = |idx: usize| -> f64 {
        let b = &values[idx * vsize..(idx + 1) * vsize];
        match h.dtype {
            DType::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        }
    };
    for (row, yr) in y.iter_mut().enumerate() {
        let mut reader = BitReader::new(&ranks[row * row_bytes..(row + 1) * row_bytes]);
        let mut vidx = row * bpr * n;
        let mut acc = 0.0;
        for block in 0..bpr {
            let rank = reader.read(bits);
            if rank >= lookup.codec.config_count() {
                return Err(FormatError::InvalidRank {
                    row,
                    block,
                    rank,
                    limit: lookup.codec.config_count(),
                }
                .into());
            }
            let base = block * m;
            lookup.for_each(rank, |c| {
                acc += read_value(vidx) * x[base + c];
                vidx += 1;
            })?;
        }
        *yr += acc;
    }
    Ok(())
}

/// `y = R x (+ S x)` straight from the packed streams. Each row accumulates
/// its blocks left to right, residual first.
pub fn spmv(t: &SparseEncodedTensor, x: &[f64], include_salient: bool) -> Result<Vec<f64>> {
    t.check_lengths()?;
    let h = &t.header;
    if x.len() != h.cols {
        return Err(Error::Shape(format!(
            "input has {} entries, layer has {} columns",
            x.len(),
            h.cols
        )));
    }
    let mut y = vec![0.0; h.rows];
    let rl = KeptLookup::new(h.residual_codec()?)?;
    accumulate_stream(&mut y, x, &t.residual_values, &t.residual_ranks, &rl, h)?;
    if include_salient {
        if let Some(sc) = h.salient_codec()? {
            let sl = KeptLookup::new(sc)?;
            let mut ys = vec![0.0; h.rows];
            accumulate_stream(&mut ys, x, &t.salient_values, &t.salient_ranks, &sl, h)?;
            y.iter_mut().zip(ys).for_each(|(a, b)| *a += b);
        }
    }
    Ok(y)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, context: &'static str) -> Result<&'a [u8], FormatError> {
    if bytes.len() < n {
        return Err(FormatError::Truncated {
            context,
            needed: n,
            available: bytes.len(),
        });
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

impl SparseEncodedTensor {
    fn streams(&self) -> [&Vec<u8>; 4] {
        [
            &self.residual_values,
            &self.residual_ranks,
            &self.salient_values,
            &self.salient_ranks,
        ]
    }

    fn check_lengths(&self) -> Result<()> {
        self.header.validate()?;
        let expected = self.header.expected_lengths()?;
        const NAMES: [&str; 4] = ["residual values", "residual ranks", "salient values", "salient ranks"];
        for ((stream, want), name) in self.streams().iter().zip(expected).zip(NAMES) {
            if stream.len() != want {
                return Err(FormatError::HeaderMismatch(format!(
                    "{name} stream has {} bytes, header implies {want}",
                    stream.len()
                ))
                .into());
            }
        }
        Ok(())
    }

    /// Exact serialized size.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.streams().iter().map(|s| 8 + s.len()).sum::<usize>()
    }

    /// Bytes of residual and salient pattern metadata, per-row padding included.
    pub fn metadata_bytes(&self) -> (usize, usize) {
        (self.residual_ranks.len(), self.salient_ranks.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&NMS_MAGIC);
        out.extend_from_slice(&NMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.rows as u32).to_le_bytes());
        out.extend_from_slice(&(h.cols as u32).to_le_bytes());
        out.extend_from_slice(&(h.residual.n_keep() as u16).to_le_bytes());
        out.extend_from_slice(&(h.residual.m_block() as u16).to_le_bytes());
        let k = h.salient.map_or(0, |s| s.n_keep() as u16);
        out.extend_from_slice(&k.to_le_bytes());
        out.push(h.dtype.tag());
        out.extend_from_slice(&h.correction_factor.to_le_bytes());
        for s in self.streams() {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let head = take(&mut rest, HEADER_LEN, "NMS1 header")?;
        let magic: [u8; 4] = head[..4].try_into().unwrap();
        if magic != NMS_MAGIC {
            return Err(FormatError::BadMagic {
                expected: NMS_MAGIC,
                found: magic,
            }
            .into());
        }
        let u16_at = |o: usize| u16::from_le_bytes(head[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != NMS_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let rows = u32_at(6) as usize;
        let cols = u32_at(10) as usize;
        let residual = PatternShape::new(u16_at(14) as usize, u16_at(16) as usize)
            .map_err(|e| FormatError::HeaderMismatch(e.to_string()))?;
        let k = u16_at(18) as usize;
        let salient = match k {
            0 => None,
            k => Some(
                PatternShape::new(k, SALIENT_BLOCK)
                    .map_err(|e| FormatError::HeaderMismatch(e.to_string()))?,
            ),
        };
        let dtype = DType::from_tag(head[20])?;
        let correction_factor = f64::from_le_bytes(head[21..29].try_into().unwrap());
        let header = NmsHeader {
            rows,
            cols,
            residual,
            salient,
            dtype,
            correction_factor,
        };
        header.validate()?;

        let mut stream = |context: &'static str| -> Result<Vec<u8>, FormatError> {
            let len = u64::from_le_bytes(take(&mut rest, 8, context)?.try_into().unwrap());
            let len = usize::try_from(len).map_err(|_| FormatError::HeaderMismatch(format!("{context} length {len}")))?;
            Ok(take(&mut rest, len, context)?.to_vec())
        };
        let residual_values = stream("residual values")?;
        let residual_ranks = stream("residual ranks")?;
        let salient_values = stream("salient values")?;
        let salient_ranks = stream("salient ranks")?;
        if !rest.is_empty() {
            return Err(FormatError::TrailingBytes(rest.len()).into());
        }
        let t = Self {
            header,
            residual_values,
            residual_ranks,
            salient_values,
            salient_ranks,
        };
        t.check_lengths()?;
        Ok(t)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
