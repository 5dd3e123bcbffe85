//! N:M block patterns and their combinadic codec.
//!
//! A pattern `N:M` keeps `N` of every `M` consecutive entries along a row.
//! A block's kept set `{c₀ < c₁ < … < c_{N−1}}` is ranked colexicographically:
//!
//! ```text
//! rank = Σₖ C(cₖ, k + 1)
//! ```
//!
//! which is a bijection onto `[0, C(M, N))`. Ranks are what the `NMS1` file
//! stores as pattern metadata, `ceil(log2 C(M, N))` bits per block.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported block length (salient blocks are 256 wide).
pub const MAX_BLOCK: usize = 256;

fn pascal() -> &'static [Vec<Option<u128>>] {
    static TABLE: OnceLock<Vec<Vec<Option<u128>>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rows: Vec<Vec<Option<u128>>> = Vec::with_capacity(MAX_BLOCK + 1);
        for n in 0..=MAX_BLOCK {
            let mut row = vec![Some(1u128); n + 1];
            for k in 1..n {
                let prev = &rows[n - 1];
                row[k] = match (prev[k - 1], prev[k]) {
                    (Some(a), Some(b)) => a.checked_add(b),
                    _ => None,
                };
            }
            rows.push(row);
        }
        rows
    })
}

/// Exact `C(n, k)`; `Some(0)` when `k > n`, `None` on 128-bit overflow.
///
/// Panics if `n > MAX_BLOCK`.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    assert!(n <= MAX_BLOCK, "binomial table covers n <= {MAX_BLOCK}");
    if k > n {
        return Some(0);
    }
    pascal()[n][k]
}

fn checked_binomial(n: usize, k: usize) -> Result<u128> {
    binomial(n, k).ok_or(Error::Overflow { n, k })
}

/// Bits needed to address `count` distinct configurations.
pub fn bits_for_count(count: u128) -> u32 {
    if count <= 1 {
        0
    } else {
        u128::BITS - (count - 1).leading_zeros()
    }
}

/// `N:M` shape with `N` = kept entries per block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PatternShape {
    n_keep: usize,
    m_block: usize,
}

impl PatternShape {
    pub fn new(n_keep: usize, m_block: usize) -> Result<Self> {
        if m_block == 0 || m_block > MAX_BLOCK {
            return Err(Error::Pattern(format!(
                "block size {m_block} outside 1..={MAX_BLOCK}"
            )));
        }
        if n_keep == 0 || n_keep > m_block {
            return Err(Error::Pattern(format!(
                "kept count {n_keep} outside 1..={m_block}"
            )));
        }
        Ok(Self { n_keep, m_block })
    }

    pub const fn two_four() -> Self {
        Self {
            n_keep: 2,
            m_block: 4,
        }
    }

    pub const fn eight_sixteen() -> Self {
        Self {
            n_keep: 8,
            m_block: 16,
        }
    }

    pub fn n_keep(&self) -> usize {
        self.n_keep
    }

    pub fn m_block(&self) -> usize {
        self.m_block
    }

    /// Kept fraction `N / M`.
    pub fn density(&self) -> f64 {
        self.n_keep as f64 / self.m_block as f64
    }
}

impl fmt::Display for PatternShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n_keep, self.m_block)
    }
}

impl FromStr for PatternShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Pattern(format!("expected \"N:M\", got {s:?}")))?;
        let parse = |part: &str| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Pattern(format!("expected \"N:M\", got {s:?}")))
        };
        Self::new(parse(n)?, parse(m)?)
    }
}

impl TryFrom<String> for PatternShape {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PatternShape> for String {
    fn from(p: PatternShape) -> Self {
        p.to_string()
    }
}

/// Number of admissible block configurations, `C(M, N)`.
pub fn config_count(shape: PatternShape) -> Result<u128> {
    checked_binomial(shape.m_block, shape.n_keep)
}

/// Configurations of `repeats` independent blocks laid side by side.
pub fn stacked_config_count(shape: PatternShape, repeats: u32) -> Result<u128> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    config_count(shape)?
        .checked_pow(repeats)
        .ok_or(Error::Overflow {
            n: shape.m_block * repeats as usize,
            k: shape.n_keep * repeats as usize,
        })
}

/// Metadata cost per element as the exact ratio `bits_per_block / M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitsPerElement {
    pub bits_per_block: u32,
    pub block: usize,
}

impl BitsPerElement {
    pub fn as_f64(&self) -> f64 {
        self.bits_per_block as f64 / self.block as f64
    }
}

impl fmt::Display for BitsPerElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bits_per_block, self.block)
    }
}

pub fn bits_per_element(shape: PatternShape) -> Result<BitsPerElement> {
    Ok(BitsPerElement {
        bits_per_block: bits_for_count(config_count(shape)?),
        block: shape.m_block,
    })
}

/// Colex rank of a strictly increasing kept-index set.
pub fn rank_pattern(kept: &[usize], shape: PatternShape) -> Result<u128> {
    if kept.len() != shape.n_keep {
        return Err(Error::Pattern(format!(
            "{shape} block needs {} kept indices, got {}",
            shape.n_keep,
            kept.len()
        )));
    }
    let mut rank = 0u128;
    let mut prev: Option<usize> = None;
    for (k, &c) in kept.iter().enumerate() {
        if c >= shape.m_block {
            return Err(Error::Pattern(format!(
                "index {c} out of range for block size {}",
                shape.m_block
            )));
        }
        if prev.is_some_and(|p| c <= p) {
            return Err(Error::Pattern(format!(
                "kept indices must be strictly increasing: {kept:?}"
            )));
        }
        prev = Some(c);
        rank += checked_binomial(c, k + 1)?;
    }
    Ok(rank)
}

/// Inverse of [`rank_pattern`]: greedy decomposition from the top position down.
pub fn unrank_pattern(rank: u128, shape: PatternShape) -> Result<Vec<usize>> {
    let count = config_count(shape)?;
    if rank >= count {
        return Err(Error::RankOutOfRange {
            rank,
            count,
            shape: shape.to_string(),
        });
    }
    let mut kept = vec![0usize; shape.n_keep];
    let mut rest = rank;
    let mut c = shape.m_block;
    for k in (1..=shape.n_keep).rev() {
        // largest c with C(c, k) <= rest; C(k-1, k) = 0 bounds the scan
        c -= 1;
        loop {
            let b = checked_binomial(c, k)?;
            if b <= rest {
                rest -= b;
                break;
            }
            c -= 1;
        }
        kept[k - 1] = c;
    }
    debug_assert_eq!(rest, 0);
    Ok(kept)
}

/// Rank/unrank codec for one fixed shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternCodec {
    shape: PatternShape,
    config_count: u128,
    bits_per_block: u32,
}

impl PatternCodec {
    pub fn new(shape: PatternShape) -> Result<Self> {
        let config_count = config_count(shape)?;
        Ok(Self {
            shape,
            config_count,
            bits_per_block: bits_for_count(config_count),
        })
    }

    pub fn shape(&self) -> PatternShape {
        self.shape
    }

    pub fn config_count(&self) -> u128 {
        self.config_count
    }

    pub fn bits_per_block(&self) -> u32 {
        self.bits_per_block
    }

    pub fn rank(&self, kept: &[usize]) -> Result<u128> {
        rank_pattern(kept, self.shape)
    }

    pub fn unrank(&self, rank: u128) -> Result<Vec<usize>> {
        unrank_pattern(rank, self.shape)
    }
}

/// Binary keep-mask with exactly `N` set entries per `M`-block of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NMMask {
    shape: PatternShape,
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl NMMask {
    /// Validate a row-major keep vector against the block invariant.
    pub fn from_keep_bits(
        shape: PatternShape,
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
    ) -> Result<Self> {
        check_block_dims(shape, cols)?;
        if keep.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask has {} bits, expected {rows}x{cols}",
                keep.len()
            )));
        }
        for (b, block) in keep.chunks(shape.m_block).enumerate() {
            let set = block.iter().filter(|&&k| k).count();
            if set != shape.n_keep {
                let per_row = cols / shape.m_block;
                return Err(Error::Pattern(format!(
                    "row {} block {} keeps {set} entries, {shape} requires {}",
                    b / per_row,
                    b % per_row,
                    shape.n_keep
                )));
            }
        }
        Ok(Self {
            shape,
            rows,
            cols,
            keep,
        })
    }

    /// Build a mask from row-major per-block ranks.
    pub fn from_rank_stream(
        ranks: &[u128],
        shape: PatternShape,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        check_block_dims(shape, cols)?;
        let blocks = rows * cols / shape.m_block;
        if ranks.len() != blocks {
            return Err(Error::Shape(format!(
                "rank stream has {} entries, mask has {blocks} blocks",
                ranks.len()
            )));
        }
        let mut keep = vec![false; rows * cols];
        for (b, &rank) in ranks.iter().enumerate() {
            let base = b * shape.m_block;
            for c in unrank_pattern(rank, shape)? {
                keep[base + c] = true;
            }
        }
        Ok(Self {
            shape,
            rows,
            cols,
            keep,
        })
    }

    pub fn shape(&self) -> PatternShape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.shape.m_block
    }

    pub fn block_count(&self) -> usize {
        self.rows * self.blocks_per_row()
    }

    pub fn keep_bits(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    pub fn kept_count(&self) -> usize {
        self.rows * self.blocks_per_row() * self.shape.n_keep
    }

    /// Kept offsets within block `block` of `row`, ascending.
    pub fn block_kept(&self, row: usize, block: usize) -> Vec<usize> {
        let base = row * self.cols + block * self.shape.m_block;
        (0..self.shape.m_block)
            .filter(|&c| self.keep[base + c])
            .collect()
    }

    /// Row-major flat indices of kept positions.
    pub fn kept_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
    }

    /// Per-block ranks, row-major.
    pub fn ranks(&self) -> Vec<u128> {
        let m = self.shape.m_block;
        self.keep
            .chunks(m)
            .map(|block| {
                let kept: Vec<usize> = (0..m).filter(|&c| block[c]).collect();
                // invariant guarantees a valid kept set
                rank_pattern(&kept, self.shape).expect("mask invariant")
            })
            .collect()
    }

    /// True when no position is kept by both masks.
    pub fn is_disjoint(&self, other: &NMMask) -> bool {
        self.keep.len() == other.keep.len()
            && self.keep.iter().zip(&other.keep).all(|(&a, &b)| !(a && b))
    }
}

pub(crate) fn check_block_dims(shape: PatternShape, cols: usize) -> Result<()> {
    if cols % shape.m_block != 0 {
        return Err(Error::Shape(format!(
            "{cols} columns not divisible by block size {} of {shape}",
            shape.m_block
        )));
    }
    Ok(())
}
