//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All `n`-subsets of `0..m` as bitmasks, ascending numeric order.
pub fn subsets(n: u32, m: u32) -> Vec<u32> {
    (0u32..1 << m).filter(|b| b.count_ones() == n).collect()
}

pub fn mask_sum(scores: &[f64], mask: u32) -> f64 {
    (0..scores.len())
        .filter(|&i| mask >> i & 1 == 1)
        .map(|i| scores[i])
        .sum()
}

/// Best kept-score sum over every admissible `n`-of-`scores.len()` pattern.
pub fn best_pattern_sum(scores: &[f64], patterns: &[u32]) -> f64 {
    patterns
        .iter()
        .map(|&p| mask_sum(scores, p))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Best sum over the 6⁴ stacked 2:4 choices of a 16-wide block.
pub fn best_stacked_two_four(scores: &[f64]) -> f64 {
    let two_four = subsets(2, 4);
    let mut best = f64::NEG_INFINITY;
    for a in &two_four {
        for b in &two_four {
            for c in &two_four {
                for d in &two_four {
                    let m = a | b << 4 | c << 8 | d << 12;
                    best = best.max(mask_sum(scores, m));
                }
            }
        }
    }
    best
}

/// Population variance, textbook two-pass.
pub fn naive_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn uniform_vec(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Dense `y = W x` for a row-major matrix.
pub fn dense_matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| (0..cols).map(|j| w[i * cols + j] * x[j]).sum())
        .collect()
}

/// Count violations of the N-per-M block rule on a raw row-major keep vector.
pub fn block_violations(keep: &[bool], cols: usize, n: usize, m: usize) -> usize {
    keep.chunks(cols)
        .flat_map(|row| row.chunks(m))
        .filter(|b| b.iter().filter(|&&k| k).count() != n)
        .count()
}
