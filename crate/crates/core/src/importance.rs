//! Importance scores used to choose which weights survive.
//!
//! Equalization rescales weights by per-channel activation/weight ratios
//! before scoring. The rescaled matrix only feeds the scorer; stored weights
//! always come from the original matrix.

use crate::error::{Error, Result};
use crate::tensor::{ChannelStats, WeightMatrix};

/// Floor applied to every divisor in this module.
pub const DEFAULT_CLAMP_MIN: f64 = 1e-8;

/// Non-negative per-weight scores, same shape as the scored matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "score data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numerical(format!(
                "score at flat index {i} is {} (must be finite and >= 0)",
                data[i]
            )));
        }
        Ok(Self { rows, cols, data })
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

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Per-input-channel scales `s_j > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizationScales {
    scales: Vec<f64>,
}

impl EqualizationScales {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if let Some(j) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "scale {j} is {} (must be finite and > 0)",
                scales[j]
            )));
        }
        Ok(Self { scales })
    }

    /// `s_j = c` for every channel.
    pub fn uniform(cols: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; cols])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

pub fn magnitude_scores(w: &WeightMatrix) -> ScoreMatrix {
    ScoreMatrix {
        rows: w.rows(),
        cols: w.cols(),
        data: w.data().iter().map(|v| v.abs()).collect(),
    }
}

fn column_abs_max(w: &WeightMatrix) -> Vec<f64> {
    let mut out = vec![0.0f64; w.cols()];
    for i in 0..w.rows() {
        for (o, v) in out.iter_mut().zip(w.row(i)) {
            *o = o.max(v.abs());
        }
    }
    out
}

fn check_stats(w: &WeightMatrix, stats: &ChannelStats) -> Result<()> {
    if stats.abs_max.len() != w.cols() || stats.l2_norm.len() != w.cols() {
        return Err(Error::Shape(format!(
            "channel stats cover {} channels, weights have {}",
            stats.abs_max.len(),
            w.cols()
        )));
    }
    Ok(())
}

/// `s_j = max|x_j| / max_i |W_ij|`, numerator and denominator each floored at `clamp_min`.
pub fn equalization_scales(
    w: &WeightMatrix,
    stats: &ChannelStats,
    clamp_min: f64,
) -> Result<EqualizationScales> {
    check_stats(w, stats)?;
    if !(clamp_min > 0.0 && clamp_min.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "clamp_min must be finite and > 0, got {clamp_min}"
        )));
    }
    let scales = stats
        .abs_max
        .iter()
        .zip(column_abs_max(w))
        .map(|(&x, wmax)| x.max(clamp_min) / wmax.max(clamp_min))
        .collect();
    EqualizationScales::new(scales)
}

/// `W_ec = W · diag(s)⁻¹`, for scoring only.
pub fn equalize_for_scoring(w: &WeightMatrix, scales: &EqualizationScales) -> Result<WeightMatrix> {
    if scales.len() != w.cols() {
        return Err(Error::Shape(format!(
            "{} scales for {} columns",
            scales.len(),
            w.cols()
        )));
    }
    let s = scales.as_slice();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| v / s[k % w.cols()])
        .collect();
    WeightMatrix::new(w.rows(), w.cols(), data)
}

/// Relative importance: `|w|/Σ_row|w| + |w|/Σ_col|w|`, times `‖X_j‖₂^power`.
///
/// Row sums accumulate left to right, column sums top to bottom; zero sums
/// are floored at `clamp_min`. `power = 0` drops the activation factor.
pub fn ria_scores(
    w: &WeightMatrix,
    stats: &ChannelStats,
    activation_power: f64,
    clamp_min: f64,
) -> Result<ScoreMatrix> {
    check_stats(w, stats)?;
    if !(activation_power >= 0.0 && activation_power.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "activation power must be finite and >= 0, got {activation_power}"
        )));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let row_sums: Vec<f64> = (0..rows)
        .map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>().max(clamp_min))
        .collect();
    let mut col_sums = vec![0.0f64; cols];
    for i in 0..rows {
        for (c, v) in col_sums.iter_mut().zip(w.row(i)) {
            *c += v.abs();
        }
    }
    col_sums.iter_mut().for_each(|c| *c = c.max(clamp_min));
    let act: Vec<f64> = if activation_power == 0.0 {
        vec![1.0; cols]
    } else {
        stats.l2_norm.iter().map(|n| n.powf(activation_power)).collect()
    };

    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for (j, v) in w.row(i).iter().enumerate() {
            let a = v.abs();
            data.push((a / row_sums[i] + a / col_sums[j]) * act[j]);
        }
    }
    ScoreMatrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::synth_outlier_matrix;
    use proptest::prelude::*;

    fn wm(rows: usize, cols: usize, data: &[f64]) -> WeightMatrix {
        WeightMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    fn stats(abs_max: &[f64], l2: &[f64]) -> ChannelStats {
        ChannelStats {
            abs_max: abs_max.to_vec(),
            l2_norm: l2.to_vec(),
        }
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_scores(&wm(1, 2, &[-3.0, 2.0])).data(), &[3.0, 2.0]);
        assert!(magnitude_scores(&WeightMatrix::zeros(2, 3))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn scales_examples() {
        let w = wm(2, 2, &[4.0, 0.5, -1.0, -0.25]);
        let s = equalization_scales(&w, &stats(&[2.0, 1.0], &[1.0, 1.0]), 1e-8).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 2.0]);

        let s = equalization_scales(&w, &stats(&[4.0, 0.5], &[1.0, 1.0]), 1e-8).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0]);

        let s = equalization_scales(&w, &stats(&[0.0, 0.5], &[1.0, 1.0]), 1e-8).unwrap();
        assert_eq!(s.as_slice()[0], 1e-8 / 4.0);
    }

    #[test]
    fn dead_weight_column_is_clamped() {
        let w = wm(1, 2, &[0.0, 1.0]);
        let s = equalization_scales(&w, &stats(&[1.0, 1.0], &[1.0, 1.0]), 1e-8).unwrap();
        assert_eq!(s.as_slice()[0], 1.0 / 1e-8);
    }

    #[test]
    fn equalize_examples() {
        let w = wm(1, 2, &[4.0, 0.5]);
        let ones = EqualizationScales::uniform(2, 1.0).unwrap();
        assert_eq!(equalize_for_scoring(&w, &ones).unwrap(), w);
        let s = EqualizationScales::new(vec![0.5, 2.0]).unwrap();
        assert_eq!(equalize_for_scoring(&w, &s).unwrap().data(), &[8.0, 0.25]);
        assert!(EqualizationScales::new(vec![0.0]).is_err());
        assert!(equalize_for_scoring(&w, &EqualizationScales::uniform(3, 1.0).unwrap()).is_err());
    }

    #[test]
    fn ria_examples() {
        let one = ria_scores(&wm(1, 1, &[5.0]), &stats(&[1.0], &[1.0]), 0.5, 1e-8).unwrap();
        assert_eq!(one.data(), &[2.0]);

        let flat = ria_scores(
            &wm(2, 2, &[1.0; 4]),
            &stats(&[1.0, 1.0], &[1.0, 1.0]),
            0.5,
            1e-8,
        )
        .unwrap();
        assert_eq!(flat.data(), &[1.0; 4]);
    }

    #[test]
    fn ria_power_zero_ignores_activations() {
        let w = synth_outlier_matrix(4, 8, 1, 3.0, 2).unwrap();
        let a = ria_scores(&w, &stats(&[1.0; 8], &[1.0; 8]), 0.0, 1e-8).unwrap();
        let b = ria_scores(&w, &stats(&[9.0; 8], &[0.0, 1., 2., 3., 4., 5., 6., 7.]), 0.0, 1e-8)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_score_zero() {
        let w = wm(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let st = stats(&[1.0, 1.0], &[2.0, 3.0]);
        let ria = ria_scores(&w, &st, 0.5, 1e-8).unwrap();
        assert_eq!(ria.get(0, 0), 0.0);
        assert_eq!(ria.get(1, 1), 0.0);
        assert!(ria.get(0, 1) > 0.0);
    }

    #[test]
    fn shape_errors() {
        let w = wm(1, 2, &[1.0, 2.0]);
        assert!(ria_scores(&w, &stats(&[1.0], &[1.0]), 0.5, 1e-8).is_err());
        assert!(equalization_scales(&w, &stats(&[1.0], &[1.0]), 1e-8).is_err());
        assert!(ria_scores(&w, &stats(&[1.0; 2], &[1.0; 2]), -1.0, 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn magnitude_sign_invariant(vals in prop::collection::vec(-10.0f64..10.0, 12), flips in prop::collection::vec(any::<bool>(), 12)) {
            let w = wm(3, 4, &vals);
            let flipped: Vec<f64> = vals.iter().zip(&flips).map(|(v, &f)| if f { -v } else { *v }).collect();
            prop_assert_eq!(magnitude_scores(&w), magnitude_scores(&wm(3, 4, &flipped)));
        }

        #[test]
        fn ria_global_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
            let w = synth_outlier_matrix(6, 16, 2, 4.0, seed).unwrap();
            let st = stats(&[1.0; 16], &(0..16).map(|j| 1.0 + j as f64).collect::<Vec<_>>());
            let base = ria_scores(&w, &st, 0.5, 1e-8).unwrap();
            let scaled = ria_scores(&w.map(|v| v * alpha).unwrap(), &st, 0.5, 1e-8).unwrap();
            for (a, b) in base.data().iter().zip(scaled.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
            }
        }

        #[test]
        fn equalization_preserves_product(seed in any::<u64>()) {
            let w = synth_outlier_matrix(5, 7, 1, 6.0, seed).unwrap();
            let x = crate::tensor::synth_uniform(7, seed ^ 1);
            let s: Vec<f64> = crate::tensor::synth_uniform(7, seed ^ 2).iter().map(|u| 0.1 + 2.0 * u.abs()).collect();
            let scales = EqualizationScales::new(s.clone()).unwrap();
            let w_ec = equalize_for_scoring(&w, &scales).unwrap();
            let xs: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a * b).collect();
            for i in 0..5 {
                let lhs = crate::tensor::dot(w_ec.row(i), &xs);
                let rhs = crate::tensor::dot(w.row(i), &x);
                let denom = w.row(i).iter().zip(&x).map(|(a, b)| (a * b).abs()).sum::<f64>();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * denom);
            }
        }
    }
}
