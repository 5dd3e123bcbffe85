//! Masked layer-wise reconstruction.
//!
//! Minimises `‖W Xᵀ − (R + S) Xᵀ‖_F²` over the residual entries `R` that the
//! residual mask keeps; the mask and the salient weights `S` stay fixed.
//! Rows decouple, so each row is an independent convex quadratic in its kept
//! values `v`:
//!
//! ```text
//! f(v) = ‖X (t − P v)‖² + ridge · ‖v − v₀‖²,   t = w − s
//! ∇f  = 2 (H v − b),   H = Pᵀ G P + ridge·I,   b = Pᵀ G t + ridge·v₀,   G = XᵀX
//! ```
//!
//! Each row runs gradient descent with step `1/L` (`L` from power iteration
//! on `H`), halving the step whenever a step would increase `f`. Loss changes
//! are evaluated as `Δ = dᵀ(∇f + H d)` so they do not cancel against the
//! constant term.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PrunedLayer;
use crate::tensor::{dot, CalibrationSet, WeightMatrix};

const POWER_ITERS: usize = 64;
const MAX_HALVINGS: usize = 60;

fn default_max_iters() -> usize {
    500
}

fn default_rel_tol() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSettings {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Initial step; `None` picks `1/L` per row.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// Proximal weight pulling kept values toward their starting point.
    #[serde(default)]
    pub ridge: f64,
}

impl Default for ReconstructionSettings {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            step_size: None,
            rel_tol: default_rel_tol(),
            ridge: 0.0,
        }
    }
}

impl ReconstructionSettings {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("step_size must be > 0, got {s}")));
            }
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::InvalidArgument(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub tuned: PrunedLayer,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Largest iteration count over all rows.
    pub iterations: usize,
    /// Objective summed over rows after each iteration; entry 0 is the start.
    pub loss_history: Vec<f64>,
}

/// `XᵀX`, accumulated sample by sample.
fn gram(calib: &CalibrationSet) -> Vec<f64> {
    let n = calib.cols();
    let mut g = vec![0.0; n * n];
    for s in 0..calib.samples() {
        let x = calib.sample(s);
        for a in 0..n {
            let xa = x[a];
            if xa == 0.0 {
                continue;
            }
            let row = &mut g[a * n..(a + 1) * n];
            for (gb, &xb) in row.iter_mut().zip(x) {
                *gb += xa * xb;
            }
        }
    }
    g
}

/// Reconstruction target `t = w − s` for every row.
fn targets(dense: &WeightMatrix, layer: &PrunedLayer) -> Vec<f64> {
    let mut t = dense.data().to_vec();
    if let Some(s) = &layer.salient {
        for (idx, &v) in s.mask().kept_indices().zip(s.values()) {
            t[idx] -= v;
        }
    }
    t
}

fn check_shapes(dense: &WeightMatrix, layer: &PrunedLayer, calib: &CalibrationSet) -> Result<()> {
    if (dense.rows(), dense.cols()) != (layer.rows(), layer.cols()) {
        return Err(Error::Shape(format!(
            "dense is {}x{}, pruned layer is {}x{}",
            dense.rows(),
            dense.cols(),
            layer.rows(),
            layer.cols()
        )));
    }
    if calib.cols() != dense.cols() {
        return Err(Error::Shape(format!(
            "calibration has {} channels, weights have {}",
            calib.cols(),
            dense.cols()
        )));
    }
    Ok(())
}

/// `‖W Xᵀ − (R + S) Xᵀ‖_F²`, evaluated directly from the samples.
pub fn reconstruction_loss(dense: &WeightMatrix, layer: &PrunedLayer, calib: &CalibrationSet) -> Result<f64> {
    check_shapes(dense, layer, calib)?;
    let t = targets(dense, layer);
    let cols = dense.cols();
    let mut total = 0.0;
    let mut r = vec![0.0; cols];
    for i in 0..dense.rows() {
        for (j, rj) in r.iter_mut().enumerate() {
            *rj = t[i * cols + j] - layer.residual.data()[i * cols + j];
        }
        for s in 0..calib.samples() {
            let z = dot(&r, calib.sample(s));
            total += z * z;
        }
    }
    Ok(total)
}

struct RowProblem {
    kept: Vec<usize>,
    h: Vec<f64>,
    b: Vec<f64>,
}

impl RowProblem {
    fn new(g: &[f64], cols: usize, t: &[f64], kept: Vec<usize>, v0: &[f64], ridge: f64) -> Self {
        let k = kept.len();
        let mut h = vec![0.0; k * k];
        let mut b = vec![0.0; k];
        for (p, &a) in kept.iter().enumerate() {
            let grow = &g[a * cols..(a + 1) * cols];
            for (q, &c) in kept.iter().enumerate() {
                h[p * k + q] = grow[c];
            }
            h[p * k + p] += ridge;
            b[p] = dot(grow, t) + ridge * v0[p];
        }
        Self { kept, h, b }
    }

    fn len(&self) -> usize {
        self.kept.len()
    }

    fn h_times(&self, v: &[f64], out: &mut [f64]) {
        let k = self.len();
        for (p, o) in out.iter_mut().enumerate() {
            *o = dot(&self.h[p * k..(p + 1) * k], v);
        }
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut hv = vec![0.0; self.len()];
        self.h_times(v, &mut hv);
        hv.iter().zip(&self.b).map(|(a, b)| 2.0 * (a - b)).collect()
    }

    /// Power-iteration estimate of `2 λ_max(H)`.
    fn lipschitz(&self) -> f64 {
        let k = self.len();
        let mut v = vec![1.0 / (k as f64).sqrt(); k];
        let mut hv = vec![0.0; k];
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            self.h_times(&v, &mut hv);
            let norm = dot(&hv, &hv).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v.iter_mut().zip(&hv).for_each(|(a, b)| *a = b / norm);
        }
        2.0 * lambda
    }
}

struct RowOutcome {
    values: Vec<f64>,
    history: Vec<f64>,
    iterations: usize,
}

fn solve_row(
    problem: &RowProblem,
    v0: &[f64],
    start_loss: f64,
    s: &ReconstructionSettings,
) -> Result<RowOutcome> {
    let k = problem.len();
    let mut v = v0.to_vec();
    let mut loss = start_loss;
    let mut history = vec![loss];
    if k == 0 {
        return Ok(RowOutcome {
            values: v,
            history,
            iterations: 0,
        });
    }
    let lip = problem.lipschitz();
    if lip == 0.0 {
        // objective is flat in the kept coordinates
        return Ok(RowOutcome {
            values: v,
            history,
            iterations: 0,
        });
    }
    let mut step = s.step_size.unwrap_or(1.0 / lip);
    let mut hd = vec![0.0; k];
    let mut iterations = 0;

    for _ in 0..s.max_iters {
        let g = problem.gradient(&v);
        let gg = dot(&g, &g);
        if gg == 0.0 || loss <= 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let d: Vec<f64> = g.iter().map(|gi| -step * gi).collect();
            problem.h_times(&d, &mut hd);
            let delta: f64 = d.iter().zip(g.iter().zip(&hd)).map(|(di, (gi, hi))| di * (gi + hi)).sum();
            if !delta.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss change with step {step}")));
            }
            if delta <= 0.0 {
                accepted = Some((d, delta));
                break;
            }
            step *= 0.5;
        }
        let Some((d, delta)) = accepted else { break };
        v.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        let new_loss = (loss + delta).max(0.0);
        if !new_loss.is_finite() {
            return Err(Error::Numerical("non-finite reconstruction loss".into()));
        }
        iterations += 1;
        let improvement = loss - new_loss;
        loss = new_loss;
        history.push(loss);
        if improvement <= s.rel_tol * loss {
            break;
        }
    }
    Ok(RowOutcome {
        values: v,
        history,
        iterations,
    })
}

/// Gradient of the reconstruction loss with respect to every residual entry,
/// zero outside the residual mask.
pub fn masked_gradient(dense: &WeightMatrix, layer: &PrunedLayer, calib: &CalibrationSet) -> Result<WeightMatrix> {
    check_shapes(dense, layer, calib)?;
    let cols = dense.cols();
    let g = gram(calib);
    let t = targets(dense, layer);
    let mut out = vec![0.0; dense.len()];
    for i in 0..dense.rows() {
        let kept = kept_in_row(layer, i);
        let v: Vec<f64> = kept.iter().map(|&c| layer.residual.get(i, c)).collect();
        let problem = RowProblem::new(&g, cols, &t[i * cols..(i + 1) * cols], kept, &v, 0.0);
        for (&c, gc) in problem.kept.iter().zip(problem.gradient(&v)) {
            out[i * cols + c] = gc;
        }
    }
    WeightMatrix::new(dense.rows(), cols, out)
}

fn kept_in_row(layer: &PrunedLayer, row: usize) -> Vec<usize> {
    let mask = &layer.residual_mask;
    (0..mask.cols()).filter(|&c| mask.is_kept(row, c)).collect()
}

/// Tune the kept residual values against the dense layer's outputs.
///
/// Rows are solved in parallel; each row's arithmetic is sequential, so the
/// result does not depend on the thread count.
pub fn reconstruct_layer(
    dense: &WeightMatrix,
    layer: &PrunedLayer,
    calib: &CalibrationSet,
    s: &ReconstructionSettings,
) -> Result<ReconstructionResult> {
    s.validate()?;
    check_shapes(dense, layer, calib)?;
    let cols = dense.cols();
    let g = gram(calib);
    let t = targets(dense, layer);

    let outcomes: Vec<RowOutcome> = (0..dense.rows())
        .into_par_iter()
        .map(|i| {
            let kept = kept_in_row(layer, i);
            let v0: Vec<f64> = kept.iter().map(|&c| layer.residual.get(i, c)).collect();
            let row_t = &t[i * cols..(i + 1) * cols];
            let mut r = row_t.to_vec();
            for (&c, &v) in kept.iter().zip(&v0) {
                r[c] -= v;
            }
            let start: f64 = (0..calib.samples())
                .map(|smp| {
                    let z = dot(&r, calib.sample(smp));
                    z * z
                })
                .sum();
            let problem = RowProblem::new(&g, cols, row_t, kept, &v0, s.ridge);
            solve_row(&problem, &v0, start, s)
        })
        .collect::<Result<_>>()?;

    let mut data = layer.residual.data().to_vec();
    let mut iterations = 0;
    let longest = outcomes.iter().map(|o| o.history.len()).max().unwrap_or(1);
    let mut loss_history = vec![0.0; longest];
    for (i, o) in outcomes.iter().enumerate() {
        let kept = kept_in_row(layer, i);
        for (&c, &v) in kept.iter().zip(&o.values) {
            data[i * cols + c] = v;
        }
        iterations = iterations.max(o.iterations);
        for (step, h) in loss_history.iter_mut().enumerate() {
            *h += o.history[step.min(o.history.len() - 1)];
        }
    }

    let mut tuned = layer.clone();
    tuned.residual = WeightMatrix::new(dense.rows(), cols, data)
        .map_err(|e| Error::Numerical(format!("reconstruction produced invalid weights: {e}")))?;
    debug_assert!(tuned
        .residual
        .data()
        .iter()
        .zip(tuned.residual_mask.keep_bits())
        .all(|(&v, &k)| k || v == 0.0));

    let initial_loss = reconstruction_loss(dense, layer, calib)?;
    let mut final_loss = reconstruction_loss(dense, &tuned, calib)?;
    if !final_loss.is_finite() {
        return Err(Error::Numerical("non-finite reconstruction loss".into()));
    }
    if final_loss > initial_loss {
        // only reachable through rounding when no real progress was made
        tuned = layer.clone();
        final_loss = initial_loss;
    }
    Ok(ReconstructionResult {
        tuned,
        initial_loss,
        final_loss,
        iterations,
        loss_history,
    })
}
