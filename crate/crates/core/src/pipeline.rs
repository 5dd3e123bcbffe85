//! Four-stage pruning: equalized scoring, salient K:256 extraction plus
//! residual N:M pruning, variance correction, masked reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{
    equalization_scales, equalize_for_scoring, magnitude_scores, ria_scores, ScoreMatrix,
    DEFAULT_CLAMP_MIN,
};
use crate::patterns::{bits_per_element, check_block_dims, NMMask, PatternCodec, PatternShape};
use crate::reconstruct::{reconstruct_layer, ReconstructionSettings};
use crate::tensor::{channel_stats, tensor_variance, variance_of, CalibrationSet, DType, WeightMatrix};

/// Block length of salient patterns.
pub const SALIENT_BLOCK: usize = 256;

pub const CONFIG_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Magnitude,
    Ria,
}

/// Which entries enter the residual variance of the correction factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScope {
    /// The whole residual tensor, pruned zeros included.
    #[default]
    IncludeZeros,
    /// Only the surviving residual values.
    KeptOnly,
}

/// Salient weights kept in a K:256 structured pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SalientStore {
    mask: NMMask,
    values: Vec<f64>,
}

impl SalientStore {
    /// `values` follow the row-major order of the mask's kept positions.
    pub fn new(mask: NMMask, values: Vec<f64>) -> Result<Self> {
        if mask.shape().m_block() != SALIENT_BLOCK {
            return Err(Error::Pattern(format!(
                "salient pattern must be K:{SALIENT_BLOCK}, got {}",
                mask.shape()
            )));
        }
        if values.len() != mask.kept_count() {
            return Err(Error::Shape(format!(
                "{} salient values for {} salient positions",
                values.len(),
                mask.kept_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite salient value".into()));
        }
        Ok(Self { mask, values })
    }

    pub fn shape(&self) -> PatternShape {
        self.mask.shape()
    }

    pub fn mask(&self) -> &NMMask {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Salient weights scattered into a dense matrix.
    pub fn to_dense(&self) -> WeightMatrix {
        let mut data = vec![0.0; self.mask.rows() * self.mask.cols()];
        for (idx, &v) in self.mask.kept_indices().zip(&self.values) {
            data[idx] = v;
        }
        WeightMatrix::new(self.mask.rows(), self.mask.cols(), data).expect("finite by construction")
    }
}

/// Output of stages 2-4 for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    pub residual: WeightMatrix,
    pub residual_mask: NMMask,
    pub salient: Option<SalientStore>,
    pub correction_factor: f64,
}

impl PrunedLayer {
    pub fn rows(&self) -> usize {
        self.residual.rows()
    }

    pub fn cols(&self) -> usize {
        self.residual.cols()
    }

    /// Residual plus salient weights as one dense matrix.
    pub fn effective_weights(&self) -> WeightMatrix {
        match &self.salient {
            None => self.residual.clone(),
            Some(s) => {
                let mut data = self.residual.data().to_vec();
                for (idx, &v) in s.mask().kept_indices().zip(s.values()) {
                    data[idx] += v;
                }
                WeightMatrix::new(self.rows(), self.cols(), data).expect("finite by construction")
            }
        }
    }

    /// Checks every structural invariant; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let (rows, cols) = (self.rows(), self.cols());
        let mask = &self.residual_mask;
        if (mask.rows(), mask.cols()) != (rows, cols) {
            return Err(Error::Shape("residual mask shape differs from residual".into()));
        }
        for (k, (&v, &kept)) in self.residual.data().iter().zip(mask.keep_bits()).enumerate() {
            if v != 0.0 && !kept {
                return Err(Error::Pattern(format!(
                    "residual entry {k} is nonzero outside the mask"
                )));
            }
        }
        if let Some(s) = &self.salient {
            if (s.mask().rows(), s.mask().cols()) != (rows, cols) {
                return Err(Error::Shape("salient mask shape differs from residual".into()));
            }
            if !s.mask().is_disjoint(mask) {
                return Err(Error::Pattern("salient and residual masks overlap".into()));
            }
        }
        if !(self.correction_factor > 0.0 && self.correction_factor.is_finite()) {
            return Err(Error::Numerical(format!(
                "correction factor {} must be finite and > 0",
                self.correction_factor
            )));
        }
        Ok(())
    }
}

/// Indices of the `n` highest scores among eligible positions, ascending.
/// Ties go to the lower index.
fn top_n(scores: &[f64], n: usize, eligible: impl Fn(usize) -> bool) -> Option<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| eligible(i)).collect();
    if idx.len() < n {
        return None;
    }
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    Some(idx)
}

fn check_scores(w: &WeightMatrix, scores: &ScoreMatrix) -> Result<()> {
    if (w.rows(), w.cols()) != (scores.rows(), scores.cols()) {
        return Err(Error::Shape(format!(
            "scores are {}x{}, weights are {}x{}",
            scores.rows(),
            scores.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

fn check_salient_shape(shape: PatternShape) -> Result<()> {
    if shape.m_block() != SALIENT_BLOCK {
        return Err(Error::Pattern(format!(
            "salient pattern must be K:{SALIENT_BLOCK}, got {shape}"
        )));
    }
    Ok(())
}

/// Top-K scores per 256-block of each row become salient.
pub fn extract_salient(
    w: &WeightMatrix,
    scores: &ScoreMatrix,
    shape: PatternShape,
) -> Result<SalientStore> {
    extract_salient_within(w, scores, shape, None)
}

/// Like [`extract_salient`], but when `residual` is given a candidate is
/// skipped once its residual block already holds `M − N` salient entries,
/// so every residual block keeps at least `N` candidates.
pub fn extract_salient_within(
    w: &WeightMatrix,
    scores: &ScoreMatrix,
    shape: PatternShape,
    residual: Option<PatternShape>,
) -> Result<SalientStore> {
    check_salient_shape(shape)?;
    check_scores(w, scores)?;
    check_block_dims(shape, w.cols())?;
    if let Some(r) = residual {
        check_block_dims(r, w.cols())?;
        let capacity = (SALIENT_BLOCK / r.m_block()) * (r.m_block() - r.n_keep());
        if SALIENT_BLOCK % r.m_block() != 0 || capacity < shape.n_keep() {
            return Err(Error::Pattern(format!(
                "salient {shape} cannot coexist with residual {r}"
            )));
        }
    }

    let k = shape.n_keep();
    let mut keep = vec![false; w.len()];
    let mut values = Vec::with_capacity(w.rows() * (w.cols() / SALIENT_BLOCK) * k);
    for i in 0..w.rows() {
        let row_scores = scores.row(i);
        for b in 0..w.cols() / SALIENT_BLOCK {
            let base = b * SALIENT_BLOCK;
            let block = &row_scores[base..base + SALIENT_BLOCK];
            let picked = match residual {
                None => top_n(block, k, |_| true).expect("block has 256 candidates"),
                Some(r) => {
                    let cap = r.m_block() - r.n_keep();
                    let mut order: Vec<usize> = (0..SALIENT_BLOCK).collect();
                    order.sort_by(|&a, &c| block[c].total_cmp(&block[a]).then(a.cmp(&c)));
                    let mut per_sub = vec![0usize; SALIENT_BLOCK / r.m_block()];
                    let mut picked = Vec::with_capacity(k);
                    for c in order {
                        let sub = c / r.m_block();
                        if per_sub[sub] < cap {
                            per_sub[sub] += 1;
                            picked.push(c);
                            if picked.len() == k {
                                break;
                            }
                        }
                    }
                    picked.sort_unstable();
                    picked
                }
            };
            for c in picked {
                keep[i * w.cols() + base + c] = true;
                values.push(w.get(i, base + c));
            }
        }
    }
    let mask = NMMask::from_keep_bits(shape, w.rows(), w.cols(), keep)?;
    SalientStore::new(mask, values)
}

/// Keep the `N` best non-salient positions of every `M`-block, zero the rest.
pub fn prune_residual(
    w: &WeightMatrix,
    scores: &ScoreMatrix,
    salient: Option<&SalientStore>,
    shape: PatternShape,
) -> Result<(WeightMatrix, NMMask)> {
    check_scores(w, scores)?;
    check_block_dims(shape, w.cols())?;
    if let Some(s) = salient {
        if (s.mask().rows(), s.mask().cols()) != (w.rows(), w.cols()) {
            return Err(Error::Shape("salient store shape differs from weights".into()));
        }
    }
    let m = shape.m_block();
    let cols = w.cols();
    let mut keep = vec![false; w.len()];
    let mut data = vec![0.0; w.len()];
    for i in 0..w.rows() {
        let row_scores = scores.row(i);
        for b in 0..cols / m {
            let base = b * m;
            let is_candidate = |c: usize| salient.is_none_or(|s| !s.mask().is_kept(i, base + c));
            let picked = top_n(&row_scores[base..base + m], shape.n_keep(), is_candidate)
                .ok_or_else(|| {
                    Error::Pattern(format!(
                        "row {i} block {b}: fewer than {} non-salient candidates for {shape}",
                        shape.n_keep()
                    ))
                })?;
            for c in picked {
                let idx = i * cols + base + c;
                keep[idx] = true;
                data[idx] = w.data()[idx];
            }
        }
    }
    Ok((
        WeightMatrix::new(w.rows(), cols, data)?,
        NMMask::from_keep_bits(shape, w.rows(), cols, keep)?,
    ))
}

/// Factor `√(Var_dense / (Var_residual + ε))`. A constant dense matrix
/// (zero variance) yields 1.
pub fn correction_factor(dense_variance: f64, residual_variance: f64, epsilon: f64) -> f64 {
    if dense_variance == 0.0 {
        return 1.0;
    }
    (dense_variance / (residual_variance + epsilon)).sqrt()
}

pub fn variance_correct(layer: PrunedLayer, dense_variance: f64, epsilon: f64) -> Result<PrunedLayer> {
    variance_correct_scoped(layer, dense_variance, epsilon, VarianceScope::IncludeZeros)
}

/// Rescale surviving residual values so the residual tensor regains the
/// dense variance. Salient values are untouched.
pub fn variance_correct_scoped(
    mut layer: PrunedLayer,
    dense_variance: f64,
    epsilon: f64,
    scope: VarianceScope,
) -> Result<PrunedLayer> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(dense_variance >= 0.0 && dense_variance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "dense variance must be finite and >= 0, got {dense_variance}"
        )));
    }
    let residual_variance = match scope {
        VarianceScope::IncludeZeros => tensor_variance(&layer.residual)?,
        VarianceScope::KeptOnly => {
            let kept: Vec<f64> = layer
                .residual_mask
                .kept_indices()
                .map(|k| layer.residual.data()[k])
                .collect();
            variance_of(&kept)?
        }
    };
    let f = correction_factor(dense_variance, residual_variance, epsilon);
    if !(f > 0.0 && f.is_finite()) {
        return Err(Error::Numerical(format!("variance correction factor {f}")));
    }
    layer.residual = layer.residual.map(|v| v * f)?;
    layer.correction_factor = f;
    Ok(layer)
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_activation_power() -> f64 {
    0.5
}

fn default_clamp_min() -> f64 {
    DEFAULT_CLAMP_MIN
}

fn default_version() -> String {
    CONFIG_VERSION.to_string()
}

/// Pipeline settings; serialized as the versioned "v1" JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_version")]
    pub version: String,
    pub residual_pattern: PatternShape,
    #[serde(default)]
    pub salient_pattern: Option<PatternShape>,
    pub scorer: Scorer,
    #[serde(default)]
    pub use_equalization: bool,
    #[serde(default)]
    pub use_variance_correction: bool,
    #[serde(default)]
    pub variance_scope: VarianceScope,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Exponent on the activation norm in RIA; 0 turns the factor off.
    #[serde(default = "default_activation_power")]
    pub activation_power: f64,
    #[serde(default = "default_clamp_min")]
    pub clamp_min: f64,
    /// `None` skips stage 4.
    #[serde(default)]
    pub reconstruction: Option<ReconstructionSettings>,
}

impl PipelineConfig {
    /// Plain N:M pruning with the given scorer and every optional stage off.
    pub fn new(residual_pattern: PatternShape, scorer: Scorer) -> Self {
        Self {
            version: default_version(),
            residual_pattern,
            salient_pattern: None,
            scorer,
            use_equalization: false,
            use_variance_correction: false,
            variance_scope: VarianceScope::IncludeZeros,
            epsilon: default_epsilon(),
            activation_power: default_activation_power(),
            clamp_min: default_clamp_min(),
            reconstruction: None,
        }
    }

    pub fn with_salient(mut self, salient: PatternShape) -> Self {
        self.salient_pattern = Some(salient);
        self
    }

    pub fn with_equalization(mut self, on: bool) -> Self {
        self.use_equalization = on;
        self
    }

    pub fn with_variance_correction(mut self, on: bool) -> Self {
        self.use_variance_correction = on;
        self
    }

    pub fn with_reconstruction(mut self, settings: Option<ReconstructionSettings>) -> Self {
        self.reconstruction = settings;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {:?}, expected {CONFIG_VERSION:?}",
                self.version
            )));
        }
        if let Some(s) = self.salient_pattern {
            check_salient_shape(s).map_err(|e| Error::Config(e.to_string()))?;
            let r = self.residual_pattern;
            let capacity = if SALIENT_BLOCK % r.m_block() == 0 {
                (SALIENT_BLOCK / r.m_block()) * (r.m_block() - r.n_keep())
            } else {
                0
            };
            if capacity < s.n_keep() {
                return Err(Error::Config(format!(
                    "salient {s} does not fit next to residual {r}"
                )));
            }
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("clamp_min", self.clamp_min)?;
        if !(self.activation_power >= 0.0 && self.activation_power.is_finite()) {
            return Err(Error::Config(format!(
                "activation_power must be finite and >= 0, got {}",
                self.activation_power
            )));
        }
        if let Some(r) = &self.reconstruction {
            r.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Column count must be a multiple of this.
    pub fn column_multiple(&self) -> usize {
        let m = self.residual_pattern.m_block();
        match self.salient_pattern {
            None => m,
            Some(_) => lcm(m, SALIENT_BLOCK),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Stage-4 outcome attached to a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub layer: PrunedLayer,
    pub reconstruction: Option<ReconstructionSummary>,
}

/// Importance scores as configured: optional equalization, then the scorer.
/// Activation statistics always come from the unscaled calibration data.
pub fn score_weights(w: &WeightMatrix, calib: &CalibrationSet, cfg: &PipelineConfig) -> Result<ScoreMatrix> {
    let stats = channel_stats(calib)?;
    let scored = if cfg.use_equalization {
        let scales = equalization_scales(w, &stats, cfg.clamp_min)?;
        equalize_for_scoring(w, &scales)?
    } else {
        w.clone()
    };
    match cfg.scorer {
        Scorer::Magnitude => Ok(magnitude_scores(&scored)),
        Scorer::Ria => ria_scores(&scored, &stats, cfg.activation_power, cfg.clamp_min),
    }
}

/// Run every configured stage on one weight matrix. Deterministic.
pub fn run_pipeline(w: &WeightMatrix, calib: &CalibrationSet, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if calib.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "calibration has {} channels, weights have {}",
            calib.cols(),
            w.cols()
        )));
    }
    let multiple = cfg.column_multiple();
    if w.cols() % multiple != 0 {
        return Err(Error::Shape(format!(
            "{} columns is not a multiple of {multiple}",
            w.cols()
        )));
    }

    // stage 1 + scoring
    let scores = score_weights(w, calib, cfg)?;

    // stage 2
    let salient = cfg
        .salient_pattern
        .map(|s| extract_salient_within(w, &scores, s, Some(cfg.residual_pattern)))
        .transpose()?;
    let (residual, residual_mask) = prune_residual(w, &scores, salient.as_ref(), cfg.residual_pattern)?;
    let mut layer = PrunedLayer {
        residual,
        residual_mask,
        salient,
        correction_factor: 1.0,
    };

    // stage 3
    if cfg.use_variance_correction {
        let dense_variance = tensor_variance(w)?;
        layer = variance_correct_scoped(layer, dense_variance, cfg.epsilon, cfg.variance_scope)?;
    }

    // stage 4
    let mut reconstruction = None;
    if let Some(settings) = &cfg.reconstruction {
        let res = reconstruct_layer(w, &layer, calib, settings)?;
        reconstruction = Some(ReconstructionSummary {
            initial_loss: res.initial_loss,
            final_loss: res.final_loss,
            iterations: res.iterations,
        });
        layer = res.tuned;
    }
    layer.check_invariants()?;
    Ok(PipelineOutput { layer, reconstruction })
}

/// `‖W Xᵀ − Ŵ Xᵀ‖_F` for the layer's effective weights.
pub fn output_error(dense: &WeightMatrix, layer: &PrunedLayer, calib: &CalibrationSet) -> Result<f64> {
    let a = dense.forward(calib)?;
    let b = layer.effective_weights().forward(calib)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `‖W Xᵀ − Ŵ Xᵀ‖_F / ‖W Xᵀ‖_F`; zero when both outputs vanish.
pub fn relative_output_error(dense: &WeightMatrix, layer: &PrunedLayer, calib: &CalibrationSet) -> Result<f64> {
    let num = output_error(dense, layer, calib)?;
    let den = dense.forward(calib)?.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    })
}

/// Metadata and payload accounting for one pruned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub rows: usize,
    pub cols: usize,
    pub elements: usize,
    pub residual_pattern: PatternShape,
    pub residual_blocks: usize,
    pub residual_bits_per_block: u32,
    pub residual_metadata_bits: u64,
    pub residual_values: usize,
    pub salient_pattern: Option<PatternShape>,
    pub salient_blocks: usize,
    pub salient_bits_per_block: u32,
    pub salient_structured_metadata_bits: u64,
    pub salient_values: usize,
    pub unstructured_index_bits: u32,
    /// Coordinate-list cost of the same salient set: one index per value.
    pub salient_unstructured_metadata_bits: u64,
    pub value_bits_f32: u64,
    pub value_bits_f64: u64,
    pub residual_metadata_bits_per_element: f64,
    pub salient_structured_bits_per_element: f64,
    pub salient_unstructured_bits_per_element: f64,
    pub total_metadata_bits_per_element: f64,
    pub kept_fraction: f64,
}

impl StorageReport {
    pub fn value_bits(&self, dtype: DType) -> u64 {
        match dtype {
            DType::F32 => self.value_bits_f32,
            DType::F64 => self.value_bits_f64,
        }
    }
}

pub fn metadata_bits_report(layer: &PrunedLayer, unstructured_index_bits: u32) -> Result<StorageReport> {
    let rows = layer.rows();
    let cols = layer.cols();
    let elements = rows * cols;
    let rshape = layer.residual_mask.shape();
    let rbits = bits_per_element(rshape)?.bits_per_block;
    let residual_blocks = layer.residual_mask.block_count();
    let residual_metadata_bits = residual_blocks as u64 * rbits as u64;
    let residual_values = layer.residual_mask.kept_count();

    let (salient_pattern, salient_blocks, sbits, salient_values) = match &layer.salient {
        None => (None, 0, 0, 0),
        Some(s) => (
            Some(s.shape()),
            s.mask().block_count(),
            PatternCodec::new(s.shape())?.bits_per_block(),
            s.len(),
        ),
    };
    let salient_structured = salient_blocks as u64 * sbits as u64;
    let salient_unstructured = salient_values as u64 * unstructured_index_bits as u64;
    let values = (residual_values + salient_values) as u64;
    let per = |bits: u64| if elements == 0 { 0.0 } else { bits as f64 / elements as f64 };

    Ok(StorageReport {
        rows,
        cols,
        elements,
        residual_pattern: rshape,
        residual_blocks,
        residual_bits_per_block: rbits,
        residual_metadata_bits,
        residual_values,
        salient_pattern,
        salient_blocks,
        salient_bits_per_block: sbits,
        salient_structured_metadata_bits: salient_structured,
        salient_values,
        unstructured_index_bits,
        salient_unstructured_metadata_bits: salient_unstructured,
        value_bits_f32: values * 32,
        value_bits_f64: values * 64,
        residual_metadata_bits_per_element: per(residual_metadata_bits),
        salient_structured_bits_per_element: per(salient_structured),
        salient_unstructured_bits_per_element: per(salient_unstructured),
        total_metadata_bits_per_element: per(residual_metadata_bits + salient_structured),
        kept_fraction: per(values),
    })
}
