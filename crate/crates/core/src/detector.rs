//! Low-rank outlier detector.
//!
//! Training learns the dominant subspace of the normalized window with an
//! SVD, keeps the smallest rank whose relative Frobenius residual is within
//! `epsilon`, and sets per-feature thresholds from the empirical distribution
//! of training residuals. Online, a fused vector is projected onto the span and
//! every feature whose residual magnitude exceeds its threshold is flagged;
//! the owning devices are the outliers of that slot.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{DeviceLayout, FusedVector, FusionError, NormStats, TrainingWindow, DEFAULT_SCALE_FLOOR};
use crate::par;

/// Minimum number of columns required to calibrate thresholds.
pub const MIN_TRAINING_COLUMNS: usize = 10;

/// Number of folds used to produce out-of-fold residuals for calibration.
pub const CALIBRATION_FOLDS: usize = 5;

/// Thresholds learned by [`DetectorModel::train`] never drop below this many
/// normalized units, so floating-point residue of in-span data is not flagged.
pub const THRESHOLD_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("all singular values are zero")]
    Degenerate,
    #[error("epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("false-alarm probability must lie in (0, 1), got {0}")]
    BadFalseAlarm(f64),
    #[error("need at least {needed} training columns, have {actual}")]
    TooFewColumns { needed: usize, actual: usize },
    #[error("vector length {actual} does not match model dimension {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("span has linearly dependent columns")]
    SingularSpan,
    #[error("censor mask shape does not match the residual matrix")]
    MaskShape,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("invalid model file: {0}")]
    Format(String),
}

/// Left/right singular vectors and singular values, sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn max_rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Rank-`r` truncation Σ_{k<r} λ_k u_k v_kᵀ.
    pub fn reconstruct(&self, r: usize) -> DMatrix<f64> {
        let r = r.min(self.max_rank());
        let u = self.u.columns(0, r);
        let scaled = DMatrix::from_fn(r, self.v.nrows(), |k, j| self.singular_values[k] * self.v[(j, k)]);
        u * scaled
    }

    /// ‖D − D_R‖_F / ‖D‖_F computed from the singular values.
    pub fn residual_ratio(&self, r: usize) -> f64 {
        let tail = tail_energies(self.singular_values.as_slice());
        (tail[r.min(self.max_rank())] / tail[0]).sqrt()
    }
}

/// tail[r] = Σ_{k≥r} λ_k², summed from the smallest value up.
fn tail_energies(sv: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; sv.len() + 1];
    for r in (0..sv.len()).rev() {
        tail[r] = tail[r + 1] + sv[r] * sv[r];
    }
    tail
}

pub fn compute_svd(d: &DMatrix<f64>) -> Result<SvdFactors, DetectorError> {
    if d.is_empty() {
        return Err(DetectorError::EmptyMatrix);
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(DetectorError::NonFinite);
    }
    let svd = d.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(DetectorError::NonFinite),
    };
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |j, k| v_t[(order[k], j)]);
    let singular_values = DVector::from_iterator(order.len(), order.iter().map(|&k| sv[k].max(0.0)));
    Ok(SvdFactors { u, singular_values, v })
}

/// Smallest rank R ≥ 1 whose truncation leaves a relative Frobenius residual
/// of at most `epsilon`.
pub fn estimate_rank(factors: &SvdFactors, epsilon: f64) -> Result<usize, DetectorError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DetectorError::BadEpsilon(epsilon));
    }
    let tail = tail_energies(factors.singular_values.as_slice());
    let total = tail[0];
    if total <= 0.0 {
        return Err(DetectorError::Degenerate);
    }
    let r = (0..=factors.max_rank())
        .find(|&r| (tail[r] / total).sqrt() <= epsilon)
        .unwrap_or(factors.max_rank());
    Ok(r.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub epsilon: f64,
    pub p_fa: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            p_fa: 0.05,
        }
    }
}

impl DetectorConfig {
    pub fn new(epsilon: f64, p_fa: f64) -> Result<Self, DetectorError> {
        let c = Self { epsilon, p_fa };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(DetectorError::BadEpsilon(self.epsilon));
        }
        if !(self.p_fa > 0.0 && self.p_fa < 1.0) {
            return Err(DetectorError::BadFalseAlarm(self.p_fa));
        }
        Ok(())
    }
}

/// Training residuals Z = D − D̃ in normalized space (b×T).
#[derive(Debug, Clone)]
pub struct CalibrationData {
    pub residual_matrix: DMatrix<f64>,
}

/// Index into an ascending list of `m` values for the lower (1 − p) quantile.
fn quantile_index(m: usize, p_fa: f64) -> usize {
    // The 1e-9 slack keeps exact products such as 0.95·100 from rounding up.
    let k = ((1.0 - p_fa) * m as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(m) - 1
}

/// Per-feature lower empirical (1 − p_fa) quantile of |Z|.
pub fn calibrate_thresholds(z: &CalibrationData, p_fa: f64) -> Result<Vec<f64>, DetectorError> {
    calibrate_thresholds_censored(z, None, p_fa)
}

/// Entries sanitized after being flagged, and the thresholds they exceeded.
#[derive(Debug, Clone, Copy)]
pub struct Censoring<'a> {
    /// `mask[t][i]` marks feature `i` of column `t`.
    pub mask: &'a [Vec<bool>],
    /// Per-feature lower bound for censored entries (the thresholds in force
    /// when they were flagged).
    pub exceeded: &'a [f64],
}

/// Like [`calibrate_thresholds`], but censored entries rank above every
/// observed residual instead of contributing their sanitized value. If the
/// quantile lands on a censored entry, the threshold becomes the larger of the
/// biggest uncensored residual and the bound that entry was known to exceed.
pub fn calibrate_thresholds_censored(
    z: &CalibrationData,
    censored: Option<Censoring<'_>>,
    p_fa: f64,
) -> Result<Vec<f64>, DetectorError> {
    if !(p_fa > 0.0 && p_fa < 1.0) {
        return Err(DetectorError::BadFalseAlarm(p_fa));
    }
    let zm = &z.residual_matrix;
    let m = zm.ncols();
    if m < MIN_TRAINING_COLUMNS {
        return Err(DetectorError::TooFewColumns {
            needed: MIN_TRAINING_COLUMNS,
            actual: m,
        });
    }
    if let Some(c) = censored {
        if c.mask.len() != m || c.mask.iter().any(|col| col.len() != zm.nrows()) || c.exceeded.len() != zm.nrows() {
            return Err(DetectorError::MaskShape);
        }
    }
    let k = quantile_index(m, p_fa);
    let mut buf = Vec::with_capacity(m);
    Ok((0..zm.nrows())
        .map(|i| {
            buf.clear();
            buf.extend(
                (0..m)
                    .filter(|&t| censored.is_none_or(|c| !c.mask[t][i]))
                    .map(|t| zm[(i, t)].abs()),
            );
            buf.sort_by(f64::total_cmp);
            match (buf.get(k), censored) {
                (Some(&h), _) => h,
                (None, Some(c)) => buf.last().copied().unwrap_or(0.0).max(c.exceeded[i]),
                (None, None) => unreachable!("k < m when nothing is censored"),
            }
        })
        .collect())
}

/// Result of detecting one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    pub slot: u64,
    /// Residual z_t in normalized units.
    pub residual: DVector<f64>,
    pub flagged_features: Vec<usize>,
    /// Indices (into the layout) of devices owning a flagged feature.
    pub flagged_devices: Vec<usize>,
}

impl OutlierReport {
    pub fn is_clean(&self) -> bool {
        self.flagged_features.is_empty()
    }

    pub fn flagged_device_names<'a>(&self, layout: &'a DeviceLayout) -> Vec<&'a str> {
        self.flagged_devices
            .iter()
            .map(|&n| layout.names()[n].as_str())
            .collect()
    }
}

/// The learned triple [span, rank, thresholds] with its normalization.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    span: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    rank: usize,
    thresholds: Vec<f64>,
    norm: NormStats,
    layout: DeviceLayout,
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DetectorModel,
    /// In-sample residuals of the training window against the learned span.
    pub calibration: CalibrationData,
    /// Out-of-fold residuals the thresholds were calibrated on.
    pub held_out: CalibrationData,
    pub factors: SvdFactors,
}

/// Residual of every column of `d` against a rank-`rank` span learned from
/// the other folds. In-sample residuals understate the spread seen on new
/// slots because the span partly fits each column's own noise.
pub fn cross_fit_residuals(d: &DMatrix<f64>, rank: usize, folds: usize) -> Result<DMatrix<f64>, DetectorError> {
    let t = d.ncols();
    let folds = folds.clamp(2, t.max(2));
    let parts = par::map_range(folds, |f| -> Result<Vec<(usize, DVector<f64>)>, DetectorError> {
        let fit: Vec<usize> = (0..t).filter(|j| j % folds != f).collect();
        let factors = compute_svd(&d.select_columns(&fit))?;
        let u = factors.u.columns(0, rank.min(factors.max_rank()));
        Ok((f..t)
            .step_by(folds)
            .map(|j| {
                let c = d.column(j);
                (j, c - u * (u.transpose() * c))
            })
            .collect())
    });
    let mut z = DMatrix::zeros(d.nrows(), t);
    for part in parts {
        for (j, col) in part? {
            z.set_column(j, &col);
        }
    }
    Ok(z)
}

impl DetectorModel {
    /// Assembles a model from parts; the span may be any full-column-rank b×R matrix.
    pub fn from_parts(
        span: DMatrix<f64>,
        thresholds: Vec<f64>,
        norm: NormStats,
        layout: DeviceLayout,
    ) -> Result<Self, DetectorError> {
        let b = layout.total_dim();
        if span.nrows() != b || thresholds.len() != b || norm.dim() != b {
            return Err(DetectorError::LengthMismatch {
                expected: b,
                actual: span.nrows(),
            });
        }
        if span.ncols() == 0 {
            return Err(DetectorError::Degenerate);
        }
        let gram_inv = (span.transpose() * &span)
            .try_inverse()
            .ok_or(DetectorError::SingularSpan)?;
        Ok(Self {
            rank: span.ncols(),
            span,
            gram_inv,
            thresholds,
            norm,
            layout,
        })
    }

    pub fn train(window: &TrainingWindow, config: &DetectorConfig) -> Result<Self, DetectorError> {
        Ok(Self::train_detailed(window, config, None)?.model)
    }

    /// Full training pipeline. `censored` marks entries (per column, per
    /// feature) whose values were sanitized and must not drive calibration.
    pub fn train_detailed(
        window: &TrainingWindow,
        config: &DetectorConfig,
        censored: Option<Censoring<'_>>,
    ) -> Result<Trained, DetectorError> {
        config.validate()?;
        if window.len() < MIN_TRAINING_COLUMNS {
            return Err(DetectorError::TooFewColumns {
                needed: MIN_TRAINING_COLUMNS,
                actual: window.len(),
            });
        }
        let norm = window.fit_norm(DEFAULT_SCALE_FLOOR)?;
        let d = norm.normalize_matrix(&window.matrix())?;
        let factors = compute_svd(&d)?;
        let rank = estimate_rank(&factors, config.epsilon)?;
        if window.len() < 2 * rank {
            return Err(DetectorError::TooFewColumns {
                needed: 2 * rank,
                actual: window.len(),
            });
        }
        let span = factors.u.columns(0, rank).into_owned();
        let residual_matrix = &d - &span * (span.transpose() * &d);
        let calibration = CalibrationData { residual_matrix };
        let held_out = CalibrationData {
            residual_matrix: cross_fit_residuals(&d, rank, CALIBRATION_FOLDS)?,
        };
        let thresholds = calibrate_thresholds_censored(&held_out, censored, config.p_fa)?
            .into_iter()
            .map(|h| h.max(THRESHOLD_FLOOR))
            .collect();
        let model = Self::from_parts(span, thresholds, norm, window.layout().clone())?;
        Ok(Trained {
            model,
            calibration,
            held_out,
            factors,
        })
    }

    /// Retrains on `window`. Features flagged when a column was admitted are
    /// first replaced by this model's projection of that column, and those
    /// entries are censored during threshold calibration.
    pub fn update(&self, window: &TrainingWindow, config: &DetectorConfig) -> Result<Self, DetectorError> {
        let sanitized = self.sanitize_window(window)?;
        let censored: Vec<Vec<bool>> = window
            .flagged()
            .map(|f| {
                let mut mask = vec![false; self.dim()];
                f.iter().for_each(|&i| mask[i] = true);
                mask
            })
            .collect();
        let any = censored.iter().any(|c| c.iter().any(|&x| x));
        let censoring = Censoring {
            mask: &censored,
            exceeded: &self.thresholds,
        };
        Ok(Self::train_detailed(&sanitized, config, any.then_some(censoring))?.model)
    }

    /// Copy of `window` with flagged entries replaced by their projections.
    pub fn sanitize_window(&self, window: &TrainingWindow) -> Result<TrainingWindow, DetectorError> {
        let mut out = TrainingWindow::new(window.layout().clone(), window.capacity())?;
        for (col, flagged) in window.columns().zip(window.flagged()) {
            let col = if flagged.is_empty() {
                col.clone()
            } else {
                self.sanitize(col, flagged)?
            };
            out.push_flagged(col, flagged.to_vec())?;
        }
        Ok(out)
    }

    /// Replaces the listed features of a raw vector with the model's projection.
    pub fn sanitize(&self, raw: &FusedVector, features: &[usize]) -> Result<FusedVector, DetectorError> {
        let normalized = self.norm.normalize(raw)?;
        let projected = self.norm.denormalize(&self.project(&normalized)?)?;
        let mut out = raw.clone();
        for &i in features {
            out.values[i] = projected.values[i];
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn span(&self) -> &DMatrix<f64> {
        &self.span
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    pub fn layout(&self) -> &DeviceLayout {
        &self.layout
    }

    /// The span projector U(UᵀU)⁻¹Uᵀ as a dense b×b matrix.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.span * &self.gram_inv * self.span.transpose()
    }

    fn check_len(&self, len: usize) -> Result<(), DetectorError> {
        if len != self.dim() {
            return Err(DetectorError::LengthMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Projection of a normalized vector onto the span.
    pub fn project(&self, d: &FusedVector) -> Result<FusedVector, DetectorError> {
        self.check_len(d.len())?;
        let coeff = &self.gram_inv * (self.span.transpose() * &d.values);
        Ok(FusedVector::new(d.slot, &self.span * coeff))
    }

    /// Normalized residual z = d − P(d) of a raw vector.
    pub fn residual(&self, raw: &FusedVector) -> Result<DVector<f64>, DetectorError> {
        self.check_len(raw.len())?;
        if raw.values.iter().any(|x| !x.is_finite()) {
            return Err(DetectorError::NonFinite);
        }
        let d = self.norm.normalize(raw)?;
        let p = self.project(&d)?;
        Ok(d.values - p.values)
    }

    pub fn detect(&self, raw: &FusedVector) -> Result<OutlierReport, DetectorError> {
        self.detect_scaled(raw, 1.0)
    }

    /// Detection with every threshold multiplied by `multiplier`.
    pub fn detect_scaled(&self, raw: &FusedVector, multiplier: f64) -> Result<OutlierReport, DetectorError> {
        let residual = self.residual(raw)?;
        Ok(self.report_from_residual(raw.slot, residual, multiplier))
    }

    pub fn report_from_residual(&self, slot: u64, residual: DVector<f64>, multiplier: f64) -> OutlierReport {
        let flagged_features: Vec<usize> = residual
            .iter()
            .zip(&self.thresholds)
            .enumerate()
            .filter(|(_, (z, h))| z.abs() > multiplier * **h)
            .map(|(i, _)| i)
            .collect();
        let mut flagged_devices: Vec<usize> = flagged_features.iter().map(|&i| self.layout.owner_of(i)).collect();
        flagged_devices.dedup();
        OutlierReport {
            slot,
            residual,
            flagged_features,
            flagged_devices,
        }
    }

    /// Detects a batch of slots; results are in input order.
    pub fn detect_batch(&self, batch: &[FusedVector]) -> Vec<Result<OutlierReport, DetectorError>> {
        par::map_slice(batch, |d| self.detect(d))
    }

    /// Largest |z_i| / h_i of a report (infinite when a zero threshold is exceeded).
    pub fn max_residual_ratio(&self, report: &OutlierReport) -> f64 {
        report
            .residual
            .iter()
            .zip(&self.thresholds)
            .map(|(z, h)| {
                let z = z.abs();
                if *h > 0.0 {
                    z / h
                } else if z > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), DetectorError> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            layout: self.layout.clone(),
            norm: self.norm.clone(),
            rank: self.rank,
            span: SpanFile {
                rows: self.span.nrows(),
                cols: self.span.ncols(),
                row_major: self
                    .span
                    .row_iter()
                    .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                    .collect(),
            },
            thresholds: self.thresholds.clone(),
        };
        serde_json::to_writer_pretty(w, &file).map_err(|e| DetectorError::Format(e.to_string()))
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, DetectorError> {
        let file: ModelFile = serde_json::from_reader(r).map_err(|e| DetectorError::Format(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(DetectorError::Format(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let s = &file.span;
        if s.rows * s.cols != s.row_major.len() || s.cols != file.rank {
            return Err(DetectorError::Format("span shape does not match its data".into()));
        }
        let span = DMatrix::from_row_slice(s.rows, s.cols, &s.row_major);
        if file.norm.scale.iter().any(|&x| !(x > 0.0)) {
            return Err(DetectorError::Format("scale entries must be positive".into()));
        }
        Self::from_parts(span, file.thresholds, file.norm, file.layout)
    }
}

const MODEL_FORMAT: &str = "aibc-detector-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    layout: DeviceLayout,
    norm: NormStats,
    rank: usize,
    span: SpanFile,
    thresholds: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanFile {
    rows: usize,
    cols: usize,
    row_major: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::LowRankSource;
    use proptest::prelude::*;

    fn window_from(source: &LowRankSource, slots: std::ops::Range<u64>) -> TrainingWindow {
        let layout = DeviceLayout::uniform(source.dim(), 1).unwrap();
        let mut w = TrainingWindow::new(layout, (slots.end - slots.start) as usize).unwrap();
        for t in slots {
            w.push_slot(FusedVector::new(t, source.sample(t))).unwrap();
        }
        w
    }

    fn projector_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let pa = a * a.transpose();
        let pb = b * b.transpose();
        (pa - pb).abs().max()
    }

    #[test]
    fn svd_identity_and_rank_one() {
        let f = compute_svd(&DMatrix::identity(3, 3)).unwrap();
        for s in f.singular_values.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let u = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        let f = compute_svd(&(&u * v.transpose() * 5.0)).unwrap();
        assert!((f.singular_values[0] - 5.0).abs() < 1e-12);
        assert!(f.singular_values.iter().skip(1).all(|s| s.abs() < 1e-12));
        assert_eq!(f.max_rank(), 3);
    }

    #[test]
    fn svd_errors() {
        assert_eq!(
            compute_svd(&DMatrix::zeros(0, 0)).unwrap_err(),
            DetectorError::EmptyMatrix
        );
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert_eq!(compute_svd(&m).unwrap_err(), DetectorError::NonFinite);
    }

    fn factors_from(sv: &[f64]) -> SvdFactors {
        let n = sv.len();
        SvdFactors {
            u: DMatrix::identity(n, n),
            singular_values: DVector::from_column_slice(sv),
            v: DMatrix::identity(n, n),
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            estimate_rank(&factors_from(&[4.0, 2.0, 1.0, 0.0, 0.0]), 1e-6).unwrap(),
            3
        );
        assert_eq!(estimate_rank(&factors_from(&[10.0, 1e-7]), 0.01).unwrap(), 1);
        assert_eq!(
            estimate_rank(&factors_from(&[0.0, 0.0]), 0.1).unwrap_err(),
            DetectorError::Degenerate
        );
        assert!(matches!(
            estimate_rank(&factors_from(&[1.0]), 1.0),
            Err(DetectorError::BadEpsilon(_))
        ));
        // clamp: epsilon close to one still keeps one component
        assert_eq!(estimate_rank(&factors_from(&[1.0, 1.0, 1.0]), 0.999).unwrap(), 1);
    }

    #[test]
    fn noisy_rank_five_matches_exhaustive_scan() {
        let src = LowRankSource::new(40, 5, 0.01, 3).unwrap();
        let d = src.matrix(0..60);
        let f = compute_svd(&d).unwrap();
        let r = estimate_rank(&f, 0.05).unwrap();
        assert_eq!(r, 5);
        // brute force: explicit reconstruction for every candidate rank
        let norm = d.norm();
        let scan = (0..=f.max_rank())
            .find(|&k| (&d - f.reconstruct(k)).norm() / norm <= 0.05)
            .unwrap()
            .max(1);
        assert_eq!(r, scan);
    }

    fn calib(rows: Vec<Vec<f64>>) -> CalibrationData {
        let b = rows.len();
        let t = rows[0].len();
        CalibrationData {
            residual_matrix: DMatrix::from_fn(b, t, |i, j| rows[i][j]),
        }
    }

    #[test]
    fn threshold_examples() {
        let z = calib(vec![(1..=100).map(|x| x as f64).collect()]);
        assert_eq!(calibrate_thresholds(&z, 0.05).unwrap(), vec![95.0]);
        assert_eq!(calibrate_thresholds(&z, 0.999_999).unwrap(), vec![1.0]);
        let neg = calib(vec![(1..=100).map(|x| -(x as f64)).collect()]);
        assert_eq!(calibrate_thresholds(&neg, 0.10).unwrap(), vec![90.0]);
        let zero = calib(vec![vec![0.0; 20]]);
        assert_eq!(calibrate_thresholds(&zero, 0.05).unwrap(), vec![0.0]);
        let short = calib(vec![vec![1.0; 9]]);
        assert!(matches!(
            calibrate_thresholds(&short, 0.05),
            Err(DetectorError::TooFewColumns { .. })
        ));
    }

    #[test]
    fn censored_entries_rank_on_top() {
        let z = calib(vec![(1..=20).map(|x| x as f64).collect()]);
        // p = 0.1 over 20 values -> index 17 -> value 18
        assert_eq!(calibrate_thresholds(&z, 0.1).unwrap(), vec![18.0]);
        let mut mask = vec![vec![false]; 20];
        mask[0][0] = true; // the value 1 is treated as above all others
        let c = Censoring {
            mask: &mask,
            exceeded: &[0.5],
        };
        assert_eq!(calibrate_thresholds_censored(&z, Some(c), 0.1).unwrap(), vec![19.0]);
        // quantile lands among censored entries: fall back to the known bound
        mask.iter_mut().take(3).for_each(|m| m[0] = true);
        let c = Censoring {
            mask: &mask,
            exceeded: &[25.0],
        };
        assert_eq!(calibrate_thresholds_censored(&z, Some(c), 0.1).unwrap(), vec![25.0]);
        let all = vec![vec![true]; 20];
        let c = Censoring {
            mask: &all,
            exceeded: &[3.0],
        };
        assert_eq!(calibrate_thresholds_censored(&z, Some(c), 0.1).unwrap(), vec![3.0]);
    }

    #[test]
    fn noiseless_training_has_no_false_alarms() {
        let src = LowRankSource::new(12, 2, 0.0, 5).unwrap();
        let w = window_from(&src, 0..40);
        let cfg = DetectorConfig::new(1e-6, 0.05).unwrap();
        let trained = DetectorModel::train_detailed(&w, &cfg, None).unwrap();
        let m = &trained.model;
        assert_eq!(m.rank(), 2);
        for c in w.columns() {
            let r = m.detect(c).unwrap();
            assert!(r.is_clean(), "slot {} flagged {:?}", c.slot, r.flagged_features);
        }
        let z = &trained.calibration.residual_matrix;
        assert!((m.span().transpose() * z).abs().max() < 1e-8);
    }

    #[test]
    fn too_few_columns() {
        let src = LowRankSource::new(6, 2, 0.01, 5).unwrap();
        let w = window_from(&src, 0..3);
        assert!(matches!(
            DetectorModel::train(&w, &DetectorConfig::default()),
            Err(DetectorError::TooFewColumns { needed: 10, actual: 3 })
        ));
    }

    fn trained_model() -> (LowRankSource, DetectorModel) {
        let src = LowRankSource::new(100, 5, 0.01, 21).unwrap();
        let w = window_from(&src, 0..100);
        let m = DetectorModel::train(&w, &DetectorConfig::default()).unwrap();
        (src, m)
    }

    #[test]
    fn projection_examples() {
        let (_, m) = trained_model();
        let first = FusedVector::new(0, m.span().column(0).into_owned());
        let p = m.project(&first).unwrap();
        assert!((p.values - &first.values).norm() < 1e-9);

        // orthogonal complement of the span
        let mut d = DVector::from_fn(m.dim(), |i, _| ((i * 7 + 3) % 11) as f64 - 5.0);
        let coef = m.span().transpose() * &d;
        d -= m.span() * coef;
        let p = m.project(&FusedVector::new(0, d)).unwrap();
        assert!(p.values.norm() < 1e-9);

        assert!(matches!(
            m.project(&FusedVector::from_slice(0, &[1.0])),
            Err(DetectorError::LengthMismatch { .. })
        ));
    }

    fn in_span_raw(m: &DetectorModel, coeffs: &[f64]) -> FusedVector {
        let z = m.span() * DVector::from_column_slice(coeffs);
        m.norm_stats().denormalize(&FusedVector::new(500, z)).unwrap()
    }

    /// Features whose 10·h spike leaks less than the receiving threshold into
    /// every other feature through the projector.
    fn isolated_features(m: &DetectorModel) -> Vec<usize> {
        let p = m.projector();
        let h = m.thresholds();
        (0..m.dim())
            .filter(|&k| {
                let spike = 10.0 * h[k];
                spike * (1.0 - p[(k, k)]) > h[k] && (0..m.dim()).all(|j| j == k || spike * p[(j, k)].abs() < h[j])
            })
            .collect()
    }

    #[test]
    fn spikes_flag_their_devices() {
        let (_, m) = trained_model();
        let clean = in_span_raw(&m, &[1.0, -0.5, 0.3, 0.2, -0.1]);
        assert!(m.detect(&clean).unwrap().is_clean());

        let iso = isolated_features(&m);
        assert!(iso.len() > m.dim() / 2, "only {} isolated features", iso.len());
        let s = &m.norm_stats().scale;
        let spike = |v: &mut FusedVector, k: usize, sign: f64| {
            v.values[k] += sign * 10.0 * m.thresholds()[k] * s[k];
        };

        for &k in iso.iter().take(10) {
            let mut one = clean.clone();
            spike(&mut one, k, 1.0);
            assert_eq!(m.detect(&one).unwrap().flagged_devices, vec![k]);
        }

        // two spikes: the combined leakage must also stay under threshold
        let p = m.projector();
        let h = m.thresholds();
        let pair = iso
            .iter()
            .flat_map(|&a| iso.iter().map(move |&b| (a, b)))
            .find(|&(a, b)| {
                a < b
                    && (0..m.dim())
                        .all(|j| j == a || j == b || 10.0 * (h[a] * p[(j, a)] - h[b] * p[(j, b)]).abs() < h[j])
            })
            .unwrap();
        let mut two = clean.clone();
        spike(&mut two, pair.0, 1.0);
        spike(&mut two, pair.1, -1.0);
        let r = m.detect(&two).unwrap();
        assert_eq!(r.flagged_devices, vec![pair.0, pair.1]);
        assert!(m.max_residual_ratio(&r) > 5.0);
    }

    #[test]
    fn detect_rejects_bad_input() {
        let (_, m) = trained_model();
        let mut v = in_span_raw(&m, &[0.0; 5]);
        v.values[0] = f64::INFINITY;
        assert_eq!(m.detect(&v).unwrap_err(), DetectorError::NonFinite);
        assert!(matches!(
            m.detect(&FusedVector::from_slice(0, &[0.0; 3])),
            Err(DetectorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn update_on_unchanged_window_is_identical() {
        let src = LowRankSource::new(30, 3, 0.01, 8).unwrap();
        let w = window_from(&src, 0..50);
        let cfg = DetectorConfig::default();
        let m = DetectorModel::train(&w, &cfg).unwrap();
        let m2 = m.update(&w, &cfg).unwrap();
        assert_eq!(m.rank(), m2.rank());
        assert!(projector_gap(m.span(), m2.span()) < 1e-8);
        assert_eq!(m.thresholds(), m2.thresholds());
    }

    #[test]
    fn sanitized_window_recovers_clean_rank() {
        let src = LowRankSource::new(40, 3, 0.01, 13).unwrap();
        let w = window_from(&src, 0..80);
        let cfg = DetectorConfig::default();
        let m = DetectorModel::train(&w, &cfg).unwrap();
        assert_eq!(m.rank(), 3);

        // new window where every column has a gross outlier on a rotating feature
        let mut attacked = TrainingWindow::new(w.layout().clone(), 80).unwrap();
        for t in 80..160u64 {
            let mut v = FusedVector::new(t, src.sample(t));
            let i = (t as usize * 7) % 40;
            v.values[i] += 50.0;
            let rep = m.detect(&v).unwrap();
            assert!(rep.flagged_features.contains(&i));
            attacked.push_flagged(v, rep.flagged_features).unwrap();
        }
        let raw = DetectorModel::train(&attacked, &cfg).unwrap();
        assert!(raw.rank() > 3, "poisoned rank {}", raw.rank());
        let updated = m.update(&attacked, &cfg).unwrap();
        assert_eq!(updated.rank(), 3);
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let (src, m) = trained_model();
        let mut buf = Vec::new();
        m.write_json(&mut buf).unwrap();
        let back = DetectorModel::read_json(buf.as_slice()).unwrap();
        assert_eq!(back.span(), m.span());
        assert_eq!(back.thresholds(), m.thresholds());
        for t in 200..230 {
            let mut v = FusedVector::new(t, src.sample(t));
            v.values[(t % 100) as usize] += 0.5;
            let a = m.detect(&v).unwrap();
            let b = back.detect(&v).unwrap();
            assert_eq!(a, b);
        }
        assert!(DetectorModel::read_json(&b"{}"[..]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let (src, m) = trained_model();
        let batch: Vec<_> = (300..340).map(|t| FusedVector::new(t, src.sample(t))).collect();
        let out = m.detect_batch(&batch);
        for (d, r) in batch.iter().zip(out) {
            assert_eq!(r.unwrap(), m.detect(d).unwrap());
        }
    }

    #[test]
    fn rank_monotone_in_epsilon() {
        let src = LowRankSource::new(30, 6, 0.05, 4).unwrap();
        let f = compute_svd(&src.matrix(0..40)).unwrap();
        let mut prev = usize::MAX;
        for k in 1..100 {
            let eps = k as f64 / 100.0;
            let r = estimate_rank(&f, eps).unwrap();
            assert!(r <= prev);
            let ratio = f.residual_ratio(r);
            assert!(ratio <= eps);
            if r > 1 {
                assert!(f.residual_ratio(r - 1) > eps);
            }
            prev = r;
        }
    }

    #[test]
    fn thresholds_monotone_in_p_fa() {
        let src = LowRankSource::new(20, 3, 0.05, 4).unwrap();
        let w = window_from(&src, 0..60);
        let mut prev: Option<Vec<f64>> = None;
        for k in 1..20 {
            let cfg = DetectorConfig::new(0.05, k as f64 * 0.05).unwrap();
            let h = DetectorModel::train(&w, &cfg).unwrap().thresholds().to_vec();
            if let Some(p) = &prev {
                assert!(h.iter().zip(p).all(|(a, b)| a <= b));
            }
            prev = Some(h);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projector_idempotent_and_orthogonal(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let (_, m) = trained_model();
            let src = LowRankSource::new(m.dim(), 10, 1.0, seed).unwrap();
            let d = FusedVector::new(0, src.sample(0) * scale);
            let p = m.project(&d).unwrap();
            let pp = m.project(&p).unwrap();
            let tol = d.values.norm().max(1.0);
            prop_assert!((pp.values - &p.values).norm() <= 1e-9 * tol);
            let resid = &d.values - &p.values;
            prop_assert!((m.span().transpose() * resid).amax() <= 1e-8 * tol);
        }

        #[test]
        fn svd_reconstructs(b in 2usize..12, t in 2usize..12, seed in 0u64..500) {
            let src = LowRankSource::new(b, 1.max(b.min(t) / 2), 0.3, seed).unwrap();
            let d = src.matrix(0..t as u64);
            let f = compute_svd(&d).unwrap();
            let rec = f.reconstruct(f.max_rank());
            prop_assert!((&rec - &d).norm() <= 1e-6 * d.norm().max(f64::MIN_POSITIVE));
            let k = f.max_rank();
            prop_assert!((f.u.transpose() * &f.u - DMatrix::<f64>::identity(k, k)).amax() < 1e-8);
            prop_assert!((f.v.transpose() * &f.v - DMatrix::<f64>::identity(k, k)).amax() < 1e-8);
            prop_assert!(f.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
