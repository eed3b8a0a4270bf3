//! Operating points, fault-tolerance surfaces, ROC sweeps and the synthetic
//! data files behind the command-line tools.

mod gen;
mod pbft;
mod roc;
mod sweep;

pub use gen::{generate, labels_csv, GenOutput, GenSpec};
pub use pbft::{run_pbft_trial, PbftTrial};
pub use roc::{roc_csv, roc_curve, RocPoint, RocSpec};
pub use sweep::{
    run_sweep, Axis, Param, ParamAxis, ScenarioSweep, SurfaceSpec, SweepMode, SweepOutput, SweepSpec, FAIL_ZONE,
};

use serde::Serialize;
use thiserror::Error;

use crate::consensus::{tolerance_bound, ToleranceInputs};
use crate::detector::{DetectorConfig, DetectorError, DetectorModel};
use crate::fusion::{CsvError, FusedVector, FusionError, MatrixFile, TrainingWindow};
use crate::netsim::{ConfigError, SimError};
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid `{key}`: {reason}")]
    Spec { key: String, reason: String },
    #[error("spec parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("data source: {0}")]
    Synth(#[from] SynthError),
    #[error("data: {0}")]
    Fusion(#[from] FusionError),
    #[error("data: {0}")]
    Csv(#[from] CsvError),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn spec_err(key: impl Into<String>, reason: impl Into<String>) -> AnalyticsError {
    AnalyticsError::Spec {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Largest raw malicious fraction whose filtered fraction stays within 1/3,
/// unclipped: `(1/3 - p_fa) / (1 - p_d - p_fa)`. `None` when the
/// denominator is not positive.
pub fn f_raw_max_formula(p_d: f64, p_fa: f64) -> Option<f64> {
    let den = 1.0 - p_d - p_fa;
    (den > 0.0).then(|| (1.0 / 3.0 - p_fa) / den)
}

/// Largest F_raw in [0, 1] with F_det(F_raw) <= 1/3, or `None` if no F_raw
/// qualifies. F_det is linear in F_raw, so checking the formula and the
/// endpoints is exact.
pub fn f_raw_max(p_d: f64, p_fa: f64) -> Option<f64> {
    let f_det = |f: f64| f * (1.0 - p_d) + (1.0 - f) * p_fa;
    let third = 1.0 / 3.0;
    match f_raw_max_formula(p_d, p_fa) {
        Some(x) if x < 0.0 => None,
        Some(x) => Some(x.min(1.0)),
        None if f_det(1.0) <= third => Some(1.0),
        None => None,
    }
}

/// Largest F_raw in [0, 1] for which the undetected malicious peers stay
/// below a third of the peers left after exclusion:
/// `F(1 - p_d) <= (1 - F p_d - (1 - F) p_fa) / 3`.
pub fn f_raw_max_active_set(p_d: f64, p_fa: f64) -> Option<f64> {
    let den = 3.0 - 2.0 * p_d - p_fa;
    if 1.0 - p_fa <= 0.0 {
        return None;
    }
    if den <= 0.0 {
        return Some(1.0);
    }
    Some(((1.0 - p_fa) / den).min(1.0))
}

/// A detector operating point evaluated at one raw malicious fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub p_d: f64,
    pub p_fa: f64,
    pub f_raw: f64,
    pub f_det: f64,
    pub f_raw_max: Option<f64>,
}

impl OperatingPoint {
    pub fn new(f_raw: f64, p_d: f64, p_fa: f64) -> Result<Self, AnalyticsError> {
        let b = tolerance_bound(ToleranceInputs { f_raw, p_d, p_fa })
            .map_err(|_| spec_err("operating point", "probabilities must lie in [0, 1]"))?;
        Ok(Self {
            p_d,
            p_fa,
            f_raw,
            f_det: b.f_det,
            f_raw_max: f_raw_max(p_d, p_fa),
        })
    }

    /// Whether F_det at F_raw = 1/3 already exceeds 1/3.
    pub fn fail_zone(&self) -> bool {
        tolerance_bound(ToleranceInputs {
            f_raw: 1.0 / 3.0,
            p_d: self.p_d,
            p_fa: self.p_fa,
        })
        .map_or(true, |b| b.f_det > 1.0 / 3.0)
    }
}

/// Trains a detector on every row of a matrix file.
pub fn train_from_matrix(file: &MatrixFile, config: &DetectorConfig) -> Result<DetectorModel, AnalyticsError> {
    let layout = file.layout().map_err(AnalyticsError::Data)?;
    let mut window = TrainingWindow::new(layout, file.rows.len().max(1))?;
    for t in 0..file.rows.len() {
        window.push_slot(file.fused(t))?;
    }
    Ok(DetectorModel::train(&window, config)?)
}

/// One line of detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectRow {
    pub slot: u64,
    pub flagged_devices: Vec<String>,
    pub max_residual_ratio: f64,
}

/// Runs the detector over every row of a matrix file.
pub fn detect_matrix(model: &DetectorModel, file: &MatrixFile) -> Result<Vec<DetectRow>, AnalyticsError> {
    if file.headers != model.layout().feature_names() {
        return Err(AnalyticsError::Data(format!(
            "data has {} features that do not match the model's {}",
            file.headers.len(),
            model.dim()
        )));
    }
    let cols: Vec<FusedVector> = (0..file.rows.len()).map(|t| file.fused(t)).collect();
    model
        .detect_batch(&cols)
        .into_iter()
        .map(|r| {
            let r = r?;
            Ok(DetectRow {
                slot: r.slot,
                flagged_devices: r
                    .flagged_device_names(model.layout())
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
                max_residual_ratio: model.max_residual_ratio(&r),
            })
        })
        .collect()
}

pub fn detect_csv(rows: &[DetectRow]) -> String {
    let mut s = String::from("slot,flagged_devices,max_residual_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            r.slot,
            r.flagged_devices.join(";"),
            r.max_residual_ratio
        ));
    }
    s
}

/// Axis values printed without accumulated binary noise.
pub(crate) fn tidy(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_hits_one_third() {
        for &(p_d, p_fa) in &[(0.46, 0.05), (0.9, 0.05), (0.2, 0.0), (0.5, 0.3)] {
            let f = f_raw_max_formula(p_d, p_fa).unwrap();
            if (0.0..=1.0).contains(&f) {
                let b = tolerance_bound(ToleranceInputs { f_raw: f, p_d, p_fa }).unwrap();
                assert!((b.f_det - 1.0 / 3.0).abs() < 1e-9);
            }
        }
        assert!((f_raw_max_formula(0.46, 0.05).unwrap() - 0.5782).abs() < 1e-4);
    }

    #[test]
    fn clipping_and_fail_zone() {
        assert_eq!(f_raw_max(0.0, 0.5), None);
        assert!(OperatingPoint::new(0.3, 0.0, 0.5).unwrap().fail_zone());
        assert!(!OperatingPoint::new(0.3, 0.46, 0.05).unwrap().fail_zone());
        assert_eq!(f_raw_max(1.0, 0.1), Some(1.0));
        assert_eq!(f_raw_max(0.9, 0.0), Some(1.0));
        // decreasing F_det with a false-alarm rate above 1/3
        assert_eq!(f_raw_max(0.9, 0.4), Some(1.0));
        assert_eq!(f_raw_max(0.5, 0.6), None);
        assert!((f_raw_max(0.0, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn active_set_prediction_matches_at_no_detection() {
        assert!((f_raw_max_active_set(0.0, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((f_raw_max_active_set(0.46, 0.05).unwrap() - 0.95 / 2.03).abs() < 1e-12);
        assert_eq!(f_raw_max_active_set(1.0, 0.0), Some(1.0));
    }
}
