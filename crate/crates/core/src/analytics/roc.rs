//! Detection and false-alarm rates as every threshold is scaled by a common
//! multiplier.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::gen::{generate, GenSpec};
use super::sweep::Axis;
use super::{spec_err, AnalyticsError};
use crate::detector::{DetectorConfig, DetectorModel};
use crate::fusion::{FusedVector, TrainingWindow};
use crate::netsim::config::{AdversaryConfig, Corruption, Persistence, SpikeUnit};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocSpec {
    /// Clean slots the model is trained on.
    pub training_slots: u32,
    pub detector: DetectorConfig,
    /// Evaluation data; its slots follow the training slots.
    pub data: GenSpec,
    pub multipliers: Axis,
}

impl RocSpec {
    pub fn from_toml(s: &str) -> Result<Self, AnalyticsError> {
        let spec: Self = toml::from_str(s).map_err(|e| AnalyticsError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        self.detector
            .validate()
            .map_err(|e| spec_err("detector", e.to_string()))?;
        self.data.validate()?;
        let m = &self.multipliers;
        if !(m.start >= 0.0 && m.step > 0.0 && m.stop >= m.start && m.stop.is_finite()) {
            return Err(spec_err("multipliers", "needs 0 <= start <= stop and a positive step"));
        }
        if (self.training_slots as usize) < crate::detector::MIN_TRAINING_COLUMNS {
            return Err(spec_err("training_slots", "too few to train on"));
        }
        Ok(())
    }

    /// Half of the devices corrupted in every slot, drawn afresh each slot.
    pub fn faulty_preset(seed: u64) -> Self {
        Self {
            training_slots: 100,
            detector: DetectorConfig {
                epsilon: 0.05,
                p_fa: 0.05,
            },
            data: GenSpec {
                seed,
                slots: 200,
                devices: 20,
                device_dims: 5,
                rank: 5,
                noise: 0.01,
                first_slot: 100,
                adversary: AdversaryConfig {
                    malicious_device_fraction: 0.5,
                    corruption: Corruption::Spike {
                        magnitude: 0.05,
                        unit: SpikeUnit::Scale,
                    },
                    persistence: Persistence::Resample,
                    ..AdversaryConfig::default()
                },
            },
            multipliers: Axis {
                start: 0.0,
                stop: 4.0,
                step: 0.25,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub multiplier: f64,
    pub p_d: f64,
    pub p_fa: f64,
}

/// Trains on clean slots `0..training_slots`, then measures device-level
/// rates on the corrupted evaluation slots for each multiplier.
pub fn roc_curve(spec: &RocSpec) -> Result<Vec<RocPoint>, AnalyticsError> {
    spec.validate()?;
    let mut data = spec.data.clone();
    data.first_slot = u64::from(spec.training_slots);
    let eval = generate(&data)?;
    let mut window = TrainingWindow::new(eval.layout.clone(), spec.training_slots as usize)?;
    for t in 0..u64::from(spec.training_slots) {
        window.push_slot(FusedVector::new(t, eval.source.sample(t)))?;
    }
    let model = DetectorModel::train(&window, &spec.detector)?;
    let residuals = par::map_range(eval.rows.len(), |t| model.residual(&eval.fused(t)));
    let residuals = residuals.into_iter().collect::<Result<Vec<_>, _>>()?;
    let malicious: usize = eval.labels.iter().flatten().filter(|&&l| l).count();
    let clean = eval.labels.iter().map(Vec::len).sum::<usize>() - malicious;
    let points = spec
        .multipliers
        .values()
        .into_iter()
        .map(|m| {
            let (mut hit, mut fa) = (0usize, 0usize);
            for (t, z) in residuals.iter().enumerate() {
                let r = model.report_from_residual(t as u64, z.clone(), m);
                for &n in &r.flagged_devices {
                    if eval.labels[t][n] {
                        hit += 1;
                    } else {
                        fa += 1;
                    }
                }
            }
            RocPoint {
                multiplier: m,
                p_d: if malicious > 0 {
                    hit as f64 / malicious as f64
                } else {
                    0.0
                },
                p_fa: if clean > 0 { fa as f64 / clean as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(points)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("multiplier,p_d,p_fa\n");
    for p in points {
        writeln!(s, "{},{},{}", p.multiplier, p.p_d, p.p_fa).expect("writing to a String");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_fall_monotonically_to_zero() {
        let mut spec = RocSpec::faulty_preset(2);
        spec.data.slots = 60;
        spec.multipliers = Axis {
            start: 0.0,
            stop: 1000.0,
            step: 50.0,
        };
        let pts = roc_curve(&spec).unwrap();
        assert!(pts[0].p_fa > 0.99);
        for w in pts.windows(2) {
            assert!(w[1].p_d <= w[0].p_d && w[1].p_fa <= w[0].p_fa);
        }
        let last = pts.last().unwrap();
        assert_eq!((last.p_d, last.p_fa), (0.0, 0.0));
    }
}
