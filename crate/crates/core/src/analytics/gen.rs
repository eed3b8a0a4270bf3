//! Seeded synthetic data files with planted corruptions and their labels.

use serde::{Deserialize, Serialize};

use super::{spec_err, AnalyticsError};
use crate::fusion::{write_matrix_csv, DeviceLayout, FusedVector};
use crate::ids::OrgId;
use crate::netsim::adversary::Adversary;
use crate::netsim::config::{check_corruption, AdversaryConfig, Corruption, SpikeUnit};
use crate::netsim::split_readings;
use crate::synth::LowRankSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub slots: u32,
    pub devices: u32,
    pub device_dims: u32,
    pub rank: usize,
    pub noise: f64,
    /// First slot index written; slots before it are never drawn.
    #[serde(default)]
    pub first_slot: u64,
    #[serde(default)]
    pub adversary: AdversaryConfig,
}

impl GenSpec {
    pub fn from_toml(s: &str) -> Result<Self, AnalyticsError> {
        let spec: Self = toml::from_str(s).map_err(|e| AnalyticsError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.devices == 0 || self.device_dims == 0 {
            return Err(spec_err("devices", "devices and device_dims must be positive"));
        }
        if self.slots == 0 {
            return Err(spec_err("slots", "must be positive"));
        }
        let b = (self.devices * self.device_dims) as usize;
        let max = b.min(self.slots as usize);
        if self.rank == 0 || self.rank >= max {
            return Err(spec_err("rank", format!("must be in 1..{max}")));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(spec_err("noise", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.adversary.malicious_device_fraction) {
            return Err(spec_err("adversary.malicious_device_fraction", "must be in [0, 1]"));
        }
        check_corruption(&self.adversary.corruption)?;
        if matches!(
            self.adversary.corruption,
            Corruption::Spike {
                unit: SpikeUnit::Threshold,
                ..
            }
        ) {
            return Err(spec_err(
                "adversary.corruption",
                "threshold units need a trained detector; use unit = \"scale\"",
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> DeviceLayout {
        DeviceLayout::uniform(self.devices as usize, self.device_dims as usize).expect("validated dimensions")
    }
}

/// A generated matrix file plus one malicious label per (slot, device).
#[derive(Debug, Clone, PartialEq)]
pub struct GenOutput {
    pub layout: DeviceLayout,
    pub first_slot: u64,
    /// One row per slot.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Vec<bool>>,
    pub source: LowRankSource,
}

impl GenOutput {
    pub fn fused(&self, t: usize) -> FusedVector {
        FusedVector::from_slice(self.first_slot + t as u64, &self.rows[t])
    }

    pub fn data_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_matrix_csv(&mut out, &self.layout.feature_names(), &self.rows).expect("writing to memory");
        out
    }
}

/// Draws `spec.slots` measurements; each device belongs to its own
/// organization, and corruption units are the features' standard deviations.
pub fn generate(spec: &GenSpec) -> Result<GenOutput, AnalyticsError> {
    spec.validate()?;
    let layout = spec.layout();
    let b = layout.total_dim();
    let source = LowRankSource::new(b, spec.rank, spec.noise, spec.seed)?;
    let orgs: Vec<OrgId> = (0..spec.devices).map(OrgId).collect();
    let units = (0..b).map(|i| source.feature_scale(i)).collect();
    let mut adversary = Adversary::new(&spec.adversary, &layout, &orgs, units, spec.seed);
    let mut rows = Vec::with_capacity(spec.slots as usize);
    let mut labels = Vec::with_capacity(spec.slots as usize);
    for t in spec.first_slot..spec.first_slot + u64::from(spec.slots) {
        let readings = split_readings(&layout, t, &source.sample(t));
        let (readings, l) = adversary.inject_faults(t, &readings);
        rows.push(readings.into_iter().flat_map(|r| r.values).collect());
        labels.push(l);
    }
    Ok(GenOutput {
        layout,
        first_slot: spec.first_slot,
        rows,
        labels,
        source,
    })
}

/// `slot,<device>,...` with 1 for a corrupted device; `slot` is the row
/// index in the data file, as in detector output.
pub fn labels_csv(out: &GenOutput) -> String {
    let mut s = format!("slot,{}\n", out.layout.names().join(","));
    for (t, l) in out.labels.iter().enumerate() {
        s.push_str(&t.to_string());
        for &x in l {
            s.push_str(if x { ",1" } else { ",0" });
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::read_matrix_csv;

    fn spec() -> GenSpec {
        GenSpec::from_toml(
            r#"
seed = 3
slots = 30
devices = 6
device_dims = 2
rank = 3
noise = 0.01
[adversary]
malicious_device_fraction = 0.5
persistence = "resample"
"#,
        )
        .unwrap()
    }

    #[test]
    fn files_round_trip_and_labels_align() {
        let out = generate(&spec()).unwrap();
        let back = read_matrix_csv(out.data_csv().as_slice()).unwrap();
        assert_eq!(back.rows, out.rows);
        let labels = labels_csv(&out);
        assert_eq!(labels.lines().count(), 31);
        assert!(out.labels.iter().all(|l| l.iter().filter(|&&x| x).count() == 3));
    }

    #[test]
    fn clean_rows_match_the_source() {
        let out = generate(&spec()).unwrap();
        for (t, (row, l)) in out.rows.iter().zip(&out.labels).enumerate() {
            let clean = out.source.sample(t as u64);
            for n in 0..6 {
                let same = out.layout.span_of(n).all(|i| row[i] == clean[i]);
                assert_eq!(same, !l[n]);
            }
        }
    }

    #[test]
    fn rejects_rank_at_limit_and_threshold_units() {
        let mut s = spec();
        s.rank = 12;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.adversary.corruption = Corruption::Spike {
            magnitude: 1.0,
            unit: SpikeUnit::Threshold,
        };
        assert!(s.validate().is_err());
    }
}
