//! Malicious-device selection and data corruption, with ground-truth labels.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{AdversaryConfig, Corruption, Persistence, Selection};
use crate::fusion::{DeviceLayout, DeviceReading};
use crate::ids::OrgId;
use crate::synth::{rng_for, stream};

/// Per-slot corruption driver. Draws for slot `t` come from their own stream,
/// so a slot's corruption does not depend on which slots ran before it.
#[derive(Debug, Clone)]
pub struct Adversary {
    cfg: AdversaryConfig,
    layout: DeviceLayout,
    device_orgs: Vec<OrgId>,
    /// Raw-unit size of one corruption unit, per feature.
    units: Vec<f64>,
    seed: u64,
    fixed: Option<Vec<bool>>,
    corrupted_slots: Vec<u64>,
}

impl Adversary {
    pub fn new(
        cfg: &AdversaryConfig,
        layout: &DeviceLayout,
        device_orgs: &[OrgId],
        units: Vec<f64>,
        seed: u64,
    ) -> Self {
        assert_eq!(units.len(), layout.total_dim());
        assert_eq!(device_orgs.len(), layout.device_count());
        let mut adv = Self {
            cfg: cfg.clone(),
            layout: layout.clone(),
            device_orgs: device_orgs.to_vec(),
            units,
            seed,
            fixed: None,
            corrupted_slots: vec![0; layout.device_count()],
        };
        if cfg.persistence == Persistence::Fixed {
            let mut rng = rng_for(seed, stream::ADVERSARY);
            adv.fixed = Some(adv.choose(&mut rng));
        }
        adv
    }

    /// Number of devices a slot corrupts.
    pub fn malicious_count(&self) -> usize {
        let n = self.layout.device_count();
        match self.cfg.selection {
            Selection::Devices => (self.cfg.malicious_device_fraction * n as f64).round() as usize,
            Selection::Orgs => {
                let orgs = self.org_count();
                let k = (self.cfg.malicious_device_fraction * orgs as f64).round() as usize;
                self.device_orgs.iter().filter(|o| (o.0 as usize) < k).count().min(n)
            }
        }
    }

    fn org_count(&self) -> usize {
        self.device_orgs.iter().map(|o| o.0 as usize + 1).max().unwrap_or(0)
    }

    fn choose(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let n = self.layout.device_count();
        let mut labels = vec![false; n];
        match self.cfg.selection {
            Selection::Devices => {
                let k = (self.cfg.malicious_device_fraction * n as f64).round() as usize;
                for i in sample(rng, n, k.min(n)) {
                    labels[i] = true;
                }
            }
            Selection::Orgs => {
                let orgs = self.org_count();
                let k = (self.cfg.malicious_device_fraction * orgs as f64).round() as usize;
                let bad: Vec<usize> = sample(rng, orgs, k.min(orgs)).into_vec();
                for (i, o) in self.device_orgs.iter().enumerate() {
                    labels[i] = bad.contains(&(o.0 as usize));
                }
            }
        }
        labels
    }

    /// Corrupts the malicious devices' readings for `slot`; returns the
    /// readings and one malicious label per device.
    pub fn inject_faults(&mut self, slot: u64, readings: &[DeviceReading]) -> (Vec<DeviceReading>, Vec<bool>) {
        let mut rng = rng_for(self.seed, stream::ADVERSARY + 1 + slot);
        let labels = match &self.fixed {
            Some(f) => f.clone(),
            None => self.choose(&mut rng),
        };
        let mut out = readings.to_vec();
        for (n, r) in out.iter_mut().enumerate() {
            if !labels[n] {
                continue;
            }
            self.corrupted_slots[n] += 1;
            let span = self.layout.span_of(n);
            let units = &self.units[span.clone()];
            corrupt(
                &self.cfg.corruption,
                &mut r.values,
                units,
                self.corrupted_slots[n],
                &mut rng,
            );
        }
        (out, labels)
    }
}

/// Applies one corruption to a device's values. `k` counts this device's
/// corrupted slots so far, including this one.
pub fn corrupt<R: Rng>(c: &Corruption, values: &mut [f64], units: &[f64], k: u64, rng: &mut R) {
    match *c {
        Corruption::Spike { magnitude, .. } => {
            let i = rng.random_range(0..values.len());
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            values[i] += sign * magnitude * units[i];
        }
        Corruption::Replace { low, high } => {
            for v in values.iter_mut() {
                *v = if low == high { low } else { rng.random_range(low..high) };
            }
        }
        Corruption::Drift { increment } => {
            for (v, u) in values.iter_mut().zip(units) {
                *v += increment * k as f64 * u;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn readings(layout: &DeviceLayout) -> Vec<DeviceReading> {
        layout
            .names()
            .iter()
            .zip(layout.dims())
            .map(|(n, &d)| DeviceReading::new(n.clone(), 3, vec![0.5; d]))
            .collect()
    }

    fn adversary(f: f64, c: Corruption, p: Persistence) -> (Adversary, DeviceLayout) {
        let layout = DeviceLayout::uniform(8, 2).unwrap();
        let orgs: Vec<_> = (0..8).map(|i| OrgId(i / 2)).collect();
        let cfg = AdversaryConfig {
            malicious_device_fraction: f,
            corruption: c,
            persistence: p,
            ..AdversaryConfig::default()
        };
        let units = (0..16).map(|i| 0.1 * (i + 1) as f64).collect();
        (Adversary::new(&cfg, &layout, &orgs, units, 11), layout)
    }

    const SPIKE: Corruption = Corruption::Spike {
        magnitude: 10.0,
        unit: super::super::config::SpikeUnit::Scale,
    };

    #[test]
    fn zero_fraction_is_identity() {
        let (mut a, layout) = adversary(0.0, SPIKE, Persistence::Resample);
        let r = readings(&layout);
        let (out, labels) = a.inject_faults(3, &r);
        assert_eq!(out, r);
        assert!(labels.iter().all(|l| !l));
    }

    #[test]
    fn full_fraction_corrupts_everything() {
        let (mut a, layout) = adversary(1.0, SPIKE, Persistence::Resample);
        let r = readings(&layout);
        let (out, labels) = a.inject_faults(3, &r);
        assert!(labels.iter().all(|&l| l));
        assert!(out.iter().zip(&r).all(|(x, y)| x != y));
    }

    #[test]
    fn spike_moves_one_feature_by_exact_multiple() {
        let (mut a, layout) = adversary(0.5, SPIKE, Persistence::Fixed);
        let r = readings(&layout);
        let (out, labels) = a.inject_faults(3, &r);
        assert_eq!(labels.iter().filter(|&&l| l).count(), 4);
        for n in 0..8 {
            let span = layout.span_of(n);
            let moved: Vec<_> = span
                .clone()
                .filter(|&i| out[n].values[i - span.start] != r[n].values[i - span.start])
                .collect();
            if labels[n] {
                assert_eq!(moved.len(), 1);
                let i = moved[0];
                let diff = (out[n].values[i - span.start] - 0.5).abs();
                let unit = 0.1 * (i + 1) as f64;
                assert!((diff - 10.0 * unit).abs() < 1e-12);
            } else {
                assert!(moved.is_empty());
            }
        }
        // fixed persistence keeps the set; resample draws per slot
        let (_, again) = a.inject_faults(4, &r);
        assert_eq!(again, labels);
        let (mut b, _) = adversary(0.5, SPIKE, Persistence::Resample);
        let sets: std::collections::BTreeSet<Vec<bool>> = (0..10).map(|t| b.inject_faults(t, &r).1).collect();
        assert!(sets.len() > 1);
    }

    #[test]
    fn org_selection_takes_whole_orgs() {
        let layout = DeviceLayout::uniform(8, 1).unwrap();
        let orgs: Vec<_> = (0..8).map(|i| OrgId(i / 2)).collect();
        let cfg = AdversaryConfig {
            malicious_device_fraction: 0.5,
            selection: Selection::Orgs,
            ..AdversaryConfig::default()
        };
        let mut a = Adversary::new(&cfg, &layout, &orgs, vec![1.0; 8], 2);
        assert_eq!(a.malicious_count(), 4);
        let (_, labels) = a.inject_faults(0, &readings(&layout));
        assert_eq!(labels.iter().filter(|&&l| l).count(), 4);
        for pair in labels.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn drift_grows_per_corrupted_slot() {
        let (mut a, layout) = adversary(1.0, Corruption::Drift { increment: 0.5 }, Persistence::Fixed);
        let r = readings(&layout);
        let (first, _) = a.inject_faults(0, &r);
        let (second, _) = a.inject_faults(1, &r);
        assert!((first[0].values[0] - (0.5 + 0.5 * 0.1)).abs() < 1e-12);
        assert!((second[0].values[0] - (0.5 + 2.0 * 0.5 * 0.1)).abs() < 1e-12);
    }
}
