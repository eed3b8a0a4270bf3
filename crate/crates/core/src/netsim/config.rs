//! Scenario configuration, read from TOML. Unknown keys are rejected.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::consensus::Behavior;
use crate::detector::{DetectorConfig, MIN_TRAINING_COLUMNS};
use crate::fusion::DeviceLayout;
use crate::ids::OrgId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Range checks shared by every consumer of a [`Corruption`].
pub(crate) fn check_corruption(c: &Corruption) -> Result<(), ConfigError> {
    match *c {
        Corruption::Spike { magnitude, .. } if !(magnitude > 0.0 && magnitude.is_finite()) => {
            Err(invalid("adversary.corruption", "spike magnitude must be positive"))
        }
        Corruption::Replace { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
            Err(invalid("adversary.corruption", "replace needs finite low <= high"))
        }
        Corruption::Drift { increment } if !increment.is_finite() => {
            Err(invalid("adversary.corruption", "drift increment must be finite"))
        }
        _ => Ok(()),
    }
}

pub(crate) fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub slots: u64,
    pub training_slots: usize,
    #[serde(default = "default_window")]
    pub window_capacity: usize,
    /// Retrain every this many committed slots; 0 never retrains.
    #[serde(default)]
    pub model_update_interval: u64,
    pub topology: TopologyConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub consensus: ConsensusSection,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub adversary: AdversaryConfig,
}

fn default_window() -> usize {
    crate::fusion::DEFAULT_WINDOW_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitDevice {
    pub name: String,
    pub org: u32,
    pub dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub orgs: u32,
    #[serde(default = "one")]
    pub devices_per_org: usize,
    #[serde(default = "one")]
    pub device_dims: usize,
    #[serde(default = "one_u32")]
    pub endorsing_per_org: u32,
    #[serde(default)]
    pub regular_per_org: u32,
    /// Overrides the uniform device layout when non-empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<ExplicitDevice>,
}

fn one() -> usize {
    1
}

fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub rank: usize,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub enabled: bool,
    pub epsilon: f64,
    pub p_fa: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            enabled: true,
            epsilon: d.epsilon,
            p_fa: d.p_fa,
        }
    }
}

impl DetectorSection {
    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            epsilon: self.epsilon,
            p_fa: self.p_fa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSection {
    pub quarantine_slots: u32,
    /// Simulated ticks; 0 means ten times the largest link delay.
    pub timeout: u64,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self {
            quarantine_slots: 1,
            timeout: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Fixed { ticks: u64 },
    Uniform { min: u64, max: u64 },
}

impl DelayModel {
    pub fn max(&self) -> u64 {
        match *self {
            DelayModel::Fixed { ticks } => ticks,
            DelayModel::Uniform { max, .. } => max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub delay: DelayModel,
    /// Extra hop through the aggregator in front of each endorsing peer.
    pub aggregator_delay: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            delay: DelayModel::Uniform { min: 1, max: 3 },
            aggregator_delay: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeUnit {
    /// Multiples of the feature's standard deviation.
    Scale,
    /// Multiples of the detector threshold, in raw units.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    /// Adds ±magnitude·unit to one feature of the device.
    Spike {
        magnitude: f64,
        #[serde(default = "default_unit")]
        unit: SpikeUnit,
    },
    /// Replaces every feature with a uniform draw from [low, high].
    Replace { low: f64, high: f64 },
    /// Adds increment·k·scale to every feature, k counting corrupted slots.
    Drift { increment: f64 },
}

fn default_unit() -> SpikeUnit {
    SpikeUnit::Scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    Fixed,
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// round(F_raw·N) devices chosen uniformly.
    Devices,
    /// round(F_raw·orgs) organizations, all of their devices.
    Orgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByzantineSet {
    None,
    /// Every peer of an organization owning a malicious device.
    MaliciousOrgs,
    /// round(byzantine_peer_fraction·peers) peers, fixed for the run.
    Fraction,
    /// The peers listed in `byzantine_peers`.
    List,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub malicious_device_fraction: f64,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    #[serde(default = "default_corruption")]
    pub corruption: Corruption,
    #[serde(default = "default_persistence")]
    pub persistence: Persistence,
    #[serde(default = "default_byzantine")]
    pub byzantine: ByzantineSet,
    #[serde(default)]
    pub byzantine_peer_fraction: f64,
    #[serde(default)]
    pub byzantine_peers: Vec<u32>,
    #[serde(default = "default_behavior")]
    pub behavior: Behavior,
    /// Byzantine endorsing peers tamper with the results they endorse.
    #[serde(default)]
    pub corrupt_endorsers: bool,
}

fn default_selection() -> Selection {
    Selection::Devices
}

fn default_corruption() -> Corruption {
    Corruption::Spike {
        magnitude: 10.0,
        unit: SpikeUnit::Scale,
    }
}

fn default_persistence() -> Persistence {
    Persistence::Fixed
}

fn default_byzantine() -> ByzantineSet {
    ByzantineSet::None
}

fn default_behavior() -> Behavior {
    Behavior::Silent
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            malicious_device_fraction: 0.0,
            selection: default_selection(),
            corruption: default_corruption(),
            persistence: default_persistence(),
            byzantine: default_byzantine(),
            byzantine_peer_fraction: 0.0,
            byzantine_peers: Vec::new(),
            behavior: default_behavior(),
            corrupt_endorsers: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash16(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn run_dir_name(&self) -> String {
        format!("{}-{}", self.hash16(), self.seed)
    }

    /// The device layout and each device's organization.
    pub fn layout(&self) -> Result<(DeviceLayout, Vec<OrgId>), ConfigError> {
        let t = &self.topology;
        if t.devices.is_empty() {
            let n = t.orgs as usize * t.devices_per_org;
            let layout = DeviceLayout::uniform(n, t.device_dims).map_err(|e| invalid("topology", e.to_string()))?;
            let orgs = (0..n).map(|i| OrgId((i / t.devices_per_org) as u32)).collect();
            Ok((layout, orgs))
        } else {
            let layout = DeviceLayout::new(t.devices.iter().map(|d| (d.name.clone(), d.dims)))
                .map_err(|e| invalid("topology.devices", e.to_string()))?;
            Ok((layout, t.devices.iter().map(|d| OrgId(d.org)).collect()))
        }
    }

    pub fn peer_count(&self) -> u32 {
        self.topology.orgs * (self.topology.endorsing_per_org + self.topology.regular_per_org)
    }

    /// Timeout of a PBFT instance and of endorsement collection, in ticks.
    pub fn timeout_ticks(&self) -> u64 {
        match self.consensus.timeout {
            0 => 10 * (self.network.delay.max() + self.network.aggregator_delay).max(1),
            t => t,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let t = &self.topology;
        if t.orgs == 0 {
            return Err(invalid("topology.orgs", "at least one organization"));
        }
        if t.endorsing_per_org == 0 {
            return Err(invalid(
                "topology.endorsing_per_org",
                "every organization needs an endorsing peer",
            ));
        }
        if t.devices.is_empty() && (t.devices_per_org == 0 || t.device_dims == 0) {
            return Err(invalid("topology.devices_per_org", "devices and dims must be positive"));
        }
        if let Some(d) = t.devices.iter().find(|d| d.org >= t.orgs) {
            return Err(invalid(
                "topology.devices",
                format!("device `{}` names unknown org {}", d.name, d.org),
            ));
        }
        let (layout, _) = self.layout()?;
        if self.slots == 0 {
            return Err(invalid("slots", "must be positive"));
        }
        if self.window_capacity == 0 {
            return Err(invalid("window_capacity", "must be positive"));
        }
        if self.training_slots < MIN_TRAINING_COLUMNS {
            return Err(invalid(
                "training_slots",
                format!("need at least {MIN_TRAINING_COLUMNS}"),
            ));
        }
        let cols = self.training_slots.min(self.window_capacity);
        if self.data.rank == 0 || self.data.rank >= layout.total_dim().min(cols) {
            return Err(invalid(
                "data.rank",
                format!("must be in 1..{}", layout.total_dim().min(cols)),
            ));
        }
        if !self.data.noise.is_finite() || self.data.noise < 0.0 {
            return Err(invalid("data.noise", "must be finite and non-negative"));
        }
        self.detector
            .detector_config()
            .validate()
            .map_err(|e| invalid("detector", e.to_string()))?;
        if self.consensus.quarantine_slots == 0 {
            return Err(invalid("consensus.quarantine_slots", "must be at least 1"));
        }
        if let DelayModel::Uniform { min, max } = self.network.delay {
            if min > max {
                return Err(invalid("network.delay", "min exceeds max"));
            }
        }
        let a = &self.adversary;
        if !(0.0..=1.0).contains(&a.malicious_device_fraction) {
            return Err(invalid("adversary.malicious_device_fraction", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&a.byzantine_peer_fraction) {
            return Err(invalid("adversary.byzantine_peer_fraction", "must be in [0, 1]"));
        }
        check_corruption(&a.corruption)?;
        let peers = self.peer_count();
        let listed: BTreeSet<_> = a.byzantine_peers.iter().collect();
        if listed.len() != a.byzantine_peers.len() || a.byzantine_peers.iter().any(|&p| p >= peers) {
            return Err(invalid("adversary.byzantine_peers", "duplicate or unknown peer id"));
        }
        if a.behavior == Behavior::Honest && a.byzantine != ByzantineSet::None {
            return Err(invalid(
                "adversary.behavior",
                "byzantine peers need silent or equivocate",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
slots = 5
training_slots = 20
[topology]
orgs = 4
[data]
rank = 1
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.window_capacity, 100);
        assert_eq!(c.consensus.quarantine_slots, 1);
        assert_eq!(c.timeout_ticks(), 40);
        assert_eq!(c.peer_count(), 4);
        let back = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash16(), c.hash16());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = ScenarioConfig::from_toml(&format!("{MINIMAL}bogus = 1\n")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ScenarioConfig::from_toml(&MINIMAL.replace("rank = 1", "rank = 1\nsigma = 2")).unwrap_err();
        assert!(e.to_string().contains("sigma"), "{e}");
    }

    #[test]
    fn validation_names_the_key() {
        let e = ScenarioConfig::from_toml(&MINIMAL.replace("rank = 1", "rank = 9")).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { key: "data.rank", .. }));
        let e = ScenarioConfig::from_toml(&MINIMAL.replace("schema_version = 1", "schema_version = 2")).unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                key: "schema_version",
                ..
            }
        ));
        let e = ScenarioConfig::from_toml(&MINIMAL.replace("training_slots = 20", "training_slots = 3")).unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                key: "training_slots",
                ..
            }
        ));
        let bad_fraction = format!("{MINIMAL}[adversary]\nmalicious_device_fraction = 1.5\n");
        let e = ScenarioConfig::from_toml(&bad_fraction).unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                key: "adversary.malicious_device_fraction",
                ..
            }
        ));
    }
}
