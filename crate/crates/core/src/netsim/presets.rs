//! Named scenario presets.

use super::config::*;
use crate::consensus::Behavior;

/// Sixteen organizations with one sixteen-feature device each; six of them
/// are compromised, so their device spikes by ten thresholds and all of
/// their peers go silent.
pub fn attack_attenuation(detector_enabled: bool) -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        seed: 1,
        slots: 200,
        training_slots: 100,
        window_capacity: 100,
        model_update_interval: 0,
        topology: TopologyConfig {
            orgs: 16,
            devices_per_org: 1,
            device_dims: 16,
            endorsing_per_org: 1,
            regular_per_org: 1,
            devices: Vec::new(),
        },
        data: DataConfig { rank: 2, noise: 0.01 },
        detector: DetectorSection {
            enabled: detector_enabled,
            epsilon: 0.05,
            p_fa: 0.01,
        },
        consensus: ConsensusSection::default(),
        network: NetworkConfig::default(),
        adversary: AdversaryConfig {
            malicious_device_fraction: 0.375,
            selection: Selection::Orgs,
            corruption: Corruption::Spike {
                magnitude: 10.0,
                unit: SpikeUnit::Threshold,
            },
            persistence: Persistence::Fixed,
            byzantine: ByzantineSet::MaliciousOrgs,
            byzantine_peer_fraction: 0.0,
            byzantine_peers: Vec::new(),
            behavior: Behavior::Silent,
            corrupt_endorsers: false,
        },
    }
}

/// Clean data, no Byzantine peers.
pub fn honest(detector_enabled: bool) -> ScenarioConfig {
    let mut c = attack_attenuation(detector_enabled);
    c.adversary = AdversaryConfig::default();
    c
}

pub fn by_name(name: &str) -> Option<ScenarioConfig> {
    Some(match name {
        "attack-attenuation" => attack_attenuation(true),
        "attack-attenuation-no-detector" => attack_attenuation(false),
        "honest" => honest(true),
        _ => return None,
    })
}

pub const NAMES: &[&str] = &["attack-attenuation", "attack-attenuation-no-detector", "honest"];
