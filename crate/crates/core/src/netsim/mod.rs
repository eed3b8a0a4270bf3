//! Deterministic discrete-event simulation of the invoke flow: applications,
//! endorsing peers (behind their aggregators), the orderer acting as PBFT
//! primary, and regular peers.
//!
//! All protocol timing is simulated ticks. Wall-clock time is measured only
//! for the informational per-category timings.

pub mod adversary;
pub mod config;
pub mod events;
pub mod output;
pub mod presets;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use adversary::Adversary;
pub use config::{
    AdversaryConfig, ByzantineSet, ConfigError, Corruption, DelayModel, Persistence, ScenarioConfig, Selection,
    SpikeUnit,
};
use events::EventQueue;

use crate::consensus::{
    decide_block, detector_step, Action, Behavior, ConsensusMessage, Decision, DropReason, MessageKind, PbftState,
    PeerIdentity, PeerKind, Phase, RelaySwitch, SlotOutcome, StepOne,
};
use crate::detector::{DetectorError, DetectorModel};
use crate::fusion::{DeviceLayout, DeviceReading, FusedVector, FusionError, TrainingWindow};
use crate::ids::{NodeId, OrgId, PeerId};
use crate::ledger::{
    check_endorsements, Block, Chaincode, CommittedBlock, Digest, EndorsedTransaction, Endorsement, EndorsementPolicy,
    Endorser, Ledger, LedgerError, Orderer, PeerSecrets, Transaction, Validity, WriteSet,
};
use crate::par;
use crate::synth::{rng_for, stream, LowRankSource, SynthError, PRNG_NAME};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("data source: {0}")]
    Synth(#[from] SynthError),
    #[error("fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Wall-clock seconds per category for one slot. Informational only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub outlier_detection: f64,
    pub model_update: f64,
    pub dataset_update: f64,
    pub state_update: f64,
    pub consensus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotReport {
    pub slot: u64,
    pub outcome: SlotOutcome,
    pub block_seq: u64,
    pub block_hash: Digest,
    pub flagged_devices: Vec<String>,
    pub excluded_orgs: Vec<u32>,
    pub max_residual_ratio: f64,
    pub devices: usize,
    pub malicious: usize,
    pub detected: usize,
    pub false_alarms: usize,
    pub peers: usize,
    pub byzantine_peers: usize,
    pub active_peers: usize,
    pub byzantine_active: usize,
    pub equivocations: usize,
    pub txs: usize,
    pub valid: usize,
    pub invalid_endorsement: usize,
    pub rejected: usize,
    pub consensus_ticks: u64,
    pub slot_ticks: u64,
}

impl SlotReport {
    /// Undetected malicious plus falsely flagged intact devices, over all
    /// devices.
    pub fn post_filter_fault_ratio(&self) -> f64 {
        (self.malicious - self.detected + self.false_alarms) as f64 / self.devices as f64
    }

    /// Byzantine peers among the peers left active after exclusion.
    pub fn byzantine_active_ratio(&self) -> f64 {
        if self.active_peers == 0 {
            0.0
        } else {
            self.byzantine_active as f64 / self.active_peers as f64
        }
    }
}

/// One line of the consensus trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceRecord {
    Block {
        slot: u64,
        time: u64,
        seq: u64,
        digest: Digest,
        txs: usize,
    },
    Deliver {
        slot: u64,
        time: u64,
        to: PeerId,
        msg: ConsensusMessage,
    },
    Drop {
        slot: u64,
        time: u64,
        peer: PeerId,
        sender: NodeId,
        reason: DropReason,
    },
    Transition {
        slot: u64,
        time: u64,
        peer: PeerId,
        phase: Phase,
    },
    Equivocation {
        slot: u64,
        time: u64,
        peer: PeerId,
        sender: PeerId,
    },
    Decided {
        slot: u64,
        time: u64,
        peer: PeerId,
        digest: Digest,
    },
    Timeout {
        slot: u64,
        time: u64,
        peer: PeerId,
    },
    Outcome {
        slot: u64,
        time: u64,
        outcome: SlotOutcome,
        active: usize,
        quorum: usize,
    },
    Notify {
        slot: u64,
        time: u64,
        app: String,
    },
}

#[derive(Debug, Clone)]
enum Payload {
    Proposal(usize),
    Endorsed {
        tx: usize,
        result: WriteSet,
        endorsement: Endorsement,
    },
    EndorseDeadline,
    Submit(Box<EndorsedTransaction>),
    Block,
    Vote(ConsensusMessage),
    Timeout,
}

#[derive(Debug, Default)]
struct TxProgress {
    result: Option<WriteSet>,
    endorsements: Vec<Endorsement>,
    submitted: bool,
}

/// What one peer concludes about the block before voting.
#[derive(Debug, Clone)]
struct PeerCheck {
    ok: bool,
    step: Option<StepOne>,
    labels: Vec<Validity>,
}

/// Everything one slot produced.
#[derive(Debug, Clone)]
pub struct SlotRun {
    pub report: SlotReport,
    pub timings: Timings,
    pub trace: Vec<TraceRecord>,
}

/// The simulated network and every peer's local state.
pub struct World {
    cfg: ScenarioConfig,
    layout: DeviceLayout,
    device_orgs: Vec<OrgId>,
    device_org_map: BTreeMap<String, OrgId>,
    org_devices: Vec<Vec<usize>>,
    source: LowRankSource,
    peers: Vec<PeerIdentity>,
    org_endorsers: Vec<Vec<PeerId>>,
    secrets: PeerSecrets,
    policy: EndorsementPolicy,
    chaincode: Chaincode,
    endorsers: BTreeMap<PeerId, Endorser>,
    model: Option<Arc<DetectorModel>>,
    ledgers: Vec<Ledger>,
    relays: Vec<RelaySwitch>,
    orderer: Orderer,
    adversary: Adversary,
    fixed_byzantine: BTreeSet<PeerId>,
    clock: u64,
    committed: u64,
    trace_enabled: bool,
}

impl World {
    /// Builds the topology, trains the detector on clean slots
    /// `0..training_slots` and commits the genesis block.
    pub fn new(cfg: &ScenarioConfig, trace: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        let (layout, device_orgs) = cfg.layout()?;
        let b = layout.total_dim();
        let source = LowRankSource::new(b, cfg.data.rank, cfg.data.noise, cfg.seed)?;

        let mut window = TrainingWindow::new(layout.clone(), cfg.window_capacity)?;
        for t in 0..cfg.training_slots as u64 {
            window.push_slot(FusedVector::new(t, source.sample(t)))?;
        }
        let spike_threshold = matches!(
            cfg.adversary.corruption,
            Corruption::Spike {
                unit: SpikeUnit::Threshold,
                ..
            }
        );
        let trained = if cfg.detector.enabled || spike_threshold {
            Some(DetectorModel::train(&window, &cfg.detector.detector_config())?)
        } else {
            None
        };
        let units: Vec<f64> = match &trained {
            Some(m) if spike_threshold => m
                .thresholds()
                .iter()
                .zip(&m.norm_stats().scale)
                .map(|(h, s)| h * s)
                .collect(),
            _ => (0..b).map(|i| source.feature_scale(i)).collect(),
        };
        let model = trained.filter(|_| cfg.detector.enabled).map(Arc::new);

        let t = &cfg.topology;
        let mut peers = Vec::new();
        let mut org_endorsers = vec![Vec::new(); t.orgs as usize];
        for org in 0..t.orgs {
            for k in 0..t.endorsing_per_org + t.regular_per_org {
                let peer = PeerId(peers.len() as u32);
                let kind = if k < t.endorsing_per_org {
                    org_endorsers[org as usize].push(peer);
                    PeerKind::Endorsing
                } else {
                    PeerKind::Regular
                };
                peers.push(PeerIdentity {
                    peer,
                    org: OrgId(org),
                    kind,
                    behavior: Behavior::Honest,
                });
            }
        }
        let mut org_devices = vec![Vec::new(); t.orgs as usize];
        for (n, o) in device_orgs.iter().enumerate() {
            org_devices[o.0 as usize].push(n);
        }

        let secrets = PeerSecrets::generate(peers.iter().map(|p| p.peer), &mut rng_for(cfg.seed, stream::SECRETS));
        let mut policy = EndorsementPolicy::new();
        for (o, es) in org_endorsers.iter().enumerate() {
            policy.require(OrgId(o as u32).app_id(), es.iter().copied());
        }
        let endorsers = peers
            .iter()
            .filter(|p| p.kind == PeerKind::Endorsing)
            .map(|p| (p.peer, Endorser::new(p.peer, secrets.secret(p.peer).copied())))
            .collect();

        let last = cfg.training_slots as u64 - 1;
        let genesis = Arc::new(Block::genesis(split_readings(&layout, last, &source.sample(last))));
        let ledgers = peers
            .iter()
            .map(|_| Ledger::new(genesis.clone(), window.clone()))
            .collect();
        let relays = peers
            .iter()
            .map(|_| RelaySwitch::new(&peers, cfg.consensus.quarantine_slots))
            .collect::<Result<_, _>>()
            .expect("quarantine validated");

        let adversary = Adversary::new(&cfg.adversary, &layout, &device_orgs, units, cfg.seed);
        let fixed_byzantine = match cfg.adversary.byzantine {
            ByzantineSet::List => cfg.adversary.byzantine_peers.iter().map(|&p| PeerId(p)).collect(),
            ByzantineSet::Fraction => {
                let n = peers.len();
                let k = (cfg.adversary.byzantine_peer_fraction * n as f64).round() as usize;
                let mut rng = rng_for(cfg.seed, stream::BYZANTINE);
                sample(&mut rng, n, k.min(n))
                    .into_iter()
                    .map(|i| PeerId(i as u32))
                    .collect()
            }
            _ => BTreeSet::new(),
        };

        Ok(Self {
            cfg: cfg.clone(),
            device_org_map: layout
                .names()
                .iter()
                .cloned()
                .zip(device_orgs.iter().copied())
                .collect(),
            layout,
            device_orgs,
            org_devices,
            source,
            peers,
            org_endorsers,
            secrets,
            policy,
            chaincode: Chaincode::new(cfg.layout()?.0),
            endorsers,
            model,
            ledgers,
            relays,
            orderer: Orderer::new(&genesis),
            adversary,
            fixed_byzantine,
            clock: 0,
            committed: 0,
            trace_enabled: trace,
        })
    }

    pub fn model(&self) -> Option<&DetectorModel> {
        self.model.as_deref()
    }

    pub fn peers(&self) -> &[PeerIdentity] {
        &self.peers
    }

    pub fn ledger(&self, peer: PeerId) -> &Ledger {
        &self.ledgers[peer.0 as usize]
    }

    pub fn layout(&self) -> &DeviceLayout {
        &self.layout
    }

    /// First slot index after the training slots.
    pub fn first_slot(&self) -> u64 {
        self.cfg.training_slots as u64
    }

    fn behaviors(&self, malicious: &[bool]) -> Vec<Behavior> {
        let bad_orgs: BTreeSet<OrgId> = match self.cfg.adversary.byzantine {
            ByzantineSet::MaliciousOrgs => malicious
                .iter()
                .zip(&self.device_orgs)
                .filter(|(m, _)| **m)
                .map(|(_, o)| *o)
                .collect(),
            _ => BTreeSet::new(),
        };
        self.peers
            .iter()
            .map(|p| {
                if bad_orgs.contains(&p.org) || self.fixed_byzantine.contains(&p.peer) {
                    self.cfg.adversary.behavior
                } else {
                    Behavior::Honest
                }
            })
            .collect()
    }

    fn check(&self, p: usize, block: &Block) -> PeerCheck {
        let tip = self.ledgers[p].tip();
        let linked = block.hash_matches() && block.seq == tip.seq + 1 && block.prev_hash == tip.block_hash;
        let step = detector_step(block, &self.layout, self.model.as_deref(), &self.device_org_map).ok();
        let rejected = step.as_ref().map(|s| s.rejected.clone());
        let labels = block
            .txs
            .iter()
            .enumerate()
            .map(|(i, etx)| match check_endorsements(etx, &self.policy, &self.secrets) {
                Validity::Valid if rejected.as_ref().is_none_or(|r| r[i]) => Validity::OutlierRejected,
                v => v,
            })
            .collect();
        PeerCheck {
            ok: linked && step.is_some(),
            step,
            labels,
        }
    }

    /// Simulates one slot: readings, endorsement, ordering, the two consensus
    /// steps and, on success, the ledger update on every peer.
    pub fn run_slot(&mut self, slot: u64) -> Result<SlotRun, SimError> {
        let t0 = self.clock;
        let wall = Instant::now();
        let mut timings = Timings::default();
        let mut trace = Vec::new();
        let tracing = self.trace_enabled;
        let mut net = rng_for(self.cfg.seed, stream::NETWORK + slot);
        let delay_model = self.cfg.network.delay;
        let timeout = self.cfg.timeout_ticks();
        let n_peers = self.peers.len();

        for r in &mut self.relays {
            r.begin_slot();
        }
        let clean = split_readings(&self.layout, slot, &self.source.sample(slot));
        let (readings, truth) = self.adversary.inject_faults(slot, &clean);
        let behaviors = self.behaviors(&truth);
        for (p, e) in self.endorsers.iter_mut() {
            e.corrupt = self.cfg.adversary.corrupt_endorsers && behaviors[p.0 as usize] != Behavior::Honest;
        }
        let txs: Vec<Transaction> = readings
            .into_iter()
            .enumerate()
            .map(|(n, reading)| Transaction {
                tx_id: format!("t{slot}-{}", reading.device_id),
                app_id: self.device_orgs[n].app_id(),
                slot,
                reading,
            })
            .collect();

        let mut q: EventQueue<Payload> = EventQueue::new(t0);
        let agg = self.cfg.network.aggregator_delay;
        for (i, o) in self.device_orgs.iter().enumerate() {
            for &p in &self.org_endorsers[o.0 as usize] {
                q.push(
                    t0 + delay(&delay_model, &mut net) + agg,
                    NodeId::Peer(p),
                    Payload::Proposal(i),
                );
            }
        }
        for (o, devs) in self.org_devices.iter().enumerate() {
            if !devs.is_empty() {
                q.push(t0 + timeout, NodeId::App(OrgId(o as u32)), Payload::EndorseDeadline);
            }
        }

        let seq = self.orderer.tip().0 + 1;
        let mut progress: Vec<TxProgress> = txs.iter().map(|_| TxProgress::default()).collect();
        let mut submitted: Vec<EndorsedTransaction> = Vec::new();
        let mut block: Option<Arc<Block>> = None;
        let mut checks: Vec<PeerCheck> = Vec::new();
        let mut broadcast_at = t0;
        let mut pbft: Vec<PbftState> = self.peers.iter().map(|p| PbftState::new(p.peer, seq)).collect();
        let mut decided_at: Vec<Option<u64>> = vec![None; n_peers];
        let mut equivocations = 0;

        while let Some(ev) = q.pop() {
            let now = ev.time;
            match (ev.target, ev.payload) {
                (NodeId::Peer(p), Payload::Proposal(i)) => {
                    if behaviors[p.0 as usize] == Behavior::Silent {
                        continue;
                    }
                    let e = self.endorsers.get_mut(&p).expect("proposals go to endorsers");
                    if let Ok((result, endorsement)) = e.execute_chaincode(&self.chaincode, &txs[i]) {
                        q.push(
                            now + delay(&delay_model, &mut net),
                            NodeId::App(self.device_orgs[i]),
                            Payload::Endorsed {
                                tx: i,
                                result,
                                endorsement,
                            },
                        );
                    }
                }
                (
                    NodeId::App(o),
                    Payload::Endorsed {
                        tx,
                        result,
                        endorsement,
                    },
                ) => {
                    let pr = &mut progress[tx];
                    if pr.submitted {
                        continue;
                    }
                    pr.result.get_or_insert(result);
                    pr.endorsements.push(endorsement);
                    let required = &self.org_endorsers[o.0 as usize];
                    if required.iter().all(|r| pr.endorsements.iter().any(|e| e.peer == *r)) {
                        let etx = submit(pr, &txs[tx]);
                        q.push(
                            now + delay(&delay_model, &mut net),
                            NodeId::Orderer,
                            Payload::Submit(etx),
                        );
                    }
                }
                (NodeId::App(o), Payload::EndorseDeadline) => {
                    // Applications forward whatever they collected; peers
                    // label incomplete endorsements invalid.
                    for &i in &self.org_devices[o.0 as usize] {
                        if !progress[i].submitted {
                            let etx = submit(&mut progress[i], &txs[i]);
                            q.push(
                                now + delay(&delay_model, &mut net),
                                NodeId::Orderer,
                                Payload::Submit(etx),
                            );
                        }
                    }
                }
                (NodeId::Orderer, Payload::Submit(etx)) => {
                    submitted.push(*etx);
                    if submitted.len() < txs.len() {
                        continue;
                    }
                    let b = Arc::new(self.orderer.build_block(std::mem::take(&mut submitted))?);
                    broadcast_at = now;
                    if tracing {
                        trace.push(TraceRecord::Block {
                            slot,
                            time: now,
                            seq: b.seq,
                            digest: b.block_hash,
                            txs: b.txs.len(),
                        });
                    }
                    let started = Instant::now();
                    let world = &*self;
                    checks = par::map_range(n_peers, |p| world.check(p, &b));
                    timings.outlier_detection = started.elapsed().as_secs_f64();
                    for p in &self.peers {
                        q.push(
                            now + delay(&delay_model, &mut net),
                            NodeId::Peer(p.peer),
                            Payload::Block,
                        );
                        q.push(now + timeout, NodeId::Peer(p.peer), Payload::Timeout);
                    }
                    block = Some(b);
                }
                (NodeId::Peer(p), Payload::Block) => {
                    let b = block.as_ref().expect("block broadcast before delivery");
                    let pi = p.0 as usize;
                    match behaviors[pi] {
                        Behavior::Honest => {
                            let check = &checks[pi];
                            if let Some(step) = &check.step {
                                self.relays[pi].exclude(step.excluded_orgs.iter().copied());
                            }
                            let msg = ConsensusMessage {
                                kind: MessageKind::PrePrepare,
                                view: 0,
                                seq: b.seq,
                                digest: b.block_hash,
                                sender: NodeId::Orderer,
                            };
                            let ok = check.ok;
                            let actions = pbft[pi].on_message(&msg, &self.relays[pi], &mut |_| ok);
                            let mut ctx = ActionCtx {
                                slot,
                                now,
                                me: p,
                                relay: &self.relays[pi],
                                q: &mut q,
                                net: &mut net,
                                delay: &delay_model,
                                trace: tracing.then_some(&mut trace),
                            };
                            let (eq, decided) = ctx.apply(actions);
                            equivocations += eq;
                            decided_at[pi] = decided_at[pi].or(decided);
                        }
                        Behavior::Equivocate => {
                            let mut forged_bytes = b.block_hash.0.to_vec();
                            forged_bytes.extend_from_slice(&p.0.to_be_bytes());
                            let forged = Digest::of(&forged_bytes);
                            for kind in [MessageKind::Prepare, MessageKind::Commit] {
                                for digest in [b.block_hash, forged] {
                                    for other in self.peers.iter().filter(|x| x.peer != p) {
                                        let msg = ConsensusMessage {
                                            kind,
                                            view: 0,
                                            seq: b.seq,
                                            digest,
                                            sender: NodeId::Peer(p),
                                        };
                                        q.push(
                                            now + delay(&delay_model, &mut net),
                                            NodeId::Peer(other.peer),
                                            Payload::Vote(msg),
                                        );
                                    }
                                }
                            }
                        }
                        Behavior::Silent => {}
                    }
                }
                (NodeId::Peer(p), Payload::Vote(msg)) => {
                    let pi = p.0 as usize;
                    if behaviors[pi] != Behavior::Honest {
                        continue;
                    }
                    if tracing {
                        trace.push(TraceRecord::Deliver {
                            slot,
                            time: now,
                            to: p,
                            msg: msg.clone(),
                        });
                    }
                    let actions = pbft[pi].on_message(&msg, &self.relays[pi], &mut |_| false);
                    let mut ctx = ActionCtx {
                        slot,
                        now,
                        me: p,
                        relay: &self.relays[pi],
                        q: &mut q,
                        net: &mut net,
                        delay: &delay_model,
                        trace: tracing.then_some(&mut trace),
                    };
                    let (eq, decided) = ctx.apply(actions);
                    equivocations += eq;
                    decided_at[pi] = decided_at[pi].or(decided);
                }
                (NodeId::Peer(p), Payload::Timeout) => {
                    let pi = p.0 as usize;
                    if behaviors[pi] == Behavior::Honest && pbft[pi].on_timeout() && tracing {
                        trace.push(TraceRecord::Timeout {
                            slot,
                            time: now,
                            peer: p,
                        });
                    }
                }
                (target, _) => unreachable!("no handler for event at {target}"),
            }
        }
        let end = q.now();
        let block = block.expect("every slot produces a block");

        let reference = (0..n_peers).find(|&p| behaviors[p] == Behavior::Honest).unwrap_or(0);
        let voters: Vec<usize> = (0..n_peers)
            .filter(|&p| behaviors[p] == Behavior::Honest && !self.relays[p].is_excluded(PeerId(p as u32)))
            .collect();
        let decisions: Vec<Decision> = voters.iter().map(|&p| pbft[p].decision()).collect();
        let (outcome, _) = decide_block(&decisions);
        timings.consensus = (wall.elapsed().as_secs_f64() - timings.outlier_detection).max(0.0);

        let ref_check = &checks[reference];
        let step = ref_check.step.as_ref();
        let report = step.and_then(|s| s.report.as_ref());
        if tracing {
            trace.push(TraceRecord::Outcome {
                slot,
                time: end,
                outcome,
                active: pbft[reference].active_set().len(),
                quorum: pbft[reference].quorum(),
            });
        }

        if outcome == SlotOutcome::Success {
            let started = Instant::now();
            for (p, ledger) in self.ledgers.iter_mut().enumerate() {
                ledger.append_block(block.clone(), checks[p].labels.clone(), None)?;
            }
            timings.state_update = started.elapsed().as_secs_f64();

            let started = Instant::now();
            if let Some(step) = step {
                let flagged = report.map(|r| r.flagged_features.clone()).unwrap_or_default();
                for ledger in &mut self.ledgers {
                    ledger.record_column(step.fused.clone(), flagged.clone())?;
                }
            }
            timings.dataset_update = started.elapsed().as_secs_f64();

            self.orderer.advance(&block);
            self.committed += 1;
            if tracing {
                for (o, devs) in self.org_devices.iter().enumerate() {
                    if !devs.is_empty() {
                        trace.push(TraceRecord::Notify {
                            slot,
                            time: end,
                            app: OrgId(o as u32).app_id(),
                        });
                    }
                }
            }
            let interval = self.cfg.model_update_interval;
            if let Some(model) = &self.model {
                if interval > 0 && self.committed.is_multiple_of(interval) {
                    let started = Instant::now();
                    let window = &self.ledgers[reference].world().window;
                    if let Ok(m) = model.update(window, &self.cfg.detector.detector_config()) {
                        self.model = Some(Arc::new(m));
                    }
                    timings.model_update = started.elapsed().as_secs_f64();
                }
            }
        }
        for e in self.endorsers.values_mut() {
            e.discard_proposals();
        }

        let flagged_devices: BTreeSet<usize> = report
            .map(|r| r.flagged_devices.iter().copied().collect())
            .unwrap_or_default();
        let malicious = truth.iter().filter(|&&m| m).count();
        let detected = flagged_devices.iter().filter(|&&n| truth[n]).count();
        let false_alarms = flagged_devices.len() - detected;
        let active = self.relays[reference].active_set();
        let byzantine_active = active
            .iter()
            .filter(|p| behaviors[p.0 as usize] != Behavior::Honest)
            .count();
        let count = |v: Validity| ref_check.labels.iter().filter(|&&l| l == v).count();
        let consensus_ticks = match outcome {
            SlotOutcome::Success => voters
                .iter()
                .filter_map(|&p| decided_at[p])
                .max()
                .unwrap_or(broadcast_at)
                .saturating_sub(broadcast_at),
            _ => timeout,
        };
        let slot_report = SlotReport {
            slot,
            outcome,
            block_seq: block.seq,
            block_hash: block.block_hash,
            flagged_devices: flagged_devices
                .iter()
                .map(|&n| self.layout.names()[n].clone())
                .collect(),
            excluded_orgs: step
                .map(|s| s.excluded_orgs.iter().map(|o| o.0).collect())
                .unwrap_or_default(),
            max_residual_ratio: match (report, &self.model) {
                (Some(r), Some(m)) => m.max_residual_ratio(r),
                _ => 0.0,
            },
            devices: truth.len(),
            malicious,
            detected,
            false_alarms,
            peers: n_peers,
            byzantine_peers: behaviors.iter().filter(|&&b| b != Behavior::Honest).count(),
            active_peers: active.len(),
            byzantine_active,
            equivocations,
            txs: block.txs.len(),
            valid: count(Validity::Valid),
            invalid_endorsement: count(Validity::InvalidEndorsement),
            rejected: count(Validity::OutlierRejected),
            consensus_ticks,
            slot_ticks: end - t0,
        };
        self.clock = end;
        Ok(SlotRun {
            report: slot_report,
            timings,
            trace,
        })
    }
}

fn submit(pr: &mut TxProgress, tx: &Transaction) -> Box<EndorsedTransaction> {
    pr.submitted = true;
    let mut endorsements = pr.endorsements.clone();
    endorsements.sort_by_key(|e| e.peer);
    let result = pr.result.clone().unwrap_or_else(|| WriteSet {
        device_id: tx.reading.device_id.clone(),
        values: tx.reading.values.clone(),
    });
    Box::new(EndorsedTransaction {
        tx: tx.clone(),
        result,
        endorsements,
    })
}

fn delay(model: &DelayModel, rng: &mut ChaCha8Rng) -> u64 {
    match *model {
        DelayModel::Fixed { ticks } => ticks,
        DelayModel::Uniform { min, max } => rng.random_range(min..=max),
    }
}

/// Splits a fused measurement into per-device readings.
pub fn split_readings(layout: &DeviceLayout, slot: u64, d: &nalgebra::DVector<f64>) -> Vec<DeviceReading> {
    (0..layout.device_count())
        .map(|n| {
            let span = layout.span_of(n);
            DeviceReading::new(layout.names()[n].clone(), slot, d.as_slice()[span].to_vec())
        })
        .collect()
}

struct ActionCtx<'a> {
    slot: u64,
    now: u64,
    me: PeerId,
    relay: &'a RelaySwitch,
    q: &'a mut EventQueue<Payload>,
    net: &'a mut ChaCha8Rng,
    delay: &'a DelayModel,
    trace: Option<&'a mut Vec<TraceRecord>>,
}

impl ActionCtx<'_> {
    /// Sends broadcasts and records trace lines; returns the number of
    /// equivocations seen and the decision time, if any.
    fn apply(&mut self, actions: Vec<Action>) -> (usize, Option<u64>) {
        let (slot, time, peer) = (self.slot, self.now, self.me);
        let mut equivocations = 0;
        let mut decided = None;
        for a in actions {
            let record = match a {
                Action::Broadcast(m) => {
                    for to in self.relay.trusted_set(self.me) {
                        if to != self.me {
                            let at = self.now + delay(self.delay, self.net);
                            self.q.push(at, NodeId::Peer(to), Payload::Vote(m.clone()));
                        }
                    }
                    None
                }
                Action::Buffered => None,
                Action::Dropped { sender, reason } => Some(TraceRecord::Drop {
                    slot,
                    time,
                    peer,
                    sender,
                    reason,
                }),
                Action::Transition(phase) => Some(TraceRecord::Transition {
                    slot,
                    time,
                    peer,
                    phase,
                }),
                Action::Equivocation(sender) => {
                    equivocations += 1;
                    Some(TraceRecord::Equivocation {
                        slot,
                        time,
                        peer,
                        sender,
                    })
                }
                Action::Decided(digest) => {
                    decided = Some(self.now);
                    Some(TraceRecord::Decided {
                        slot,
                        time,
                        peer,
                        digest,
                    })
                }
            };
            if let (Some(t), Some(r)) = (self.trace.as_deref_mut(), record) {
                t.push(r);
            }
        }
        (equivocations, decided)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format: &'static str,
    pub version: u32,
    pub prng: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub slots: u64,
    pub outcome: SlotOutcome,
    pub successes: u64,
    pub consensus_failures: u64,
    pub safety_violations: u64,
    pub success_rate: f64,
    pub detector_enabled: bool,
    pub detector_rank: Option<usize>,
    pub device_slots: u64,
    pub malicious_device_slots: u64,
    pub detected: u64,
    pub false_alarms: u64,
    pub f_raw: f64,
    pub p_d: Option<f64>,
    pub p_fa: Option<f64>,
    pub mean_post_filter_fault_ratio: f64,
    pub tolerance_bound: Option<f64>,
    pub mean_byzantine_active_ratio: f64,
    pub max_byzantine_active_ratio: f64,
    pub min_detected_malicious: Option<usize>,
    pub txs: u64,
    pub valid: u64,
    pub invalid_endorsement: u64,
    pub rejected: u64,
    pub mean_consensus_ticks: f64,
    pub chain_length: usize,
    pub chain_head: Digest,
}

impl Summary {
    pub fn from_reports(
        cfg: &ScenarioConfig,
        reports: &[SlotReport],
        rank: Option<usize>,
        chain: &[CommittedBlock],
    ) -> Self {
        let sum = |f: fn(&SlotReport) -> usize| reports.iter().map(f).sum::<usize>() as u64;
        let n = reports.len().max(1) as f64;
        let successes = reports.iter().filter(|r| r.outcome == SlotOutcome::Success).count() as u64;
        let safety_violations = reports
            .iter()
            .filter(|r| r.outcome == SlotOutcome::SafetyViolation)
            .count() as u64;
        let consensus_failures = reports.len() as u64 - successes - safety_violations;
        let outcome = if safety_violations > 0 {
            SlotOutcome::SafetyViolation
        } else if successes > consensus_failures {
            SlotOutcome::Success
        } else {
            SlotOutcome::ConsensusFailure
        };
        let device_slots = sum(|r| r.devices);
        let malicious = sum(|r| r.malicious);
        let detected = sum(|r| r.detected);
        let false_alarms = sum(|r| r.false_alarms);
        let clean = device_slots - malicious;
        let p_d = (malicious > 0).then(|| detected as f64 / malicious as f64);
        let p_fa = (clean > 0).then(|| false_alarms as f64 / clean as f64);
        let f_raw = if device_slots > 0 {
            malicious as f64 / device_slots as f64
        } else {
            0.0
        };
        let tolerance_bound =
            (rank.is_some()).then(|| f_raw * (1.0 - p_d.unwrap_or(0.0)) + (1.0 - f_raw) * p_fa.unwrap_or(0.0));
        let head = chain.last().map(|c| c.block.block_hash).unwrap_or_default();
        Self {
            format: "aibc-run-summary",
            version: 1,
            prng: PRNG_NAME,
            seed: cfg.seed,
            config_hash: cfg.hash16(),
            slots: reports.len() as u64,
            outcome,
            successes,
            consensus_failures,
            safety_violations,
            success_rate: successes as f64 / n,
            detector_enabled: cfg.detector.enabled,
            detector_rank: rank,
            device_slots,
            malicious_device_slots: malicious,
            detected,
            false_alarms,
            f_raw,
            p_d,
            p_fa,
            mean_post_filter_fault_ratio: reports.iter().map(SlotReport::post_filter_fault_ratio).sum::<f64>() / n,
            tolerance_bound,
            mean_byzantine_active_ratio: reports.iter().map(SlotReport::byzantine_active_ratio).sum::<f64>() / n,
            max_byzantine_active_ratio: reports
                .iter()
                .map(SlotReport::byzantine_active_ratio)
                .fold(0.0, f64::max),
            min_detected_malicious: reports.iter().filter(|r| r.malicious > 0).map(|r| r.detected).min(),
            txs: sum(|r| r.txs),
            valid: sum(|r| r.valid),
            invalid_endorsement: sum(|r| r.invalid_endorsement),
            rejected: sum(|r| r.rejected),
            mean_consensus_ticks: reports.iter().map(|r| r.consensus_ticks as f64).sum::<f64>() / n,
            chain_length: chain.len(),
            chain_head: head,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the per-message consensus trace.
    pub trace: bool,
}

/// A finished scenario with everything needed to write its run directory.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub reports: Vec<SlotReport>,
    pub timings: Vec<Timings>,
    pub trace: Vec<TraceRecord>,
    pub summary: Summary,
    pub chain: Vec<CommittedBlock>,
    pub world_csv: Vec<u8>,
}

/// Trains on clean slots, then simulates `cfg.slots` slots.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<ScenarioRun, SimError> {
    let mut world = World::new(cfg, opts.trace)?;
    let first = world.first_slot();
    let mut reports = Vec::with_capacity(cfg.slots as usize);
    let mut timings = Vec::with_capacity(cfg.slots as usize);
    let mut trace = Vec::new();
    for t in first..first + cfg.slots {
        let run = world.run_slot(t)?;
        reports.push(run.report);
        timings.push(run.timings);
        trace.extend(run.trace);
    }
    let reference = world
        .peers()
        .iter()
        .find(|p| !world.fixed_byzantine.contains(&p.peer))
        .map_or(PeerId(0), |p| p.peer);
    let ledger = world.ledger(reference);
    let chain = ledger.chain().to_vec();
    let mut world_csv = Vec::new();
    ledger.write_world_csv(&mut world_csv)?;
    let summary = Summary::from_reports(cfg, &reports, world.model().map(DetectorModel::rank), &chain);
    Ok(ScenarioRun {
        config: cfg.clone(),
        reports,
        timings,
        trace,
        summary,
        chain,
        world_csv,
    })
}

/// Runs independent scenarios on the worker pool; results keep input order.
pub fn run_many(cfgs: &[ScenarioConfig], opts: &RunOptions) -> Vec<Result<ScenarioRun, SimError>> {
    par::map_slice(cfgs, |c| run_scenario(c, opts))
}
