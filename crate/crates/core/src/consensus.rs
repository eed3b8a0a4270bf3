//! Two-step consensus: the detector step that drives the relay switch, and a
//! single-view PBFT instance per block among the peers left active.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectorError, DetectorModel, OutlierReport};
use crate::fusion::{fuse, DeviceLayout, FusedVector, FusionError};
use crate::ids::{NodeId, OrgId, PeerId};
use crate::ledger::{Block, Digest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("block readings do not fit the layout: {0}")]
    Layout(#[from] FusionError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("device `{0}` has no owning organization")]
    UnownedDevice(String),
    #[error("quarantine must cover at least the current block")]
    ZeroQuarantine,
    #[error("tolerance inputs must lie in [0, 1]")]
    OutOfRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerKind {
    Endorsing,
    Regular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Sends nothing: no endorsements, no votes.
    Silent,
    /// Votes for the real digest and a forged one to every peer.
    Equivocate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerIdentity {
    pub peer: PeerId,
    pub org: OrgId,
    pub kind: PeerKind,
    pub behavior: Behavior,
}

impl PeerIdentity {
    pub fn is_byzantine(&self) -> bool {
        self.behavior != Behavior::Honest
    }
}

/// One peer's view of which organizations are currently untrusted.
///
/// Every honest peer owns a switch and feeds it from its own detector; since
/// the detector is deterministic over the same block, honest switches agree.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaySwitch {
    orgs: BTreeMap<PeerId, OrgId>,
    excluded: BTreeSet<OrgId>,
    quarantine: BTreeMap<OrgId, u32>,
    quarantine_slots: u32,
}

impl RelaySwitch {
    /// `quarantine_slots` counts the current block, so 1 excludes an
    /// organization for the block that implicated it only.
    pub fn new(peers: &[PeerIdentity], quarantine_slots: u32) -> Result<Self, ConsensusError> {
        if quarantine_slots == 0 {
            return Err(ConsensusError::ZeroQuarantine);
        }
        Ok(Self {
            orgs: peers.iter().map(|p| (p.peer, p.org)).collect(),
            excluded: BTreeSet::new(),
            quarantine: BTreeMap::new(),
            quarantine_slots,
        })
    }

    /// Ages quarantine counters at a slot boundary.
    pub fn begin_slot(&mut self) {
        self.quarantine.retain(|_, left| {
            *left -= 1;
            *left > 0
        });
        self.excluded = self.quarantine.keys().copied().collect();
    }

    pub fn exclude(&mut self, orgs: impl IntoIterator<Item = OrgId>) {
        for org in orgs {
            let left = self.quarantine.entry(org).or_insert(0);
            *left = (*left).max(self.quarantine_slots);
            self.excluded.insert(org);
        }
    }

    pub fn excluded_orgs(&self) -> &BTreeSet<OrgId> {
        &self.excluded
    }

    pub fn is_excluded(&self, peer: PeerId) -> bool {
        self.orgs.get(&peer).is_none_or(|o| self.excluded.contains(o))
    }

    /// Whether `observer` accepts messages from `sender`. Unknown senders and
    /// members of excluded organizations are never trusted.
    pub fn trusts(&self, _observer: PeerId, sender: PeerId) -> bool {
        !self.is_excluded(sender)
    }

    pub fn trusted_set(&self, observer: PeerId) -> BTreeSet<PeerId> {
        self.orgs
            .keys()
            .copied()
            .filter(|&p| self.trusts(observer, p))
            .collect()
    }

    /// Peers of non-excluded organizations.
    pub fn active_set(&self) -> BTreeSet<PeerId> {
        self.orgs
            .iter()
            .filter(|(_, o)| !self.excluded.contains(o))
            .map(|(&p, _)| p)
            .collect()
    }
}

/// Result of the detector step on one block.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOne {
    pub fused: FusedVector,
    pub report: Option<OutlierReport>,
    /// Organizations owning a flagged device.
    pub excluded_orgs: BTreeSet<OrgId>,
    /// Per transaction of the block: carries a flagged device's reading.
    pub rejected: Vec<bool>,
}

/// Fuses the block's readings into one vector.
pub fn fuse_block(block: &Block, layout: &DeviceLayout) -> Result<FusedVector, FusionError> {
    fuse(block.txs.iter().map(|t| &t.tx.reading), layout)
}

/// Runs the detector on the block and maps flagged devices to organizations.
/// With no model the block is fused but nothing is flagged.
pub fn detector_step(
    block: &Block,
    layout: &DeviceLayout,
    model: Option<&DetectorModel>,
    device_orgs: &BTreeMap<String, OrgId>,
) -> Result<StepOne, ConsensusError> {
    let fused = fuse_block(block, layout)?;
    let Some(model) = model else {
        return Ok(StepOne {
            fused,
            report: None,
            excluded_orgs: BTreeSet::new(),
            rejected: vec![false; block.txs.len()],
        });
    };
    let report = model.detect(&fused)?;
    let flagged: BTreeSet<&str> = report.flagged_device_names(layout).into_iter().collect();
    let excluded_orgs = flagged
        .iter()
        .map(|d| {
            device_orgs
                .get(*d)
                .copied()
                .ok_or_else(|| ConsensusError::UnownedDevice(d.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let rejected = block
        .txs
        .iter()
        .map(|t| flagged.contains(t.tx.reading.device_id.as_str()))
        .collect();
    Ok(StepOne {
        fused,
        report: Some(report),
        excluded_orgs,
        rejected,
    })
}

/// Fault budget and quorum for `active` peers.
pub fn pbft_quorum(active: usize) -> (usize, usize) {
    let f = active.saturating_sub(1) / 3;
    (f, 2 * f + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    PrePrepare,
    Prepare,
    Commit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusMessage {
    pub kind: MessageKind,
    pub view: u64,
    pub seq: u64,
    pub digest: Digest,
    pub sender: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    PrePrepared,
    Prepared,
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "digest")]
pub enum Decision {
    Pending,
    Committed(Digest),
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    WrongView,
    WrongSequence,
    NotPrimary,
    DuplicatePrePrepare,
    InvalidBlock,
    Untrusted,
    Duplicate,
    Equivocator,
    Decided,
}

/// Effects of one message on a peer's PBFT state.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Send to every trusted peer other than self.
    Broadcast(ConsensusMessage),
    Dropped {
        sender: NodeId,
        reason: DropReason,
    },
    Buffered,
    Transition(Phase),
    Equivocation(PeerId),
    Decided(Digest),
}

/// One peer's single-view PBFT instance for one sequence number.
#[derive(Debug, Clone)]
pub struct PbftState {
    me: PeerId,
    seq: u64,
    phase: Phase,
    accepted: Option<Digest>,
    active: BTreeSet<PeerId>,
    quorum: usize,
    prepare_votes: BTreeMap<Digest, BTreeSet<PeerId>>,
    commit_votes: BTreeMap<Digest, BTreeSet<PeerId>>,
    prepare_seen: BTreeMap<PeerId, Digest>,
    commit_seen: BTreeMap<PeerId, Digest>,
    equivocators: BTreeSet<PeerId>,
    buffered: Vec<ConsensusMessage>,
    decision: Decision,
}

impl PbftState {
    pub fn new(me: PeerId, seq: u64) -> Self {
        Self {
            me,
            seq,
            phase: Phase::Idle,
            accepted: None,
            active: BTreeSet::new(),
            quorum: usize::MAX,
            prepare_votes: BTreeMap::new(),
            commit_votes: BTreeMap::new(),
            prepare_seen: BTreeMap::new(),
            commit_seen: BTreeMap::new(),
            equivocators: BTreeSet::new(),
            buffered: Vec::new(),
            decision: Decision::Pending,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn active_set(&self) -> &BTreeSet<PeerId> {
        &self.active
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn equivocators(&self) -> &BTreeSet<PeerId> {
        &self.equivocators
    }

    pub fn prepare_count(&self, d: &Digest) -> usize {
        self.prepare_votes.get(d).map_or(0, BTreeSet::len)
    }

    pub fn commit_count(&self, d: &Digest) -> usize {
        self.commit_votes.get(d).map_or(0, BTreeSet::len)
    }

    /// Handles one delivered message. `validate` runs the local block checks
    /// on a pre-prepare (and updates `relay` before returning, if the caller
    /// wires it that way); the active set is read from `relay` right after.
    pub fn on_message(
        &mut self,
        msg: &ConsensusMessage,
        relay: &RelaySwitch,
        validate: &mut dyn FnMut(&Digest) -> bool,
    ) -> Vec<Action> {
        let mut out = Vec::new();
        self.handle(msg, relay, validate, &mut out);
        out
    }

    /// Marks the instance failed if it has not committed.
    pub fn on_timeout(&mut self) -> bool {
        if self.decision == Decision::Pending {
            self.decision = Decision::TimedOut;
            true
        } else {
            false
        }
    }

    fn handle(
        &mut self,
        msg: &ConsensusMessage,
        relay: &RelaySwitch,
        validate: &mut dyn FnMut(&Digest) -> bool,
        out: &mut Vec<Action>,
    ) {
        let drop = |reason| Action::Dropped {
            sender: msg.sender,
            reason,
        };
        if self.decision != Decision::Pending {
            out.push(drop(DropReason::Decided));
            return;
        }
        if msg.view != 0 {
            out.push(drop(DropReason::WrongView));
            return;
        }
        if msg.seq != self.seq {
            out.push(drop(DropReason::WrongSequence));
            return;
        }
        match msg.kind {
            MessageKind::PrePrepare => self.on_preprepare(msg, relay, validate, out),
            MessageKind::Prepare | MessageKind::Commit => {
                let NodeId::Peer(sender) = msg.sender else {
                    out.push(drop(DropReason::Untrusted));
                    return;
                };
                if self.phase == Phase::Idle {
                    self.buffered.push(msg.clone());
                    out.push(Action::Buffered);
                    return;
                }
                if !relay.trusts(self.me, sender) || !self.active.contains(&sender) {
                    out.push(drop(DropReason::Untrusted));
                    return;
                }
                self.record_vote(msg.kind, sender, msg.digest, out);
                self.advance(out);
            }
        }
    }

    fn on_preprepare(
        &mut self,
        msg: &ConsensusMessage,
        relay: &RelaySwitch,
        validate: &mut dyn FnMut(&Digest) -> bool,
        out: &mut Vec<Action>,
    ) {
        let drop = |reason| Action::Dropped {
            sender: msg.sender,
            reason,
        };
        if msg.sender != NodeId::Orderer {
            out.push(drop(DropReason::NotPrimary));
            return;
        }
        if self.phase != Phase::Idle {
            out.push(drop(DropReason::DuplicatePrePrepare));
            return;
        }
        if !validate(&msg.digest) {
            out.push(drop(DropReason::InvalidBlock));
            return;
        }
        self.active = relay.active_set();
        self.quorum = pbft_quorum(self.active.len()).1;
        self.accepted = Some(msg.digest);
        self.phase = Phase::PrePrepared;
        out.push(Action::Transition(Phase::PrePrepared));
        if !self.active.contains(&self.me) {
            // Excluded peers follow the block but do not vote.
            self.buffered.clear();
            return;
        }
        self.record_vote(MessageKind::Prepare, self.me, msg.digest, out);
        out.push(Action::Broadcast(self.vote(MessageKind::Prepare, msg.digest)));
        for m in std::mem::take(&mut self.buffered) {
            self.handle(&m, relay, validate, out);
        }
        self.advance(out);
    }

    fn vote(&self, kind: MessageKind, digest: Digest) -> ConsensusMessage {
        ConsensusMessage {
            kind,
            view: 0,
            seq: self.seq,
            digest,
            sender: NodeId::Peer(self.me),
        }
    }

    fn record_vote(&mut self, kind: MessageKind, sender: PeerId, digest: Digest, out: &mut Vec<Action>) {
        if self.equivocators.contains(&sender) {
            out.push(Action::Dropped {
                sender: NodeId::Peer(sender),
                reason: DropReason::Equivocator,
            });
            return;
        }
        let (seen, votes) = match kind {
            MessageKind::Prepare => (&mut self.prepare_seen, &mut self.prepare_votes),
            _ => (&mut self.commit_seen, &mut self.commit_votes),
        };
        match seen.get(&sender) {
            Some(d) if *d == digest => out.push(Action::Dropped {
                sender: NodeId::Peer(sender),
                reason: DropReason::Duplicate,
            }),
            Some(_) => {
                // Conflicting votes: discard everything this sender said.
                self.equivocators.insert(sender);
                for map in [&mut self.prepare_votes, &mut self.commit_votes] {
                    map.values_mut().for_each(|s| {
                        s.remove(&sender);
                    });
                }
                out.push(Action::Equivocation(sender));
            }
            None => {
                seen.insert(sender, digest);
                votes.entry(digest).or_default().insert(sender);
            }
        }
    }

    fn advance(&mut self, out: &mut Vec<Action>) {
        let Some(d) = self.accepted else { return };
        if self.phase == Phase::PrePrepared && self.prepare_count(&d) >= self.quorum {
            self.phase = Phase::Prepared;
            out.push(Action::Transition(Phase::Prepared));
            self.record_vote(MessageKind::Commit, self.me, d, out);
            out.push(Action::Broadcast(self.vote(MessageKind::Commit, d)));
        }
        if self.phase == Phase::Prepared && self.commit_count(&d) >= self.quorum {
            self.phase = Phase::Committed;
            self.decision = Decision::Committed(d);
            out.push(Action::Transition(Phase::Committed));
            out.push(Action::Decided(d));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotOutcome {
    Success,
    ConsensusFailure,
    SafetyViolation,
}

impl SlotOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotOutcome::Success => "success",
            SlotOutcome::ConsensusFailure => "consensus-failure",
            SlotOutcome::SafetyViolation => "safety-violation",
        }
    }
}

/// Combines the terminal decisions of the honest, non-excluded peers.
/// Anything short of a unanimous commit (including a partial one) is a
/// failure, and nobody appends the block.
pub fn decide_block(decisions: &[Decision]) -> (SlotOutcome, Option<Digest>) {
    let committed: BTreeSet<Digest> = decisions
        .iter()
        .filter_map(|d| match d {
            Decision::Committed(x) => Some(*x),
            _ => None,
        })
        .collect();
    if committed.len() > 1 {
        return (SlotOutcome::SafetyViolation, None);
    }
    match committed.first() {
        Some(&d) if decisions.iter().all(|x| *x == Decision::Committed(d)) => (SlotOutcome::Success, Some(d)),
        _ => (SlotOutcome::ConsensusFailure, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceInputs {
    pub f_raw: f64,
    pub p_d: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceBound {
    pub f_det: f64,
    pub within: bool,
}

/// Fault ratio left after filtering: undetected malicious plus falsely
/// flagged intact participants.
pub fn tolerance_bound(inputs: ToleranceInputs) -> Result<ToleranceBound, ConsensusError> {
    let ToleranceInputs { f_raw, p_d, p_fa } = inputs;
    if ![f_raw, p_d, p_fa].iter().all(|x| (0.0..=1.0).contains(x)) {
        return Err(ConsensusError::OutOfRange);
    }
    let f_det = f_raw * (1.0 - p_d) + (1.0 - f_raw) * p_fa;
    Ok(ToleranceBound {
        f_det,
        within: f_det <= 1.0 / 3.0,
    })
}
