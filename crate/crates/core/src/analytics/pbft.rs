//! A single PBFT instance over a flat peer set with random message delays,
//! used to measure commit rates without the full ledger pipeline.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::consensus::{
    decide_block, Action, Behavior, ConsensusMessage, Decision, MessageKind, PbftState, PeerIdentity, RelaySwitch,
    SlotOutcome,
};
use crate::ids::{NodeId, OrgId, PeerId};
use crate::ledger::Digest;
use crate::netsim::events::EventQueue;

const MAX_DELAY: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PbftTrial {
    pub outcome: SlotOutcome,
    pub active: usize,
    pub byzantine_active: usize,
    pub decisions: Vec<Decision>,
    pub equivocations: usize,
}

/// Runs one instance in which the orderer proposes a block, the peers of
/// `excluded` organizations are left out of the vote, and Byzantine peers
/// behave per their identity. Pending instances time out once the network
/// drains.
pub fn run_pbft_trial(peers: &[PeerIdentity], excluded: &BTreeSet<OrgId>, rng: &mut ChaCha8Rng) -> PbftTrial {
    let mut relay = RelaySwitch::new(peers, 1).expect("quarantine of one slot");
    relay.exclude(excluded.iter().copied());
    let real = Digest::of(b"block");
    let forged = Digest::of(b"forged");
    let msg = |kind, digest, sender| ConsensusMessage {
        kind,
        view: 0,
        seq: 1,
        digest,
        sender,
    };

    let mut states: Vec<PbftState> = peers.iter().map(|p| PbftState::new(p.peer, 1)).collect();
    let mut q: EventQueue<ConsensusMessage> = EventQueue::new(0);
    for p in peers {
        let at = rng.random_range(1..=MAX_DELAY);
        q.push(
            at,
            NodeId::Peer(p.peer),
            msg(MessageKind::PrePrepare, real, NodeId::Orderer),
        );
    }
    let mut equivocations = 0;
    while let Some(ev) = q.pop() {
        let NodeId::Peer(me) = ev.target else { continue };
        let idx = me.0 as usize;
        match peers[idx].behavior {
            Behavior::Silent => {}
            Behavior::Equivocate => {
                if ev.payload.kind == MessageKind::PrePrepare && !relay.is_excluded(me) {
                    for to in relay.trusted_set(me) {
                        if to == me {
                            continue;
                        }
                        let d = if to.0 % 2 == 0 { real } else { forged };
                        for kind in [MessageKind::Prepare, MessageKind::Commit] {
                            let at = q.now() + rng.random_range(1..=MAX_DELAY);
                            q.push(at, NodeId::Peer(to), msg(kind, d, NodeId::Peer(me)));
                        }
                    }
                }
            }
            Behavior::Honest => {
                let actions = states[idx].on_message(&ev.payload, &relay, &mut |d| *d == real);
                for a in actions {
                    match a {
                        Action::Broadcast(m) => {
                            for to in relay.trusted_set(me) {
                                if to != me {
                                    let at = q.now() + rng.random_range(1..=MAX_DELAY);
                                    q.push(at, NodeId::Peer(to), m.clone());
                                }
                            }
                        }
                        Action::Equivocation(_) => equivocations += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    for s in &mut states {
        s.on_timeout();
    }
    let voters: Vec<usize> = peers
        .iter()
        .enumerate()
        .filter(|(_, p)| p.behavior == Behavior::Honest && !relay.is_excluded(p.peer))
        .map(|(i, _)| i)
        .collect();
    let decisions: Vec<Decision> = voters.iter().map(|&i| states[i].decision()).collect();
    let (outcome, _) = decide_block(&decisions);
    let active: BTreeSet<PeerId> = relay.active_set();
    PbftTrial {
        outcome,
        active: active.len(),
        byzantine_active: peers
            .iter()
            .filter(|p| p.is_byzantine() && active.contains(&p.peer))
            .count(),
        decisions,
        equivocations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::PeerKind;
    use crate::synth::rng_for;

    fn peers(n: u32, bad: u32, behavior: Behavior) -> Vec<PeerIdentity> {
        (0..n)
            .map(|i| PeerIdentity {
                peer: PeerId(i),
                org: OrgId(i),
                kind: PeerKind::Endorsing,
                behavior: if i < bad { behavior } else { Behavior::Honest },
            })
            .collect()
    }

    #[test]
    fn silent_boundary() {
        for seed in 0..20 {
            let ok = run_pbft_trial(&peers(10, 3, Behavior::Silent), &BTreeSet::new(), &mut rng_for(seed, 0));
            assert_eq!(ok.outcome, SlotOutcome::Success);
            let bad = run_pbft_trial(&peers(10, 4, Behavior::Silent), &BTreeSet::new(), &mut rng_for(seed, 0));
            assert_eq!(bad.outcome, SlotOutcome::ConsensusFailure);
            assert!(bad.decisions.iter().all(|d| *d == Decision::TimedOut));
        }
    }

    #[test]
    fn excluding_silent_orgs_restores_liveness() {
        let p = peers(10, 4, Behavior::Silent);
        let excluded: BTreeSet<OrgId> = (0..2).map(OrgId).collect();
        let r = run_pbft_trial(&p, &excluded, &mut rng_for(3, 0));
        assert_eq!((r.active, r.byzantine_active), (8, 2));
        assert_eq!(r.outcome, SlotOutcome::Success);
    }

    #[test]
    fn equivocators_within_budget_are_safe() {
        for seed in 0..20 {
            let r = run_pbft_trial(
                &peers(10, 3, Behavior::Equivocate),
                &BTreeSet::new(),
                &mut rng_for(seed, 1),
            );
            assert_ne!(r.outcome, SlotOutcome::SafetyViolation);
        }
    }
}
