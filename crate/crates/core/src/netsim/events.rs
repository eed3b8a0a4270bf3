//! Discrete-event queue ordered by (time, insertion order).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::ids::NodeId;

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub time: u64,
    pub target: NodeId,
    pub payload: P,
    seq: u64,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    next_seq: u64,
    now: u64,
}

impl<P> EventQueue<P> {
    pub fn new(start: u64) -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: start,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `payload` for `target`; times in the past are clamped to now.
    pub fn push(&mut self, time: u64, target: NodeId, payload: P) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent {
            time: time.max(self.now),
            target,
            payload,
            seq,
        });
    }

    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let ev = self.heap.pop()?;
        self.now = ev.time;
        Some(ev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::PeerId;

    #[test]
    fn ties_break_by_insertion() {
        let mut q = EventQueue::new(0);
        q.push(5, NodeId::Orderer, "c");
        q.push(2, NodeId::Peer(PeerId(1)), "a");
        q.push(5, NodeId::Orderer, "d");
        q.push(2, NodeId::Peer(PeerId(0)), "b");
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| e.payload).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
        assert_eq!(q.now(), 5);
        q.push(1, NodeId::Orderer, "late");
        assert_eq!(q.pop().unwrap().time, 5);
    }
}
