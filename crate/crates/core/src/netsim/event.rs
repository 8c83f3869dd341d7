//! Event queue with deterministic (time, insertion order) dispatch.

use std::collections::BTreeMap;

/// Sort key for a scheduled event. Ties on time break by insertion order,
/// so replaying the same schedule yields the same dispatch order.
pub type ScheduledAt = (u64, u64);

pub struct EventQueue<E> {
    map: BTreeMap<ScheduledAt, E>,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            map: BTreeMap::new(),
            next_seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_ns: u64, event: E) -> ScheduledAt {
        let key = (time_ns, self.next_seq);
        self.next_seq += 1;
        self.map.insert(key, event);
        key
    }

    /// Next event time without dequeuing.
    pub fn peek_time(&self) -> Option<u64> {
        self.map.keys().next().map(|&(t, _)| t)
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        self.map.pop_first().map(|((t, _), e)| (t, e))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
