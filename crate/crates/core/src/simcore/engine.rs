use std::collections::BTreeMap;

use thiserror::Error;

use super::time::SimTime;
use super::trace::Trace;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock already reads {now}")]
    PastTime { at: SimTime, now: SimTime },
}

/// Handle returned by [`EventQueue::schedule`]; valid until the event fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId {
    at: SimTime,
    seq: u64,
}

impl EventId {
    pub fn at(&self) -> SimTime {
        self.at
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

/// An event popped from the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<E> {
    pub at: SimTime,
    pub seq: u64,
    pub payload: E,
}

/// Pending events ordered by `(at, seq)`.
///
/// `seq` is a counter assigned at scheduling time, so events that share a
/// timestamp fire in the order they were scheduled.
#[derive(Debug, Clone)]
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    pending: BTreeMap<(SimTime, u64), E>,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue { now: SimTime::ZERO, next_seq: 0, pending: BTreeMap::new(), dispatched: 0 }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Number of events handed out by [`EventQueue::pop_next`] so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, at: SimTime, payload: E) -> Result<EventId, EngineError> {
        if at < self.now {
            return Err(EngineError::PastTime { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert((at, seq), payload);
        Ok(EventId { at, seq })
    }

    /// Schedule `delay` ns after the current time. Never fails.
    pub fn schedule_in(&mut self, delay: u64, payload: E) -> EventId {
        let at = self.now + delay;
        self.schedule(at, payload).expect("future time")
    }

    /// Remove a pending event. Returns the payload if it had not fired yet.
    pub fn cancel(&mut self, id: EventId) -> Option<E> {
        self.pending.remove(&(id.at, id.seq))
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.pending.contains_key(&(id.at, id.seq))
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.pending.keys().next().map(|k| k.0)
    }

    /// Pop the earliest event if it is due at or before `deadline`, advancing
    /// the clock to its timestamp.
    pub fn pop_next(&mut self, deadline: SimTime) -> Option<Scheduled<E>> {
        let (&(at, seq), _) = self.pending.first_key_value()?;
        if at > deadline {
            return None;
        }
        let payload = self.pending.remove(&(at, seq)).expect("present");
        self.now = at;
        self.dispatched += 1;
        Some(Scheduled { at, seq, payload })
    }

    /// Dispatch every event due at or before `deadline`, handing each to
    /// `dispatch` together with the queue (so handlers can schedule more) and
    /// the trace being built.
    ///
    /// The clock ends at the time of the last dispatched event; it is not
    /// moved forward to `deadline` when the queue runs dry.
    pub fn run_until<F>(&mut self, deadline: SimTime, mut dispatch: F) -> Trace
    where
        F: FnMut(&mut Self, Scheduled<E>, &mut Trace),
    {
        let mut trace = Trace::new();
        while let Some(ev) = self.pop_next(deadline) {
            dispatch(self, ev, &mut trace);
        }
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{Action, Actor, TraceRecord};

    fn record(at: SimTime, n: u64) -> TraceRecord {
        TraceRecord::new(at, Actor::Machine, Action::Marker { id: n })
    }

    #[test]
    fn same_time_fifo() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), 'a').unwrap();
        q.schedule(SimTime(5), 'b').unwrap();
        q.schedule(SimTime(1), 'c').unwrap();
        let order: Vec<char> = std::iter::from_fn(|| q.pop_next(SimTime::MAX).map(|e| e.payload)).collect();
        assert_eq!(order, vec!['c', 'a', 'b']);
    }

    #[test]
    fn now_event_precedes_later() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), 1).unwrap();
        q.schedule(q.now(), 0).unwrap();
        assert_eq!(q.pop_next(SimTime::MAX).unwrap().payload, 0);
    }

    #[test]
    fn past_time_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(4), ()).unwrap();
        q.pop_next(SimTime::MAX);
        assert_eq!(q.schedule(SimTime(3), ()), Err(EngineError::PastTime { at: SimTime(3), now: SimTime(4) }));
    }

    #[test]
    fn cancel_removes() {
        let mut q = EventQueue::new();
        let id = q.schedule(SimTime(4), 9).unwrap();
        assert!(q.is_pending(id));
        assert_eq!(q.cancel(id), Some(9));
        assert_eq!(q.cancel(id), None);
        assert!(q.pop_next(SimTime::MAX).is_none());
    }

    #[test]
    fn run_until_empty_keeps_clock() {
        let mut q: EventQueue<u64> = EventQueue::new();
        let t = q.run_until(SimTime(100), |_, _, _| {});
        assert!(t.is_empty());
        assert_eq!(q.now(), SimTime::ZERO);
    }

    #[test]
    fn run_until_single_event() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), 1u64).unwrap();
        let t = q.run_until(SimTime(10), |_, ev, tr| tr.push(record(ev.at, ev.payload)));
        assert_eq!(t.len(), 1);
        assert_eq!(t.records()[0].at, SimTime(5));
        assert_eq!(q.now(), SimTime(5));
    }

    #[test]
    fn run_until_respects_deadline() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), 1u64).unwrap();
        q.schedule(SimTime(15), 2u64).unwrap();
        let t = q.run_until(SimTime(10), |_, ev, tr| tr.push(record(ev.at, ev.payload)));
        assert_eq!(t.len(), 1);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn handlers_can_reschedule() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(0), 0u64).unwrap();
        let t = q.run_until(SimTime(100), |q, ev, tr| {
            tr.push(record(ev.at, ev.payload));
            if ev.payload < 9 {
                q.schedule_in(10, ev.payload + 1);
            }
        });
        assert_eq!(t.len(), 10);
        assert_eq!(t.records().last().unwrap().at, SimTime(90));
    }
}
