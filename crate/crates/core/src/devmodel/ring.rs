use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_RING_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IoOp {
    Read,
    Write,
}

/// One trapped access forwarded to the device model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRequest {
    /// Sequence tag, unique per run.
    pub seq: u64,
    pub source: (u32, u32),
    pub device: u32,
    pub op: IoOp,
    /// Offset inside the device window.
    pub addr: u64,
    pub size: u8,
    pub value: u64,
    pub blocking: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RingError {
    #[error("ring full")]
    Full,
    #[error("request {0} is not the oldest consumed request")]
    OutOfOrder(u64),
    #[error("nothing consumed to complete")]
    Empty,
}

/// Single request/completion ring. Slots are released only when the
/// request is completed, so the producer can never overwrite a descriptor
/// the consumer has not finished with.
#[derive(Debug, Clone)]
pub struct VirtioQueue {
    ring: Vec<Option<IoRequest>>,
    /// Producer index.
    avail_idx: u64,
    /// Next index the consumer will take.
    consumed_idx: u64,
    /// Completion index.
    used_idx: u64,
    pub irq_line: u32,
    last_tag: Option<u64>,
}

impl VirtioQueue {
    pub fn new(depth: usize, irq_line: u32) -> Self {
        assert!(depth > 0);
        VirtioQueue { ring: vec![None; depth], avail_idx: 0, consumed_idx: 0, used_idx: 0, irq_line, last_tag: None }
    }

    pub fn depth(&self) -> usize {
        self.ring.len()
    }

    pub fn avail_idx(&self) -> u64 {
        self.avail_idx
    }

    pub fn used_idx(&self) -> u64 {
        self.used_idx
    }

    pub fn in_flight(&self) -> usize {
        (self.avail_idx - self.used_idx) as usize
    }

    pub fn unconsumed(&self) -> usize {
        (self.avail_idx - self.consumed_idx) as usize
    }

    pub fn is_full(&self) -> bool {
        self.in_flight() == self.ring.len()
    }

    pub fn push(&mut self, req: IoRequest) -> Result<(), RingError> {
        if self.is_full() {
            return Err(RingError::Full);
        }
        let slot = (self.avail_idx % self.ring.len() as u64) as usize;
        debug_assert!(self.ring[slot].is_none());
        self.ring[slot] = Some(req);
        self.avail_idx += 1;
        Ok(())
    }

    pub fn take_next(&mut self) -> Option<IoRequest> {
        if self.consumed_idx == self.avail_idx {
            return None;
        }
        let slot = (self.consumed_idx % self.ring.len() as u64) as usize;
        let req = self.ring[slot].clone().expect("occupied");
        if let Some(t) = self.last_tag {
            assert!(req.seq > t, "descriptor {} consumed twice", req.seq);
        }
        self.last_tag = Some(req.seq);
        self.consumed_idx += 1;
        Some(req)
    }

    /// Release the oldest consumed slot; `seq` must match it.
    pub fn complete(&mut self, seq: u64) -> Result<IoRequest, RingError> {
        if self.used_idx == self.consumed_idx {
            return Err(RingError::Empty);
        }
        let slot = (self.used_idx % self.ring.len() as u64) as usize;
        match &self.ring[slot] {
            Some(r) if r.seq == seq => {}
            _ => return Err(RingError::OutOfOrder(seq)),
        }
        self.used_idx += 1;
        Ok(self.ring[slot].take().expect("occupied"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(seq: u64) -> IoRequest {
        IoRequest { seq, source: (1, 0), device: 0, op: IoOp::Write, addr: 0, size: 4, value: seq, blocking: false }
    }

    #[test]
    fn full_ring_refuses() {
        let mut q = VirtioQueue::new(2, 50);
        q.push(r(0)).unwrap();
        q.push(r(1)).unwrap();
        assert_eq!(q.push(r(2)), Err(RingError::Full));
        // Consuming alone does not free the slot.
        q.take_next().unwrap();
        assert_eq!(q.push(r(2)), Err(RingError::Full));
        assert_eq!(q.complete(1), Err(RingError::OutOfOrder(1)));
        q.complete(0).unwrap();
        q.push(r(2)).unwrap();
    }

    proptest! {
        #[test]
        fn indices_monotone_and_exactly_once(ops in proptest::collection::vec(0u8..3, 1..300)) {
            let mut q = VirtioQueue::new(8, 50);
            let (mut next, mut taken, mut done) = (0u64, Vec::new(), Vec::new());
            for op in ops {
                let before = (q.avail_idx, q.consumed_idx, q.used_idx);
                match op {
                    0 => if q.push(r(next)).is_ok() { next += 1 },
                    1 => if let Some(x) = q.take_next() { taken.push(x.seq) },
                    _ => if let Some(&s) = taken.get(done.len()) { q.complete(s).unwrap(); done.push(s) },
                }
                prop_assert!(q.avail_idx >= before.0 && q.consumed_idx >= before.1 && q.used_idx >= before.2);
                prop_assert!(q.used_idx <= q.consumed_idx && q.consumed_idx <= q.avail_idx);
            }
            let expect: Vec<u64> = (0..taken.len() as u64).collect();
            prop_assert_eq!(taken, expect);
        }
    }
}
