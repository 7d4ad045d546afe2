//! The scheduling-policy side: a mini-OS inside the primary VM with one
//! run queue and idle thread per pcpu, vcpu threads, pluggable policies and
//! the VM-exit dispatcher that coordinates MMIO with the device model.

mod policy;

pub use policy::{RoundRobin, SchedulerPolicy, StrictPriority};

use std::collections::{BTreeMap, VecDeque};

use crate::devmodel::{IoOp, IoRequest, VirtioQueue};
use crate::gear1::BlockReason;
use crate::simcore::ThreadTag;

pub type ThreadId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    Ready,
    Running,
    Blocked(BlockReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thread {
    pub kind: ThreadTag,
    pub state: ThreadState,
    pub pcpu: u32,
}

#[derive(Debug)]
struct PerPcpu {
    policy: Box<dyn SchedulerPolicy>,
    idle: ThreadId,
    current: ThreadId,
    slice_start: u64,
    online: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Gear2Stats {
    pub picks: u64,
    pub exits: u64,
    pub irqs: u64,
    pub mmio_blocking: u64,
    pub mmio_nonblocking: u64,
    pub acks: u64,
    pub ip_advances: u64,
    pub ring_full: u64,
    pub quantum_expiries: u64,
}

/// Trapped MMIO access as delivered by Gear1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmioExit {
    pub source: (u32, u32),
    pub device: u32,
    pub offset: u64,
    pub size: u8,
    pub write: bool,
    pub value: u64,
    pub blocking: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MmioOutcome {
    /// Request placed in the ring; the DVM should be notified.
    Queued { seq: u64 },
    /// Ring full; request parked until a slot frees.
    Backlogged { seq: u64 },
}

/// What Gear2 does after the device model acknowledges a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckOutcome {
    pub req: IoRequest,
    pub status: i64,
    pub value: u64,
    /// Blocking requests: advance the source IP and make it Ready.
    pub advance_ip: bool,
    /// Non-blocking virtio flows: inject this completion line into the source.
    pub completion_line: Option<u32>,
    /// Backlogged requests moved into the freed slot.
    pub refilled: Vec<u64>,
}

#[derive(Debug)]
pub struct Gear2 {
    threads: Vec<Thread>,
    vcpu_thread: BTreeMap<(u32, u32), ThreadId>,
    cpus: Vec<PerPcpu>,
    next_seq: u64,
    pending: BTreeMap<u64, IoRequest>,
    backlog: BTreeMap<u32, VecDeque<IoRequest>>,
    /// Set while an injected stall keeps Gear2 from running.
    pub stalled: bool,
    pub stats: Gear2Stats,
    quanta: BTreeMap<ThreadId, u64>,
}

impl Gear2 {
    pub fn new(pcpus: usize, quantum_ns: u64) -> Self {
        let mut g = Gear2 {
            threads: Vec::new(),
            vcpu_thread: BTreeMap::new(),
            cpus: Vec::new(),
            next_seq: 0,
            pending: BTreeMap::new(),
            backlog: BTreeMap::new(),
            stalled: false,
            stats: Gear2Stats::default(),
            quanta: BTreeMap::new(),
        };
        for p in 0..pcpus as u32 {
            let idle = g.threads.len();
            g.threads.push(Thread { kind: ThreadTag::Idle, state: ThreadState::Ready, pcpu: p });
            g.cpus.push(PerPcpu {
                policy: Box::new(RoundRobin::new(quantum_ns)),
                idle,
                current: idle,
                slice_start: 0,
                online: false,
            });
        }
        g
    }

    pub fn pcpu_count(&self) -> usize {
        self.cpus.len()
    }

    /// A pcpu came up and entered its idle loop.
    pub fn bring_up(&mut self, pcpu: u32) {
        let c = &mut self.cpus[pcpu as usize];
        c.online = true;
        c.current = c.idle;
        self.threads[c.idle].state = ThreadState::Running;
    }

    pub fn is_online(&self, pcpu: u32) -> bool {
        self.cpus[pcpu as usize].online
    }

    pub fn add_vcpu_thread(&mut self, vm: u32, vcpu: u32, pcpu: u32) -> ThreadId {
        let t = self.threads.len();
        self.threads.push(Thread { kind: ThreadTag::Vcpu { vm, vcpu }, state: ThreadState::Ready, pcpu });
        self.vcpu_thread.insert((vm, vcpu), t);
        self.cpus[pcpu as usize].policy.on_ready(t);
        t
    }

    /// Host-side thread; starts blocked until woken.
    pub fn add_service_thread(&mut self, id: u32, pcpu: u32) -> ThreadId {
        let t = self.threads.len();
        self.threads.push(Thread {
            kind: ThreadTag::Service { id },
            state: ThreadState::Blocked(BlockReason::Wfi),
            pcpu,
        });
        t
    }

    pub fn register_policy(&mut self, pcpu: u32, mut policy: Box<dyn SchedulerPolicy>) {
        let c = &mut self.cpus[pcpu as usize];
        for t in c.policy.queued() {
            policy.on_ready(t);
        }
        c.policy = policy;
    }

    pub fn policy_name(&self, pcpu: u32) -> &'static str {
        self.cpus[pcpu as usize].policy.name()
    }

    pub fn thread(&self, t: ThreadId) -> &Thread {
        &self.threads[t]
    }

    pub fn threads(&self) -> &[Thread] {
        &self.threads
    }

    pub fn thread_of(&self, vm: u32, vcpu: u32) -> Option<ThreadId> {
        self.vcpu_thread.get(&(vm, vcpu)).copied()
    }

    pub fn current(&self, pcpu: u32) -> ThreadId {
        self.cpus[pcpu as usize].current
    }

    pub fn current_tag(&self, pcpu: u32) -> ThreadTag {
        self.threads[self.current(pcpu)].kind
    }

    pub fn queued(&self, pcpu: u32) -> Vec<ThreadId> {
        self.cpus[pcpu as usize].policy.queued()
    }

    pub fn has_ready(&self, pcpu: u32) -> bool {
        !self.cpus[pcpu as usize].policy.queued().is_empty()
    }

    /// Quanta started per thread, as counted by `schedule`.
    pub fn quanta(&self, t: ThreadId) -> u64 {
        self.quanta.get(&t).copied().unwrap_or(0)
    }

    /// Make `t` Ready. Returns false if it was not blocked.
    pub fn wake(&mut self, t: ThreadId) -> bool {
        if !matches!(self.threads[t].state, ThreadState::Blocked(_)) {
            return false;
        }
        self.threads[t].state = ThreadState::Ready;
        let p = self.threads[t].pcpu as usize;
        self.cpus[p].policy.on_ready(t);
        true
    }

    pub fn block(&mut self, t: ThreadId, reason: BlockReason) {
        self.threads[t].state = ThreadState::Blocked(reason);
        let p = self.threads[t].pcpu as usize;
        self.cpus[p].policy.on_block(t);
    }

    /// Put the running thread back at the tail of its queue.
    pub fn preempt(&mut self, pcpu: u32) {
        let c = &mut self.cpus[pcpu as usize];
        let t = c.current;
        if t != c.idle && self.threads[t].state == ThreadState::Running {
            self.threads[t].state = ThreadState::Ready;
            c.policy.on_ready(t);
        }
        self.threads[c.idle].state = ThreadState::Ready;
        c.current = c.idle;
    }

    /// Keep the current thread if it can still run, otherwise pick the
    /// next Ready thread or Idle.
    pub fn schedule(&mut self, pcpu: u32, now: u64) -> ThreadId {
        let c = &self.cpus[pcpu as usize];
        let cur = c.current;
        if cur != c.idle && self.threads[cur].state == ThreadState::Running {
            return cur;
        }
        self.pick(pcpu, now)
    }

    fn pick(&mut self, pcpu: u32, now: u64) -> ThreadId {
        let c = &mut self.cpus[pcpu as usize];
        let next = c.policy.pick_next().unwrap_or(c.idle);
        debug_assert_eq!(self.threads[next].pcpu, pcpu);
        if c.current != next {
            let old = c.current;
            if self.threads[old].state == ThreadState::Running {
                self.threads[old].state = ThreadState::Ready;
            }
        }
        c.current = next;
        c.slice_start = now;
        self.threads[next].state = ThreadState::Running;
        self.stats.picks += 1;
        if next != c.idle {
            *self.quanta.entry(next).or_default() += 1;
        }
        next
    }

    /// Slice ended: rotate.
    pub fn quantum_expired(&mut self, pcpu: u32, now: u64) -> ThreadId {
        self.stats.quantum_expiries += 1;
        self.preempt(pcpu);
        self.pick(pcpu, now)
    }

    /// When the current slice should end, if anything is waiting for it.
    pub fn quantum_deadline(&self, pcpu: u32, now: u64) -> Option<u64> {
        let c = &self.cpus[pcpu as usize];
        let q = c.policy.quantum_ns();
        (q > 0 && c.current != c.idle && self.has_ready(pcpu)).then(|| (c.slice_start + q).max(now))
    }

    /// Queue a trapped MMIO access for the device model.
    pub fn on_mmio(&mut self, exit: MmioExit, ring: &mut VirtioQueue) -> MmioOutcome {
        self.stats.exits += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        let req = IoRequest {
            seq,
            source: exit.source,
            device: exit.device,
            op: if exit.write { IoOp::Write } else { IoOp::Read },
            addr: exit.offset,
            size: exit.size,
            value: exit.value,
            blocking: exit.blocking,
        };
        if exit.blocking {
            self.stats.mmio_blocking += 1;
        } else {
            self.stats.mmio_nonblocking += 1;
        }
        self.pending.insert(seq, req.clone());
        let backlog = self.backlog.entry(exit.device).or_default();
        if !backlog.is_empty() || ring.push(req.clone()).is_err() {
            backlog.push_back(req);
            self.stats.ring_full += 1;
            return MmioOutcome::Backlogged { seq };
        }
        MmioOutcome::Queued { seq }
    }

    /// The device model finished request `seq`; its ring slot has been
    /// released.
    pub fn on_ack(&mut self, seq: u64, status: i64, value: u64, ring: &mut VirtioQueue) -> Option<AckOutcome> {
        let req = self.pending.remove(&seq)?;
        self.stats.acks += 1;
        let mut refilled = Vec::new();
        if let Some(b) = self.backlog.get_mut(&req.device) {
            while let Some(r) = b.front() {
                if ring.push(r.clone()).is_err() {
                    break;
                }
                refilled.push(r.seq);
                b.pop_front();
            }
        }
        Some(AckOutcome {
            advance_ip: req.blocking,
            completion_line: (!req.blocking).then_some(ring.irq_line),
            req,
            status,
            value,
            refilled,
        })
    }

    pub fn note_ip_advance(&mut self) {
        self.stats.ip_advances += 1;
    }

    /// An issued request that has not been acknowledged yet.
    pub fn request(&self, seq: u64) -> Option<&IoRequest> {
        self.pending.get(&seq)
    }

    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }

    pub fn backlog_len(&self, device: u32) -> usize {
        self.backlog.get(&device).map_or(0, |b| b.len())
    }

    /// Every blocking request has been acknowledged and advanced.
    pub fn mmio_exact(&self) -> bool {
        self.pending.values().all(|r| !r.blocking) && self.stats.mmio_blocking == self.stats.ip_advances
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devmodel::VirtioQueue;

    fn rig(n: usize) -> (Gear2, Vec<ThreadId>) {
        let mut g = Gear2::new(2, 2_000_000);
        g.bring_up(0);
        g.bring_up(1);
        let ts = (0..n as u32).map(|i| g.add_vcpu_thread(1, i, 0)).collect();
        (g, ts)
    }

    #[test]
    fn round_robin_rotates() {
        let (mut g, ts) = rig(2);
        assert_eq!(g.schedule(0, 0), ts[0]);
        assert_eq!(g.quantum_deadline(0, 0), Some(2_000_000));
        assert_eq!(g.quantum_expired(0, 2_000_000), ts[1]);
        assert_eq!(g.queued(0), vec![ts[0]]);
        assert_eq!(g.quantum_deadline(0, 2_000_000), Some(4_000_000));
    }

    #[test]
    fn empty_queue_runs_idle() {
        let (mut g, _) = rig(0);
        let idle = g.schedule(1, 0);
        assert_eq!(g.thread(idle).kind, ThreadTag::Idle);
        assert_eq!(g.quantum_deadline(1, 0), None);
    }

    #[test]
    fn single_thread_needs_no_quantum() {
        let (mut g, ts) = rig(1);
        assert_eq!(g.schedule(0, 0), ts[0]);
        assert_eq!(g.quantum_deadline(0, 0), None);
    }

    #[test]
    fn blocked_thread_is_skipped_until_woken() {
        let (mut g, ts) = rig(2);
        g.schedule(0, 0);
        g.block(ts[0], BlockReason::Wfi);
        assert_eq!(g.schedule(0, 10), ts[1]);
        assert!(g.wake(ts[0]));
        assert!(!g.wake(ts[0]));
        assert_eq!(g.queued(0), vec![ts[0]]);
    }

    #[test]
    fn fairness_over_300_quanta() {
        let (mut g, ts) = rig(3);
        let q = 2_000_000;
        g.schedule(0, 0);
        for i in 1..300 {
            g.quantum_expired(0, i * q);
        }
        for t in ts {
            assert_eq!(g.quanta(t), 100);
        }
    }

    #[test]
    fn affinity_respected() {
        let (mut g, _) = rig(2);
        let t = g.add_vcpu_thread(2, 0, 1);
        assert_eq!(g.queued(1), vec![t]);
        assert!(!g.queued(0).contains(&t));
        assert_eq!(g.schedule(1, 0), t);
    }

    #[test]
    fn strict_priority_plugs_in() {
        let (mut g, ts) = rig(3);
        let prio = BTreeMap::from([(ts[0], 1), (ts[1], 5), (ts[2], 3)]);
        g.register_policy(0, Box::new(StrictPriority::new(0, prio.clone())));
        assert_eq!(g.policy_name(0), "strict_priority");
        let mut order = Vec::new();
        for _ in 0..3 {
            let t = g.schedule(0, 0);
            order.push(t);
            g.block(t, BlockReason::Wfi);
        }
        let mut reference = ts.clone();
        reference.sort_by_key(|t| std::cmp::Reverse(prio[t]));
        assert_eq!(order, reference);
        // No quantum under this policy; pcpu 1 untouched.
        assert_eq!(g.policy_name(1), "round_robin");
    }

    #[test]
    fn mmio_blocking_and_backpressure() {
        let (mut g, _) = rig(0);
        let mut ring = VirtioQueue::new(1, 70);
        let exit =
            |blocking| MmioExit { source: (1, 0), device: 3, offset: 0, size: 4, write: true, value: 1, blocking };
        assert_eq!(g.on_mmio(exit(true), &mut ring), MmioOutcome::Queued { seq: 0 });
        assert_eq!(g.on_mmio(exit(false), &mut ring), MmioOutcome::Backlogged { seq: 1 });
        assert_eq!(g.stats.ring_full, 1);
        ring.take_next().unwrap();
        ring.complete(0).unwrap();
        let a = g.on_ack(0, 0, 0, &mut ring).unwrap();
        assert!(a.advance_ip);
        assert_eq!(a.completion_line, None);
        assert_eq!(a.refilled, vec![1]);
        g.note_ip_advance();
        ring.take_next().unwrap();
        ring.complete(1).unwrap();
        let b = g.on_ack(1, 0, 0, &mut ring).unwrap();
        assert_eq!(b.completion_line, Some(70));
        assert!(g.on_ack(1, 0, 0, &mut ring).is_none());
        assert!(g.mmio_exact());
    }
}
