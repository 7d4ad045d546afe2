use std::collections::{BTreeMap, VecDeque};

use super::ThreadId;

/// Per-pcpu scheduling policy. The framework owns thread state; a policy
/// only orders the Ready threads it has been told about.
pub trait SchedulerPolicy: std::fmt::Debug {
    fn name(&self) -> &'static str;
    /// Slice length; 0 disables preemption.
    fn quantum_ns(&self) -> u64;
    fn on_ready(&mut self, t: ThreadId);
    fn on_block(&mut self, t: ThreadId);
    /// Remove and return the next thread to run.
    fn pick_next(&mut self) -> Option<ThreadId>;
    fn queued(&self) -> Vec<ThreadId>;
}

#[derive(Debug, Clone)]
pub struct RoundRobin {
    quantum_ns: u64,
    queue: VecDeque<ThreadId>,
}

impl RoundRobin {
    pub const DEFAULT_QUANTUM_NS: u64 = 1_000_000;

    pub fn new(quantum_ns: u64) -> Self {
        RoundRobin { quantum_ns, queue: VecDeque::new() }
    }
}

impl Default for RoundRobin {
    fn default() -> Self {
        RoundRobin::new(Self::DEFAULT_QUANTUM_NS)
    }
}

impl SchedulerPolicy for RoundRobin {
    fn name(&self) -> &'static str {
        "round_robin"
    }

    fn quantum_ns(&self) -> u64 {
        self.quantum_ns
    }

    fn on_ready(&mut self, t: ThreadId) {
        if !self.queue.contains(&t) {
            self.queue.push_back(t);
        }
    }

    fn on_block(&mut self, t: ThreadId) {
        self.queue.retain(|&x| x != t);
    }

    fn pick_next(&mut self) -> Option<ThreadId> {
        self.queue.pop_front()
    }

    fn queued(&self) -> Vec<ThreadId> {
        self.queue.iter().copied().collect()
    }
}

/// Highest priority first, FIFO among equals. Used to show that new
/// policies plug in without touching the framework.
#[derive(Debug, Clone, Default)]
pub struct StrictPriority {
    quantum_ns: u64,
    priority: BTreeMap<ThreadId, u32>,
    queue: Vec<ThreadId>,
}

impl StrictPriority {
    pub fn new(quantum_ns: u64, priority: BTreeMap<ThreadId, u32>) -> Self {
        StrictPriority { quantum_ns, priority, queue: Vec::new() }
    }

    fn prio(&self, t: ThreadId) -> u32 {
        self.priority.get(&t).copied().unwrap_or(0)
    }
}

impl SchedulerPolicy for StrictPriority {
    fn name(&self) -> &'static str {
        "strict_priority"
    }

    fn quantum_ns(&self) -> u64 {
        self.quantum_ns
    }

    fn on_ready(&mut self, t: ThreadId) {
        if !self.queue.contains(&t) {
            self.queue.push(t);
        }
    }

    fn on_block(&mut self, t: ThreadId) {
        self.queue.retain(|&x| x != t);
    }

    fn pick_next(&mut self) -> Option<ThreadId> {
        let best = self.queue.iter().map(|&t| self.prio(t)).max()?;
        let i = self.queue.iter().position(|&t| self.prio(t) == best)?;
        Some(self.queue.remove(i))
    }

    fn queued(&self) -> Vec<ThreadId> {
        self.queue.clone()
    }
}
