use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::simcore::SimTime;

/// What a device stub does when its doorbell register is written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceBehavior {
    /// Requests are served one at a time, FIFO, each taking `service_ns`;
    /// every completion raises the device line.
    Block { service_ns: u64 },
    /// Writes are appended to an output log; no interrupt.
    Console,
    /// Loopback: each write completes after `latency_ns` independently.
    Net { latency_ns: u64 },
    /// Register file only; accesses have no side effect.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub id: u32,
    #[serde(with = "crate::hexnum")]
    pub mmio_base: u64,
    #[serde(with = "crate::hexnum")]
    pub mmio_len: u64,
    pub irq_line: u32,
    pub behavior: DeviceBehavior,
}

/// A memory-mapped device model with just enough behavior to generate
/// interrupt traffic.
#[derive(Debug, Clone)]
pub struct DeviceStub {
    pub config: DeviceConfig,
    busy_until: SimTime,
    in_flight: VecDeque<u64>,
    next_seq: u64,
    completed: u64,
    console: Vec<u8>,
}

impl DeviceStub {
    pub fn new(config: DeviceConfig) -> Self {
        DeviceStub {
            config,
            busy_until: SimTime::ZERO,
            in_flight: VecDeque::new(),
            next_seq: 0,
            completed: 0,
            console: Vec::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.config.id
    }

    pub fn contains(&self, pa: u64) -> bool {
        pa >= self.config.mmio_base && pa - self.config.mmio_base < self.config.mmio_len
    }

    /// Register write. Returns `(seq, completion time)` when the write starts
    /// a request that will later complete and raise the line.
    pub fn write(&mut self, now: SimTime, offset: u64, value: u64) -> Option<(u64, SimTime)> {
        match self.config.behavior {
            DeviceBehavior::Block { service_ns } => {
                let start = self.busy_until.max(now);
                self.busy_until = start + service_ns;
                Some((self.push(), self.busy_until))
            }
            DeviceBehavior::Net { latency_ns } => Some((self.push(), now + latency_ns)),
            DeviceBehavior::Console => {
                if offset == 0 {
                    self.console.push(value as u8);
                }
                None
            }
            DeviceBehavior::Custom => None,
        }
    }

    fn push(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.in_flight.push_back(seq);
        seq
    }

    /// Mark request `seq` finished. Requests complete in submission order.
    pub fn complete(&mut self, seq: u64) -> bool {
        if self.in_flight.front() == Some(&seq) {
            self.in_flight.pop_front();
            self.completed += 1;
            true
        } else if let Some(i) = self.in_flight.iter().position(|&s| s == seq) {
            self.in_flight.remove(i);
            self.completed += 1;
            true
        } else {
            false
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn console_output(&self) -> &[u8] {
        &self.console
    }
}
