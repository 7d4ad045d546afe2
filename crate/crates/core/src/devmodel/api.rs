use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::simcore::{Action, Actor, EventQueue, SimTime, Trace, TraceRecord};

/// Transport used between the API wrapper in a guest and the device model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApiMode {
    /// Payload copied through the virtio-style queue.
    CopyIvc,
    /// Payload placed in a shared page; only the command crosses.
    SharedMemIvc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("API forwarding channel is closed")]
pub struct ChannelClosed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiCommand {
    pub opcode: u32,
    pub len: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    /// Hex SHA-256 of the payload, standing in for the accelerator result.
    pub digest: String,
    pub cost_ns: u64,
}

/// Generic command channel for forwarded accelerator APIs.
#[derive(Debug, Clone)]
pub struct ApiForwardChannel {
    pub mode: ApiMode,
    pub per_cmd_fixed_ns: u64,
    pub per_byte_copy_ns: f64,
    log: Vec<ApiCommand>,
    open: bool,
}

impl ApiForwardChannel {
    pub fn new(mode: ApiMode, per_cmd_fixed_ns: u64, per_byte_copy_ns: f64) -> Self {
        ApiForwardChannel { mode, per_cmd_fixed_ns, per_byte_copy_ns, log: Vec::new(), open: true }
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn log(&self) -> &[ApiCommand] {
        &self.log
    }

    /// Charge for one command carrying `len` payload bytes.
    pub fn cost_ns(&self, len: usize) -> u64 {
        match self.mode {
            ApiMode::SharedMemIvc => self.per_cmd_fixed_ns,
            ApiMode::CopyIvc => self.per_cmd_fixed_ns + (self.per_byte_copy_ns * len as f64).ceil() as u64,
        }
    }

    /// Payload bytes per second when commands are issued back to back.
    pub fn throughput(&self, len: usize) -> f64 {
        let c = self.cost_ns(len);
        if c == 0 {
            f64::INFINITY
        } else {
            len as f64 * 1e9 / c as f64
        }
    }

    pub fn api_forward(&mut self, opcode: u32, payload: &[u8]) -> Result<ApiResponse, ChannelClosed> {
        if !self.open {
            return Err(ChannelClosed);
        }
        let digest = hex(&Sha256::digest(payload));
        self.log.push(ApiCommand { opcode, len: payload.len(), digest: digest.clone() });
        Ok(ApiResponse { digest, cost_ns: self.cost_ns(payload.len()) })
    }
}

/// Outcome of streaming fixed-size commands through a channel.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub commands: u64,
    pub bytes: u64,
    pub window_ns: u64,
    pub trace: Trace,
}

impl StreamRun {
    /// Payload bytes per virtual second, counting only completed commands.
    pub fn throughput(&self) -> f64 {
        self.bytes as f64 * 1e9 / self.window_ns as f64
    }
}

impl ApiForwardChannel {
    /// Issue `len`-byte commands back to back for `window_ns` of virtual
    /// time; each completes after its charged cost.
    pub fn stream(&mut self, len: usize, window_ns: u64) -> Result<StreamRun, ChannelClosed> {
        let payload: Vec<u8> = (0..len).map(|i| i as u8).collect();
        let mode = match self.mode {
            ApiMode::CopyIvc => "copy",
            ApiMode::SharedMemIvc => "shared",
        };
        let mut q = EventQueue::new();
        q.schedule(SimTime::ZERO, 0u64).expect("empty queue");
        let (mut commands, mut err) = (0u64, None);
        let trace = q.run_until(SimTime(window_ns), |q, ev, trace| {
            if ev.payload > 0 {
                commands += 1;
            }
            match self.api_forward(1, &payload) {
                Ok(r) if ev.at.0 + r.cost_ns <= window_ns => {
                    trace.push(
                        TraceRecord::new(ev.at, Actor::Dvm, Action::ApiForward { mode, bytes: len as u64 })
                            .with_cost(r.cost_ns),
                    );
                    // Zero-cost commands would never advance the clock.
                    q.schedule_in(r.cost_ns.max(1), ev.payload + 1);
                }
                Ok(_) => {}
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(StreamRun { commands, bytes: commands * len as u64, window_ns, trace }),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_costs_fixed_in_both_modes() {
        let c = ApiForwardChannel::new(ApiMode::CopyIvc, 5000, 0.5);
        let s = ApiForwardChannel::new(ApiMode::SharedMemIvc, 5000, 0.5);
        assert_eq!(c.cost_ns(0), 5000);
        assert_eq!(s.cost_ns(0), 5000);
    }

    #[test]
    fn page_payload_copy_is_costlier() {
        let mut c = ApiForwardChannel::new(ApiMode::CopyIvc, 5000, 0.5);
        let mut s = ApiForwardChannel::new(ApiMode::SharedMemIvc, 5000, 0.5);
        let page = vec![0xa5u8; 4096];
        let rc = c.api_forward(1, &page).unwrap();
        let rs = s.api_forward(1, &page).unwrap();
        assert_eq!(rc.cost_ns, 5000 + 2048);
        assert_eq!(rs.cost_ns, 5000);
        assert_eq!(rc.digest, rs.digest);
        assert_eq!(c.log().len(), 1);
    }

    #[test]
    fn closed_channel_errors() {
        let mut c = ApiForwardChannel::new(ApiMode::CopyIvc, 1, 1.0);
        c.close();
        assert_eq!(c.api_forward(0, b"x"), Err(ChannelClosed));
    }

    #[test]
    fn stream_counts_completed_commands() {
        let mut s = ApiForwardChannel::new(ApiMode::SharedMemIvc, 1000, 0.5);
        let r = s.stream(4096, 10_000).unwrap();
        assert_eq!(r.commands, 10);
        assert_eq!(r.trace.len(), 10);
        let mut c = ApiForwardChannel::new(ApiMode::CopyIvc, 1000, 0.5);
        assert_eq!(c.stream(4096, 10_000).unwrap().commands, 3);
        c.close();
        assert_eq!(c.stream(1, 10).err(), Some(ChannelClosed));
    }

    proptest! {
        #[test]
        fn shared_memory_wins_for_any_positive_copy_cost(per_byte in 1e-6f64..100.0, fixed in 0u64..100_000, len in 1usize..65536) {
            let c = ApiForwardChannel::new(ApiMode::CopyIvc, fixed, per_byte);
            let s = ApiForwardChannel::new(ApiMode::SharedMemIvc, fixed, per_byte);
            prop_assert!(s.throughput(len) > c.throughput(len));
        }
    }
}
