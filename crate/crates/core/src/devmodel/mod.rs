//! The device-emulation VM's user-space device model: request rings shared
//! with Gear2, block/console/net backends and the API forwarding channel.

mod api;
mod backend;
mod ring;

pub use api::{ApiCommand, ApiForwardChannel, ApiMode, ApiResponse, ChannelClosed, StreamRun};
pub use backend::{Backend, BackendKind, BlockImage, IoResult};
pub use ring::{IoOp, IoRequest, RingError, VirtioQueue, DEFAULT_RING_DEPTH};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gear1::{HVC_INVALID, HVC_OK};

/// Virtual line Gear2 raises in the device VM when a ring has new requests.
pub const LINE_IO_EVENT: u32 = 101;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DevModelError {
    #[error("no backend for device {0}")]
    UnknownDevice(u32),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error("backing store: {0}")]
    Io(String),
}

/// One serviced request, ready to be acknowledged to Gear2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Serviced {
    pub req: IoRequest,
    pub value: u64,
    pub status: i64,
}

/// The user-space device model running inside the DVM.
#[derive(Debug)]
pub struct Gdm {
    queues: BTreeMap<u32, VirtioQueue>,
    backends: BTreeMap<u32, Backend>,
    /// Backends compiled into the DVM kernel skip the user-space hop.
    pub kernel_module: bool,
    pub serviced: u64,
    pub bad_requests: u64,
}

impl Gdm {
    pub fn new(kernel_module: bool) -> Self {
        Gdm { queues: BTreeMap::new(), backends: BTreeMap::new(), kernel_module, serviced: 0, bad_requests: 0 }
    }

    /// Attach a backend with its own request ring.
    pub fn attach(&mut self, device: u32, irq_line: u32, depth: usize, backend: Backend) {
        self.queues.insert(device, VirtioQueue::new(depth, irq_line));
        self.backends.insert(device, backend);
    }

    pub fn devices(&self) -> impl Iterator<Item = u32> + '_ {
        self.queues.keys().copied()
    }

    pub fn queue(&self, device: u32) -> Option<&VirtioQueue> {
        self.queues.get(&device)
    }

    pub fn queue_mut(&mut self, device: u32) -> Option<&mut VirtioQueue> {
        self.queues.get_mut(&device)
    }

    pub fn backend(&self, device: u32) -> Option<&Backend> {
        self.backends.get(&device)
    }

    /// Charge for crossing into the user-space model and back.
    pub fn hop_ns(&self, cost: &crate::bench::CostModel) -> u64 {
        if self.kernel_module {
            0
        } else {
            cost.gdm_user_hop_ns
        }
    }

    /// Devices with requests the model has not consumed yet.
    pub fn has_work(&self) -> bool {
        self.queues.values().any(|q| q.unconsumed() > 0)
    }

    /// Consume the oldest request of the lowest-numbered device with work
    /// and run it against its backend. The ring slot stays occupied until
    /// [`Gdm::complete`].
    pub fn handle_io_event(&mut self) -> Result<Option<Serviced>, DevModelError> {
        let Some((&device, q)) = self.queues.iter_mut().find(|(_, q)| q.unconsumed() > 0) else {
            return Ok(None);
        };
        let req = q.take_next().expect("unconsumed");
        let backend = self.backends.get_mut(&device).ok_or(DevModelError::UnknownDevice(device))?;
        let out = match backend.execute(&req) {
            Ok(IoResult { value }) => Serviced { req, value, status: HVC_OK },
            Err(_) => {
                self.bad_requests += 1;
                Serviced { req, value: u64::MAX, status: HVC_INVALID }
            }
        };
        self.serviced += 1;
        Ok(Some(out))
    }

    /// Release the ring slot of an acknowledged request.
    pub fn complete(&mut self, device: u32, seq: u64) -> Result<IoRequest, DevModelError> {
        let q = self.queues.get_mut(&device).ok_or(DevModelError::UnknownDevice(device))?;
        Ok(q.complete(seq)?)
    }

    pub fn flush(&mut self) -> Result<(), DevModelError> {
        for b in self.backends.values_mut() {
            b.flush().map_err(|e| DevModelError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(seq: u64, op: IoOp, addr: u64, value: u64) -> IoRequest {
        IoRequest { seq, source: (1, 0), device: 7, op, addr, size: 8, value, blocking: true }
    }

    #[test]
    fn block_write_then_read_round_trips() {
        let mut g = Gdm::new(false);
        g.attach(7, 60, 4, Backend::new(BackendKind::Block, BlockImage::in_memory(4096)));
        g.queue_mut(7).unwrap().push(req(0, IoOp::Write, 512, 0x1122_3344_5566_7788)).unwrap();
        g.queue_mut(7).unwrap().push(req(1, IoOp::Read, 512, 0)).unwrap();
        let w = g.handle_io_event().unwrap().unwrap();
        assert_eq!(w.status, HVC_OK);
        g.complete(7, 0).unwrap();
        let r = g.handle_io_event().unwrap().unwrap();
        assert_eq!(r.value, 0x1122_3344_5566_7788);
        g.complete(7, 1).unwrap();
        assert!(g.handle_io_event().unwrap().is_none());
    }

    #[test]
    fn malformed_request_gets_error_ack() {
        let mut g = Gdm::new(false);
        g.attach(7, 60, 4, Backend::new(BackendKind::Block, BlockImage::in_memory(1024)));
        g.queue_mut(7).unwrap().push(req(0, IoOp::Read, 4096, 0)).unwrap();
        let r = g.handle_io_event().unwrap().unwrap();
        assert_eq!((r.status, r.value), (HVC_INVALID, u64::MAX));
        assert_eq!(g.bad_requests, 1);
    }

    #[test]
    fn kernel_module_removes_hop() {
        let c = crate::bench::CostModel::default();
        assert_eq!(Gdm::new(false).hop_ns(&c), c.gdm_user_hop_ns);
        assert_eq!(Gdm::new(true).hop_ns(&c), 0);
    }
}
