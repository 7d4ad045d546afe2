use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ring::{IoOp, IoRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Block,
    Console,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BadRequest {
    #[error("access size {0} unsupported")]
    Size(u8),
    #[error("offset {0:#x} outside the image")]
    Range(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoResult {
    pub value: u64,
}

/// Raw block image, optionally persisted to a file.
#[derive(Debug)]
pub struct BlockImage {
    bytes: Vec<u8>,
    path: Option<PathBuf>,
}

impl BlockImage {
    pub fn in_memory(len: usize) -> Self {
        BlockImage { bytes: vec![0; len], path: None }
    }

    /// Open `path`, creating or extending it to `len` bytes.
    pub fn open(path: &Path, len: usize) -> io::Result<Self> {
        let mut bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        if bytes.len() < len {
            bytes.resize(len, 0);
        }
        Ok(BlockImage { bytes, path: Some(path.to_path_buf()) })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn read(&self, off: u64, buf: &mut [u8]) -> Result<(), BadRequest> {
        let end = off
            .checked_add(buf.len() as u64)
            .filter(|&e| e <= self.bytes.len() as u64)
            .ok_or(BadRequest::Range(off))?;
        buf.copy_from_slice(&self.bytes[off as usize..end as usize]);
        Ok(())
    }

    pub fn write(&mut self, off: u64, data: &[u8]) -> Result<(), BadRequest> {
        let end = off
            .checked_add(data.len() as u64)
            .filter(|&e| e <= self.bytes.len() as u64)
            .ok_or(BadRequest::Range(off))?;
        self.bytes[off as usize..end as usize].copy_from_slice(data);
        Ok(())
    }

    pub fn flush(&self) -> io::Result<()> {
        match &self.path {
            Some(p) => fs::write(p, &self.bytes),
            None => Ok(()),
        }
    }
}

/// One emulated device behind a request ring.
#[derive(Debug)]
pub struct Backend {
    pub kind: BackendKind,
    image: BlockImage,
    console: Vec<u8>,
    console_path: Option<PathBuf>,
    loopback: VecDeque<u64>,
}

impl Backend {
    pub fn new(kind: BackendKind, image: BlockImage) -> Self {
        Backend { kind, image, console: Vec::new(), console_path: None, loopback: VecDeque::new() }
    }

    pub fn console(path: Option<PathBuf>) -> Self {
        Backend { console_path: path, ..Backend::new(BackendKind::Console, BlockImage::in_memory(0)) }
    }

    pub fn net() -> Self {
        Backend::new(BackendKind::Net, BlockImage::in_memory(0))
    }

    pub fn image(&self) -> &BlockImage {
        &self.image
    }

    pub fn console_log(&self) -> &[u8] {
        &self.console
    }

    /// Block: the device window addresses image bytes directly. Console:
    /// writes append bytes to the log. Net: writes enqueue a word on the
    /// loopback, reads dequeue one.
    pub fn execute(&mut self, req: &IoRequest) -> Result<IoResult, BadRequest> {
        let size = req.size as usize;
        if !matches!(size, 1 | 2 | 4 | 8) {
            return Err(BadRequest::Size(req.size));
        }
        let value = match (self.kind, req.op) {
            (BackendKind::Block, IoOp::Write) => {
                self.image.write(req.addr, &req.value.to_le_bytes()[..size])?;
                0
            }
            (BackendKind::Block, IoOp::Read) => {
                let mut b = [0u8; 8];
                self.image.read(req.addr, &mut b[..size])?;
                u64::from_le_bytes(b)
            }
            (BackendKind::Console, IoOp::Write) => {
                self.console.extend_from_slice(&req.value.to_le_bytes()[..size]);
                0
            }
            (BackendKind::Console, IoOp::Read) => 0,
            (BackendKind::Net, IoOp::Write) => {
                self.loopback.push_back(req.value);
                0
            }
            (BackendKind::Net, IoOp::Read) => self.loopback.pop_front().unwrap_or(0),
        };
        Ok(IoResult { value })
    }

    pub fn flush(&self) -> io::Result<()> {
        self.image.flush()?;
        if let Some(p) = &self.console_path {
            fs::write(p, &self.console)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn image_persists_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("disk.img");
        let mut img = BlockImage::open(&p, 1024).unwrap();
        img.write(100, b"sector").unwrap();
        img.flush().unwrap();
        let again = BlockImage::open(&p, 1024).unwrap();
        let mut buf = [0u8; 6];
        again.read(100, &mut buf).unwrap();
        assert_eq!(&buf, b"sector");
    }

    #[test]
    fn console_and_net() {
        let r =
            |op, value| IoRequest { seq: 0, source: (1, 0), device: 0, op, addr: 0, size: 1, value, blocking: false };
        let mut c = Backend::console(None);
        c.execute(&r(IoOp::Write, b'h' as u64)).unwrap();
        c.execute(&r(IoOp::Write, b'i' as u64)).unwrap();
        assert_eq!(c.console_log(), b"hi");
        let mut n = Backend::net();
        n.execute(&r(IoOp::Write, 9)).unwrap();
        assert_eq!(n.execute(&r(IoOp::Read, 0)).unwrap().value, 9);
        assert_eq!(n.execute(&r(IoOp::Read, 0)).unwrap().value, 0);
    }

    proptest! {
        #[test]
        fn block_matches_flat_reference(ops in proptest::collection::vec((0u64..1024, any::<u64>(), prop_oneof![Just(1u8), Just(2), Just(4), Just(8)], any::<bool>()), 1..200)) {
            let mut b = Backend::new(BackendKind::Block, BlockImage::in_memory(1024));
            let mut reference = vec![0u8; 1024];
            for (addr, value, size, write) in ops {
                let req = IoRequest { seq: 0, source: (1, 0), device: 0, op: if write { IoOp::Write } else { IoOp::Read }, addr, size, value, blocking: true };
                let res = b.execute(&req);
                let n = size as usize;
                if addr as usize + n > 1024 {
                    prop_assert!(res.is_err());
                    continue;
                }
                if write {
                    reference[addr as usize..addr as usize + n].copy_from_slice(&value.to_le_bytes()[..n]);
                } else {
                    let mut w = [0u8; 8];
                    w[..n].copy_from_slice(&reference[addr as usize..addr as usize + n]);
                    prop_assert_eq!(res.unwrap().value, u64::from_le_bytes(w));
                }
            }
            let mut all = vec![0u8; 1024];
            b.image().read(0, &mut all).unwrap();
            prop_assert_eq!(all, reference);
        }
    }
}
