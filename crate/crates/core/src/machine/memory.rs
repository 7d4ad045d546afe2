use std::collections::HashMap;

use super::llc::PAGE_SIZE;

/// Sparse physical memory: pages are materialized on first write and read
/// as zero before that.
#[derive(Debug, Clone, Default)]
pub struct PhysMemory {
    pages: HashMap<u64, Box<[u8]>>,
}

impl PhysMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Little-endian read of `bytes` (1..=8) at `pa`; must not cross a page.
    pub fn read(&self, pa: u64, bytes: usize) -> u64 {
        let (page, off) = (pa / PAGE_SIZE, (pa % PAGE_SIZE) as usize);
        let Some(p) = self.pages.get(&page) else { return 0 };
        let mut buf = [0u8; 8];
        buf[..bytes].copy_from_slice(&p[off..off + bytes]);
        u64::from_le_bytes(buf)
    }

    pub fn write(&mut self, pa: u64, bytes: usize, value: u64) {
        let (page, off) = (pa / PAGE_SIZE, (pa % PAGE_SIZE) as usize);
        let p = self.pages.entry(page).or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice());
        p[off..off + bytes].copy_from_slice(&value.to_le_bytes()[..bytes]);
    }

    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }
}
