use std::collections::BTreeMap;

use crate::machine::{Stage2Fault, PAGE_SIZE};

/// Who holds a mapped page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ownership {
    Owned,
    /// Owned by this VM and currently lent to another.
    Lent(u32),
    /// Borrowed from the named owner.
    SharedFrom(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
}

impl Perms {
    pub const RW: Perms = Perms { read: true, write: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct S2Entry {
    pub pa_page: u64,
    pub perms: Perms,
    pub ownership: Ownership,
}

/// Stage-2 map of one VM, keyed by IPA page number.
#[derive(Debug, Clone, Default)]
pub struct Stage2Table {
    entries: BTreeMap<u64, S2Entry>,
    holes: Vec<(u64, u64)>,
}

impl Stage2Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn map_identity(&mut self, page: u64, ownership: Ownership) {
        self.entries.insert(page, S2Entry { pa_page: page, perms: Perms::RW, ownership });
    }

    pub fn unmap(&mut self, page: u64) -> Option<S2Entry> {
        self.entries.remove(&page)
    }

    pub fn entry(&self, page: u64) -> Option<&S2Entry> {
        self.entries.get(&page)
    }

    pub fn entry_mut(&mut self, page: u64) -> Option<&mut S2Entry> {
        self.entries.get_mut(&page)
    }

    pub fn add_hole(&mut self, ipa: u64, len: u64) {
        self.holes.push((ipa, len));
    }

    pub fn in_hole(&self, ipa: u64) -> bool {
        self.holes.iter().any(|&(b, l)| ipa >= b && ipa - b < l)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &S2Entry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn translate(&self, ipa: u64, write: bool) -> Result<u64, Stage2Fault> {
        if self.in_hole(ipa) {
            return Err(Stage2Fault::Mmio(ipa));
        }
        match self.entries.get(&(ipa / PAGE_SIZE)) {
            Some(e) if (write && e.perms.write) || (!write && e.perms.read) => {
                Ok(e.pa_page * PAGE_SIZE + ipa % PAGE_SIZE)
            }
            _ => Err(Stage2Fault::Perm(ipa)),
        }
    }
}
