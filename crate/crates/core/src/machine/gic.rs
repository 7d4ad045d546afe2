use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

/// Interrupt lines 0..16 are SGIs, 16..32 PPIs, the rest SPIs.
pub const SGI_END: u32 = 16;
pub const PPI_END: u32 = 32;

/// Hypervisor timer (EL2 physical) PPI.
pub const LINE_EL2_TIMER: u32 = 26;
/// EL1 virtual timer PPI, the guest tick source.
pub const LINE_VTIMER: u32 = 27;
/// SGI Gear1 uses to poke another pcpu's Gear2 instance.
pub const SGI_KICK: u32 = 1;

/// Where a shared peripheral interrupt is steered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrqRoute {
    pub vm: u32,
    pub vcpu: u32,
    pub pcpu: u32,
}

/// The global distributor.
#[derive(Debug, Clone)]
pub struct GicDistributor {
    lines: u32,
    enable: Vec<bool>,
    pending: Vec<bool>,
    route: Vec<Option<IrqRoute>>,
    /// Per-VM set of pcpus its SGIs may reach, as a bitmask.
    sgi_filter: BTreeMap<u32, u64>,
}

impl GicDistributor {
    pub fn new(lines: u32) -> Self {
        let n = lines as usize;
        GicDistributor {
            lines,
            enable: vec![false; n],
            pending: vec![false; n],
            route: vec![None; n],
            sgi_filter: BTreeMap::new(),
        }
    }

    pub fn lines(&self) -> u32 {
        self.lines
    }

    pub fn contains(&self, line: u32) -> bool {
        line < self.lines
    }

    pub fn set_enabled(&mut self, line: u32, on: bool) {
        if let Some(e) = self.enable.get_mut(line as usize) {
            *e = on;
        }
    }

    /// SGIs and PPIs are banked per CPU and treated as always enabled.
    pub fn is_enabled(&self, line: u32) -> bool {
        line < PPI_END || self.enable.get(line as usize).copied().unwrap_or(false)
    }

    pub fn set_route(&mut self, line: u32, route: IrqRoute) {
        if let Some(r) = self.route.get_mut(line as usize) {
            *r = Some(route);
        }
    }

    pub fn route(&self, line: u32) -> Option<IrqRoute> {
        self.route.get(line as usize).copied().flatten()
    }

    pub fn set_pending(&mut self, line: u32, p: bool) {
        if let Some(x) = self.pending.get_mut(line as usize) {
            *x = p;
        }
    }

    pub fn is_pending(&self, line: u32) -> bool {
        self.pending.get(line as usize).copied().unwrap_or(false)
    }

    /// Lines latched while disabled, in line order.
    pub fn pending_lines(&self) -> Vec<u32> {
        (0..self.lines).filter(|&l| self.pending[l as usize]).collect()
    }

    pub fn set_sgi_filter(&mut self, vm: u32, allowed_pcpus: u64) {
        self.sgi_filter.insert(vm, allowed_pcpus);
    }

    pub fn sgi_filter(&self, vm: u32) -> u64 {
        self.sgi_filter.get(&vm).copied().unwrap_or(0)
    }

    /// Restrict a requested SGI target mask to what `vm` may reach.
    /// Returns the allowed mask and whether anything was dropped.
    pub fn filter_sgi(&self, vm: u32, requested: u64) -> (u64, bool) {
        let allowed = requested & self.sgi_filter(vm);
        (allowed, allowed != requested)
    }
}

/// State of one list register entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrState {
    Pending,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListRegister {
    pub line: u32,
    pub priority: u8,
    pub state: LrState,
}

/// Virtual CPU interface of one vcpu: list registers backed by a software
/// overflow queue, so an injection is never dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GicCpuInterface {
    capacity: usize,
    lrs: Vec<ListRegister>,
    overflow: VecDeque<u32>,
    active: Option<u32>,
    injected: u64,
    delivered: u64,
}

pub const DEFAULT_PRIORITY: u8 = 0xa0;

impl GicCpuInterface {
    pub fn new(list_registers: usize) -> Self {
        GicCpuInterface {
            capacity: list_registers.max(1),
            lrs: Vec::with_capacity(list_registers),
            overflow: VecDeque::new(),
            active: None,
            injected: 0,
            delivered: 0,
        }
    }

    pub fn inject(&mut self, line: u32) {
        self.injected += 1;
        if self.lrs.len() < self.capacity {
            self.lrs.push(ListRegister { line, priority: DEFAULT_PRIORITY, state: LrState::Pending });
        } else {
            self.overflow.push_back(line);
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.lrs.is_empty()
    }

    pub fn in_list_registers(&self) -> usize {
        self.lrs.len()
    }

    pub fn in_overflow(&self) -> usize {
        self.overflow.len()
    }

    pub fn pending_count(&self) -> u64 {
        (self.lrs.len() + self.overflow.len()) as u64
    }

    pub fn injected(&self) -> u64 {
        self.injected
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn active(&self) -> Option<u32> {
        self.active
    }

    pub fn list_registers(&self) -> &[ListRegister] {
        &self.lrs
    }

    /// Guest acknowledge: the oldest pending line becomes active and its list
    /// register is refilled from the overflow queue.
    pub fn acknowledge(&mut self) -> Option<u32> {
        if self.lrs.is_empty() {
            return None;
        }
        let lr = self.lrs.remove(0);
        if let Some(next) = self.overflow.pop_front() {
            self.lrs.push(ListRegister { line: next, priority: DEFAULT_PRIORITY, state: LrState::Pending });
        }
        self.delivered += 1;
        self.active = Some(lr.line);
        Some(lr.line)
    }

    pub fn end_of_interrupt(&mut self) {
        self.active = None;
    }

    /// Drop all pending state (used when a VM is restarted).
    pub fn reset(&mut self) {
        *self = GicCpuInterface::new(self.capacity);
    }

    /// Injected count equals delivered plus still pending.
    pub fn accounting_holds(&self) -> bool {
        self.injected == self.delivered + self.pending_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_injections_four_lrs() {
        let mut g = GicCpuInterface::new(4);
        for l in 0..10 {
            g.inject(40 + l);
        }
        assert_eq!(g.in_list_registers(), 4);
        assert_eq!(g.in_overflow(), 6);
        assert!(g.accounting_holds());
        let mut seen = Vec::new();
        while let Some(l) = g.acknowledge() {
            seen.push(l);
            g.end_of_interrupt();
            assert!(g.accounting_holds());
        }
        assert_eq!(seen, (40..50).collect::<Vec<_>>());
    }

    #[test]
    fn disabled_spi_and_banked_lines() {
        let mut d = GicDistributor::new(64);
        assert!(d.is_enabled(27));
        assert!(!d.is_enabled(42));
        d.set_enabled(42, true);
        assert!(d.is_enabled(42));
    }

    #[test]
    fn sgi_filter_masks() {
        let mut d = GicDistributor::new(64);
        d.set_sgi_filter(3, 0b1100);
        assert_eq!(d.filter_sgi(3, 0b1111), (0b1100, true));
        assert_eq!(d.filter_sgi(3, 0b0100), (0b0100, false));
    }
}
