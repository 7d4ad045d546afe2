use super::super::simcore::SimTime;

/// Which comparator fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    /// The EL1 virtual timer of the vcpu currently loaded on the pcpu.
    El1Virtual,
    /// The hypervisor's EL2 physical timer.
    El2Physical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiredTimer {
    pub pcpu: u32,
    pub kind: TimerKind,
}

/// A compare register with an enable bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Comparator {
    pub value: u64,
    pub enabled: bool,
}

impl Comparator {
    pub fn armed_at(&self) -> Option<u64> {
        self.enabled.then_some(self.value)
    }
}

/// Per-pcpu timers compared against one shared system counter.
///
/// The EL1 virtual comparator here is the hardware register; vcpu contexts
/// hold their own copy which the hypervisor loads and saves on world switch.
#[derive(Debug, Clone)]
pub struct TimerUnit {
    el1_virtual: Vec<Comparator>,
    el2_physical: Vec<Comparator>,
}

impl TimerUnit {
    pub fn new(pcpus: usize) -> Self {
        TimerUnit { el1_virtual: vec![Comparator::default(); pcpus], el2_physical: vec![Comparator::default(); pcpus] }
    }

    pub fn el1(&self, pcpu: u32) -> Comparator {
        self.el1_virtual[pcpu as usize]
    }

    pub fn el2(&self, pcpu: u32) -> Comparator {
        self.el2_physical[pcpu as usize]
    }

    pub fn set_el1(&mut self, pcpu: u32, c: Comparator) {
        self.el1_virtual[pcpu as usize] = c;
    }

    pub fn set_el2(&mut self, pcpu: u32, c: Comparator) {
        self.el2_physical[pcpu as usize] = c;
    }

    /// Earliest enabled comparator on `pcpu`.
    pub fn next_deadline(&self, pcpu: u32) -> Option<u64> {
        let a = self.el1(pcpu).armed_at();
        let b = self.el2(pcpu).armed_at();
        match (a, b) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        }
    }

    /// Fire every enabled comparator at or below the counter, in pcpu order
    /// and EL1 before EL2 within a pcpu. Fired comparators disarm.
    pub fn tick(&mut self, system_count: SimTime) -> Vec<FiredTimer> {
        let now = system_count.nanos();
        let mut fired = Vec::new();
        for p in 0..self.el1_virtual.len() {
            for (kind, c) in
                [(TimerKind::El1Virtual, &mut self.el1_virtual[p]), (TimerKind::El2Physical, &mut self.el2_physical[p])]
            {
                if c.enabled && c.value <= now {
                    c.enabled = false;
                    fired.push(FiredTimer { pcpu: p as u32, kind });
                }
            }
        }
        fired
    }
}
