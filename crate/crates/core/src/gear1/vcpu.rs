use crate::machine::{Comparator, GicCpuInterface};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockReason {
    Wfi,
    /// Waiting for a device-model acknowledgment.
    Mmio,
    /// Program finished; parked until an interrupt arrives.
    Halted,
    /// Waiting for room in the device-model request ring.
    Ring,
}

impl BlockReason {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockReason::Wfi => "wfi",
            BlockReason::Mmio => "mmio",
            BlockReason::Halted => "halted",
            BlockReason::Ring => "ring",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Ready,
    Running,
    Blocked(BlockReason),
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SysRegs {
    pub el1_timer: Comparator,
    pub irq_masked: bool,
    /// Index of the next guest workload instruction.
    pub program_point: u64,
}

/// Architectural state of one vcpu.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VcpuContext {
    pub general_regs: [u64; 31],
    pub sys_regs: SysRegs,
    pub vif: GicCpuInterface,
    pub runstate: RunState,
}

impl VcpuContext {
    pub fn new(list_registers: usize) -> Self {
        VcpuContext {
            general_regs: [0; 31],
            sys_regs: SysRegs::default(),
            vif: GicCpuInterface::new(list_registers),
            runstate: RunState::Ready,
        }
    }
}
