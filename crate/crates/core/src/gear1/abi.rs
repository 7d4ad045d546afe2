use std::fmt;

/// Hypercall numbers. The code goes in x0, arguments in x1..x3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HypercallId {
    /// x1 = vm, x2 = vcpu. Primary only. Returns when the vcpu exits.
    RunVcpu,
    /// x1 = vm, x2 = vcpu, x3 = line. Primary only.
    VirqInject,
    /// x1 = target vm, x2 = payload word. Queues a message and notifies.
    IvcSend,
    /// x1 = target pcpu. Primary only. Goes through EL3 firmware.
    PsciCpuOn,
    /// x1 = first ipa, x2 = page count, x3 = target vm.
    MemShare,
    /// x1 = first ipa, x2 = page count.
    MemReclaim,
    /// x1 = layer, x2 = subject.
    WatchdogKick,
    /// x1 = request id, x2 = status. Device VM only; delivered to Gear2.
    IoAck,
    /// No arguments. Returns the ABI version.
    Version,
}

impl HypercallId {
    pub const ALL: [HypercallId; 9] = [
        HypercallId::RunVcpu,
        HypercallId::VirqInject,
        HypercallId::IvcSend,
        HypercallId::PsciCpuOn,
        HypercallId::MemShare,
        HypercallId::MemReclaim,
        HypercallId::WatchdogKick,
        HypercallId::IoAck,
        HypercallId::Version,
    ];

    pub fn code(self) -> u32 {
        match self {
            HypercallId::RunVcpu => 0x01,
            HypercallId::VirqInject => 0x02,
            HypercallId::IvcSend => 0x03,
            HypercallId::MemShare => 0x10,
            HypercallId::MemReclaim => 0x11,
            HypercallId::IoAck => 0x12,
            HypercallId::WatchdogKick => 0x20,
            HypercallId::Version => 0x30,
            HypercallId::PsciCpuOn => 0xC400_0003,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            HypercallId::RunVcpu => "run_vcpu",
            HypercallId::VirqInject => "virq_inject",
            HypercallId::IvcSend => "ivc_send",
            HypercallId::PsciCpuOn => "psci_cpu_on",
            HypercallId::MemShare => "mem_share",
            HypercallId::MemReclaim => "mem_reclaim",
            HypercallId::WatchdogKick => "watchdog_kick",
            HypercallId::IoAck => "io_ack",
            HypercallId::Version => "version",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }
}

impl fmt::Display for HypercallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Value returned in x0.
pub const HVC_OK: i64 = 0;
pub const HVC_NOT_SUPPORTED: i64 = -1;
pub const HVC_INVALID: i64 = -2;
pub const HVC_DENIED: i64 = -3;
pub const HVC_BUSY: i64 = -4;
pub const HVC_ALREADY_ON: i64 = -5;
pub const HVC_NOT_OWNER: i64 = -6;
pub const HVC_NOT_LENT: i64 = -7;

pub const ABI_VERSION: i64 = 0x0001_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GicdOp {
    Read,
    Write(u64),
}

/// GIC CPU-interface registers that trap when the interface is emulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GiccReg {
    /// Interrupt acknowledge.
    Iar,
    /// End of interrupt.
    Eoir,
}

impl GiccReg {
    pub fn as_str(self) -> &'static str {
        match self {
            GiccReg::Iar => "iar",
            GiccReg::Eoir => "eoir",
        }
    }
}

/// Why a vcpu left guest mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    Hypercall {
        code: u32,
        args: [u64; 3],
    },
    MmioRead {
        addr: u64,
        size: u8,
    },
    MmioWrite {
        addr: u64,
        size: u8,
        value: u64,
        blocking: bool,
    },
    Wfi,
    GicdAccess {
        offset: u64,
        op: GicdOp,
    },
    /// CPU-interface access, only when the interface is emulated.
    GiccAccess {
        reg: GiccReg,
    },
    PhysIrq {
        line: u32,
    },
    Stage2Perm {
        addr: u64,
    },
    Yield,
}

impl ExitReason {
    pub fn tag(&self) -> &'static str {
        match self {
            ExitReason::Hypercall { .. } => "hypercall",
            ExitReason::MmioRead { .. } => "mmio_read",
            ExitReason::MmioWrite { .. } => "mmio_write",
            ExitReason::Wfi => "wfi",
            ExitReason::GicdAccess { .. } => "gicd_access",
            ExitReason::GiccAccess { .. } => "gicc_access",
            ExitReason::PhysIrq { .. } => "phys_irq",
            ExitReason::Stage2Perm { .. } => "stage2_perm",
            ExitReason::Yield => "yield",
        }
    }

    /// Primary argument for trace detail.
    pub fn arg(&self) -> u64 {
        match *self {
            ExitReason::Hypercall { code, .. } => code as u64,
            ExitReason::MmioRead { addr, .. } | ExitReason::MmioWrite { addr, .. } => addr,
            ExitReason::GicdAccess { offset, .. } => offset,
            ExitReason::GiccAccess { reg } => reg as u64,
            ExitReason::PhysIrq { line } => line as u64,
            ExitReason::Stage2Perm { addr } => addr,
            ExitReason::Wfi | ExitReason::Yield => 0,
        }
    }

    /// Code returned to Gear2 by RunVcpu.
    pub fn code(&self) -> u32 {
        match self {
            ExitReason::Hypercall { .. } => 1,
            ExitReason::MmioRead { .. } => 2,
            ExitReason::MmioWrite { .. } => 3,
            ExitReason::Wfi => 4,
            ExitReason::GicdAccess { .. } => 5,
            ExitReason::GiccAccess { .. } => 6,
            ExitReason::PhysIrq { .. } => 7,
            ExitReason::Stage2Perm { .. } => 8,
            ExitReason::Yield => 9,
        }
    }
}
