use std::fmt::{self, Write as _};
use std::io::{self, Write};

use sha2::{Digest, Sha256};

use super::time::SimTime;

/// Execution context a physical CPU is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum World {
    /// The partitioning hypervisor itself, at EL2.
    Gear1,
    /// A vcpu of some VM, including the primary VM that hosts Gear2.
    Vm { vm: u32, vcpu: u32 },
}

impl fmt::Display for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            World::Gear1 => f.write_str("gear1"),
            World::Vm { vm, vcpu } => write!(f, "vm{vm}.{vcpu}"),
        }
    }
}

/// Who a trace record is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Gear1,
    Gear2,
    Vm {
        vm: u32,
        vcpu: u32,
    },
    /// The user-space device model inside the device VM.
    Dvm,
    /// Hardware, firmware or anything outside the software stack.
    Machine,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Gear1 => f.write_str("gear1"),
            Actor::Gear2 => f.write_str("gear2"),
            Actor::Vm { vm, vcpu } => write!(f, "vm{vm}.{vcpu}"),
            Actor::Dvm => f.write_str("dvm"),
            Actor::Machine => f.write_str("machine"),
        }
    }
}

/// What started the chain of hypervisor work a record belongs to.
///
/// Overhead accounting uses this to separate interrupt forwarding from
/// other exits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Cause {
    #[default]
    None,
    Boot,
    Irq,
    Mmio,
    Wfi,
    Hypercall,
    Yield,
    Fault,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::None => "none",
            Cause::Boot => "boot",
            Cause::Irq => "irq",
            Cause::Mmio => "mmio",
            Cause::Wfi => "wfi",
            Cause::Hypercall => "hvc",
            Cause::Yield => "yield",
            Cause::Fault => "fault",
        }
    }
}

/// Gear2 thread named in scheduling records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThreadTag {
    Idle,
    Vcpu { vm: u32, vcpu: u32 },
    Service { id: u32 },
}

impl fmt::Display for ThreadTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThreadTag::Idle => f.write_str("idle"),
            ThreadTag::Vcpu { vm, vcpu } => write!(f, "vm{vm}.{vcpu}"),
            ThreadTag::Service { id } => write!(f, "svc{id}"),
        }
    }
}

/// Tagged record body. Field order here is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Free-form marker used by tests and phase boundaries.
    Marker {
        id: u64,
    },

    // machine
    IrqRaised {
        line: u32,
        pcpu: u32,
    },
    IrqLatched {
        line: u32,
    },
    DeviceSubmit {
        device: u32,
        seq: u64,
    },
    DeviceComplete {
        device: u32,
        seq: u64,
    },
    PcpuOn {
        pcpu: u32,
    },

    // gear1
    VmTrap {
        vm: u32,
        vcpu: u32,
        reason: &'static str,
        arg: u64,
    },
    RouteToGear2 {
        vm: u32,
        vcpu: u32,
        reason: &'static str,
    },
    WorldSwitch {
        pcpu: u32,
        from: World,
        to: World,
    },
    Hypercall {
        vm: u32,
        vcpu: u32,
        code: u32,
        arg: u64,
        result: i64,
    },
    VirqInject {
        vm: u32,
        vcpu: u32,
        line: u32,
    },
    GicdEmul {
        vm: u32,
        vcpu: u32,
        offset: u32,
        write: bool,
        value: u64,
    },
    GiccEmul {
        vm: u32,
        vcpu: u32,
        reg: &'static str,
    },
    SgiFiltered {
        vm: u32,
        requested: u64,
        allowed: u64,
    },
    El2TimerFire {
        pcpu: u32,
        vm: u32,
        vcpu: u32,
    },
    El3Hop {
        pcpu: u32,
    },
    Stage2Fault {
        vm: u32,
        vcpu: u32,
        ipa: u64,
        perm: bool,
    },
    VmRestart {
        vm: u32,
    },

    // gear2
    Gear2Exit {
        vm: u32,
        vcpu: u32,
        reason: &'static str,
    },
    Gear2Irq {
        pcpu: u32,
        line: u32,
    },
    Pick {
        pcpu: u32,
        thread: ThreadTag,
    },
    Block {
        vm: u32,
        vcpu: u32,
        reason: &'static str,
    },
    Wake {
        vm: u32,
        vcpu: u32,
    },
    Quantum {
        pcpu: u32,
    },
    DvmEnqueue {
        device: u32,
        req: u64,
        vm: u32,
        vcpu: u32,
    },
    DvmRingFull {
        device: u32,
        vm: u32,
        vcpu: u32,
    },
    IoAck {
        device: u32,
        req: u64,
        vm: u32,
        vcpu: u32,
        status: i64,
    },
    IpAdvance {
        vm: u32,
        vcpu: u32,
    },
    ServiceRun {
        id: u32,
        ns: u64,
    },

    // guests
    Compute {
        ns: u64,
    },
    MemTouch {
        count: u64,
        misses: u64,
    },
    MmioDevice {
        addr: u64,
        write: bool,
    },
    IrqTaken {
        line: u32,
    },
    IrqDone {
        line: u32,
    },
    Wfi,
    WfiWake,
    TimerArm {
        deadline: u64,
    },
    ProgramEnd,
    RtWake {
        expected: u64,
        actual: u64,
    },
    Stall {
        what: &'static str,
    },

    // devmodel
    GdmHop {
        req: u64,
    },
    IoServe {
        device: u32,
        req: u64,
        op: &'static str,
        status: i64,
    },
    ApiForward {
        mode: &'static str,
        bytes: u64,
    },

    // supervision
    WatchdogKick {
        layer: &'static str,
        subject: u32,
    },
    Supervision {
        layer: &'static str,
        subject: u32,
        action: &'static str,
    },
}

impl Action {
    pub fn tag(&self) -> &'static str {
        match self {
            Action::Marker { .. } => "marker",
            Action::IrqRaised { .. } => "irq_raised",
            Action::IrqLatched { .. } => "irq_latched",
            Action::DeviceSubmit { .. } => "device_submit",
            Action::DeviceComplete { .. } => "device_complete",
            Action::PcpuOn { .. } => "pcpu_on",
            Action::VmTrap { .. } => "vm_trap",
            Action::RouteToGear2 { .. } => "route_to_gear2",
            Action::WorldSwitch { .. } => "world_switch",
            Action::Hypercall { .. } => "hypercall",
            Action::VirqInject { .. } => "virq_inject",
            Action::GicdEmul { .. } => "gicd_emul",
            Action::GiccEmul { .. } => "gicc_emul",
            Action::SgiFiltered { .. } => "sgi_filtered",
            Action::El2TimerFire { .. } => "el2_timer_fire",
            Action::El3Hop { .. } => "el3_hop",
            Action::Stage2Fault { .. } => "stage2_fault",
            Action::VmRestart { .. } => "vm_restart",
            Action::Gear2Exit { .. } => "gear2_exit",
            Action::Gear2Irq { .. } => "gear2_irq",
            Action::Pick { .. } => "pick",
            Action::Block { .. } => "block",
            Action::Wake { .. } => "wake",
            Action::Quantum { .. } => "quantum",
            Action::DvmEnqueue { .. } => "dvm_enqueue",
            Action::DvmRingFull { .. } => "dvm_ring_full",
            Action::IoAck { .. } => "io_ack",
            Action::IpAdvance { .. } => "ip_advance",
            Action::ServiceRun { .. } => "service_run",
            Action::Compute { .. } => "compute",
            Action::MemTouch { .. } => "mem_touch",
            Action::MmioDevice { .. } => "mmio_device",
            Action::IrqTaken { .. } => "irq_taken",
            Action::IrqDone { .. } => "irq_done",
            Action::Wfi => "wfi",
            Action::WfiWake => "wfi_wake",
            Action::TimerArm { .. } => "timer_arm",
            Action::ProgramEnd => "program_end",
            Action::RtWake { .. } => "rt_wake",
            Action::Stall { .. } => "stall",
            Action::GdmHop { .. } => "gdm_hop",
            Action::IoServe { .. } => "io_serve",
            Action::ApiForward { .. } => "api_forward",
            Action::WatchdogKick { .. } => "watchdog_kick",
            Action::Supervision { .. } => "supervision",
        }
    }

    /// `k=v;k=v` rendering of the fields, in declaration order.
    pub fn write_detail(&self, out: &mut String) {
        macro_rules! kv {
            ($($k:literal = $v:expr),* $(,)?) => {{
                let mut first = true;
                $(
                    if !first { out.push(';'); }
                    first = false;
                    let _ = write!(out, concat!($k, "={}"), $v);
                )*
                let _ = first;
            }};
        }
        match self {
            Action::Marker { id } => kv!("id" = id),
            Action::IrqRaised { line, pcpu } => kv!("line" = line, "pcpu" = pcpu),
            Action::IrqLatched { line } => kv!("line" = line),
            Action::DeviceSubmit { device, seq } | Action::DeviceComplete { device, seq } => {
                kv!("dev" = device, "seq" = seq)
            }
            Action::PcpuOn { pcpu } => kv!("pcpu" = pcpu),
            Action::VmTrap { vm, vcpu, reason, arg } => {
                kv!("vm" = vm, "vcpu" = vcpu, "reason" = reason, "arg" = arg)
            }
            Action::RouteToGear2 { vm, vcpu, reason } | Action::Gear2Exit { vm, vcpu, reason } => {
                kv!("vm" = vm, "vcpu" = vcpu, "reason" = reason)
            }
            Action::WorldSwitch { pcpu, from, to } => kv!("pcpu" = pcpu, "from" = from, "to" = to),
            Action::Hypercall { vm, vcpu, code, arg, result } => {
                kv!("vm" = vm, "vcpu" = vcpu, "code" = code, "arg" = arg, "result" = result)
            }
            Action::VirqInject { vm, vcpu, line } => kv!("vm" = vm, "vcpu" = vcpu, "line" = line),
            Action::GicdEmul { vm, vcpu, offset, write, value } => {
                kv!("vm" = vm, "vcpu" = vcpu, "off" = offset, "w" = u8::from(*write), "val" = value)
            }
            Action::GiccEmul { vm, vcpu, reg } => kv!("vm" = vm, "vcpu" = vcpu, "reg" = reg),
            Action::SgiFiltered { vm, requested, allowed } => {
                kv!("vm" = vm, "req" = requested, "allowed" = allowed)
            }
            Action::El2TimerFire { pcpu, vm, vcpu } => kv!("pcpu" = pcpu, "vm" = vm, "vcpu" = vcpu),
            Action::El3Hop { pcpu } => kv!("pcpu" = pcpu),
            Action::Stage2Fault { vm, vcpu, ipa, perm } => {
                kv!("vm" = vm, "vcpu" = vcpu, "ipa" = ipa, "perm" = u8::from(*perm))
            }
            Action::VmRestart { vm } => kv!("vm" = vm),
            Action::Gear2Irq { pcpu, line } => kv!("pcpu" = pcpu, "line" = line),
            Action::Pick { pcpu, thread } => kv!("pcpu" = pcpu, "thread" = thread),
            Action::Block { vm, vcpu, reason } => kv!("vm" = vm, "vcpu" = vcpu, "reason" = reason),
            Action::Wake { vm, vcpu } | Action::IpAdvance { vm, vcpu } => kv!("vm" = vm, "vcpu" = vcpu),
            Action::Quantum { pcpu } => kv!("pcpu" = pcpu),
            Action::DvmEnqueue { device, req, vm, vcpu } => {
                kv!("dev" = device, "req" = req, "vm" = vm, "vcpu" = vcpu)
            }
            Action::DvmRingFull { device, vm, vcpu } => kv!("dev" = device, "vm" = vm, "vcpu" = vcpu),
            Action::IoAck { device, req, vm, vcpu, status } => {
                kv!("dev" = device, "req" = req, "vm" = vm, "vcpu" = vcpu, "status" = status)
            }
            Action::ServiceRun { id, ns } => kv!("id" = id, "ns" = ns),
            Action::Compute { ns } => kv!("ns" = ns),
            Action::MemTouch { count, misses } => kv!("count" = count, "misses" = misses),
            Action::MmioDevice { addr, write } => kv!("addr" = addr, "w" = u8::from(*write)),
            Action::IrqTaken { line } | Action::IrqDone { line } => kv!("line" = line),
            Action::Wfi | Action::WfiWake | Action::ProgramEnd => {}
            Action::TimerArm { deadline } => kv!("deadline" = deadline),
            Action::RtWake { expected, actual } => kv!("expected" = expected, "actual" = actual),
            Action::Stall { what } => kv!("what" = what),
            Action::GdmHop { req } => kv!("req" = req),
            Action::IoServe { device, req, op, status } => {
                kv!("dev" = device, "req" = req, "op" = op, "status" = status)
            }
            Action::ApiForward { mode, bytes } => kv!("mode" = mode, "bytes" = bytes),
            Action::WatchdogKick { layer, subject } => kv!("layer" = layer, "subject" = subject),
            Action::Supervision { layer, subject, action } => {
                kv!("layer" = layer, "subject" = subject, "action" = action)
            }
        }
    }
}

/// One line of the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: SimTime,
    pub actor: Actor,
    pub action: Action,
    pub cause: Cause,
    /// Virtual time consumed by this step, in ns.
    pub cost: u64,
}

impl TraceRecord {
    pub fn new(at: SimTime, actor: Actor, action: Action) -> Self {
        TraceRecord { at, actor, action, cause: Cause::None, cost: 0 }
    }

    pub fn with_cost(mut self, cost: u64) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_cause(mut self, cause: Cause) -> Self {
        self.cause = cause;
        self
    }

    /// Canonical line without the trailing newline:
    /// `at \t actor \t tag \t detail \t cost`. A non-default cause is
    /// appended to the detail as `cause=<name>`.
    pub fn write_canonical(&self, out: &mut String) {
        let _ = write!(out, "{}\t{}\t{}\t", self.at.0, self.actor, self.action.tag());
        let before = out.len();
        self.action.write_detail(out);
        if self.cause != Cause::None {
            if out.len() > before {
                out.push(';');
            }
            out.push_str("cause=");
            out.push_str(self.cause.as_str());
        }
        let _ = write!(out, "\t{}", self.cost);
    }
}

/// Append-only list of records in dispatch order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

/// SHA-256 of the empty byte string, the hash of a trace with no records.
pub const EMPTY_TRACE_HASH: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

impl Trace {
    pub fn new() -> Self {
        Trace { records: Vec::new() }
    }

    pub fn push(&mut self, r: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.at <= r.at), "trace time went backwards");
        self.records.push(r);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [TraceRecord] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceRecord> {
        self.records.iter()
    }

    /// True when timestamps never decrease.
    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[0].at <= w[1].at)
    }

    /// Stream the canonical serialization: one record per line, each line
    /// terminated by `\n`.
    pub fn write_canonical<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut line = String::with_capacity(128);
        for r in &self.records {
            line.clear();
            r.write_canonical(&mut line);
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_canonical_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_canonical(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii")
    }
}

impl<'a> IntoIterator for &'a Trace {
    type Item = &'a TraceRecord;
    type IntoIter = std::slice::Iter<'a, TraceRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

struct HashSink(Sha256);

impl Write for HashSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// SHA-256 over the canonical serialization, as lowercase hex.
pub fn trace_hash(trace: &Trace) -> String {
    let mut sink = HashSink(Sha256::new());
    trace.write_canonical(&mut sink).expect("hash sink never fails");
    let digest = sink.0.finalize();
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}
