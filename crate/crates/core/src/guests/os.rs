use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::devmodel::Serviced;
use crate::gear1::{GiccReg, HypercallId};
use crate::machine::LINE_VTIMER;
use crate::simcore::Prng;

use super::instr::Instr;
use super::program::WorkloadProgram;
use super::rt::WakeModel;

/// Supervision layer number used for kernel heartbeats.
pub const HEARTBEAT_LAYER: u64 = 2;

/// What the interpreter sees of the machine while it runs.
pub trait GuestEnv {
    fn now(&self) -> u64;
    fn irq_pending(&self) -> bool;
    /// Read the interrupt acknowledge register.
    fn acknowledge(&mut self) -> Option<u32>;
    fn end_of_interrupt(&mut self);
    /// Next device-model request and the charge for reaching it.
    fn service_io(&mut self) -> Option<(Serviced, u64)> {
        None
    }
}

/// One step of guest execution, interpreted by the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuestAction {
    Compute(u64),
    /// Load/store to be resolved through stage-2; the system calls
    /// [`GuestOs::complete_access`] when the access retires.
    Access {
        addr: u64,
        write: bool,
        value: u64,
        size: u8,
        blocking: bool,
    },
    Hypercall {
        code: u32,
        args: [u64; 3],
    },
    MemTouch {
        ipa: u64,
        stride: u64,
        count: u32,
    },
    /// Program the EL1 virtual timer.
    SetTimer(Option<u64>),
    KickWatchdog,
    /// Nothing to do until an interrupt arrives.
    Wait,
    /// Trapped CPU-interface access, only with an emulated vGIC.
    Gicc(GiccReg),
    IrqTaken(u32),
    IrqDone(u32),
    RtWake {
        expected: u64,
        actual: u64,
    },
    ProgramEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stall {
    /// Application stops kicking its watchdog; the kernel stays alive.
    App,
    /// The whole guest hangs with interrupts masked.
    Vm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FrameOp {
    Instr(Instr),
    ProgramTimer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// IAR read pending (trapped when emulated).
    Entry,
    Body,
    /// EOIR write pending.
    Exit,
}

#[derive(Debug, Clone)]
struct Frame {
    line: Option<u32>,
    phase: Phase,
    ops: VecDeque<FrameOp>,
}

#[derive(Debug, Clone, Default)]
struct KernelTimers {
    tick_period: u64,
    tick_next: u64,
    user: Option<u64>,
    user_prev: Option<u64>,
    user_fired: Option<u64>,
    heartbeat: Option<(u64, u64)>,
}

impl KernelTimers {
    fn next_deadline(&self) -> Option<u64> {
        let tick = (self.tick_period > 0).then_some(self.tick_next);
        [tick, self.user, self.heartbeat.map(|h| h.1)].into_iter().flatten().min()
    }
}

/// Interpreter for one vcpu's workload plus the small guest kernel that
/// owns its timers and interrupt entry.
#[derive(Debug, Clone)]
pub struct GuestOs {
    pub vm: u32,
    pub vcpu: u32,
    program: Arc<WorkloadProgram>,
    pp: usize,
    loops: BTreeMap<usize, u32>,
    frame: Option<Frame>,
    timers: KernelTimers,
    wfi_active: bool,
    irq_since_wfi: bool,
    io_ack: Option<Serviced>,
    booted: bool,
    ended: bool,
    pub gicc_emulated: bool,
    pub wake: WakeModel,
    prng: Prng,
    pub stall: Option<Stall>,
    /// Value of the last retired load.
    pub last_load: u64,
    pub ticks: u64,
    pub irqs_taken: u64,
    pub samples: Vec<u64>,
}

impl GuestOs {
    pub fn new(vm: u32, vcpu: u32, program: Arc<WorkloadProgram>, prng: Prng) -> Self {
        GuestOs {
            vm,
            vcpu,
            program,
            pp: 0,
            loops: BTreeMap::new(),
            frame: None,
            timers: KernelTimers::default(),
            wfi_active: false,
            irq_since_wfi: false,
            io_ack: None,
            booted: false,
            ended: false,
            gicc_emulated: false,
            wake: WakeModel::zero(),
            prng,
            stall: None,
            last_load: 0,
            ticks: 0,
            irqs_taken: 0,
            samples: Vec::new(),
        }
    }

    pub fn program(&self) -> &WorkloadProgram {
        &self.program
    }

    pub fn pp(&self) -> usize {
        self.pp
    }

    pub fn in_handler(&self) -> bool {
        self.frame.is_some()
    }

    pub fn ended(&self) -> bool {
        self.ended
    }

    /// Fresh kernel state with the same program, as after a VM restart.
    pub fn restart(&mut self) {
        let prng = self.prng.clone();
        let mut fresh = GuestOs::new(self.vm, self.vcpu, self.program.clone(), prng);
        fresh.gicc_emulated = self.gicc_emulated;
        fresh.wake = self.wake;
        *self = fresh;
    }

    /// Retire the pending access. Loads deliver `value`.
    pub fn complete_access(&mut self, value: u64) {
        self.last_load = value;
        if let Some(f) = &mut self.frame {
            if let Some(FrameOp::Instr(Instr::Mmio { .. })) = f.ops.front() {
                f.ops.pop_front();
                return;
            }
        }
        if let Some(Instr::Mmio { .. }) = self.program.instructions.get(self.pp) {
            self.pp += 1;
        }
    }

    fn boot_timers(&mut self, now: u64) {
        let p = &self.program;
        if p.tick_hz > 0 {
            self.timers.tick_period = 1_000_000_000 / p.tick_hz as u64;
            self.timers.tick_next = (now / self.timers.tick_period + 1) * self.timers.tick_period;
        }
        if let Some(h) = p.heartbeat_ns {
            self.timers.heartbeat = Some((h, now + h));
        }
    }

    /// Advance the interpreter by one action.
    pub fn step(&mut self, env: &mut dyn GuestEnv) -> GuestAction {
        if self.stall == Some(Stall::Vm) {
            return GuestAction::Compute(1_000_000);
        }
        if !self.booted {
            self.booted = true;
            self.boot_timers(env.now());
            return GuestAction::SetTimer(self.timers.next_deadline());
        }
        if let Some(s) = self.io_ack.take() {
            return GuestAction::Hypercall {
                code: HypercallId::IoAck.code(),
                args: [s.req.seq, s.status as u64, s.value],
            };
        }
        if self.frame.is_none() && env.irq_pending() {
            // A pending interrupt retires an untimed WFI before it is taken.
            if self.program.instructions.get(self.pp) == Some(&Instr::Wfi) && self.timers.user.is_none() {
                self.wfi_active = false;
                self.pp += 1;
            }
            self.frame = Some(Frame { line: None, phase: Phase::Entry, ops: VecDeque::new() });
            if self.gicc_emulated {
                return GuestAction::Gicc(GiccReg::Iar);
            }
        }
        if let Some(a) = self.step_frame(env) {
            return a;
        }
        self.step_main(env)
    }

    fn step_frame(&mut self, env: &mut dyn GuestEnv) -> Option<GuestAction> {
        let f = self.frame.as_mut()?;
        match f.phase {
            Phase::Entry => {
                let Some(line) = env.acknowledge() else {
                    // Spurious: the pending interrupt was withdrawn.
                    self.frame = None;
                    return None;
                };
                self.irqs_taken += 1;
                f.line = Some(line);
                f.phase = Phase::Body;
                let ops = self.handler_ops(line, env.now());
                self.frame.as_mut().expect("frame").ops = ops;
                Some(GuestAction::IrqTaken(line))
            }
            Phase::Body => {
                let Some(op) = f.ops.front().copied() else {
                    f.phase = Phase::Exit;
                    if self.gicc_emulated {
                        return Some(GuestAction::Gicc(GiccReg::Eoir));
                    }
                    return self.step_frame(env);
                };
                match op {
                    FrameOp::ProgramTimer => {
                        f.ops.pop_front();
                        Some(GuestAction::SetTimer(self.timers.next_deadline()))
                    }
                    FrameOp::Instr(Instr::Mmio { addr, write, value, size, blocking }) => {
                        Some(GuestAction::Access { addr, write, value, size, blocking })
                    }
                    FrameOp::Instr(Instr::ServiceIo) => match env.service_io() {
                        Some((s, hop)) => {
                            self.io_ack = Some(s);
                            Some(GuestAction::Compute(hop))
                        }
                        None => {
                            f.ops.pop_front();
                            self.step_frame(env)
                        }
                    },
                    FrameOp::Instr(i) => {
                        f.ops.pop_front();
                        match self.simple(i) {
                            Some(a) => Some(a),
                            None => self.step_frame(env),
                        }
                    }
                }
            }
            Phase::Exit => {
                let line = f.line.expect("acknowledged");
                env.end_of_interrupt();
                self.frame = None;
                self.irq_since_wfi = true;
                Some(GuestAction::IrqDone(line))
            }
        }
    }

    fn handler_ops(&mut self, line: u32, now: u64) -> VecDeque<FrameOp> {
        let mut ops = VecDeque::new();
        if line == LINE_VTIMER {
            let t = &mut self.timers;
            if let Some((period, next)) = t.heartbeat {
                if now >= next {
                    let mut n = next;
                    while n <= now {
                        n += period;
                    }
                    t.heartbeat = Some((period, n));
                    ops.push_back(FrameOp::Instr(Instr::Hypercall {
                        code: HypercallId::WatchdogKick.code(),
                        args: [HEARTBEAT_LAYER, self.vm as u64, 0],
                    }));
                }
            }
            if t.tick_period > 0 && now >= t.tick_next {
                while t.tick_next <= now {
                    t.tick_next += t.tick_period;
                    self.ticks += 1;
                }
            }
            if let Some(d) = t.user {
                if now >= d {
                    t.user = None;
                    t.user_fired = Some(d);
                    let cost = self.wake.draw(&mut self.prng);
                    ops.push_back(FrameOp::Instr(Instr::Compute(cost)));
                }
            }
            ops.push_back(FrameOp::ProgramTimer);
        }
        if let Some(body) = self.program.handlers.get(&line) {
            ops.extend(body.iter().copied().map(FrameOp::Instr));
        }
        ops
    }

    /// Instructions that behave the same in handlers and the main program.
    fn simple(&mut self, i: Instr) -> Option<GuestAction> {
        match i {
            Instr::Compute(ns) => Some(GuestAction::Compute(ns)),
            Instr::Hypercall { code, args } => Some(GuestAction::Hypercall { code, args }),
            Instr::MemTouch { ipa, stride, count } => Some(GuestAction::MemTouch { ipa, stride, count }),
            Instr::KickWatchdog if self.stall == Some(Stall::App) => None,
            Instr::KickWatchdog => Some(GuestAction::KickWatchdog),
            _ => None,
        }
    }

    fn step_main(&mut self, env: &mut dyn GuestEnv) -> GuestAction {
        // Zero-time instructions are folded; bounded so a degenerate
        // program cannot spin forever.
        for _ in 0..1024 {
            let Some(&instr) = self.program.instructions.get(self.pp) else {
                self.ended = true;
                return GuestAction::ProgramEnd;
            };
            match instr {
                Instr::Mmio { addr, write, value, size, blocking } => {
                    return GuestAction::Access { addr, write, value, size, blocking }
                }
                Instr::ArmTimer(delta) => {
                    let now = env.now();
                    let anchored = self.timers.user_prev.map(|p| p + delta).filter(|&d| d > now);
                    let d = anchored.unwrap_or(now + delta);
                    self.timers.user = Some(d);
                    self.timers.user_prev = Some(d);
                    self.timers.user_fired = None;
                    self.pp += 1;
                    return GuestAction::SetTimer(self.timers.next_deadline());
                }
                Instr::Wfi => {
                    if !self.wfi_active {
                        self.wfi_active = true;
                        self.irq_since_wfi = false;
                    }
                    if let Some(expected) = self.timers.user_fired.take() {
                        self.wfi_active = false;
                        self.pp += 1;
                        let actual = env.now();
                        self.samples.push(actual - expected);
                        return GuestAction::RtWake { expected, actual };
                    }
                    if self.timers.user.is_none() && self.irq_since_wfi {
                        self.wfi_active = false;
                        self.pp += 1;
                        continue;
                    }
                    return GuestAction::Wait;
                }
                Instr::LoopTo { index, times } => {
                    let n = self.loops.entry(self.pp).or_default();
                    if times == 0 || *n < times {
                        *n += 1;
                        self.pp = index;
                    } else {
                        *n = 0;
                        self.pp += 1;
                    }
                }
                Instr::ServiceIo => match env.service_io() {
                    Some((s, hop)) => {
                        self.io_ack = Some(s);
                        return GuestAction::Compute(hop);
                    }
                    None => self.pp += 1,
                },
                other => {
                    self.pp += 1;
                    if let Some(a) = self.simple(other) {
                        return a;
                    }
                }
            }
        }
        GuestAction::Compute(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::GicCpuInterface;

    struct Env {
        now: u64,
        vif: GicCpuInterface,
    }

    impl GuestEnv for Env {
        fn now(&self) -> u64 {
            self.now
        }
        fn irq_pending(&self) -> bool {
            self.vif.has_pending()
        }
        fn acknowledge(&mut self) -> Option<u32> {
            self.vif.acknowledge()
        }
        fn end_of_interrupt(&mut self) {
            self.vif.end_of_interrupt()
        }
    }

    fn guest(p: WorkloadProgram) -> (GuestOs, Env) {
        let mut g = GuestOs::new(1, 0, Arc::new(p), Prng::new(1));
        let mut env = Env { now: 0, vif: GicCpuInterface::new(4) };
        assert!(matches!(g.step(&mut env), GuestAction::SetTimer(_)));
        (g, env)
    }

    #[test]
    fn compute_then_end() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::Compute(1000)]));
        assert_eq!(g.step(&mut env), GuestAction::Compute(1000));
        assert_eq!(g.step(&mut env), GuestAction::ProgramEnd);
        assert_eq!(g.step(&mut env), GuestAction::ProgramEnd);
    }

    #[test]
    fn wfi_with_pending_virq_does_not_block() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::Wfi, Instr::Compute(5)]));
        env.vif.inject(40);
        assert_eq!(g.step(&mut env), GuestAction::IrqTaken(40));
        assert_eq!(g.step(&mut env), GuestAction::IrqDone(40));
        assert_eq!(g.step(&mut env), GuestAction::Compute(5));
        assert!(env.vif.accounting_holds());
    }

    #[test]
    fn wfi_without_interrupt_waits() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::Wfi, Instr::Compute(5)]));
        assert_eq!(g.step(&mut env), GuestAction::Wait);
        assert_eq!(g.step(&mut env), GuestAction::Wait);
        env.vif.inject(40);
        g.step(&mut env);
        g.step(&mut env);
        assert_eq!(g.step(&mut env), GuestAction::Compute(5));
    }

    #[test]
    fn timed_wait_ignores_other_interrupts_and_records_latency() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::ArmTimer(1000), Instr::Wfi]));
        assert_eq!(g.step(&mut env), GuestAction::SetTimer(Some(1000)));
        assert_eq!(g.step(&mut env), GuestAction::Wait);
        env.vif.inject(40);
        g.step(&mut env);
        g.step(&mut env);
        assert_eq!(g.step(&mut env), GuestAction::Wait);
        env.now = 1007;
        env.vif.inject(LINE_VTIMER);
        assert_eq!(g.step(&mut env), GuestAction::IrqTaken(LINE_VTIMER));
        assert_eq!(g.step(&mut env), GuestAction::Compute(0));
        assert_eq!(g.step(&mut env), GuestAction::SetTimer(None));
        assert_eq!(g.step(&mut env), GuestAction::IrqDone(LINE_VTIMER));
        assert_eq!(g.step(&mut env), GuestAction::RtWake { expected: 1000, actual: 1007 });
        assert_eq!(g.samples, vec![7]);
    }

    #[test]
    fn periodic_arm_is_anchored() {
        let (mut g, mut env) =
            guest(WorkloadProgram::new(vec![Instr::ArmTimer(1000), Instr::Wfi, Instr::LoopTo { index: 0, times: 0 }]));
        g.step(&mut env);
        env.now = 1300;
        env.vif.inject(LINE_VTIMER);
        while g.step(&mut env) != (GuestAction::RtWake { expected: 1000, actual: 1300 }) {}
        assert_eq!(g.step(&mut env), GuestAction::SetTimer(Some(2000)));
    }

    #[test]
    fn emulated_gicc_traps_on_entry_and_exit() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::Compute(1)]));
        g.gicc_emulated = true;
        env.vif.inject(40);
        assert_eq!(g.step(&mut env), GuestAction::Gicc(GiccReg::Iar));
        assert_eq!(g.step(&mut env), GuestAction::IrqTaken(40));
        assert_eq!(g.step(&mut env), GuestAction::Gicc(GiccReg::Eoir));
        assert_eq!(g.step(&mut env), GuestAction::IrqDone(40));
    }

    #[test]
    fn blocking_access_advances_only_on_completion() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![
            Instr::Mmio { addr: 0x1000, write: false, value: 0, size: 4, blocking: true },
            Instr::Compute(3),
        ]));
        let a = GuestAction::Access { addr: 0x1000, write: false, value: 0, size: 4, blocking: true };
        assert_eq!(g.step(&mut env), a);
        assert_eq!(g.step(&mut env), a);
        g.complete_access(42);
        assert_eq!(g.last_load, 42);
        assert_eq!(g.step(&mut env), GuestAction::Compute(3));
    }

    #[test]
    fn ticks_are_anchored_to_period_multiples() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::Compute(u64::MAX)]).with_tick(250));
        for k in 1..=5u64 {
            env.now = k * 4_000_000 + 13;
            env.vif.inject(LINE_VTIMER);
            g.step(&mut env);
            assert_eq!(g.step(&mut env), GuestAction::SetTimer(Some((k + 1) * 4_000_000)));
            g.step(&mut env);
        }
        assert_eq!(g.ticks, 5);
    }

    #[test]
    fn loop_counts() {
        let (mut g, mut env) =
            guest(WorkloadProgram::new(vec![Instr::Compute(1), Instr::LoopTo { index: 0, times: 2 }]));
        let mut n = 0;
        while g.step(&mut env) == GuestAction::Compute(1) {
            n += 1;
        }
        assert_eq!(n, 3);
    }

    #[test]
    fn app_stall_drops_kicks_only() {
        let (mut g, mut env) = guest(WorkloadProgram::new(vec![Instr::KickWatchdog, Instr::Compute(2)]));
        g.stall = Some(Stall::App);
        assert_eq!(g.step(&mut env), GuestAction::Compute(2));
    }
}
