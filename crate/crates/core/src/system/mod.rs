//! The whole stack wired together: machine, Gear1, Gear2, the device model,
//! guest interpreters and the supervisors, driven by one event queue.
//!
//! Each pcpu executes a queue of micro-operations. An operation takes
//! effect when it starts and keeps its pcpu busy for its charge; physical
//! interrupts that arrive meanwhile wait until the queue drains. Guest and
//! host computation is preemptible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::bench::scenario::{PolicyKind, ScenarioConfig, ScenarioError, StallSpec};
use crate::bench::CostModel;
use crate::devmodel::{Backend, BackendKind, BlockImage, Gdm, Serviced, LINE_IO_EVENT};
use crate::gear1::{BlockReason, ExitReason, Gear1, GiccReg, GicdOp, HvcEffect, HypercallId, RunState, VmKind, HVC_OK};
use crate::gear2::{Gear2, MmioExit, MmioOutcome, RoundRobin, StrictPriority, ThreadId};
use crate::guests::{GuestAction, GuestEnv, GuestOs, Instr, Stall, WorkloadProgram};
use crate::machine::{
    AccessError, AccessOk, DeliveryMode, GicCpuInterface, Machine, MemOp, Stage2Fault, TimerKind, GICD_BASE, GICD_SIZE,
    LINE_EL2_TIMER, LINE_VTIMER, PAGE_SIZE, SGI_KICK,
};
use crate::simcore::{Action, Actor, Cause, EventId, EventQueue, Prng, SimTime, ThreadTag, Trace, TraceRecord, World};
use crate::supervision::{Layer, SupervisionAction, SupervisionEvent, Supervisor};

/// Physical timer PPI Gear2 uses for its own slices and host work.
pub const LINE_GEAR2_TIMER: u32 = 30;

const NOISE_SERVICE_ID: u32 = 0;
const NOISE_STREAM: u64 = 0xffff_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IrqKind {
    /// Destined for a vcpu (device line, SGI, virtual timer).
    Guest,
    El2Timer,
    Quantum,
    /// Scheduling poke between Gear2 instances.
    Kick,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Irq {
    line: u32,
    vm: u32,
    vcpu: u32,
    kind: IrqKind,
}

/// What Gear1 hands over to Gear2.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Fwd {
    Irq(Irq),
    /// Offline vcpus made runnable by an EL2 timer expiry.
    Woken(Vec<(u32, u32)>),
    Exit(ExitReason),
    Halt,
    IoAck {
        seq: u64,
        status: i64,
        value: u64,
    },
}

impl Fwd {
    fn reason(&self) -> ExitReason {
        match self {
            Fwd::Irq(i) => ExitReason::PhysIrq { line: i.line },
            Fwd::Woken(_) => ExitReason::PhysIrq { line: LINE_EL2_TIMER },
            Fwd::Exit(r) => *r,
            Fwd::Halt => ExitReason::Wfi,
            Fwd::IoAck { seq, status, value } => {
                ExitReason::Hypercall { code: HypercallId::IoAck.code(), args: [*seq, *status as u64, *value] }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Trap {
        vm: u32,
        vcpu: u32,
        fwd: Fwd,
        cause: Cause,
    },
    Route {
        vm: u32,
        vcpu: u32,
        fwd: Fwd,
        cause: Cause,
    },
    Switch {
        to: World,
        cause: Cause,
    },
    Gear2Exit {
        vm: u32,
        vcpu: u32,
        fwd: Fwd,
        cause: Cause,
    },
    Gear2Irq {
        irq: Irq,
    },
    Gear2Hvc {
        code: u32,
        args: [u64; 3],
        cause: Cause,
    },
    GuestHvc {
        vm: u32,
        vcpu: u32,
        code: u32,
        args: [u64; 3],
    },
    Schedule {
        cause: Cause,
    },
    Gicd {
        vm: u32,
        vcpu: u32,
        offset: u64,
        op: GicdOp,
    },
    Gicc {
        vm: u32,
        vcpu: u32,
        reg: GiccReg,
    },
    Gear1Inject {
        vm: u32,
        vcpu: u32,
        line: u32,
        cause: Cause,
    },
    El2Fire,
    /// Record-only charge for work whose effect already happened.
    Charge {
        actor: Actor,
        action: Action,
        cost: u64,
        cause: Cause,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Off,
    /// The primary VM is loaded; Gear2 runs its idle or service threads.
    Gear2,
    Guest {
        vm: u32,
        vcpu: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Who {
    Guest(u32, u32),
    Service(u32),
}

#[derive(Debug, Clone, Copy)]
struct Running {
    ev: EventId,
    end: u64,
    who: Who,
}

#[derive(Debug)]
struct CpuExec {
    mode: Mode,
    ops: VecDeque<Op>,
    irqs: VecDeque<Irq>,
    busy: bool,
    compute: Option<Running>,
    /// A directly-running guest is idling in WFI.
    waiting: bool,
    last_pick: Option<ThreadId>,
    timer_ev: Option<EventId>,
    quantum_ev: Option<EventId>,
}

impl CpuExec {
    fn new() -> Self {
        CpuExec {
            mode: Mode::Off,
            ops: VecDeque::new(),
            irqs: VecDeque::new(),
            busy: false,
            compute: None,
            waiting: false,
            last_pick: None,
            timer_ev: None,
            quantum_ev: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Ev {
    Boot,
    OpDone(u32),
    ComputeDone(u32),
    Wake(u32),
    Timer(u32),
    Quantum(u32),
    Irq(u32, Irq),
    DeviceDone { idx: usize, seq: u64 },
    Noise,
    Heartbeat,
    Check(Layer),
    Stall(StallSpec),
}

#[derive(Debug, Clone, Copy)]
struct NoiseState {
    pcpu: u32,
    mean_gap_ns: f64,
    min_ns: u64,
    max_ns: u64,
}

/// One simulation instance.
pub struct System {
    pub machine: Machine,
    pub gear1: Gear1,
    pub gear2: Gear2,
    pub gdm: Option<Gdm>,
    pub supervisor: Option<Supervisor>,
    dvm: Option<u32>,
    guests: BTreeMap<(u32, u32), GuestOs>,
    cost: CostModel,
    queue: EventQueue<Ev>,
    trace: Trace,
    cpus: Vec<CpuExec>,
    resume: BTreeMap<(u32, u32), Vec<(bool, u64)>>,
    service_left: BTreeMap<u32, u64>,
    noise: Option<(NoiseState, Prng)>,
    vm_stalled: BTreeSet<u32>,
    ended: BTreeSet<(u32, u32)>,
    duration: u64,
    booted: bool,
}

struct Env<'a> {
    now: u64,
    vif: &'a mut GicCpuInterface,
    gdm: Option<&'a mut Gdm>,
    hop: u64,
    served: &'a mut Vec<Serviced>,
}

impl GuestEnv for Env<'_> {
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
    fn service_io(&mut self) -> Option<(Serviced, u64)> {
        let s = self.gdm.as_mut()?.handle_io_event().ok()??;
        self.served.push(s.clone());
        Some((s, self.hop))
    }
}

impl System {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let mut machine = Machine::new(cfg.platform.clone()).map_err(|e| ScenarioError::Platform(e.to_string()))?;
        let gear1 = Gear1::init(&mut machine, &cfg.vms, cfg.cost_model.clone())
            .map_err(|e| ScenarioError::Partition(e.to_string()))?;
        let n = machine.pcpu_count();
        let mut gear2 = Gear2::new(n, cfg.scheduler.quantum_ns);

        for m in &cfg.vms {
            if matches!(m.kind, VmKind::Secondary | VmKind::Dvm) {
                for (v, &p) in m.affinity.iter().enumerate() {
                    gear2.add_vcpu_thread(m.vm_id, v as u32, p);
                }
            }
        }
        let noise = cfg.noise.map(|ns| {
            gear2.add_service_thread(NOISE_SERVICE_ID, ns.pcpu);
            let st = NoiseState {
                pcpu: ns.pcpu,
                mean_gap_ns: if ns.rate_hz > 0.0 { 1e9 / ns.rate_hz } else { f64::INFINITY },
                min_ns: ns.min_ns,
                max_ns: ns.max_ns,
            };
            (st, Prng::stream(cfg.seed, NOISE_STREAM))
        });
        if cfg.scheduler.policy == PolicyKind::StrictPriority {
            let prio: BTreeMap<ThreadId, u32> = cfg
                .scheduler
                .priorities
                .iter()
                .filter_map(|p| Some((gear2.thread_of(p.vm, p.vcpu)?, p.priority)))
                .collect();
            for p in 0..n as u32 {
                gear2.register_policy(p, Box::new(StrictPriority::new(cfg.scheduler.quantum_ns, prio.clone())));
            }
        } else {
            for p in 0..n as u32 {
                gear2.register_policy(p, Box::new(RoundRobin::new(cfg.scheduler.quantum_ns)));
            }
        }

        let mut gdm = None;
        let dvm = cfg.devmodel.as_ref().map(|d| d.vm);
        if let Some(d) = &cfg.devmodel {
            let mut g = Gdm::new(d.kernel_module);
            for b in &d.backends {
                let backend = match b.kind {
                    BackendKind::Block => {
                        let img = match &b.path {
                            Some(p) => BlockImage::open(p.as_ref(), b.image_bytes as usize)
                                .map_err(|e| ScenarioError::Io { path: p.clone(), source: e })?,
                            None => BlockImage::in_memory(b.image_bytes as usize),
                        };
                        Backend::new(BackendKind::Block, img)
                    }
                    BackendKind::Console => Backend::console(b.path.as_ref().map(Into::into)),
                    BackendKind::Net => Backend::net(),
                };
                g.attach(b.device, b.irq_line, b.depth, backend);
            }
            gdm = Some(g);
        }

        let mut guests = BTreeMap::new();
        let sup = &cfg.supervision;
        for m in &cfg.vms {
            if m.kind == VmKind::Primary {
                continue;
            }
            for v in 0..m.vcpus {
                let spec = cfg.workloads.iter().find(|w| w.vm == m.vm_id && w.vcpu == v);
                let mut program = match spec {
                    Some(w) => w.build(cfg.duration_ns)?,
                    None if Some(m.vm_id) == dvm => {
                        WorkloadProgram::new(vec![Instr::Wfi, Instr::LoopTo { index: 0, times: 0 }])
                    }
                    None => WorkloadProgram::default(),
                };
                if Some(m.vm_id) == dvm && v == 0 {
                    program.handlers.entry(LINE_IO_EVENT).or_insert_with(|| vec![Instr::ServiceIo]);
                }
                if sup.enabled && m.kind != VmKind::Rtvm && program.heartbeat_ns.is_none() {
                    let period = m.watchdog_period.unwrap_or(sup.l2_period_ns);
                    program.heartbeat_ns = Some((period / 2).max(1));
                }
                let prng = Prng::stream(cfg.seed, ((m.vm_id as u64) << 16 | v as u64) + 1);
                let mut g = GuestOs::new(m.vm_id, v, Arc::new(program), prng);
                g.gicc_emulated = m.kind == VmKind::Rtvm && !m.owns_cpu_interface();
                g.wake = spec.map(|w| w.wake_model()).unwrap_or_else(crate::guests::WakeModel::zero);
                guests.insert((m.vm_id, v), g);
            }
        }

        let supervisor = sup.enabled.then(|| {
            let mut s = Supervisor::new(sup.clone(), gear1.primary());
            for m in &cfg.vms {
                match m.kind {
                    VmKind::Primary => {}
                    kind => {
                        let l1 = (0..m.vcpus).any(|v| {
                            guests.get(&(m.vm_id, v)).is_some_and(|g: &GuestOs| {
                                let p = g.program();
                                p.instructions
                                    .iter()
                                    .chain(p.handlers.values().flatten())
                                    .any(|i| *i == Instr::KickWatchdog)
                            })
                        });
                        if l1 {
                            s.register(Layer::L1, m.vm_id, sup.l1_period_ns, 0);
                        }
                        if kind != VmKind::Rtvm {
                            s.register(Layer::L2, m.vm_id, m.watchdog_period.unwrap_or(sup.l2_period_ns), 0);
                        }
                    }
                }
            }
            s.register(Layer::L3, gear1.primary(), sup.l3_period_ns, 0);
            s.register(Layer::L4, 0, sup.l4_period_ns, 0);
            s
        });

        let mut queue = EventQueue::new();
        queue.schedule(SimTime::ZERO, Ev::Boot).expect("time zero");
        if let Some((st, _)) = &noise {
            if st.mean_gap_ns.is_finite() {
                queue.schedule(SimTime::ZERO, Ev::Noise).expect("time zero");
            }
        }
        if let Some(s) = &supervisor {
            let hb = (s.config.l3_period_ns.min(s.config.l4_period_ns) / 2).max(1);
            queue.schedule(SimTime(hb), Ev::Heartbeat).expect("future");
            for l in Layer::ALL {
                queue.schedule(SimTime(s.config.granularity(l)), Ev::Check(l)).expect("future");
            }
        }
        for st in &cfg.stalls {
            queue.schedule(SimTime(st.at()), Ev::Stall(*st)).expect("future");
        }

        Ok(System {
            machine,
            gear1,
            gear2,
            gdm,
            supervisor,
            dvm,
            guests,
            cost: cfg.cost_model.clone(),
            queue,
            trace: Trace::new(),
            cpus: (0..n).map(|_| CpuExec::new()).collect(),
            resume: BTreeMap::new(),
            service_left: BTreeMap::new(),
            noise,
            vm_stalled: BTreeSet::new(),
            ended: BTreeSet::new(),
            duration: cfg.duration_ns,
            booted: false,
        })
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn now(&self) -> u64 {
        self.queue.now().nanos()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn guest(&self, vm: u32, vcpu: u32) -> Option<&GuestOs> {
        self.guests.get(&(vm, vcpu))
    }

    pub fn guests(&self) -> impl Iterator<Item = &GuestOs> {
        self.guests.values()
    }

    pub fn supervision_events(&self) -> &[SupervisionEvent] {
        self.supervisor.as_ref().map_or(&[], |s| s.events())
    }

    /// Run to the configured duration.
    pub fn run(&mut self) -> &Trace {
        self.run_until(self.duration);
        &self.trace
    }

    /// Dispatch every event due at or before `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(ev) = self.queue.pop_next(SimTime(t)) {
            self.dispatch(ev.payload);
        }
    }

    /// Cross-module consistency: stage-2 ownership, no virtual interrupt
    /// lost, blocking MMIO accounting and thread placement.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.gear1.check_invariants()?;
        for &(vm, vcpu) in self.guests.keys() {
            let ctx = self.gear1.ctx(vm, vcpu).ok_or_else(|| format!("vm{vm}.{vcpu} has no context"))?;
            if !ctx.vif.accounting_holds() {
                return Err(format!("vm{vm}.{vcpu} lost a virtual interrupt"));
            }
        }
        for t in self.gear2.threads() {
            if let ThreadTag::Vcpu { vm, vcpu } = t.kind {
                if self.gear1.affinity(vm, vcpu) != Some(t.pcpu) {
                    return Err(format!("thread vm{vm}.{vcpu} queued on pcpu {}", t.pcpu));
                }
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------- events

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Boot => self.boot(),
            Ev::OpDone(p) => {
                self.cpus[p as usize].busy = false;
                self.run_cpu(p);
            }
            Ev::ComputeDone(p) => {
                self.cpus[p as usize].compute = None;
                self.run_cpu(p);
            }
            Ev::Wake(p) => self.run_cpu(p),
            Ev::Timer(p) => {
                self.cpus[p as usize].timer_ev = None;
                let fired = self.machine.timers.tick(self.queue.now());
                for f in &fired {
                    let irq = match f.kind {
                        TimerKind::El1Virtual => match self.gear1.loaded(f.pcpu) {
                            Some((vm, vcpu)) if vm != self.gear1.primary() => {
                                Irq { line: LINE_VTIMER, vm, vcpu, kind: IrqKind::Guest }
                            }
                            _ => continue,
                        },
                        TimerKind::El2Physical => Irq {
                            line: LINE_EL2_TIMER,
                            vm: self.gear1.primary(),
                            vcpu: f.pcpu,
                            kind: IrqKind::El2Timer,
                        },
                    };
                    self.deliver(f.pcpu, irq);
                }
                for q in 0..self.cpus.len() as u32 {
                    self.sync_timer(q);
                }
            }
            Ev::Quantum(p) => {
                self.cpus[p as usize].quantum_ev = None;
                let irq = Irq { line: LINE_GEAR2_TIMER, vm: self.gear1.primary(), vcpu: p, kind: IrqKind::Quantum };
                self.deliver(p, irq);
            }
            Ev::Irq(p, irq) => self.deliver(p, irq),
            Ev::DeviceDone { idx, seq } => self.device_done(idx, seq),
            Ev::Noise => self.noise_arrival(),
            Ev::Heartbeat => self.heartbeat(),
            Ev::Check(l) => self.watchdog_check(l),
            Ev::Stall(s) => self.inject_stall(s),
        }
    }

    fn boot(&mut self) {
        self.booted = true;
        self.cpus[0].mode = Mode::Gear2;
        self.gear2.bring_up(0);
        let code = HypercallId::PsciCpuOn.code();
        for q in 1..self.cpus.len() as u64 {
            self.cpus[0].ops.push_back(Op::Gear2Hvc { code, args: [q, 0, 0], cause: Cause::Boot });
        }
        self.cpus[0].ops.push_back(Op::Schedule { cause: Cause::Boot });
        self.run_cpu(0);
    }

    fn rec(&mut self, actor: Actor, action: Action, cost: u64, cause: Cause) {
        self.trace.push(TraceRecord::new(self.queue.now(), actor, action).with_cost(cost).with_cause(cause));
    }

    /// Raise a physical interrupt on `p`.
    fn deliver(&mut self, p: u32, irq: Irq) {
        let pi = p as usize;
        if self.cpus[pi].mode == Mode::Off {
            return;
        }
        self.rec(Actor::Machine, Action::IrqRaised { line: irq.line, pcpu: p }, 0, Cause::Irq);
        let direct = match self.cpus[pi].mode {
            Mode::Guest { vm, vcpu } if !self.machine.pcpu(p).irq_trap && irq.kind != IrqKind::El2Timer => {
                Some((vm, vcpu))
            }
            _ => None,
        };
        if let Some((vm, vcpu)) = direct {
            // The guest owns the CPU interface: no hypervisor involvement.
            if irq.kind == IrqKind::Guest && (irq.vm, irq.vcpu) == (vm, vcpu) {
                let _ = self.gear1.virq_inject(vm, vcpu, irq.line);
            }
            self.cpus[pi].waiting = false;
            let masked = self.guests.get(&(vm, vcpu)).is_some_and(|g| g.in_handler());
            if !masked {
                self.preempt(p);
            }
        } else {
            self.cpus[pi].irqs.push_back(irq);
            self.preempt(p);
        }
        self.run_cpu(p);
    }

    fn preempt(&mut self, p: u32) {
        let Some(r) = self.cpus[p as usize].compute.take() else { return };
        self.queue.cancel(r.ev);
        let left = r.end.saturating_sub(self.now());
        match r.who {
            Who::Guest(vm, vcpu) => {
                let h = self.guests.get(&(vm, vcpu)).is_some_and(|g| g.in_handler());
                self.resume.entry((vm, vcpu)).or_default().push((h, left));
            }
            Who::Service(id) => *self.service_left.entry(id).or_default() += left,
        }
    }

    fn start_compute(&mut self, p: u32, who: Who, ns: u64) {
        let ev = self.queue.schedule_in(ns, Ev::ComputeDone(p));
        self.cpus[p as usize].compute = Some(Running { ev, end: self.now() + ns, who });
    }

    fn sync_timer(&mut self, p: u32) {
        let want = self.machine.timers.next_deadline(p).map(|d| d.max(self.now()));
        let c = &mut self.cpus[p as usize];
        if c.timer_ev.map(|e| e.at().nanos()) == want {
            return;
        }
        if let Some(e) = c.timer_ev.take() {
            self.queue.cancel(e);
        }
        if let Some(at) = want {
            self.cpus[p as usize].timer_ev = Some(self.queue.schedule(SimTime(at), Ev::Timer(p)).expect("future"));
        }
    }

    fn rearm_quantum(&mut self, p: u32) {
        let want = self.gear2.quantum_deadline(p, self.now());
        let c = &mut self.cpus[p as usize];
        if c.quantum_ev.map(|e| e.at().nanos()) == want {
            return;
        }
        if let Some(e) = c.quantum_ev.take() {
            self.queue.cancel(e);
        }
        if let Some(at) = want {
            self.cpus[p as usize].quantum_ev = Some(self.queue.schedule(SimTime(at), Ev::Quantum(p)).expect("future"));
        }
    }

    fn then(&mut self, p: u32, ops: Vec<Op>) {
        let q = &mut self.cpus[p as usize].ops;
        for op in ops.into_iter().rev() {
            q.push_front(op);
        }
    }

    // ------------------------------------------------------------- execution

    fn run_cpu(&mut self, p: u32) {
        let pi = p as usize;
        let mut spins = 0u32;
        loop {
            if self.cpus[pi].busy || self.cpus[pi].compute.is_some() {
                return;
            }
            if let Some(op) = self.cpus[pi].ops.pop_front() {
                let cost = self.exec(p, op);
                self.sync_timer(p);
                if cost > 0 {
                    self.cpus[pi].busy = true;
                    self.queue.schedule_in(cost, Ev::OpDone(p));
                    return;
                }
                continue;
            }
            if let Some(irq) = self.cpus[pi].irqs.pop_front() {
                self.take_irq(p, irq);
                continue;
            }
            let more = match self.cpus[pi].mode {
                Mode::Off => false,
                Mode::Gear2 => self.run_gear2_thread(p),
                Mode::Guest { vm, vcpu } => self.run_guest(p, vm, vcpu),
            };
            self.sync_timer(p);
            if !more {
                return;
            }
            spins += 1;
            if spins > 100_000 {
                // A guest doing only zero-time work; let time move.
                self.cpus[pi].busy = true;
                self.queue.schedule_in(1, Ev::OpDone(p));
                return;
            }
        }
    }

    fn take_irq(&mut self, p: u32, irq: Irq) {
        self.cpus[p as usize].waiting = false;
        match self.cpus[p as usize].mode {
            Mode::Off => {}
            Mode::Gear2 if irq.kind == IrqKind::El2Timer => self.then(p, vec![Op::El2Fire]),
            Mode::Gear2 => self.then(p, vec![Op::Gear2Irq { irq }]),
            Mode::Guest { .. } if irq.kind == IrqKind::El2Timer => self.then(p, vec![Op::El2Fire]),
            Mode::Guest { vm, vcpu } => {
                if self.machine.pcpu(p).irq_trap {
                    self.then(p, vec![Op::Trap { vm, vcpu, fwd: Fwd::Irq(irq), cause: Cause::Irq }]);
                } else if irq.kind == IrqKind::Guest && (irq.vm, irq.vcpu) == (vm, vcpu) {
                    let _ = self.gear1.virq_inject(vm, vcpu, irq.line);
                    self.cpus[p as usize].waiting = false;
                }
            }
        }
    }

    fn exec(&mut self, p: u32, op: Op) -> u64 {
        let primary = self.gear1.primary();
        match op {
            Op::Charge { actor, action, cost, cause } => {
                self.rec(actor, action, cost, cause);
                cost
            }
            Op::Trap { vm, vcpu, fwd, cause } => {
                let reason = fwd.reason();
                let cost = self.cost.vm_trap_ns;
                self.rec(
                    Actor::Gear1,
                    Action::VmTrap { vm, vcpu, reason: reason.tag(), arg: reason.arg() },
                    cost,
                    cause,
                );
                let d = self.gear1.handle_trap(vm, &reason);
                match (&fwd, reason) {
                    (_, ExitReason::GicdAccess { offset, op }) => self.then(p, vec![Op::Gicd { vm, vcpu, offset, op }]),
                    (_, ExitReason::GiccAccess { reg }) => self.then(p, vec![Op::Gicc { vm, vcpu, reg }]),
                    (_, ExitReason::Stage2Perm { addr }) => self.fault(vm, vcpu, addr, true),
                    _ if d == crate::gear1::Disposition::RouteToGear2 => {
                        self.then(p, vec![Op::Route { vm, vcpu, fwd, cause }])
                    }
                    (Fwd::Irq(irq), _) => {
                        let irq = *irq;
                        self.then(p, vec![Op::Gear1Inject { vm: irq.vm, vcpu: irq.vcpu, line: irq.line, cause }])
                    }
                    (_, ExitReason::MmioRead { addr, .. } | ExitReason::MmioWrite { addr, .. }) => {
                        self.fault(vm, vcpu, addr, false)
                    }
                    // Gear1 idles the pcpu until the next interrupt.
                    (_, ExitReason::Wfi) => self.cpus[p as usize].waiting = true,
                    _ => {}
                }
                cost
            }
            Op::Route { vm, vcpu, fwd, cause } => {
                self.rec(Actor::Gear1, Action::RouteToGear2 { vm, vcpu, reason: fwd.reason().tag() }, 0, cause);
                self.gear1.note_gear2_hop(vm);
                let to = World::Vm { vm: primary, vcpu: p };
                self.then(p, vec![Op::Switch { to, cause }, Op::Gear2Exit { vm, vcpu, fwd, cause }]);
                0
            }
            Op::Switch { to, cause } => {
                let from = self.machine.pcpu(p).current_world;
                let cost = self.gear1.world_switch(&mut self.machine, p, to);
                self.rec(Actor::Gear1, Action::WorldSwitch { pcpu: p, from, to }, cost, cause);
                self.cpus[p as usize].mode = match to {
                    World::Vm { vm, .. } if vm == primary => Mode::Gear2,
                    World::Vm { vm, vcpu } => Mode::Guest { vm, vcpu },
                    World::Gear1 => Mode::Off,
                };
                cost
            }
            Op::Gear2Exit { vm, vcpu, fwd, cause } => {
                self.rec(Actor::Gear2, Action::Gear2Exit { vm, vcpu, reason: fwd.reason().tag() }, 0, cause);
                self.gear2_exit(p, vm, vcpu, fwd, cause);
                0
            }
            Op::Gear2Irq { irq } => {
                self.rec(Actor::Gear2, Action::Gear2Irq { pcpu: p, line: irq.line }, 0, Cause::Irq);
                self.gear2_irq(p, irq);
                0
            }
            Op::Gear2Hvc { code, args, cause } => {
                let out = self.gear1.hypercall(&mut self.machine, primary, p, code, args);
                let action = Action::Hypercall { vm: primary, vcpu: p, code, arg: args[0], result: out.result };
                self.rec(Actor::Gear2, action, out.cost, cause);
                match out.effect {
                    HvcEffect::Injected { vm, vcpu, woke, .. } => self.after_inject(p, vm, vcpu, woke),
                    HvcEffect::PoweredOn { pcpu, world } => self.powered_on(pcpu, world),
                    _ => {}
                }
                out.cost
            }
            Op::GuestHvc { vm, vcpu, code, args } => {
                let d = self.gear1.handle_trap(vm, &ExitReason::Hypercall { code, args });
                let out = self.gear1.hypercall(&mut self.machine, vm, vcpu, code, args);
                let cause = if out.id == Some(HypercallId::IoAck) { Cause::Mmio } else { Cause::Hypercall };
                let action = Action::Hypercall { vm, vcpu, code, arg: args[0], result: out.result };
                self.rec(Actor::Gear1, action, out.cost, cause);
                match out.effect {
                    HvcEffect::Kick { layer, subject } => self.kick(layer as u64, subject),
                    HvcEffect::Injected { vm: tvm, vcpu: tvcpu, woke, .. } => self.after_inject(p, tvm, tvcpu, woke),
                    HvcEffect::ToGear2 { req, status } if d == crate::gear1::Disposition::RouteToGear2 => {
                        let fwd = Fwd::IoAck { seq: req, status, value: args[2] };
                        self.then(p, vec![Op::Route { vm, vcpu, fwd, cause }]);
                    }
                    _ => {}
                }
                out.cost
            }
            Op::Schedule { cause } => {
                let now = self.now();
                let t = self.gear2.schedule(p, now);
                self.rearm_quantum(p);
                let tag = self.gear2.thread(t).kind;
                if self.cpus[p as usize].last_pick != Some(t) {
                    self.cpus[p as usize].last_pick = Some(t);
                    self.rec(Actor::Gear2, Action::Pick { pcpu: p, thread: tag }, 0, cause);
                }
                if let ThreadTag::Vcpu { vm, vcpu } = tag {
                    let code = HypercallId::RunVcpu.code();
                    let out = self.gear1.hypercall(&mut self.machine, primary, p, code, [vm as u64, vcpu as u64, 0]);
                    debug_assert_eq!(out.result, HVC_OK, "RunVcpu vm{vm}.{vcpu} from pcpu {p}");
                    self.then(p, vec![Op::Switch { to: World::Vm { vm, vcpu }, cause }]);
                }
                0
            }
            Op::Gicd { vm, vcpu, offset, op } => {
                let eff = self.gear1.emulate_gicd(&mut self.machine, vm, vcpu, offset, op);
                let cost = self.cost.gicd_emul_ns;
                let (write, value) = match op {
                    GicdOp::Read => (false, eff.value),
                    GicdOp::Write(v) => (true, v),
                };
                self.rec(
                    Actor::Gear1,
                    Action::GicdEmul { vm, vcpu, offset: offset as u32, write, value },
                    cost,
                    Cause::Mmio,
                );
                if let Some((requested, allowed)) = eff.filtered {
                    self.rec(Actor::Gear1, Action::SgiFiltered { vm, requested, allowed }, 0, Cause::Mmio);
                }
                if let Some((line, targets)) = eff.sgi {
                    let at = SimTime(self.now() + cost);
                    for r in targets {
                        let irq = Irq { line, vm: r.vm, vcpu: r.vcpu, kind: IrqKind::Guest };
                        self.queue.schedule(at, Ev::Irq(r.pcpu, irq)).expect("future");
                    }
                }
                if let Some(g) = self.guests.get_mut(&(vm, vcpu)) {
                    g.complete_access(eff.value);
                }
                cost
            }
            Op::Gicc { vm, vcpu, reg } => {
                let cost = self.cost.gicd_emul_ns;
                self.rec(Actor::Gear1, Action::GiccEmul { vm, vcpu, reg: reg.as_str() }, cost, Cause::Irq);
                cost
            }
            Op::Gear1Inject { vm, vcpu, line, cause } => {
                let _ = self.gear1.virq_inject(vm, vcpu, line);
                let cost = self.cost.virq_inject_ns;
                self.rec(Actor::Gear1, Action::VirqInject { vm, vcpu, line }, cost, cause);
                cost
            }
            Op::El2Fire => {
                let cost = self.cost.vm_trap_ns;
                let (lvm, lvcpu) = self.gear1.loaded(p).unwrap_or((primary, p));
                self.rec(Actor::Gear1, Action::El2TimerFire { pcpu: p, vm: lvm, vcpu: lvcpu }, cost, Cause::Irq);
                let now = self.now();
                let fired = self.gear1.el2_timer_fire(&mut self.machine, p, now);
                let mut ops = Vec::new();
                let mut woken = Vec::new();
                for (vm, vcpu, woke) in fired {
                    ops.push(Op::Charge {
                        actor: Actor::Gear1,
                        action: Action::VirqInject { vm, vcpu, line: LINE_VTIMER },
                        cost: self.cost.virq_inject_ns,
                        cause: Cause::Irq,
                    });
                    if woke && self.gear2.thread_of(vm, vcpu).is_some() {
                        woken.push((vm, vcpu));
                    }
                }
                if !woken.is_empty() {
                    match self.cpus[p as usize].mode {
                        Mode::Guest { vm, vcpu } => {
                            ops.push(Op::Route { vm, vcpu, fwd: Fwd::Woken(woken), cause: Cause::Irq })
                        }
                        _ => {
                            ops.push(Op::Gear2Exit { vm: primary, vcpu: p, fwd: Fwd::Woken(woken), cause: Cause::Irq })
                        }
                    }
                }
                self.then(p, ops);
                cost
            }
        }
    }

    /// Gear1 reflects a stage-2 fault back to the guest: the access
    /// retires with all-ones.
    fn fault(&mut self, vm: u32, vcpu: u32, ipa: u64, perm: bool) {
        self.rec(Actor::Gear1, Action::Stage2Fault { vm, vcpu, ipa, perm }, 0, Cause::Fault);
        if let Some(g) = self.guests.get_mut(&(vm, vcpu)) {
            g.complete_access(u64::MAX);
        }
    }

    fn powered_on(&mut self, q: u32, world: World) {
        self.rec(Actor::Machine, Action::PcpuOn { pcpu: q }, 0, Cause::Boot);
        let primary = self.gear1.primary();
        let c = &mut self.cpus[q as usize];
        match world {
            World::Vm { vm, .. } if vm == primary => {
                c.mode = Mode::Gear2;
                self.gear2.bring_up(q);
                c.ops.push_back(Op::Schedule { cause: Cause::Boot });
            }
            World::Vm { vm, vcpu } => c.mode = Mode::Guest { vm, vcpu },
            World::Gear1 => {}
        }
        self.queue.schedule_in(0, Ev::Wake(q));
    }

    /// A vcpu got a virtual interrupt; make sure whoever schedules it
    /// notices.
    fn after_inject(&mut self, p: u32, vm: u32, vcpu: u32, woke: bool) {
        if woke {
            if let Some(t) = self.gear2.thread_of(vm, vcpu) {
                if self.gear2.wake(t) {
                    self.rec(Actor::Gear2, Action::Wake { vm, vcpu }, 0, Cause::Irq);
                }
            }
        }
        let Some(q) = self.gear1.affinity(vm, vcpu) else { return };
        if q != p && (woke || self.gear1.loaded(q) == Some((vm, vcpu))) {
            let irq = Irq { line: SGI_KICK, vm, vcpu, kind: IrqKind::Kick };
            self.queue.schedule_in(0, Ev::Irq(q, irq));
        }
    }

    fn gear2_irq(&mut self, p: u32, irq: Irq) {
        let primary = self.gear1.primary();
        self.gear2.stats.irqs += 1;
        let sched = |cause| Op::Schedule { cause };
        match irq.kind {
            IrqKind::Guest if irq.vm != primary => {
                let args = [irq.vm as u64, irq.vcpu as u64, irq.line as u64];
                let code = HypercallId::VirqInject.code();
                self.then(p, vec![Op::Gear2Hvc { code, args, cause: Cause::Irq }, sched(Cause::Irq)]);
            }
            IrqKind::Quantum => {
                let now = self.now();
                if self.gear2.quantum_deadline(p, now).is_some_and(|d| d <= now) {
                    self.rec(Actor::Gear2, Action::Quantum { pcpu: p }, 0, Cause::Yield);
                    self.gear2.quantum_expired(p, now);
                }
                self.then(p, vec![sched(Cause::Yield)]);
            }
            IrqKind::Noise => {
                if let Some(t) = self.service_thread() {
                    self.gear2.wake(t);
                }
                self.then(p, vec![sched(Cause::Irq)]);
            }
            _ => self.then(p, vec![sched(Cause::Irq)]),
        }
    }

    fn service_thread(&self) -> Option<ThreadId> {
        self.gear2.threads().iter().position(|t| t.kind == ThreadTag::Service { id: NOISE_SERVICE_ID })
    }

    fn gear2_exit(&mut self, p: u32, vm: u32, vcpu: u32, fwd: Fwd, cause: Cause) {
        match fwd {
            Fwd::Irq(irq) => self.gear2_irq(p, irq),
            Fwd::Woken(list) => {
                for (wvm, wvcpu) in list {
                    if let Some(t) = self.gear2.thread_of(wvm, wvcpu) {
                        if self.gear2.wake(t) {
                            self.rec(Actor::Gear2, Action::Wake { vm: wvm, vcpu: wvcpu }, 0, cause);
                        }
                    }
                }
                self.then(p, vec![Op::Schedule { cause }]);
            }
            Fwd::Halt | Fwd::Exit(ExitReason::Wfi) => {
                let pending = self.gear1.ctx(vm, vcpu).is_some_and(|c| c.vif.has_pending());
                if !pending {
                    let reason = if fwd == Fwd::Halt { BlockReason::Halted } else { BlockReason::Wfi };
                    self.block(vm, vcpu, reason, cause);
                }
                self.then(p, vec![Op::Schedule { cause }]);
            }
            Fwd::Exit(ExitReason::MmioRead { addr, size }) => self.gear2_mmio(p, vm, vcpu, addr, false, 0, size, true),
            Fwd::Exit(ExitReason::MmioWrite { addr, size, value, blocking }) => {
                self.gear2_mmio(p, vm, vcpu, addr, true, value, size, blocking)
            }
            Fwd::IoAck { seq, status, value } => self.gear2_ack(p, seq, status, value),
            Fwd::Exit(_) => self.then(p, vec![Op::Schedule { cause }]),
        }
    }

    fn block(&mut self, vm: u32, vcpu: u32, reason: BlockReason, cause: Cause) {
        if let Some(t) = self.gear2.thread_of(vm, vcpu) {
            self.gear2.block(t, reason);
        }
        if let Some(ctx) = self.gear1.ctx_mut(vm, vcpu) {
            ctx.runstate = RunState::Blocked(reason);
        }
        self.rec(Actor::Gear2, Action::Block { vm, vcpu, reason: reason.as_str() }, 0, cause);
    }

    #[allow(clippy::too_many_arguments)]
    fn gear2_mmio(&mut self, p: u32, vm: u32, vcpu: u32, addr: u64, write: bool, value: u64, size: u8, blocking: bool) {
        let hole = self
            .gear1
            .manifest(vm)
            .and_then(|m| m.mmio_holes.iter().find(|h| addr >= h.ipa && addr - h.ipa < h.len).copied());
        let target = hole.and_then(|h| Some((h.backend?, addr - h.ipa)));
        let (Some((device, offset)), Some(dvm)) = (target, self.dvm) else {
            self.fault(vm, vcpu, addr, false);
            self.then(p, vec![Op::Schedule { cause: Cause::Mmio }]);
            return;
        };
        let exit = MmioExit { source: (vm, vcpu), device, offset, size, write, value, blocking };
        let ring = self.gdm.as_mut().and_then(|g| g.queue_mut(device)).expect("validated backend");
        let out = self.gear2.on_mmio(exit, ring);
        if blocking {
            self.block(vm, vcpu, BlockReason::Mmio, Cause::Mmio);
        } else if let Some(g) = self.guests.get_mut(&(vm, vcpu)) {
            g.complete_access(0);
        }
        let mut ops = Vec::new();
        match out {
            MmioOutcome::Queued { seq } => {
                self.rec(Actor::Gear2, Action::DvmEnqueue { device, req: seq, vm, vcpu }, 0, Cause::Mmio);
                let args = [dvm as u64, 0, LINE_IO_EVENT as u64];
                ops.push(Op::Gear2Hvc { code: HypercallId::VirqInject.code(), args, cause: Cause::Mmio });
            }
            MmioOutcome::Backlogged { .. } => {
                self.rec(Actor::Gear2, Action::DvmRingFull { device, vm, vcpu }, 0, Cause::Mmio);
            }
        }
        ops.push(Op::Schedule { cause: Cause::Mmio });
        self.then(p, ops);
    }

    fn gear2_ack(&mut self, p: u32, seq: u64, status: i64, value: u64) {
        let sched = Op::Schedule { cause: Cause::Mmio };
        let Some(device) = self.gear2.request(seq).map(|r| r.device) else {
            self.then(p, vec![sched]);
            return;
        };
        let gdm = self.gdm.as_mut().expect("device model present");
        let _ = gdm.complete(device, seq);
        let ring = gdm.queue_mut(device).expect("validated backend");
        let Some(out) = self.gear2.on_ack(seq, status, value, ring) else {
            self.then(p, vec![sched]);
            return;
        };
        let (svm, svcpu) = out.req.source;
        self.rec(Actor::Gear2, Action::IoAck { device, req: seq, vm: svm, vcpu: svcpu, status }, 0, Cause::Mmio);
        let mut ops = Vec::new();
        if out.advance_ip {
            let v = if status == HVC_OK { value } else { u64::MAX };
            if let Some(g) = self.guests.get_mut(&(svm, svcpu)) {
                g.complete_access(v);
            }
            self.gear2.note_ip_advance();
            self.rec(Actor::Gear2, Action::IpAdvance { vm: svm, vcpu: svcpu }, 0, Cause::Mmio);
            if let Some(ctx) = self.gear1.ctx_mut(svm, svcpu) {
                if ctx.runstate == RunState::Blocked(BlockReason::Mmio) {
                    ctx.runstate = RunState::Ready;
                }
            }
            if let Some(t) = self.gear2.thread_of(svm, svcpu) {
                if self.gear2.wake(t) {
                    self.rec(Actor::Gear2, Action::Wake { vm: svm, vcpu: svcpu }, 0, Cause::Mmio);
                    let q = self.gear2.thread(t).pcpu;
                    if q != p {
                        let irq = Irq { line: SGI_KICK, vm: svm, vcpu: svcpu, kind: IrqKind::Kick };
                        self.queue.schedule_in(0, Ev::Irq(q, irq));
                    }
                }
            }
        }
        if let Some(line) = out.completion_line {
            let args = [svm as u64, svcpu as u64, line as u64];
            ops.push(Op::Gear2Hvc { code: HypercallId::VirqInject.code(), args, cause: Cause::Mmio });
        }
        ops.push(sched);
        self.then(p, ops);
    }

    fn run_gear2_thread(&mut self, p: u32) -> bool {
        let t = self.gear2.current(p);
        match self.gear2.thread(t).kind {
            ThreadTag::Idle => false,
            ThreadTag::Service { id } => {
                let left = self.service_left.remove(&id).unwrap_or(0);
                if left == 0 {
                    self.gear2.block(t, BlockReason::Wfi);
                    self.then(p, vec![Op::Schedule { cause: Cause::Yield }]);
                    return true;
                }
                self.rec(Actor::Gear2, Action::ServiceRun { id, ns: left }, left, Cause::None);
                self.start_compute(p, Who::Service(id), left);
                false
            }
            ThreadTag::Vcpu { .. } => {
                self.then(p, vec![Op::Schedule { cause: Cause::None }]);
                true
            }
        }
    }

    /// Let the loaded guest make progress. Returns whether to keep going
    /// without waiting for an event.
    fn run_guest(&mut self, p: u32, vm: u32, vcpu: u32) -> bool {
        let key = (vm, vcpu);
        let Some(g) = self.guests.get(&key) else { return false };
        let pending = self.gear1.ctx(vm, vcpu).is_some_and(|c| c.vif.has_pending());
        let in_handler = g.in_handler();
        let can_take = pending && !in_handler && g.stall != Some(Stall::Vm);
        if !can_take {
            if let Some(stack) = self.resume.get_mut(&key) {
                if let Some(&(h, left)) = stack.last() {
                    if h == in_handler {
                        stack.pop();
                        self.start_compute(p, Who::Guest(vm, vcpu), left);
                        return false;
                    }
                }
            }
        }
        let now = self.now();
        let hop = self.gdm.as_ref().map_or(0, |g| g.hop_ns(&self.cost));
        let mut served = Vec::new();
        let action = {
            let is_dvm = Some(vm) == self.dvm && vcpu == 0;
            let ctx = self.gear1.ctx_mut(vm, vcpu).expect("loaded vcpu");
            let mut env = Env {
                now,
                vif: &mut ctx.vif,
                gdm: if is_dvm { self.gdm.as_mut() } else { None },
                hop,
                served: &mut served,
            };
            let g = self.guests.get_mut(&key).expect("guest");
            let a = g.step(&mut env);
            ctx.sys_regs.program_point = g.pp() as u64;
            a
        };
        for s in served {
            let op = match s.req.op {
                crate::devmodel::IoOp::Read => "read",
                crate::devmodel::IoOp::Write => "write",
            };
            let action = Action::IoServe { device: s.req.device, req: s.req.seq, op, status: s.status };
            self.rec(Actor::Dvm, action, 0, Cause::Mmio);
        }
        self.apply(p, vm, vcpu, action)
    }

    fn apply(&mut self, p: u32, vm: u32, vcpu: u32, action: GuestAction) -> bool {
        let actor = Actor::Vm { vm, vcpu };
        let key = (vm, vcpu);
        let direct = !self.machine.pcpu(p).irq_trap;
        match action {
            GuestAction::Compute(0) => true,
            GuestAction::Compute(ns) => {
                self.rec(actor, Action::Compute { ns }, ns, Cause::None);
                self.start_compute(p, Who::Guest(vm, vcpu), ns);
                false
            }
            GuestAction::Access { addr, write, value, size, blocking } => {
                self.access(p, vm, vcpu, addr, write, value, size, blocking);
                true
            }
            GuestAction::Hypercall { code, args } => {
                self.then(p, vec![Op::GuestHvc { vm, vcpu, code, args }]);
                true
            }
            GuestAction::MemTouch { ipa, stride, count } => {
                let mut misses = 0;
                for i in 0..count as u64 {
                    let a = ipa.wrapping_add(i.wrapping_mul(stride));
                    if let Ok(pa) = self.gear1.translate(vm, a) {
                        if self.machine.device_at(pa).is_none() && !self.machine.touch(vm, pa).is_hit() {
                            misses += 1;
                        }
                    }
                }
                self.rec(actor, Action::MemTouch { count: count as u64, misses }, 0, Cause::None);
                true
            }
            GuestAction::SetTimer(d) => {
                self.gear1.set_vcpu_timer(&mut self.machine, vm, vcpu, d);
                if let Some(deadline) = d {
                    self.rec(actor, Action::TimerArm { deadline }, 0, Cause::None);
                }
                true
            }
            GuestAction::KickWatchdog => {
                self.kick(1, vm);
                true
            }
            GuestAction::Wait => {
                if direct {
                    if !self.cpus[p as usize].waiting {
                        self.cpus[p as usize].waiting = true;
                        self.rec(actor, Action::Wfi, 0, Cause::Wfi);
                    }
                    return false;
                }
                if self.cpus[p as usize].waiting {
                    return false;
                }
                self.then(p, vec![Op::Trap { vm, vcpu, fwd: Fwd::Exit(ExitReason::Wfi), cause: Cause::Wfi }]);
                true
            }
            GuestAction::Gicc(reg) => {
                let fwd = Fwd::Exit(ExitReason::GiccAccess { reg });
                self.then(p, vec![Op::Trap { vm, vcpu, fwd, cause: Cause::Irq }]);
                true
            }
            GuestAction::IrqTaken(line) => {
                self.cpus[p as usize].waiting = false;
                self.rec(actor, Action::IrqTaken { line }, 0, Cause::Irq);
                true
            }
            GuestAction::IrqDone(line) => {
                self.rec(actor, Action::IrqDone { line }, 0, Cause::Irq);
                true
            }
            GuestAction::RtWake { expected, actual } => {
                self.rec(actor, Action::RtWake { expected, actual }, 0, Cause::None);
                true
            }
            GuestAction::ProgramEnd => {
                if self.ended.insert(key) {
                    self.rec(actor, Action::ProgramEnd, 0, Cause::None);
                }
                if direct || self.cpus[p as usize].waiting {
                    self.cpus[p as usize].waiting = true;
                    return false;
                }
                self.then(p, vec![Op::Trap { vm, vcpu, fwd: Fwd::Halt, cause: Cause::Wfi }]);
                true
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn access(&mut self, p: u32, vm: u32, vcpu: u32, addr: u64, write: bool, value: u64, size: u8, blocking: bool) {
        let world = World::Vm { vm, vcpu };
        let op = if write { MemOp::Write(value) } else { MemOp::Read };
        let res = self.machine.mem_access(&self.gear1, p, world, addr, op, size as usize);
        let cause = Cause::Mmio;
        match res {
            Ok(AccessOk::Ram { value, .. }) => {
                if let Some(g) = self.guests.get_mut(&(vm, vcpu)) {
                    g.complete_access(value);
                }
            }
            Ok(AccessOk::Device { device, pa }) => {
                self.rec(Actor::Vm { vm, vcpu }, Action::MmioDevice { addr, write }, 0, Cause::None);
                let idx = self.machine.device_by_id(device).expect("mapped device");
                if write {
                    let off = pa - self.machine.devices[idx].config.mmio_base;
                    if let Some((seq, done)) = self.machine.devices[idx].write(self.queue.now(), off, value) {
                        self.rec(Actor::Machine, Action::DeviceSubmit { device, seq }, 0, Cause::None);
                        self.queue.schedule(done, Ev::DeviceDone { idx, seq }).expect("future");
                    }
                }
                if let Some(g) = self.guests.get_mut(&(vm, vcpu)) {
                    g.complete_access(0);
                }
            }
            Err(AccessError::Fault(Stage2Fault::Mmio(ipa))) if (GICD_BASE..GICD_BASE + GICD_SIZE).contains(&ipa) => {
                let op = if write { GicdOp::Write(value) } else { GicdOp::Read };
                let fwd = Fwd::Exit(ExitReason::GicdAccess { offset: ipa - GICD_BASE, op });
                self.then(p, vec![Op::Trap { vm, vcpu, fwd, cause }]);
            }
            Err(AccessError::Fault(Stage2Fault::Mmio(_))) => {
                let r = if write {
                    ExitReason::MmioWrite { addr, size, value, blocking }
                } else {
                    ExitReason::MmioRead { addr, size }
                };
                self.then(p, vec![Op::Trap { vm, vcpu, fwd: Fwd::Exit(r), cause }]);
            }
            Err(AccessError::Fault(Stage2Fault::Perm(_))) => {
                let fwd = Fwd::Exit(ExitReason::Stage2Perm { addr });
                self.then(p, vec![Op::Trap { vm, vcpu, fwd, cause: Cause::Fault }]);
            }
            Err(AccessError::Machine(_)) => self.fault(vm, vcpu, addr, false),
        }
    }

    fn device_done(&mut self, idx: usize, seq: u64) {
        let dev = &mut self.machine.devices[idx];
        dev.complete(seq);
        let (device, line) = (dev.id(), dev.config.irq_line);
        self.rec(Actor::Machine, Action::DeviceComplete { device, seq }, 0, Cause::Irq);
        match self.machine.raise_irq(line) {
            Ok(d) if d.mode == DeliveryMode::Latched => {
                self.rec(Actor::Machine, Action::IrqLatched { line }, 0, Cause::Irq);
            }
            Ok(d) => {
                let irq = Irq { line, vm: d.target.vm, vcpu: d.target.vcpu, kind: IrqKind::Guest };
                self.deliver(d.target.pcpu, irq);
            }
            Err(_) => {}
        }
    }

    // ----------------------------------------------------------- host noise

    fn noise_arrival(&mut self) {
        let Some((st, prng)) = self.noise.as_mut() else { return };
        let st = *st;
        let burst = prng.range_inclusive(st.min_ns, st.max_ns);
        let gap = prng.exp_ns(st.mean_gap_ns).max(1);
        *self.service_left.entry(NOISE_SERVICE_ID).or_default() += burst;
        self.queue.schedule_in(gap, Ev::Noise);
        let irq = Irq { line: LINE_GEAR2_TIMER, vm: self.gear1.primary(), vcpu: st.pcpu, kind: IrqKind::Noise };
        self.deliver(st.pcpu, irq);
    }

    // ----------------------------------------------------------- supervision

    fn kick(&mut self, layer: u64, subject: u32) {
        let Some(l) = Layer::from_number(layer) else { return };
        let now = self.now();
        let Some(s) = self.supervisor.as_mut() else { return };
        if s.kick(l, subject, now).is_ok() {
            let actor = if l == Layer::L1 { Actor::Vm { vm: subject, vcpu: 0 } } else { Actor::Gear2 };
            self.rec(actor, Action::WatchdogKick { layer: layer_name(l), subject }, 0, Cause::None);
        }
    }

    fn heartbeat(&mut self) {
        let Some(s) = &self.supervisor else { return };
        let hb = (s.config.l3_period_ns.min(s.config.l4_period_ns) / 2).max(1);
        self.queue.schedule_in(hb, Ev::Heartbeat);
        if !self.gear2.stalled {
            let primary = self.gear1.primary();
            self.kick(3, primary);
            self.kick(4, 0);
        }
    }

    fn watchdog_check(&mut self, layer: Layer) {
        let Some(s) = self.supervisor.as_mut() else { return };
        let now = self.queue.now().nanos();
        self.queue.schedule_in(s.config.granularity(layer), Ev::Check(layer));
        let stalled = &self.vm_stalled;
        let gear2_dead = self.gear2.stalled;
        let alive = |l: Layer, subject: u32| match l {
            Layer::L1 => !stalled.contains(&subject),
            Layer::L2 => !gear2_dead,
            _ => true,
        };
        let events = s.check_layer(layer, now, &alive);
        for e in events {
            let actor = match e.layer {
                Layer::L1 => Actor::Vm { vm: e.subject, vcpu: 0 },
                Layer::L2 => Actor::Gear2,
                Layer::L3 => Actor::Gear1,
                Layer::L4 => Actor::Machine,
            };
            let action =
                Action::Supervision { layer: layer_name(e.layer), subject: e.subject, action: e.action.as_str() };
            self.rec(actor, action, 0, Cause::None);
            match e.action {
                SupervisionAction::RestartVm if e.subject != self.gear1.primary() => self.restart_vm(e.subject),
                SupervisionAction::RestartVm | SupervisionAction::RestartGear2 => self.restart_gear2(),
                SupervisionAction::SocReset | SupervisionAction::LogOnly => {}
            }
        }
    }

    fn restart_gear2(&mut self) {
        let primary = self.gear1.primary();
        self.rec(Actor::Gear1, Action::VmRestart { vm: primary }, 0, Cause::None);
        self.gear2.stalled = false;
        self.kick(3, primary);
        self.kick(4, 0);
    }

    /// Fresh contexts and kernel state for `vm`, same manifest.
    fn restart_vm(&mut self, vm: u32) {
        let Some(m) = self.gear1.manifest(vm).cloned() else { return };
        self.rec(Actor::Gear1, Action::VmRestart { vm }, 0, Cause::None);
        self.gear1.restart_vm(&mut self.machine, vm);
        self.vm_stalled.remove(&vm);
        for v in 0..m.vcpus {
            let key = (vm, v);
            if let Some(g) = self.guests.get_mut(&key) {
                g.restart();
            }
            self.resume.remove(&key);
            self.ended.remove(&key);
            let p = m.affinity[v as usize];
            let pi = p as usize;
            if let Some(r) = self.cpus[pi].compute {
                if r.who == Who::Guest(vm, v) {
                    self.queue.cancel(r.ev);
                    self.cpus[pi].compute = None;
                }
            }
            if let Some(t) = self.gear2.thread_of(vm, v) {
                if self.gear2.wake(t) {
                    let irq = Irq { line: SGI_KICK, vm, vcpu: v, kind: IrqKind::Kick };
                    self.queue.schedule_in(0, Ev::Irq(p, irq));
                }
            }
            self.sync_timer(p);
            self.queue.schedule_in(0, Ev::Wake(p));
        }
        self.kick(1, vm);
        self.kick(2, vm);
    }

    fn inject_stall(&mut self, s: StallSpec) {
        match s {
            StallSpec::Vm { vm, kind, .. } => {
                let stall: Stall = kind.into();
                for g in self.guests.values_mut().filter(|g| g.vm == vm) {
                    g.stall = Some(stall);
                }
                if stall == Stall::Vm {
                    self.vm_stalled.insert(vm);
                }
                let what = if stall == Stall::Vm { "vm" } else { "app" };
                self.rec(Actor::Vm { vm, vcpu: 0 }, Action::Stall { what }, 0, Cause::None);
            }
            StallSpec::Gear2 { .. } => {
                self.gear2.stalled = true;
                self.rec(Actor::Gear2, Action::Stall { what: "gear2" }, 0, Cause::None);
            }
        }
    }
}

pub fn layer_name(l: Layer) -> &'static str {
    match l {
        Layer::L1 => "l1rs",
        Layer::L2 => "l2rs",
        Layer::L3 => "l3rs",
        Layer::L4 => "l4rs",
    }
}

/// Round an address down to its page.
pub fn page_of(addr: u64) -> u64 {
    addr / PAGE_SIZE * PAGE_SIZE
}

#[cfg(test)]
mod tests;
