//! The partitioning hypervisor: static partitioning at init, stage-2
//! translation with page ownership, world switches, trap and hypercall
//! dispatch, distributor emulation and EL2 timer multiplexing.

mod abi;
mod manifest;
mod stage2;
mod vcpu;

pub use abi::{
    ExitReason, GiccReg, GicdOp, HypercallId, ABI_VERSION, HVC_ALREADY_ON, HVC_BUSY, HVC_DENIED, HVC_INVALID,
    HVC_NOT_LENT, HVC_NOT_OWNER, HVC_NOT_SUPPORTED, HVC_OK,
};
pub use manifest::{BootInfo, MemRegion, MmioHole, VgicMode, VmKind, VmManifest};
pub use stage2::{Ownership, Perms, S2Entry, Stage2Table};
pub use vcpu::{BlockReason, RunState, SysRegs, VcpuContext};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::bench::CostModel;
use crate::machine::{
    Comparator, IrqRoute, Machine, Power, Stage2Fault, Translate, GICD_BASE, GICD_ICENABLER, GICD_ISENABLER,
    GICD_ITARGETSR, GICD_SGIR, GICD_SIZE, LINE_VTIMER, PAGE_SIZE, PPI_END, SGI_END,
};
use crate::simcore::World;

/// Virtual line used to notify a VM of an inter-VM message.
pub const LINE_IVC: u32 = 100;
/// Messages a VM's inter-VM inbox holds before senders get `HVC_BUSY`.
pub const IVC_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InitError {
    #[error("VMs {0} and {1} claim the same physical page")]
    ManifestOverlap(u32, u32),
    #[error("VM {0} has a region or hole that is not page-aligned")]
    ManifestUnaligned(u32),
    #[error("RTVM {rtvm} shares pcpu {pcpu} with VM {other}")]
    RtvmAffinityShared { rtvm: u32, pcpu: u32, other: u32 },
    #[error("VM {0} overlaps hypervisor-private memory")]
    Gear1Overlap(u32),
    #[error("VM {0} maps memory outside installed RAM")]
    OutsideRam(u32),
    #[error("VM {vm} names unknown device {device}")]
    UnknownDevice { vm: u32, device: u32 },
    #[error("device {0} is passed through to more than one VM")]
    DeviceShared(u32),
    #[error("VM {0} affinity is invalid")]
    BadAffinity(u32),
    #[error("VM id {0} appears twice")]
    DuplicateVm(u32),
    #[error("exactly one primary VM with one vcpu per pcpu is required")]
    BadPrimary,
    #[error("LLC has {0} colors; color masks support at most 64")]
    TooManyColors(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Gear1Error {
    #[error("no vcpu {1} in VM {0}")]
    UnknownTarget(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PsciError {
    #[error("pcpu already on")]
    AlreadyOn,
    #[error("no such pcpu")]
    InvalidPcpu,
    #[error("caller may not manage power")]
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ShareError {
    #[error("page {0:#x} is not owned by the caller")]
    NotOwner(u64),
    #[error("page {0:#x} is not lent")]
    NotLent(u64),
    #[error("bad share target")]
    BadTarget,
}

/// What Gear1 does with a trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Handled,
    RouteToGear2,
}

/// Side effect of a hypercall the caller has to act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvcEffect {
    None,
    /// Virtual interrupt placed; `woke` if the target left a blocked state.
    Injected {
        vm: u32,
        vcpu: u32,
        line: u32,
        woke: bool,
    },
    /// Validated RunVcpu; the caller performs the world switch.
    RunVcpu {
        vm: u32,
        vcpu: u32,
    },
    PoweredOn {
        pcpu: u32,
        world: World,
    },
    Kick {
        layer: u32,
        subject: u32,
    },
    /// Forward to Gear2 (device-model acknowledgment).
    ToGear2 {
        req: u64,
        status: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HvcOutcome {
    pub id: Option<HypercallId>,
    pub result: i64,
    pub cost: u64,
    pub effect: HvcEffect,
}

/// Result of one emulated distributor access.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GicdEffect {
    pub value: u64,
    /// SGI to raise on each listed target after emulation completes.
    pub sgi: Option<(u32, Vec<IrqRoute>)>,
    /// Requested and allowed SGI pcpu masks, when filtering removed targets.
    pub filtered: Option<(u64, u64)>,
    /// Write touched state the VM does not own and was ignored.
    pub illegal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Gear1Stats {
    pub traps: u64,
    pub handled: u64,
    pub routed: u64,
    pub world_switches: u64,
    pub hypercalls: u64,
    pub unknown_hypercalls: u64,
    pub gicd_accesses: u64,
    pub gicd_illegal: u64,
    pub sgi_filtered: u64,
    pub el2_fires: u64,
    pub virq_injected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvcMessage {
    pub from: u32,
    pub word: u64,
}

#[derive(Debug, Clone)]
pub struct VmState {
    pub manifest: VmManifest,
    pub table: Stage2Table,
    pub boot_info: BootInfo,
    contexts: Vec<Option<VcpuContext>>,
    /// SPI lines whose configuration this VM controls.
    pub owned_lines: BTreeSet<u32>,
    virt_enabled: BTreeSet<u32>,
    ivc_inbox: VecDeque<IvcMessage>,
    pub traps: u64,
    pub gicd_traps: u64,
    pub gear2_hops: u64,
}

struct Loaded {
    vm: u32,
    vcpu: u32,
    ctx: VcpuContext,
}

/// The hypervisor state for one simulated system.
pub struct Gear1 {
    pub cost: CostModel,
    vms: BTreeMap<u32, VmState>,
    primary: u32,
    private: (u64, u64),
    loaded: Vec<Option<Loaded>>,
    /// vcpus pinned to each pcpu, in (vm, vcpu) order.
    residents: Vec<Vec<(u32, u32)>>,
    /// RTVM that owns each pcpu exclusively, if any.
    dedicated: Vec<Option<u32>>,
    list_registers: usize,
    pub stats: Gear1Stats,
}

impl Gear1 {
    /// Partition the machine according to `manifests` and hand pcpu 0 to
    /// the primary VM.
    pub fn init(machine: &mut Machine, manifests: &[VmManifest], cost: CostModel) -> Result<Self, InitError> {
        let n = machine.pcpu_count() as u32;
        let geom = machine.config.llc;
        if geom.colors() > 64 {
            return Err(InitError::TooManyColors(geom.colors()));
        }
        let mut ids = BTreeSet::new();
        for m in manifests {
            if !ids.insert(m.vm_id) {
                return Err(InitError::DuplicateVm(m.vm_id));
            }
            if m.vcpus as usize != m.affinity.len() || m.vcpus == 0 || m.affinity.iter().any(|&p| p >= n) {
                return Err(InitError::BadAffinity(m.vm_id));
            }
        }
        let primaries: Vec<&VmManifest> = manifests.iter().filter(|m| m.kind == VmKind::Primary).collect();
        let [primary] = primaries.as_slice() else { return Err(InitError::BadPrimary) };
        if primary.affinity != (0..n).collect::<Vec<_>>() {
            return Err(InitError::BadPrimary);
        }

        for r in manifests.iter().filter(|m| m.kind == VmKind::Rtvm) {
            for &p in &r.affinity {
                if let Some(o) = manifests
                    .iter()
                    .find(|o| o.vm_id != r.vm_id && o.kind != VmKind::Primary && o.affinity.contains(&p))
                {
                    return Err(InitError::RtvmAffinityShared { rtvm: r.vm_id, pcpu: p, other: o.vm_id });
                }
            }
        }

        let (ram_lo, ram_hi) = (machine.config.mem_base, machine.config.mem_base + machine.config.mem_size);
        let private = (machine.config.gear1_base, machine.config.gear1_base + machine.config.gear1_size);
        let mut page_owner: BTreeMap<u64, u32> = BTreeMap::new();
        let mut device_owner: BTreeMap<u32, u32> = BTreeMap::new();
        let mut vms = BTreeMap::new();

        for m in manifests {
            let aligned = |b: u64, l: u64| b.is_multiple_of(PAGE_SIZE) && l.is_multiple_of(PAGE_SIZE);
            if !m.mem_regions.iter().all(|r| aligned(r.ipa, r.len))
                || !m.mmio_holes.iter().all(|h| aligned(h.ipa, h.len))
            {
                return Err(InitError::ManifestUnaligned(m.vm_id));
            }
            let mut table = Stage2Table::new();
            for r in &m.mem_regions {
                if r.ipa < ram_lo || r.ipa + r.len > ram_hi {
                    return Err(InitError::OutsideRam(m.vm_id));
                }
                if r.ipa < private.1 && private.0 < r.ipa + r.len {
                    return Err(InitError::Gear1Overlap(m.vm_id));
                }
                for page in (r.ipa / PAGE_SIZE)..((r.ipa + r.len) / PAGE_SIZE) {
                    if (m.color_mask >> geom.color_of(page * PAGE_SIZE)) & 1 == 0 {
                        continue;
                    }
                    if let Some(&other) = page_owner.get(&page) {
                        return Err(InitError::ManifestOverlap(other, m.vm_id));
                    }
                    page_owner.insert(page, m.vm_id);
                    table.map_identity(page, Ownership::Owned);
                }
            }
            let mut owned_lines = BTreeSet::new();
            for &d in &m.passthrough {
                let idx = machine.device_by_id(d).ok_or(InitError::UnknownDevice { vm: m.vm_id, device: d })?;
                if device_owner.insert(d, m.vm_id).is_some() {
                    return Err(InitError::DeviceShared(d));
                }
                let dev = machine.devices[idx].config.clone();
                for page in (dev.mmio_base / PAGE_SIZE)..(dev.mmio_base + dev.mmio_len).div_ceil(PAGE_SIZE) {
                    table.map_identity(page, Ownership::Owned);
                }
                owned_lines.insert(dev.irq_line);
                machine.gic.set_route(dev.irq_line, IrqRoute { vm: m.vm_id, vcpu: 0, pcpu: m.affinity[0] });
                machine.gic.set_enabled(dev.irq_line, true);
            }
            for h in &m.mmio_holes {
                table.add_hole(h.ipa, h.len);
            }
            if m.kind != VmKind::Primary {
                table.add_hole(GICD_BASE, GICD_SIZE);
            }
            let pcpu_mask = m.affinity.iter().fold(0u64, |acc, &p| acc | (1 << p));
            machine.gic.set_sgi_filter(m.vm_id, pcpu_mask);
            let boot_info = BootInfo {
                memory: coalesce(
                    table
                        .entries()
                        .filter(|(p, _)| (*p * PAGE_SIZE) >= ram_lo && (*p * PAGE_SIZE) < ram_hi)
                        .map(|(p, _)| p),
                ),
                pcpus: m.affinity.clone(),
                devices: m.passthrough.clone(),
                mmio_holes: m.mmio_holes.iter().map(|h| (h.ipa, h.len)).collect(),
            };
            let contexts = (0..m.vcpus).map(|_| Some(VcpuContext::new(machine.config.list_registers))).collect();
            vms.insert(
                m.vm_id,
                VmState {
                    manifest: m.clone(),
                    table,
                    boot_info,
                    contexts,
                    owned_lines,
                    virt_enabled: BTreeSet::new(),
                    ivc_inbox: VecDeque::new(),
                    traps: 0,
                    gicd_traps: 0,
                    gear2_hops: 0,
                },
            );
        }

        let mut residents = vec![Vec::new(); n as usize];
        let mut dedicated = vec![None; n as usize];
        for m in manifests {
            for (v, &p) in m.affinity.iter().enumerate() {
                residents[p as usize].push((m.vm_id, v as u32));
                if m.kind == VmKind::Rtvm {
                    dedicated[p as usize] = Some(m.vm_id);
                }
            }
        }
        for r in &mut residents {
            r.sort();
        }

        let mut g = Gear1 {
            cost,
            vms,
            primary: primary.vm_id,
            private,
            loaded: (0..n).map(|_| None).collect(),
            residents,
            dedicated,
            list_registers: machine.config.list_registers,
            stats: Gear1Stats::default(),
        };
        machine.pcpus[0].power = Power::On;
        g.load(machine, 0, primary.vm_id, 0);
        Ok(g)
    }

    pub fn primary(&self) -> u32 {
        self.primary
    }

    pub fn vm_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.vms.keys().copied()
    }

    pub fn vm(&self, vm: u32) -> Option<&VmState> {
        self.vms.get(&vm)
    }

    pub fn manifest(&self, vm: u32) -> Option<&VmManifest> {
        self.vms.get(&vm).map(|s| &s.manifest)
    }

    pub fn kind(&self, vm: u32) -> Option<VmKind> {
        self.manifest(vm).map(|m| m.kind)
    }

    pub fn affinity(&self, vm: u32, vcpu: u32) -> Option<u32> {
        self.manifest(vm).and_then(|m| m.affinity.get(vcpu as usize).copied())
    }

    pub fn dedicated_to(&self, pcpu: u32) -> Option<u32> {
        self.dedicated[pcpu as usize]
    }

    pub fn residents(&self, pcpu: u32) -> &[(u32, u32)] {
        &self.residents[pcpu as usize]
    }

    pub fn private_range(&self) -> (u64, u64) {
        self.private
    }

    pub fn translate(&self, vm: u32, ipa: u64) -> Result<u64, Stage2Fault> {
        Translate::translate(self, vm, ipa, false)
    }

    /// vcpu currently in the pcpu's register file.
    pub fn loaded(&self, pcpu: u32) -> Option<(u32, u32)> {
        self.loaded[pcpu as usize].as_ref().map(|l| (l.vm, l.vcpu))
    }

    fn exists(&self, vm: u32, vcpu: u32) -> bool {
        self.vms.get(&vm).is_some_and(|s| (vcpu as usize) < s.contexts.len())
    }

    pub fn ctx(&self, vm: u32, vcpu: u32) -> Option<&VcpuContext> {
        let p = self.affinity(vm, vcpu)?;
        if let Some(l) = &self.loaded[p as usize] {
            if (l.vm, l.vcpu) == (vm, vcpu) {
                return Some(&l.ctx);
            }
        }
        self.vms.get(&vm)?.contexts.get(vcpu as usize)?.as_ref()
    }

    pub fn ctx_mut(&mut self, vm: u32, vcpu: u32) -> Option<&mut VcpuContext> {
        let p = self.affinity(vm, vcpu)?;
        let is_loaded = self.loaded[p as usize].as_ref().is_some_and(|l| (l.vm, l.vcpu) == (vm, vcpu));
        if is_loaded {
            return self.loaded[p as usize].as_mut().map(|l| &mut l.ctx);
        }
        self.vms.get_mut(&vm)?.contexts.get_mut(vcpu as usize)?.as_mut()
    }

    fn load(&mut self, machine: &mut Machine, pcpu: u32, vm: u32, vcpu: u32) {
        let st = self.vms.get_mut(&vm).expect("vm");
        let mut ctx = st.contexts[vcpu as usize].take().expect("context not loaded elsewhere");
        ctx.runstate = RunState::Running;
        machine.timers.set_el1(pcpu, ctx.sys_regs.el1_timer);
        let p = &mut machine.pcpus[pcpu as usize];
        p.current_world = World::Vm { vm, vcpu };
        p.irq_trap = !st.manifest.owns_cpu_interface();
        self.loaded[pcpu as usize] = Some(Loaded { vm, vcpu, ctx });
    }

    fn save(&mut self, machine: &mut Machine, pcpu: u32) {
        if let Some(mut l) = self.loaded[pcpu as usize].take() {
            l.ctx.sys_regs.el1_timer = machine.timers.el1(pcpu);
            if l.ctx.runstate == RunState::Running {
                l.ctx.runstate = RunState::Ready;
            }
            machine.timers.set_el1(pcpu, Comparator::default());
            self.vms.get_mut(&l.vm).expect("vm").contexts[l.vcpu as usize] = Some(l.ctx);
        }
        machine.pcpus[pcpu as usize].current_world = World::Gear1;
        machine.pcpus[pcpu as usize].irq_trap = true;
    }

    /// Save whatever runs on `pcpu` and load `to`. Returns the charge.
    pub fn world_switch(&mut self, machine: &mut Machine, pcpu: u32, to: World) -> u64 {
        self.save(machine, pcpu);
        if let World::Vm { vm, vcpu } = to {
            self.load(machine, pcpu, vm, vcpu);
        }
        self.stats.world_switches += 1;
        self.el2_timer_multiplex(machine, pcpu);
        self.cost.world_switch_ns
    }

    /// Count a hop into Gear2 caused by `vm`.
    pub fn note_gear2_hop(&mut self, vm: u32) {
        if let Some(s) = self.vms.get_mut(&vm) {
            s.gear2_hops += 1;
        }
    }

    /// Decide where a trap is handled and charge the entry.
    pub fn handle_trap(&mut self, vm: u32, reason: &ExitReason) -> Disposition {
        self.stats.traps += 1;
        let kind = self.kind(vm);
        if let Some(s) = self.vms.get_mut(&vm) {
            s.traps += 1;
            if matches!(reason, ExitReason::GicdAccess { .. }) {
                s.gicd_traps += 1;
            }
        }
        let d = match reason {
            ExitReason::GicdAccess { .. } | ExitReason::GiccAccess { .. } | ExitReason::Stage2Perm { .. } => {
                Disposition::Handled
            }
            // A contained VM is never serviced by Gear2.
            _ if kind == Some(VmKind::Rtvm) => Disposition::Handled,
            ExitReason::Hypercall { code, .. } => match HypercallId::from_code(*code) {
                Some(HypercallId::IoAck) => Disposition::RouteToGear2,
                _ => Disposition::Handled,
            },
            ExitReason::MmioRead { .. } | ExitReason::MmioWrite { .. } | ExitReason::Wfi | ExitReason::Yield => {
                Disposition::RouteToGear2
            }
            ExitReason::PhysIrq { .. } => Disposition::RouteToGear2,
        };
        match d {
            Disposition::Handled => self.stats.handled += 1,
            Disposition::RouteToGear2 => self.stats.routed += 1,
        }
        d
    }

    /// Place `line` in the target's virtual interface. Returns whether the
    /// target was blocked waiting for an interrupt and is now Ready.
    pub fn virq_inject(&mut self, vm: u32, vcpu: u32, line: u32) -> Result<bool, Gear1Error> {
        let ctx = self.ctx_mut(vm, vcpu).ok_or(Gear1Error::UnknownTarget(vm, vcpu))?;
        ctx.vif.inject(line);
        let woke = matches!(ctx.runstate, RunState::Blocked(BlockReason::Wfi | BlockReason::Halted));
        if woke {
            ctx.runstate = RunState::Ready;
        }
        self.stats.virq_injected += 1;
        Ok(woke)
    }

    /// Cost of a hypercall as charged on the calling pcpu.
    pub fn hypercall_cost(&self, id: Option<HypercallId>) -> u64 {
        let c = &self.cost;
        match id {
            Some(HypercallId::RunVcpu) => 0,
            Some(HypercallId::VirqInject) | Some(HypercallId::IvcSend) => c.hypercall_ns + c.virq_inject_ns,
            Some(HypercallId::PsciCpuOn) => c.hypercall_ns + c.el3_hop_ns,
            _ => c.hypercall_ns,
        }
    }

    /// Dispatch a hypercall from `(vm, vcpu)`.
    pub fn hypercall(&mut self, machine: &mut Machine, vm: u32, vcpu: u32, code: u32, args: [u64; 3]) -> HvcOutcome {
        self.stats.hypercalls += 1;
        let id = HypercallId::from_code(code);
        let cost = self.hypercall_cost(id);
        let is_primary = vm == self.primary;
        let out = |result: i64, effect: HvcEffect| HvcOutcome { id, result, cost, effect };
        let Some(id) = id else {
            self.stats.unknown_hypercalls += 1;
            return out(HVC_NOT_SUPPORTED, HvcEffect::None);
        };
        let (a0, a1, a2) = (args[0], args[1], args[2]);
        match id {
            HypercallId::Version => out(ABI_VERSION, HvcEffect::None),
            HypercallId::RunVcpu => {
                let (tvm, tvcpu) = (a0 as u32, a1 as u32);
                let ok = is_primary
                    && self.exists(tvm, tvcpu)
                    && self.kind(tvm) != Some(VmKind::Rtvm)
                    && tvm != self.primary
                    && self.affinity(tvm, tvcpu) == Some(vcpu);
                if ok {
                    out(HVC_OK, HvcEffect::RunVcpu { vm: tvm, vcpu: tvcpu })
                } else {
                    out(if is_primary { HVC_INVALID } else { HVC_DENIED }, HvcEffect::None)
                }
            }
            HypercallId::VirqInject => {
                if !is_primary {
                    return out(HVC_DENIED, HvcEffect::None);
                }
                let (tvm, tvcpu, line) = (a0 as u32, a1 as u32, a2 as u32);
                match self.virq_inject(tvm, tvcpu, line) {
                    Ok(woke) => out(HVC_OK, HvcEffect::Injected { vm: tvm, vcpu: tvcpu, line, woke }),
                    Err(_) => out(HVC_INVALID, HvcEffect::None),
                }
            }
            HypercallId::IvcSend => {
                let to = a0 as u32;
                if to == vm || !self.vms.contains_key(&to) {
                    return out(HVC_INVALID, HvcEffect::None);
                }
                let inbox = &mut self.vms.get_mut(&to).expect("vm").ivc_inbox;
                if inbox.len() >= IVC_DEPTH {
                    return out(HVC_BUSY, HvcEffect::None);
                }
                inbox.push_back(IvcMessage { from: vm, word: a1 });
                let woke = self.virq_inject(to, 0, LINE_IVC).unwrap_or(false);
                out(HVC_OK, HvcEffect::Injected { vm: to, vcpu: 0, line: LINE_IVC, woke })
            }
            HypercallId::PsciCpuOn => match self.psci_cpu_on(machine, vm, a0 as u32) {
                Ok(world) => out(HVC_OK, HvcEffect::PoweredOn { pcpu: a0 as u32, world }),
                Err(PsciError::AlreadyOn) => out(HVC_ALREADY_ON, HvcEffect::None),
                Err(PsciError::InvalidPcpu) => out(HVC_INVALID, HvcEffect::None),
                Err(PsciError::Denied) => out(HVC_DENIED, HvcEffect::None),
            },
            HypercallId::MemShare => match self.mem_share(vm, a0, a1, a2 as u32) {
                Ok(()) => out(HVC_OK, HvcEffect::None),
                Err(ShareError::NotOwner(_)) => out(HVC_NOT_OWNER, HvcEffect::None),
                Err(_) => out(HVC_INVALID, HvcEffect::None),
            },
            HypercallId::MemReclaim => match self.mem_reclaim(vm, a0, a1) {
                Ok(()) => out(HVC_OK, HvcEffect::None),
                Err(ShareError::NotLent(_)) => out(HVC_NOT_LENT, HvcEffect::None),
                Err(_) => out(HVC_INVALID, HvcEffect::None),
            },
            HypercallId::WatchdogKick => out(HVC_OK, HvcEffect::Kick { layer: a0 as u32, subject: a1 as u32 }),
            HypercallId::IoAck => {
                if self.kind(vm) != Some(VmKind::Dvm) {
                    return out(HVC_DENIED, HvcEffect::None);
                }
                out(HVC_OK, HvcEffect::ToGear2 { req: a0, status: a1 as i64 })
            }
        }
    }

    /// Power up `target` on behalf of the primary VM. The new pcpu runs the
    /// primary VM's idle loop, or the RTVM that owns it.
    pub fn psci_cpu_on(&mut self, machine: &mut Machine, caller: u32, target: u32) -> Result<World, PsciError> {
        if caller != self.primary {
            return Err(PsciError::Denied);
        }
        if target as usize >= machine.pcpu_count() {
            return Err(PsciError::InvalidPcpu);
        }
        if machine.pcpus[target as usize].power == Power::On {
            return Err(PsciError::AlreadyOn);
        }
        machine.pcpus[target as usize].power = Power::On;
        let (vm, vcpu) = match self.dedicated[target as usize] {
            Some(rt) => {
                let v = self.manifest(rt).expect("vm").affinity.iter().position(|&p| p == target).expect("pinned");
                (rt, v as u32)
            }
            None => (self.primary, target),
        };
        self.load(machine, target, vm, vcpu);
        self.el2_timer_multiplex(machine, target);
        Ok(World::Vm { vm, vcpu })
    }

    /// Emulate a trapped distributor access from `(vm, vcpu)`.
    pub fn emulate_gicd(&mut self, machine: &mut Machine, vm: u32, vcpu: u32, offset: u64, op: GicdOp) -> GicdEffect {
        self.stats.gicd_accesses += 1;
        let mut eff = GicdEffect::default();
        let Some(st) = self.vms.get_mut(&vm) else {
            eff.illegal = true;
            return eff;
        };
        let reg_lines = |base: u64| -> Option<u32> {
            (offset >= base && offset < base + 0x80 && offset.is_multiple_of(4))
                .then(|| ((offset - base) / 4) as u32 * 32)
        };
        if let Some(first) = reg_lines(GICD_ISENABLER).or_else(|| reg_lines(GICD_ICENABLER)) {
            let set = offset < GICD_ICENABLER;
            match op {
                GicdOp::Read => {
                    eff.value = (0..32)
                        .filter(|b| st.virt_enabled.contains(&(first + b)) || first + b < PPI_END)
                        .fold(0, |a, b| a | (1 << b));
                }
                GicdOp::Write(bits) => {
                    for b in 0..32u32 {
                        if bits >> b & 1 == 0 {
                            continue;
                        }
                        let line = first + b;
                        if line < PPI_END {
                            continue;
                        }
                        if st.owned_lines.contains(&line) || is_virtual_line(&st.manifest, line) {
                            if set {
                                st.virt_enabled.insert(line);
                            } else {
                                st.virt_enabled.remove(&line);
                            }
                            if st.owned_lines.contains(&line) {
                                machine.gic.set_enabled(line, set);
                            }
                        } else {
                            eff.illegal = true;
                        }
                    }
                }
            }
        } else if (GICD_ITARGETSR..GICD_ITARGETSR + 0x400).contains(&offset) {
            let line = (offset - GICD_ITARGETSR) as u32;
            match op {
                GicdOp::Read => {
                    eff.value = machine.gic.route(line).map(|r| ((r.vm as u64) << 8) | r.vcpu as u64).unwrap_or(0);
                }
                GicdOp::Write(v) => {
                    let (tvm, tvcpu) = ((v >> 8) as u32, (v & 0xff) as u32);
                    let may_delegate = st.manifest.kind == VmKind::Dvm;
                    let owns = st.owned_lines.contains(&line);
                    let target_pcpu = self
                        .vms
                        .get(&tvm)
                        .filter(|t| t.manifest.kind != VmKind::Rtvm || tvm == vm)
                        .and_then(|t| t.manifest.affinity.get(tvcpu as usize).copied());
                    match target_pcpu {
                        Some(pcpu) if owns && (tvm == vm || may_delegate) => {
                            machine.gic.set_route(line, IrqRoute { vm: tvm, vcpu: tvcpu, pcpu });
                        }
                        _ => eff.illegal = true,
                    }
                }
            }
        } else if offset == GICD_SGIR {
            if let GicdOp::Write(v) = op {
                let sgi = (v & 0xf) as u32;
                let list = (v >> 16) & 0xff;
                let self_pcpu = st.manifest.affinity[vcpu as usize];
                let all = (1u64 << machine.pcpu_count()) - 1;
                let requested = match (v >> 24) & 0x3 {
                    0 => list,
                    1 => all & !(1 << self_pcpu),
                    2 => 1 << self_pcpu,
                    _ => 0,
                };
                let (allowed, dropped) = machine.gic.filter_sgi(vm, requested);
                if dropped {
                    self.stats.sgi_filtered += 1;
                    eff.filtered = Some((requested, allowed));
                }
                let st = &self.vms[&vm];
                let mut targets = Vec::new();
                for (tv, &p) in st.manifest.affinity.iter().enumerate() {
                    if allowed >> p & 1 == 1 && !(tv as u32 == vcpu && (v >> 24) & 0x3 == 1) {
                        targets.push(IrqRoute { vm, vcpu: tv as u32, pcpu: p });
                    }
                }
                if sgi < SGI_END && !targets.is_empty() {
                    eff.sgi = Some((sgi, targets));
                }
            }
        }
        if eff.illegal {
            self.stats.gicd_illegal += 1;
        }
        eff
    }

    /// Arm or disarm a vcpu's EL1 virtual timer.
    pub fn set_vcpu_timer(&mut self, machine: &mut Machine, vm: u32, vcpu: u32, deadline: Option<u64>) {
        let c = Comparator { value: deadline.unwrap_or(0), enabled: deadline.is_some() };
        let Some(p) = self.affinity(vm, vcpu) else { return };
        if self.loaded(p) == Some((vm, vcpu)) {
            machine.timers.set_el1(p, c);
            // Keep the saved copy in step; hardware stays authoritative.
            self.loaded[p as usize].as_mut().expect("loaded").ctx.sys_regs.el1_timer = c;
        } else if let Some(ctx) = self.ctx_mut(vm, vcpu) {
            ctx.sys_regs.el1_timer = c;
            self.el2_timer_multiplex(machine, p);
        }
    }

    pub fn vcpu_timer(&self, machine: &Machine, vm: u32, vcpu: u32) -> Option<u64> {
        let p = self.affinity(vm, vcpu)?;
        if self.loaded(p) == Some((vm, vcpu)) {
            machine.timers.el1(p).armed_at()
        } else {
            self.ctx(vm, vcpu)?.sys_regs.el1_timer.armed_at()
        }
    }

    /// Program the EL2 timer of `pcpu` to the nearest deadline among its
    /// offline vcpus, or disable it.
    pub fn el2_timer_multiplex(&mut self, machine: &mut Machine, pcpu: u32) -> Option<u64> {
        let loaded = self.loaded(pcpu);
        let next = self.residents[pcpu as usize]
            .iter()
            .filter(|&&id| Some(id) != loaded)
            .filter_map(|&(vm, vcpu)| self.vms[&vm].contexts[vcpu as usize].as_ref()?.sys_regs.el1_timer.armed_at())
            .min();
        machine.timers.set_el2(pcpu, Comparator { value: next.unwrap_or(0), enabled: next.is_some() });
        next
    }

    /// EL2 timer expiry: inject the virtual timer line into every offline
    /// vcpu whose deadline has passed and disarm its comparator.
    pub fn el2_timer_fire(&mut self, machine: &mut Machine, pcpu: u32, now: u64) -> Vec<(u32, u32, bool)> {
        self.stats.el2_fires += 1;
        let loaded = self.loaded(pcpu);
        let due: Vec<(u32, u32)> = self.residents[pcpu as usize]
            .iter()
            .copied()
            .filter(|&id| Some(id) != loaded)
            .filter(|&(vm, vcpu)| {
                self.vms[&vm].contexts[vcpu as usize]
                    .as_ref()
                    .and_then(|c| c.sys_regs.el1_timer.armed_at())
                    .is_some_and(|d| d <= now)
            })
            .collect();
        let mut out = Vec::new();
        for (vm, vcpu) in due {
            let ctx = self.ctx_mut(vm, vcpu).expect("resident");
            ctx.sys_regs.el1_timer.enabled = false;
            let woke = self.virq_inject(vm, vcpu, LINE_VTIMER).expect("resident");
            out.push((vm, vcpu, woke));
        }
        self.el2_timer_multiplex(machine, pcpu);
        out
    }

    /// Lend `pages` pages starting at `ipa` from `owner` to `target`.
    pub fn mem_share(&mut self, owner: u32, ipa: u64, pages: u64, target: u32) -> Result<(), ShareError> {
        if owner == target || !self.vms.contains_key(&owner) || !self.vms.contains_key(&target) {
            return Err(ShareError::BadTarget);
        }
        let first = ipa / PAGE_SIZE;
        let table = &self.vms[&owner].table;
        for p in first..first + pages {
            match table.entry(p) {
                Some(e) if e.ownership == Ownership::Owned && !self.is_private(p) => {}
                _ => return Err(ShareError::NotOwner(p * PAGE_SIZE)),
            }
            if self.vms[&target].table.entry(p).is_some() {
                return Err(ShareError::BadTarget);
            }
        }
        for p in first..first + pages {
            self.vms.get_mut(&owner).expect("vm").table.entry_mut(p).expect("mapped").ownership =
                Ownership::Lent(target);
            self.vms.get_mut(&target).expect("vm").table.map_identity(p, Ownership::SharedFrom(owner));
        }
        Ok(())
    }

    /// Take back pages previously lent by `owner`.
    pub fn mem_reclaim(&mut self, owner: u32, ipa: u64, pages: u64) -> Result<(), ShareError> {
        let first = ipa / PAGE_SIZE;
        let table = &self.vms.get(&owner).ok_or(ShareError::BadTarget)?.table;
        let mut borrowers = Vec::new();
        for p in first..first + pages {
            match table.entry(p).map(|e| e.ownership) {
                Some(Ownership::Lent(t)) => borrowers.push((p, t)),
                _ => return Err(ShareError::NotLent(p * PAGE_SIZE)),
            }
        }
        for (p, t) in borrowers {
            self.vms.get_mut(&owner).expect("vm").table.entry_mut(p).expect("mapped").ownership = Ownership::Owned;
            self.vms.get_mut(&t).expect("vm").table.unmap(p);
        }
        Ok(())
    }

    fn is_private(&self, page: u64) -> bool {
        let a = page * PAGE_SIZE;
        a >= self.private.0 && a < self.private.1
    }

    pub fn ivc_recv(&mut self, vm: u32) -> Option<IvcMessage> {
        self.vms.get_mut(&vm)?.ivc_inbox.pop_front()
    }

    /// Fresh contexts for every vcpu of `vm`; mappings are kept.
    pub fn restart_vm(&mut self, machine: &mut Machine, vm: u32) {
        let Some(st) = self.vms.get(&vm) else { return };
        let vcpus = st.manifest.vcpus;
        for v in 0..vcpus {
            let mut fresh = VcpuContext::new(self.list_registers);
            let p = self.affinity(vm, v).expect("pinned");
            if self.loaded(p) == Some((vm, v)) {
                fresh.runstate = RunState::Running;
                machine.timers.set_el1(p, Comparator::default());
                self.loaded[p as usize].as_mut().expect("loaded").ctx = fresh;
            } else {
                fresh.runstate = RunState::Ready;
                self.vms.get_mut(&vm).expect("vm").contexts[v as usize] = Some(fresh);
                self.el2_timer_multiplex(machine, p);
            }
        }
    }

    /// Structural checks over every table: identity mapping, a single owner
    /// per page, no borrower without a matching lend record, private pages
    /// never mapped.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut owners: BTreeMap<u64, u32> = BTreeMap::new();
        let mut lent: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
        let mut borrowed: BTreeMap<u64, Vec<(u32, u32)>> = BTreeMap::new();
        for (&vm, st) in &self.vms {
            for (page, e) in st.table.entries() {
                if e.pa_page != page {
                    return Err(format!("vm {vm} page {page:#x} not identity mapped"));
                }
                if self.is_private(page) {
                    return Err(format!("vm {vm} maps private page {page:#x}"));
                }
                match e.ownership {
                    Ownership::Owned | Ownership::Lent(_) => {
                        if let Some(o) = owners.insert(page, vm) {
                            return Err(format!("page {page:#x} owned by {o} and {vm}"));
                        }
                        if let Ownership::Lent(t) = e.ownership {
                            lent.insert(page, (vm, t));
                        }
                    }
                    Ownership::SharedFrom(o) => borrowed.entry(page).or_default().push((o, vm)),
                }
            }
        }
        for (page, bs) in borrowed {
            if bs.len() > 1 {
                return Err(format!("page {page:#x} borrowed by several VMs"));
            }
            let (o, b) = bs[0];
            if lent.get(&page) != Some(&(o, b)) {
                return Err(format!("vm {b} borrows page {page:#x} without a lend record from {o}"));
            }
        }
        for (page, (o, t)) in lent {
            let ok = self.vms[&t].table.entry(page).is_some_and(|e| e.ownership == Ownership::SharedFrom(o));
            if !ok {
                return Err(format!("page {page:#x} lent by {o} but {t} has no mapping"));
            }
        }
        Ok(())
    }
}

impl Translate for Gear1 {
    fn translate(&self, vm: u32, ipa: u64, write: bool) -> Result<u64, Stage2Fault> {
        match self.vms.get(&vm) {
            Some(s) => s.table.translate(ipa, write),
            None => Err(Stage2Fault::Perm(ipa)),
        }
    }
}

/// Virtual-only lines a VM may configure: its backend completion lines and
/// the inter-VM notification line.
fn is_virtual_line(m: &VmManifest, line: u32) -> bool {
    line == LINE_IVC || m.mmio_holes.iter().any(|h| h.backend.is_some()) && line >= PPI_END
}

fn coalesce(pages: impl Iterator<Item = u64>) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for p in pages {
        let a = p * PAGE_SIZE;
        match out.last_mut() {
            Some((b, l)) if *b + *l == a => *l += PAGE_SIZE,
            _ => out.push((a, PAGE_SIZE)),
        }
    }
    out
}
