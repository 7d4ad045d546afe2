//! Built-in scenarios for the benchmark harness and the test suite.
//!
//! Memory map shared by every template: Gear1 owns the first 16 MiB of
//! RAM, the primary the next 16 MiB, and each other VM gets its own slot.

use serde::{Deserialize, Serialize};

use crate::bench::scenario::{
    BackendSpec, BenchSpec, DevModelSpec, NoiseSpec, ScenarioConfig, SchedulerSpec, WorkloadSpec,
};
use crate::bench::CostModel;
use crate::devmodel::BackendKind;
use crate::gear1::{VgicMode, VmKind, VmManifest};
use crate::gear2::RoundRobin;
use crate::guests::{Instr, ProfileKind, ProfileLayout, RtProfile, RtTaskConfig, WorkloadProgram};
use crate::machine::{DeviceBehavior, DeviceConfig, PlatformConfig, GICD_BASE, GICD_SGIR};
use crate::supervision::SupervisionConfig;

/// Passthrough disk used by the IoBound profile.
pub const DISK_ID: u32 = 1;
/// Backend id of the emulated device served by the device VM.
pub const VDEV_ID: u32 = 10;
/// Guest-physical address of the emulated device's MMIO hole.
pub const VDEV_IPA: u64 = 0x1000_0000;
pub const VDEV_LINE: u32 = 70;
/// SGI the IPI micro-benchmark sends.
pub const IPI_SGI: u32 = 2;

const PRIMARY_IPA: u64 = 0x4100_0000;
const SLOT: u64 = 0x200_0000;

/// RAM slot of VM `id` (1-based); 32 MiB each, above the primary.
pub fn vm_region(id: u32) -> (u64, u64) {
    (0x4200_0000 + (id as u64 - 1) * SLOT, SLOT)
}

fn vm(id: u32, kind: VmKind, affinity: Vec<u32>) -> VmManifest {
    let (ipa, len) = vm_region(id);
    VmManifest::new(id, kind, affinity).with_region(ipa, len)
}

fn primary() -> VmManifest {
    VmManifest::new(0, VmKind::Primary, vec![0, 1, 2, 3]).with_region(PRIMARY_IPA, 0x100_0000)
}

/// Profile layout whose buffer sits inside VM `id`'s RAM.
pub fn layout_for(id: u32) -> ProfileLayout {
    ProfileLayout { buffer_ipa: vm_region(id).0 + 0x100_0000, ..ProfileLayout::default() }
}

fn profile_on(id: u32, kind: ProfileKind) -> WorkloadSpec {
    WorkloadSpec { layout: Some(layout_for(id)), ..WorkloadSpec::profile(id, 0, kind) }
}

/// Default four-core board with the passthrough disk.
pub fn platform() -> PlatformConfig {
    let l = ProfileLayout::default();
    PlatformConfig {
        devices: vec![DeviceConfig {
            id: DISK_ID,
            mmio_base: l.disk_base,
            mmio_len: 0x1000,
            irq_line: l.disk_line,
            behavior: DeviceBehavior::Block { service_ns: l.disk_service_ns },
        }],
        ..PlatformConfig::default()
    }
}

fn base(name: &str, vms: Vec<VmManifest>, duration_ns: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        platform: platform(),
        vms,
        cost_model: CostModel::default(),
        workloads: Vec::new(),
        devmodel: None,
        supervision: SupervisionConfig::default(),
        scheduler: SchedulerSpec::default(),
        noise: None,
        stalls: Vec::new(),
        bench: BenchSpec::default(),
        seed: 1,
        duration_ns,
    }
}

fn devmodel(dvm: u32) -> DevModelSpec {
    DevModelSpec {
        vm: dvm,
        kernel_module: false,
        backends: vec![BackendSpec {
            device: VDEV_ID,
            kind: BackendKind::Block,
            irq_line: VDEV_LINE,
            depth: 64,
            image_bytes: 1 << 20,
            path: None,
        }],
    }
}

/// Flows for the micro-benchmarks, each on its own pcpus:
///
/// * vm1 (vcpus on pcpus 1 and 2): vcpu0 periodically sends an SGI to
///   vcpu1, which is busy computing; vcpu0 also issues version hypercalls.
/// * vm2 (pcpu 3) issues blocking writes to an emulated device served by
///   the device VM vm3 on the same pcpu.
pub fn micro(rounds: u32) -> ScenarioConfig {
    let gap = 200_000;
    let sgir = IPI_SGI as u64 | (1 << 2) << 16;
    let sender = WorkloadProgram::new(vec![
        Instr::Compute(gap),
        Instr::Mmio { addr: GICD_BASE + GICD_SGIR, write: true, value: sgir, size: 4, blocking: false },
        Instr::Hypercall { code: crate::gear1::HypercallId::Version.code(), args: [0; 3] },
    ]);
    let receiver = WorkloadProgram::new(vec![Instr::Compute(1_000_000), Instr::LoopTo { index: 0, times: 0 }])
        .with_handler(IPI_SGI, vec![Instr::Compute(1_000)]);
    let io = WorkloadProgram::new(vec![
        Instr::Compute(gap),
        Instr::Mmio { addr: VDEV_IPA, write: true, value: 7, size: 4, blocking: true },
    ]);
    let (sender, io) = (repeat(sender, rounds), repeat(io, rounds));
    let mut c = base(
        "micro",
        vec![
            primary(),
            vm(1, VmKind::Secondary, vec![1, 2]),
            vm(2, VmKind::Secondary, vec![3]).with_hole(VDEV_IPA, 0x1000, Some(VDEV_ID)),
            vm(3, VmKind::Dvm, vec![3]),
        ],
        (rounds as u64 + 2) * (gap + 50_000),
    );
    c.workloads = vec![
        WorkloadSpec::program(1, 0, &sender),
        WorkloadSpec::program(1, 1, &receiver),
        WorkloadSpec::program(2, 0, &io),
    ];
    c.devmodel = Some(devmodel(3));
    c
}

/// Run the whole program `n` times (`LoopTo` with 0 would loop forever).
fn repeat(p: WorkloadProgram, n: u32) -> WorkloadProgram {
    let mut ins = p.instructions.clone();
    match n {
        0 => ins.clear(),
        1 => {}
        _ => ins.push(Instr::LoopTo { index: 0, times: n - 1 }),
    }
    WorkloadProgram { instructions: ins, ..p }
}

/// One secondary VM on pcpu 1 running `kind`, its interrupts forwarded
/// through Gear2.
pub fn overhead(kind: ProfileKind, duration_ns: u64) -> ScenarioConfig {
    let mut v1 = vm(1, VmKind::Secondary, vec![1]);
    if kind == ProfileKind::IoBound {
        v1 = v1.with_passthrough(DISK_ID);
    }
    let name = match kind {
        ProfileKind::IoBound => "overhead-io",
        ProfileKind::CpuBound => "overhead-cpu",
    };
    let mut c = base(name, vec![primary(), v1], duration_ns);
    c.workloads = vec![profile_on(1, kind)];
    c.bench.overhead_vm = Some(1);
    c
}

/// An RTVM on pcpu 1 that makes `k` GICD accesses, then idles.
pub fn rtvm_gicd(k: u32, duration_ns: u64) -> ScenarioConfig {
    let mut ins = Vec::new();
    if k > 0 {
        ins.push(Instr::Compute(1_000));
        ins.push(Instr::Mmio { addr: GICD_BASE + 0x100, write: true, value: 1 << IPI_SGI, size: 4, blocking: false });
        if k > 1 {
            ins.push(Instr::LoopTo { index: 0, times: k - 1 });
        }
    }
    let prog = WorkloadProgram::new(ins);
    let mut c = base("rtvm-gicd", vec![primary(), vm(1, VmKind::Rtvm, vec![1])], duration_ns);
    c.workloads = vec![WorkloadSpec::program(1, 0, &prog)];
    c
}

/// `n` always-busy secondary VMs sharing pcpu 1 under round-robin.
pub fn shared_pcpu(n: u32, duration_ns: u64) -> ScenarioConfig {
    let busy = WorkloadProgram::new(vec![Instr::Compute(10_000_000), Instr::LoopTo { index: 0, times: 0 }]);
    let mut vms = vec![primary()];
    vms.extend((1..=n).map(|id| vm(id, VmKind::Secondary, vec![1])));
    let mut c = base("shared-pcpu", vms, duration_ns);
    c.workloads = (1..=n).map(|id| WorkloadSpec::program(id, 0, &busy)).collect();
    c
}

/// The five platform configurations the jitter experiment compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterConfig {
    Native,
    KvmLikeRtVm,
    GearvNonRtVm,
    GearvRtVmVgicEmul,
    GearvRtVmPassthrough,
}

impl JitterConfig {
    /// In the order the reports list them.
    pub const ALL: [JitterConfig; 5] = [
        JitterConfig::Native,
        JitterConfig::GearvRtVmPassthrough,
        JitterConfig::GearvRtVmVgicEmul,
        JitterConfig::KvmLikeRtVm,
        JitterConfig::GearvNonRtVm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            JitterConfig::Native => "native",
            JitterConfig::KvmLikeRtVm => "kvm_like_rt_vm",
            JitterConfig::GearvNonRtVm => "gearv_non_rt_vm",
            JitterConfig::GearvRtVmVgicEmul => "gearv_rt_vm_vgic_emul",
            JitterConfig::GearvRtVmPassthrough => "gearv_rt_vm_passthrough",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// VM id of the cyclictest guest in every jitter configuration. Keeping it
/// fixed keeps its random stream paired across configurations.
pub const RT_VM: u32 = 5;
/// pcpu hosting the background device VM.
pub const BACKGROUND_PCPU: u32 = 2;

/// Host burst arrivals of the KVM-like baseline.
pub const KVM_NOISE: NoiseSpec = NoiseSpec { pcpu: 3, rate_hz: 50.0, min_ns: 50_000, max_ns: 1_500_000 };

/// cyclictest in vm5 with the standard background load: the device VM
/// (vm1, pcpu 2) runs the IoBound profile on the passthrough disk and
/// three CpuBound VMs share pcpu 1.
///
/// * Native: passthrough RTVM with every hypervisor charge zero.
/// * Passthrough / VgicEmul: dedicated pcpu 3, vGIC passthrough or trapped.
/// * KvmLike: ordinary VM alone on pcpu 3 with KVM charges and host noise.
/// * NonRt: ordinary VM sharing pcpu 2 with all the background load.
pub fn jitter(config: JitterConfig, rt: RtTaskConfig, seed: u64) -> ScenarioConfig {
    use JitterConfig::*;
    let shared = config == GearvNonRtVm;
    let bg_cpu = if shared { BACKGROUND_PCPU } else { 1 };
    let rt_vm = match config {
        Native | GearvRtVmPassthrough => vm(RT_VM, VmKind::Rtvm, vec![3]),
        GearvRtVmVgicEmul => vm(RT_VM, VmKind::Rtvm, vec![3]).with_vgic(VgicMode::Emulated),
        KvmLikeRtVm => vm(RT_VM, VmKind::Secondary, vec![3]),
        GearvNonRtVm => vm(RT_VM, VmKind::Secondary, vec![BACKGROUND_PCPU]),
    };
    let vms = vec![
        primary(),
        vm(1, VmKind::Dvm, vec![BACKGROUND_PCPU]).with_passthrough(DISK_ID),
        vm(2, VmKind::Secondary, vec![bg_cpu]),
        vm(3, VmKind::Secondary, vec![bg_cpu]),
        vm(4, VmKind::Secondary, vec![bg_cpu]),
        rt_vm,
    ];
    let mut c = base(config.name(), vms, rt.horizon_ns());
    c.seed = seed;
    c.workloads = vec![
        profile_on(1, ProfileKind::IoBound),
        profile_on(2, ProfileKind::CpuBound),
        profile_on(3, ProfileKind::CpuBound),
        profile_on(4, ProfileKind::CpuBound),
        WorkloadSpec::rt(RT_VM, 0, rt),
    ];
    c.bench.rt_vm = Some(RT_VM);
    match config {
        Native => c.cost_model = CostModel::zero(),
        KvmLikeRtVm => {
            c.cost_model = CostModel::kvm();
            c.noise = Some(KVM_NOISE);
        }
        _ => {}
    }
    c
}

/// Default cyclictest parameters of the jitter experiment.
pub fn default_rt(profile: RtProfile) -> RtTaskConfig {
    RtTaskConfig { profile, ..RtTaskConfig::default() }
}

/// A passthrough RTVM alone on pcpu 1 running cyclictest, no background.
pub fn cyclictest(rt: RtTaskConfig, duration_ns: u64) -> ScenarioConfig {
    let mut c = base("cyclictest", vec![primary(), vm(1, VmKind::Rtvm, vec![1])], duration_ns);
    c.workloads = vec![WorkloadSpec::rt(1, 0, rt)];
    c.bench.rt_vm = Some(1);
    c
}

/// Supervised system: vm1 and vm2 are ordinary VMs on pcpus 1 and 2 that
/// compute and kick their in-guest watchdog; vm3 is the device VM.
pub fn supervised(duration_ns: u64) -> ScenarioConfig {
    let worker = WorkloadProgram::new(vec![
        Instr::Compute(5_000_000),
        Instr::KickWatchdog,
        Instr::LoopTo { index: 0, times: 0 },
    ])
    .with_tick(250);
    let mut c = base(
        "supervised",
        vec![
            primary(),
            vm(1, VmKind::Secondary, vec![1]),
            vm(2, VmKind::Secondary, vec![2]),
            vm(3, VmKind::Dvm, vec![3]),
        ],
        duration_ns,
    );
    c.workloads = vec![WorkloadSpec::program(1, 0, &worker), WorkloadSpec::program(2, 0, &worker)];
    c.devmodel = Some(DevModelSpec { vm: 3, kernel_module: false, backends: Vec::new() });
    c.supervision.enabled = true;
    c
}

/// Every named template at its default size, for `sim run --template`.
pub fn by_name(name: &str) -> Option<ScenarioConfig> {
    Some(match name {
        "micro" => micro(200),
        "overhead-io" => overhead(ProfileKind::IoBound, 1_000_000_000),
        "overhead-cpu" => overhead(ProfileKind::CpuBound, 1_000_000_000),
        "rtvm-gicd" => rtvm_gicd(10, 1_000_000_000),
        "cyclictest" => cyclictest(default_rt(RtProfile::Xenomai), default_rt(RtProfile::Xenomai).horizon_ns()),
        "supervised" => supervised(1_000_000_000),
        "shared-pcpu" => shared_pcpu(3, 300 * RoundRobin::DEFAULT_QUANTUM_NS),
        other => jitter(JitterConfig::from_name(other)?, default_rt(RtProfile::Xenomai), 1),
    })
}

pub const TEMPLATE_NAMES: [&str; 12] = [
    "micro",
    "overhead-io",
    "overhead-cpu",
    "rtvm-gicd",
    "cyclictest",
    "supervised",
    "shared-pcpu",
    "native",
    "gearv_rt_vm_passthrough",
    "gearv_rt_vm_vgic_emul",
    "kvm_like_rt_vm",
    "gearv_non_rt_vm",
];
