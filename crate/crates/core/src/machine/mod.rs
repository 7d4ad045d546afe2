//! The simulated SoC: CPUs, interrupt controller, timers, last-level cache,
//! memory and device stubs.

mod device;
mod gic;
mod llc;
mod memory;
mod timer;

pub use device::{DeviceBehavior, DeviceConfig, DeviceStub};
pub use gic::{
    GicCpuInterface, GicDistributor, IrqRoute, ListRegister, LrState, DEFAULT_PRIORITY, LINE_EL2_TIMER, LINE_VTIMER,
    PPI_END, SGI_END, SGI_KICK,
};
pub use llc::{GeometryError, LlcGeometry, LlcModel, LlcOutcome, LlcStats, MissKind, PAGE_SIZE};
pub use memory::PhysMemory;
pub use timer::{Comparator, FiredTimer, TimerKind, TimerUnit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cluster {
    Big,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Off,
    On,
}

#[derive(Debug, Clone)]
pub struct Pcpu {
    pub id: u32,
    pub cluster: Cluster,
    pub power: Power,
    pub current_world: World,
    /// Physical interrupts trap to EL2 while set; cleared for worlds that
    /// own the CPU interface directly (the primary VM, passthrough RTVMs).
    pub irq_trap: bool,
}

/// Address space layout and hardware inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    pub clusters: Vec<Cluster>,
    #[serde(with = "crate::hexnum")]
    pub mem_base: u64,
    #[serde(with = "crate::hexnum")]
    pub mem_size: u64,
    /// Region reserved for the hypervisor itself.
    #[serde(with = "crate::hexnum")]
    pub gear1_base: u64,
    #[serde(with = "crate::hexnum")]
    pub gear1_size: u64,
    #[serde(default)]
    pub llc: LlcGeometry,
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
    #[serde(default = "default_list_registers")]
    pub list_registers: usize,
    #[serde(default = "default_irq_lines")]
    pub irq_lines: u32,
}

fn default_list_registers() -> usize {
    4
}

fn default_irq_lines() -> u32 {
    256
}

/// Base of the distributor register block in every address space.
pub const GICD_BASE: u64 = 0x0800_0000;
pub const GICD_SIZE: u64 = 0x1_0000;
/// Distributor register offsets understood by the emulation.
pub const GICD_ISENABLER: u64 = 0x100;
pub const GICD_ICENABLER: u64 = 0x180;
pub const GICD_ITARGETSR: u64 = 0x800;
pub const GICD_SGIR: u64 = 0xf00;

impl Default for PlatformConfig {
    /// Four cores in two clusters, 1 GiB of RAM at 1 GiB.
    fn default() -> Self {
        PlatformConfig {
            clusters: vec![Cluster::Big, Cluster::Big, Cluster::Little, Cluster::Little],
            mem_base: 0x4000_0000,
            mem_size: 0x4000_0000,
            gear1_base: 0x4000_0000,
            gear1_size: 0x0100_0000,
            llc: LlcGeometry::default(),
            devices: Vec::new(),
            list_registers: default_list_registers(),
            irq_lines: default_irq_lines(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("interrupt line {0} is not configured")]
    UnknownLine(u32),
    #[error("devices {0} and {1} have overlapping MMIO ranges")]
    DeviceOverlap(u32, u32),
    #[error("device {0} MMIO range overlaps RAM")]
    DeviceInRam(u32),
    #[error("platform needs at least one pcpu")]
    NoPcpus,
    #[error("pcpu {0} is off")]
    PcpuOff(u32),
    #[error("pcpu {pcpu} is running {actual}, not {expected}")]
    WrongWorld { pcpu: u32, expected: World, actual: World },
    #[error("access of {0} bytes is not 1..=8 or crosses a page")]
    BadAccessSize(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Stage-2 fault classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Stage2Fault {
    #[error("access to MMIO hole at {0:#x}")]
    Mmio(u64),
    #[error("permission fault at {0:#x}")]
    Perm(u64),
}

/// Second-stage translation as seen by the memory system.
pub trait Translate {
    fn translate(&self, vm: u32, ipa: u64, write: bool) -> Result<u64, Stage2Fault>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemOp {
    Read,
    Write(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOk {
    /// Normal memory; `value` is the data read (or written).
    Ram { pa: u64, value: u64, llc: LlcOutcome },
    /// A passthrough device register.
    Device { device: u32, pa: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error(transparent)]
    Fault(#[from] Stage2Fault),
    #[error(transparent)]
    Machine(#[from] MachineErrorKind),
}

/// Copyable subset of [`MachineError`] used on the access path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MachineErrorKind {
    #[error("pcpu is off")]
    PcpuOff,
    #[error("pcpu is not in the issuing world")]
    WrongWorld,
    #[error("bad access size")]
    BadSize,
}

/// How a raised line reaches software.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryMode {
    /// Taken by the world currently running on the target pcpu.
    Direct,
    /// Traps to Gear1 first.
    Trap,
    /// Line disabled: latched as pending, nothing delivered.
    Latched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub line: u32,
    pub target: IrqRoute,
    pub mode: DeliveryMode,
}

/// The whole SoC.
#[derive(Debug, Clone)]
pub struct Machine {
    pub config: PlatformConfig,
    pub pcpus: Vec<Pcpu>,
    pub gic: GicDistributor,
    pub timers: TimerUnit,
    pub llc: LlcModel,
    pub devices: Vec<DeviceStub>,
    pub memory: PhysMemory,
}

impl Machine {
    pub fn new(config: PlatformConfig) -> Result<Self, MachineError> {
        if config.clusters.is_empty() {
            return Err(MachineError::NoPcpus);
        }
        let devs = &config.devices;
        for (i, a) in devs.iter().enumerate() {
            let ram_end = config.mem_base + config.mem_size;
            if a.mmio_base < ram_end && config.mem_base < a.mmio_base + a.mmio_len {
                return Err(MachineError::DeviceInRam(a.id));
            }
            for b in &devs[i + 1..] {
                if a.mmio_base < b.mmio_base + b.mmio_len && b.mmio_base < a.mmio_base + a.mmio_len {
                    return Err(MachineError::DeviceOverlap(a.id, b.id));
                }
            }
            if a.irq_line >= config.irq_lines {
                return Err(MachineError::UnknownLine(a.irq_line));
            }
        }
        let pcpus = config
            .clusters
            .iter()
            .enumerate()
            .map(|(i, &cluster)| Pcpu {
                id: i as u32,
                cluster,
                power: Power::Off,
                current_world: World::Gear1,
                irq_trap: true,
            })
            .collect::<Vec<_>>();
        Ok(Machine {
            gic: GicDistributor::new(config.irq_lines),
            timers: TimerUnit::new(pcpus.len()),
            llc: LlcModel::new(config.llc)?,
            devices: config.devices.iter().cloned().map(DeviceStub::new).collect(),
            memory: PhysMemory::new(),
            pcpus,
            config,
        })
    }

    pub fn pcpu_count(&self) -> usize {
        self.pcpus.len()
    }

    pub fn pcpu(&self, id: u32) -> &Pcpu {
        &self.pcpus[id as usize]
    }

    pub fn pcpu_mut(&mut self, id: u32) -> &mut Pcpu {
        &mut self.pcpus[id as usize]
    }

    pub fn device_at(&self, pa: u64) -> Option<usize> {
        self.devices.iter().position(|d| d.contains(pa))
    }

    pub fn device_by_id(&self, id: u32) -> Option<usize> {
        self.devices.iter().position(|d| d.id() == id)
    }

    /// Assert a shared peripheral line and work out how it is delivered.
    pub fn raise_irq(&mut self, line: u32) -> Result<Delivery, MachineError> {
        if !self.gic.contains(line) || line < PPI_END {
            return Err(MachineError::UnknownLine(line));
        }
        let target = self.gic.route(line).ok_or(MachineError::UnknownLine(line))?;
        if !self.gic.is_enabled(line) {
            self.gic.set_pending(line, true);
            return Ok(Delivery { line, target, mode: DeliveryMode::Latched });
        }
        Ok(Delivery { line, target, mode: self.local_mode(target.pcpu) })
    }

    /// Assert a per-CPU line (SGI or PPI) on `target.pcpu`.
    pub fn raise_local(&mut self, line: u32, target: IrqRoute) -> Result<Delivery, MachineError> {
        if line >= PPI_END {
            return Err(MachineError::UnknownLine(line));
        }
        Ok(Delivery { line, target, mode: self.local_mode(target.pcpu) })
    }

    fn local_mode(&self, pcpu: u32) -> DeliveryMode {
        if self.pcpus[pcpu as usize].irq_trap {
            DeliveryMode::Trap
        } else {
            DeliveryMode::Direct
        }
    }

    /// Guest load or store from `world` on `pcpu`.
    pub fn mem_access<T: Translate + ?Sized>(
        &mut self,
        s2: &T,
        pcpu: u32,
        world: World,
        ipa: u64,
        op: MemOp,
        bytes: usize,
    ) -> Result<AccessOk, AccessError> {
        let p = &self.pcpus[pcpu as usize];
        if p.power != Power::On {
            return Err(MachineErrorKind::PcpuOff.into());
        }
        if p.current_world != world {
            return Err(MachineErrorKind::WrongWorld.into());
        }
        let World::Vm { vm, .. } = world else { return Err(MachineErrorKind::WrongWorld.into()) };
        if !(1..=8).contains(&bytes) || (ipa % PAGE_SIZE) + bytes as u64 > PAGE_SIZE {
            return Err(MachineErrorKind::BadSize.into());
        }
        let pa = s2.translate(vm, ipa, matches!(op, MemOp::Write(_)))?;
        if let Some(d) = self.device_at(pa) {
            return Ok(AccessOk::Device { device: self.devices[d].id(), pa });
        }
        let llc = self.llc.access(vm, pa);
        let value = match op {
            MemOp::Read => self.memory.read(pa, bytes),
            MemOp::Write(v) => {
                self.memory.write(pa, bytes, v);
                v
            }
        };
        Ok(AccessOk::Ram { pa, value, llc })
    }

    /// Cache-only touch used for bulk working-set accesses whose data
    /// content does not matter.
    pub fn touch(&mut self, vm: u32, pa: u64) -> LlcOutcome {
        self.llc.access(vm, pa)
    }
}
