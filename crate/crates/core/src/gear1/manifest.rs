use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmKind {
    /// Hosts Gear2; one vcpu per pcpu.
    Primary,
    Secondary,
    /// Device-emulation VM.
    Dvm,
    /// Real-time VM with dedicated cores.
    Rtvm,
}

/// How an RTVM reaches the GIC CPU interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VgicMode {
    /// Physical interrupts and the CPU interface go straight to the guest.
    #[default]
    Passthrough,
    /// Interrupts trap to Gear1 and CPU-interface accesses are emulated.
    Emulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemRegion {
    #[serde(with = "crate::hexnum")]
    pub ipa: u64,
    #[serde(with = "crate::hexnum")]
    pub len: u64,
}

/// Unmapped IPA range whose accesses trap for emulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmioHole {
    #[serde(with = "crate::hexnum")]
    pub ipa: u64,
    #[serde(with = "crate::hexnum")]
    pub len: u64,
    /// Device-model backend serving this hole, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmManifest {
    pub vm_id: u32,
    pub kind: VmKind,
    pub vcpus: u32,
    /// pcpu of each vcpu.
    pub affinity: Vec<u32>,
    #[serde(default)]
    pub mem_regions: Vec<MemRegion>,
    #[serde(default)]
    pub mmio_holes: Vec<MmioHole>,
    /// Device ids handed to this VM.
    #[serde(default)]
    pub passthrough: Vec<u32>,
    /// Bit `c` set means LLC color `c` may back this VM's pages.
    #[serde(default = "all_colors", with = "crate::hexnum")]
    pub color_mask: u64,
    /// Layer-2 watchdog period override, ns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watchdog_period: Option<u64>,
    #[serde(default)]
    pub vgic: VgicMode,
}

fn all_colors() -> u64 {
    u64::MAX
}

impl VmManifest {
    pub fn new(vm_id: u32, kind: VmKind, affinity: Vec<u32>) -> Self {
        VmManifest {
            vm_id,
            kind,
            vcpus: affinity.len() as u32,
            affinity,
            mem_regions: Vec::new(),
            mmio_holes: Vec::new(),
            passthrough: Vec::new(),
            color_mask: all_colors(),
            watchdog_period: None,
            vgic: VgicMode::default(),
        }
    }

    pub fn with_region(mut self, ipa: u64, len: u64) -> Self {
        self.mem_regions.push(MemRegion { ipa, len });
        self
    }

    pub fn with_hole(mut self, ipa: u64, len: u64, backend: Option<u32>) -> Self {
        self.mmio_holes.push(MmioHole { ipa, len, backend });
        self
    }

    pub fn with_passthrough(mut self, device: u32) -> Self {
        self.passthrough.push(device);
        self
    }

    pub fn with_colors(mut self, mask: u64) -> Self {
        self.color_mask = mask;
        self
    }

    pub fn with_vgic(mut self, mode: VgicMode) -> Self {
        self.vgic = mode;
        self
    }

    /// Whether physical interrupts bypass Gear1 while this VM runs.
    pub fn owns_cpu_interface(&self) -> bool {
        match self.kind {
            VmKind::Primary => true,
            VmKind::Rtvm => self.vgic == VgicMode::Passthrough,
            _ => false,
        }
    }
}

/// Structured boot information handed to each guest in place of a
/// flattened device tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BootInfo {
    /// Usable RAM as coalesced `(ipa, len)` ranges.
    pub memory: Vec<(u64, u64)>,
    pub pcpus: Vec<u32>,
    pub devices: Vec<u32>,
    pub mmio_holes: Vec<(u64, u64)>,
}
