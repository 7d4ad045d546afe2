use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::CostModel;
use crate::devmodel::{BackendKind, DEFAULT_RING_DEPTH};
use crate::gear1::{VmKind, VmManifest};
use crate::gear2::RoundRobin;
use crate::guests::{ProfileKind, ProfileLayout, ProgramText, RtTaskConfig, Stall, WakeModel, WorkloadProgram};
use crate::machine::{Machine, PlatformConfig};
use crate::supervision::SupervisionConfig;

/// A complete simulation input: hardware, partitions, costs, what each
/// vcpu runs and for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub platform: PlatformConfig,
    pub vms: Vec<VmManifest>,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devmodel: Option<DevModelSpec>,
    #[serde(default)]
    pub supervision: SupervisionConfig,
    #[serde(default)]
    pub scheduler: SchedulerSpec,
    /// Host-side interference thread, used by the KVM-like baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stalls: Vec<StallSpec>,
    #[serde(default)]
    pub bench: BenchSpec,
    #[serde(default)]
    pub seed: u64,
    pub duration_ns: u64,
}

/// What one vcpu runs. Exactly one of `profile`, `program` and `rt` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub vm: u32,
    #[serde(default)]
    pub vcpu: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<ProfileLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<ProgramText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rt: Option<RtTaskConfig>,
    /// Overrides the wake cost model of an `rt` workload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wake: Option<WakeModel>,
}

impl WorkloadSpec {
    pub fn profile(vm: u32, vcpu: u32, kind: ProfileKind) -> Self {
        WorkloadSpec { vm, vcpu, profile: Some(kind), layout: None, program: None, rt: None, wake: None }
    }

    pub fn program(vm: u32, vcpu: u32, program: &WorkloadProgram) -> Self {
        WorkloadSpec { vm, vcpu, profile: None, layout: None, program: Some(program.to_text()), rt: None, wake: None }
    }

    pub fn rt(vm: u32, vcpu: u32, cfg: RtTaskConfig) -> Self {
        WorkloadSpec { vm, vcpu, profile: None, layout: None, program: None, rt: Some(cfg), wake: None }
    }

    /// Resolve to an interpreter program for a run of `duration_ns`.
    pub fn build(&self, duration_ns: u64) -> Result<WorkloadProgram, ScenarioError> {
        let bad = |m: String| ScenarioError::Workload { vm: self.vm, vcpu: self.vcpu, msg: m };
        let set = [self.profile.is_some(), self.program.is_some(), self.rt.is_some()];
        if set.iter().filter(|&&b| b).count() != 1 {
            return Err(bad("exactly one of profile, program, rt must be given".into()));
        }
        if let Some(k) = self.profile {
            return Ok(crate::guests::make_profile_with(k, duration_ns, &self.layout.unwrap_or_default()));
        }
        if let Some(t) = &self.program {
            let p = WorkloadProgram::from_text(t).map_err(|e| bad(e.to_string()))?;
            return Ok(p);
        }
        let rt = self.rt.expect("checked");
        if rt.period_ns == 0 {
            return Err(bad("rt period_ns must be positive".into()));
        }
        Ok(rt.program())
    }

    pub fn wake_model(&self) -> WakeModel {
        self.wake.or_else(|| self.rt.map(|r| r.wake_model())).unwrap_or_else(WakeModel::zero)
    }
}

/// The device VM and the backends its user-space model serves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevModelSpec {
    pub vm: u32,
    #[serde(default)]
    pub kernel_module: bool,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    /// Matched against `backend` in the guests' MMIO holes.
    pub device: u32,
    pub kind: BackendKind,
    /// Completion line injected into the requesting vcpu.
    pub irq_line: u32,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Block image size in bytes.
    #[serde(default = "default_image")]
    pub image_bytes: u64,
    /// Persist the block image (or console log) here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

fn default_depth() -> usize {
    DEFAULT_RING_DEPTH
}

fn default_image() -> u64 {
    1 << 20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RoundRobin,
    StrictPriority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSpec {
    pub policy: PolicyKind,
    pub quantum_ns: u64,
    /// Strict-priority levels; larger runs first. Unlisted threads get 0.
    pub priorities: Vec<ThreadPriority>,
}

impl Default for SchedulerSpec {
    fn default() -> Self {
        SchedulerSpec {
            policy: PolicyKind::RoundRobin,
            quantum_ns: RoundRobin::DEFAULT_QUANTUM_NS,
            priorities: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadPriority {
    pub vm: u32,
    pub vcpu: u32,
    pub priority: u32,
}

/// Poisson arrivals of host work bursts on one pcpu.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub pcpu: u32,
    pub rate_hz: f64,
    pub min_ns: u64,
    pub max_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallKind {
    App,
    Vm,
}

impl From<StallKind> for Stall {
    fn from(k: StallKind) -> Stall {
        match k {
            StallKind::App => Stall::App,
            StallKind::Vm => Stall::Vm,
        }
    }
}

/// Fault injected at a point in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case", deny_unknown_fields)]
pub enum StallSpec {
    Vm { at_ns: u64, vm: u32, kind: StallKind },
    Gear2 { at_ns: u64 },
}

impl StallSpec {
    pub fn at(&self) -> u64 {
        match *self {
            StallSpec::Vm { at_ns, .. } | StallSpec::Gear2 { at_ns } => at_ns,
        }
    }
}

/// Which VMs the benchmark harness reads results from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rt_vm: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overhead_vm: Option<u32>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("platform: {0}")]
    Platform(String),
    #[error("partitioning: {0}")]
    Partition(String),
    #[error("cost model: {0}")]
    Cost(String),
    #[error("workload vm{vm}.{vcpu}: {msg}")]
    Workload { vm: u32, vcpu: u32, msg: String },
    #[error("unresolved reference: {0}")]
    Reference(String),
    #[error("{0}")]
    Invalid(String),
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let c: ScenarioConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    fn manifest(&self, vm: u32) -> Option<&VmManifest> {
        self.vms.iter().find(|m| m.vm_id == vm)
    }

    /// Every check the loader performs beyond the schema itself: ids
    /// resolve, programs parse, the partitioning is accepted by Gear1.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration_ns == 0 {
            return Err(ScenarioError::Invalid("duration_ns must be positive".into()));
        }
        self.cost_model.validate().map_err(ScenarioError::Cost)?;
        let mut machine = Machine::new(self.platform.clone()).map_err(|e| ScenarioError::Platform(e.to_string()))?;
        crate::gear1::Gear1::init(&mut machine, &self.vms, self.cost_model.clone())
            .map_err(|e| ScenarioError::Partition(e.to_string()))?;

        let mut seen = BTreeSet::new();
        for w in &self.workloads {
            let m = self.manifest(w.vm).ok_or_else(|| ScenarioError::Reference(format!("workload vm {}", w.vm)))?;
            if w.vcpu >= m.vcpus {
                return Err(ScenarioError::Reference(format!("workload vm{}.{}", w.vm, w.vcpu)));
            }
            if m.kind == VmKind::Primary {
                return Err(ScenarioError::Workload {
                    vm: w.vm,
                    vcpu: w.vcpu,
                    msg: "the primary VM runs Gear2".into(),
                });
            }
            if !seen.insert((w.vm, w.vcpu)) {
                return Err(ScenarioError::Workload { vm: w.vm, vcpu: w.vcpu, msg: "assigned twice".into() });
            }
            w.build(self.duration_ns)?;
        }
        if let Some(d) = &self.devmodel {
            let m = self.manifest(d.vm).ok_or_else(|| ScenarioError::Reference(format!("devmodel vm {}", d.vm)))?;
            if m.kind != VmKind::Dvm {
                return Err(ScenarioError::Invalid(format!("devmodel vm {} is not a dvm", d.vm)));
            }
            let mut ids = BTreeSet::new();
            for b in &d.backends {
                if !ids.insert(b.device) {
                    return Err(ScenarioError::Invalid(format!("backend {} declared twice", b.device)));
                }
                if b.depth == 0 {
                    return Err(ScenarioError::Invalid(format!("backend {} has zero depth", b.device)));
                }
            }
        }
        let backends: BTreeSet<u32> = self.devmodel.iter().flat_map(|d| d.backends.iter().map(|b| b.device)).collect();
        for m in &self.vms {
            for h in &m.mmio_holes {
                if let Some(b) = h.backend {
                    if !backends.contains(&b) {
                        return Err(ScenarioError::Reference(format!("vm {} hole {:#x} backend {b}", m.vm_id, h.ipa)));
                    }
                }
            }
        }
        for p in &self.scheduler.priorities {
            if self.manifest(p.vm).is_none_or(|m| p.vcpu >= m.vcpus) {
                return Err(ScenarioError::Reference(format!("priority for vm{}.{}", p.vm, p.vcpu)));
            }
        }
        if let Some(n) = &self.noise {
            if n.pcpu as usize >= self.platform.clusters.len() {
                return Err(ScenarioError::Reference(format!("noise pcpu {}", n.pcpu)));
            }
            if !(n.rate_hz.is_finite() && n.rate_hz >= 0.0) || n.min_ns > n.max_ns {
                return Err(ScenarioError::Invalid("noise rate or burst range".into()));
            }
        }
        for s in &self.stalls {
            if let StallSpec::Vm { vm, .. } = s {
                if self.manifest(*vm).is_none_or(|m| m.kind == VmKind::Primary) {
                    return Err(ScenarioError::Reference(format!("stall target vm {vm}")));
                }
            }
        }
        for id in [self.bench.rt_vm, self.bench.overhead_vm].into_iter().flatten() {
            if self.manifest(id).is_none() {
                return Err(ScenarioError::Reference(format!("bench vm {id}")));
            }
        }
        let s = &self.supervision;
        if s.enabled && [s.l1_period_ns, s.l2_period_ns, s.l3_period_ns, s.l4_period_ns].contains(&0) {
            return Err(ScenarioError::Invalid("watchdog periods must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ScenarioConfig {
        ScenarioConfig {
            name: "t".into(),
            platform: PlatformConfig::default(),
            vms: vec![
                VmManifest::new(0, VmKind::Primary, vec![0, 1, 2, 3]).with_region(0x4100_0000, 0x10_0000),
                VmManifest::new(1, VmKind::Secondary, vec![1]).with_region(0x4200_0000, 0x10_0000),
            ],
            cost_model: CostModel::default(),
            workloads: vec![WorkloadSpec::profile(1, 0, ProfileKind::CpuBound)],
            devmodel: None,
            supervision: SupervisionConfig::default(),
            scheduler: SchedulerSpec::default(),
            noise: None,
            stalls: Vec::new(),
            bench: BenchSpec::default(),
            seed: 1,
            duration_ns: 1_000_000,
        }
    }

    #[test]
    fn json_round_trip() {
        let c = minimal();
        let back = ScenarioConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&minimal().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(matches!(ScenarioConfig::from_json(&v.to_string()), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn dangling_references_rejected() {
        let mut c = minimal();
        c.workloads.push(WorkloadSpec::profile(7, 0, ProfileKind::CpuBound));
        assert!(matches!(c.validate(), Err(ScenarioError::Reference(_))));

        let mut c = minimal();
        c.vms[1] = c.vms[1].clone().with_hole(0x1000_0000, 0x1000, Some(9));
        assert!(matches!(c.validate(), Err(ScenarioError::Reference(_))));

        let mut c = minimal();
        c.workloads[0].rt = Some(RtTaskConfig::default());
        assert!(matches!(c.validate(), Err(ScenarioError::Workload { .. })));
    }

    #[test]
    fn partition_errors_surface() {
        let mut c = minimal();
        c.vms[1].mem_regions[0].ipa = 0x4100_0000;
        assert!(matches!(c.validate(), Err(ScenarioError::Partition(_))));
    }
}
