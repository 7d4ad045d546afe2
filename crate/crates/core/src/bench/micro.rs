//! Micro-benchmarks measured from the trace of the `micro` template.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bench::scenario::ScenarioError;
use crate::bench::{templates, CostModel};
use crate::gear1::HypercallId;
use crate::machine::{GICD_SGIR, SGI_END};
use crate::simcore::{Action, Actor, Trace};
use crate::system::System;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroBench {
    Hypercall,
    WorldSwitch,
    VmTrap,
    Ipi,
    IoOut,
}

impl MicroBench {
    pub const ALL: [MicroBench; 5] =
        [MicroBench::Hypercall, MicroBench::WorldSwitch, MicroBench::VmTrap, MicroBench::Ipi, MicroBench::IoOut];

    pub fn name(self) -> &'static str {
        match self {
            MicroBench::Hypercall => "hypercall",
            MicroBench::WorldSwitch => "world_switch",
            MicroBench::VmTrap => "vm_trap",
            MicroBench::Ipi => "ipi",
            MicroBench::IoOut => "io_out",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }

    /// Board measurement for the two-gear hypervisor, ns.
    pub fn reference_ns(self) -> u64 {
        match self {
            MicroBench::Hypercall => 441,
            MicroBench::WorldSwitch => 1485,
            MicroBench::VmTrap => 732,
            MicroBench::Ipi => 9928,
            MicroBench::IoOut => 8774,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroResult {
    pub bench: MicroBench,
    pub samples: u64,
    pub mean_ns: f64,
    pub reference_ns: u64,
}

impl MicroResult {
    /// Relative deviation from the reference measurement.
    pub fn error(&self) -> f64 {
        (self.mean_ns - self.reference_ns as f64) / self.reference_ns as f64
    }
}

/// Per-operation samples of `bench` in `trace`, ns.
///
/// * Hypercall: charge of guest `version` calls.
/// * VmTrap, WorldSwitch: charge of every such record.
/// * Ipi: sender's distributor trap to the receiving vcpu taking the SGI.
/// * IoOut: trapped device store to Gear2 handling the device model's ack.
pub fn samples(trace: &Trace, bench: MicroBench) -> Vec<u64> {
    let version = HypercallId::Version.code();
    let mut out = Vec::new();
    let mut last_trap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut ipi: BTreeMap<u32, VecDeque<u64>> = BTreeMap::new();
    for r in trace {
        let at = r.at.nanos();
        match (&r.actor, &r.action) {
            (Actor::Gear1, Action::Hypercall { code, .. }) if bench == MicroBench::Hypercall && *code == version => {
                out.push(r.cost)
            }
            (_, Action::WorldSwitch { .. }) if bench == MicroBench::WorldSwitch => out.push(r.cost),
            (_, Action::VmTrap { vm, vcpu, reason, .. }) => {
                if bench == MicroBench::VmTrap {
                    out.push(r.cost);
                }
                if bench == MicroBench::Ipi || reason.starts_with("mmio") {
                    last_trap.insert((*vm, *vcpu), at);
                }
            }
            (_, Action::GicdEmul { vm, vcpu, offset, write: true, .. })
                if bench == MicroBench::Ipi && *offset as u64 == GICD_SGIR =>
            {
                if let Some(&t) = last_trap.get(&(*vm, *vcpu)) {
                    ipi.entry(*vm).or_default().push_back(t);
                }
            }
            (Actor::Vm { vm, .. }, Action::IrqTaken { line }) if bench == MicroBench::Ipi && *line < SGI_END => {
                if let Some(t) = ipi.get_mut(vm).and_then(|q| q.pop_front()) {
                    out.push(at - t);
                }
            }
            (_, Action::IoAck { vm, vcpu, .. }) if bench == MicroBench::IoOut => {
                if let Some(t) = last_trap.remove(&(*vm, *vcpu)) {
                    out.push(at - t);
                }
            }
            _ => {}
        }
    }
    out
}

pub fn summarize(bench: MicroBench, s: &[u64]) -> MicroResult {
    let mean = if s.is_empty() { 0.0 } else { s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64 };
    MicroResult { bench, samples: s.len() as u64, mean_ns: mean, reference_ns: bench.reference_ns() }
}

/// Run the micro template once with `cost` and measure every benchmark.
pub fn run_all(cost: &CostModel, rounds: u32, seed: u64) -> Result<Vec<MicroResult>, ScenarioError> {
    let mut cfg = templates::micro(rounds);
    cfg.cost_model = cost.clone();
    cfg.seed = seed;
    let mut sys = System::new(&cfg)?;
    sys.run();
    Ok(MicroBench::ALL.iter().map(|&b| summarize(b, &samples(sys.trace(), b))).collect())
}

/// Mean charged time of one operation.
pub fn run_microbench(bench: MicroBench, cost: &CostModel) -> Result<f64, ScenarioError> {
    let all = run_all(cost, 100, 1)?;
    Ok(all.into_iter().find(|r| r.bench == bench).map_or(0.0, |r| r.mean_ns))
}
