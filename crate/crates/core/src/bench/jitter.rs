//! cyclictest across the five platform configurations.

use serde::Serialize;

use crate::bench::scenario::{ScenarioConfig, ScenarioError};
use crate::bench::templates::{self, JitterConfig};
use crate::guests::{LatencyStats, RtTaskConfig};
use crate::simcore::{Action, Actor, Trace};
use crate::system::System;

/// Wake latencies of `vm` recovered from its `rt_wake` records.
pub fn latencies_from_trace(trace: &Trace, vm: u32) -> Vec<u64> {
    trace
        .iter()
        .filter_map(|r| match (&r.actor, &r.action) {
            (Actor::Vm { vm: v, .. }, Action::RtWake { expected, actual }) if *v == vm => Some(actual - expected),
            _ => None,
        })
        .collect()
}

/// Run one scenario and return its RT guest's samples.
pub fn run_samples(cfg: &ScenarioConfig) -> Result<Vec<u64>, ScenarioError> {
    let vm = cfg.bench.rt_vm.ok_or_else(|| ScenarioError::Invalid("bench.rt_vm is not set".into()))?;
    let mut sys = System::new(cfg)?;
    sys.run();
    Ok(latencies_from_trace(sys.trace(), vm))
}

pub fn run_jitter(config: JitterConfig, rt: RtTaskConfig, seed: u64) -> Result<LatencyStats, ScenarioError> {
    Ok(LatencyStats::from_samples(&run_samples(&templates::jitter(config, rt, seed))?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JitterEntry {
    pub seed: u64,
    pub config: JitterConfig,
    pub stats: LatencyStats,
}

/// The ordering and ratio checks for one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Orderings {
    pub seed: u64,
    pub native_le_passthrough: bool,
    pub passthrough_lt_vgic_emul: bool,
    pub vgic_emul_lt_kvm_like: bool,
    pub kvm_like_lt_non_rt: bool,
    /// Passthrough normalized jitter at most 1.2.
    pub passthrough_within_1_2: bool,
    /// NonRt normalized jitter at least 50 times Passthrough's.
    pub non_rt_ge_50x_passthrough: bool,
}

impl Orderings {
    pub fn all(&self) -> bool {
        self.native_le_passthrough
            && self.passthrough_lt_vgic_emul
            && self.vgic_emul_lt_kvm_like
            && self.kvm_like_lt_non_rt
            && self.passthrough_within_1_2
            && self.non_rt_ge_50x_passthrough
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JitterReport {
    pub rt: RtTaskConfig,
    /// Sorted by seed, then in `JitterConfig::ALL` order.
    pub entries: Vec<JitterEntry>,
    pub orderings: Vec<Orderings>,
}

impl JitterReport {
    pub fn holds(&self) -> bool {
        !self.orderings.is_empty() && self.orderings.iter().all(Orderings::all)
    }
}

/// Every configuration for every seed, each normalized to the native run
/// with the same seed.
pub fn run_sweep(rt: RtTaskConfig, seeds: &[u64]) -> Result<JitterReport, ScenarioError> {
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let mut entries = Vec::new();
    let mut orderings = Vec::new();
    for &seed in &seeds {
        let mut row = Vec::new();
        for c in JitterConfig::ALL {
            row.push((c, run_jitter(c, rt, seed)?));
        }
        let native = row[0].1;
        let get = |c: JitterConfig| row.iter().find(|(k, _)| *k == c).expect("all configs").1.normalized_to(&native);
        let (pt, vg, kvm, nrt) = (
            get(JitterConfig::GearvRtVmPassthrough),
            get(JitterConfig::GearvRtVmVgicEmul),
            get(JitterConfig::KvmLikeRtVm),
            get(JitterConfig::GearvNonRtVm),
        );
        let norm = |s: &LatencyStats| s.normalized_jitter.unwrap_or(f64::INFINITY);
        orderings.push(Orderings {
            seed,
            native_le_passthrough: native.max <= pt.max,
            passthrough_lt_vgic_emul: pt.max < vg.max,
            vgic_emul_lt_kvm_like: vg.max < kvm.max,
            kvm_like_lt_non_rt: kvm.max < nrt.max,
            passthrough_within_1_2: norm(&pt) <= 1.2,
            non_rt_ge_50x_passthrough: norm(&nrt) >= 50.0 * norm(&pt),
        });
        for (c, _) in &row {
            entries.push(JitterEntry { seed, config: *c, stats: get(*c) });
        }
    }
    Ok(JitterReport { rt, entries, orderings })
}
