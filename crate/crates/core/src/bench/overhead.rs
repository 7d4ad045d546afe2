//! Gear2 interrupt-forwarding overhead: the closed-form estimate and the
//! value measured from a trace.

use serde::Serialize;

use crate::bench::scenario::{ScenarioConfig, ScenarioError};
use crate::bench::CostModel;
use crate::gear1::HypercallId;
use crate::simcore::{Action, Actor, Cause, Trace, World};
use crate::system::System;

/// `int_freq × ws_cost × 2`: one world switch into Gear2 and one back per
/// forwarded interrupt.
pub fn estimate_gear2_overhead(int_freq: f64, ws_cost: f64) -> f64 {
    int_freq * ws_cost * 2.0
}

/// World-switch cost in seconds as the estimate uses it: the charge
/// rounded to a tenth of a microsecond (1485 ns becomes 1.5 us).
pub fn ws_cost_seconds(cost: &CostModel) -> f64 {
    let rounded = (cost.world_switch_ns + 50) / 100 * 100;
    rounded as f64 * 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub scenario: String,
    pub vm: u32,
    pub duration_ns: u64,
    /// Interrupts the VM took.
    pub interrupts: u64,
    /// Interrupts per second.
    pub int_freq: f64,
    /// Seconds.
    pub ws_cost: f64,
    pub estimated: f64,
    pub measured: f64,
    /// Charged ns attributed to forwarding.
    pub charged_ns: u64,
    /// World switches caused by interrupt forwarding.
    pub world_switches: u64,
    pub ws_per_interrupt: f64,
}

/// Forwarding cost attributable to `vm`: world switches into and out of
/// its vcpus that an interrupt caused, plus Gear2's injection hypercalls
/// targeting it.
pub fn overhead_from_trace(trace: &Trace, vm: u32, duration_ns: u64, cost: &CostModel) -> OverheadReport {
    let inject = HypercallId::VirqInject.code();
    let (mut interrupts, mut charged, mut switches) = (0u64, 0u64, 0u64);
    for r in trace {
        match (&r.actor, &r.action) {
            (Actor::Vm { vm: v, .. }, Action::IrqTaken { .. }) if *v == vm => interrupts += 1,
            (_, Action::WorldSwitch { from, to, .. }) if r.cause == Cause::Irq => {
                let touches = |w: &World| matches!(w, World::Vm { vm: v, .. } if *v == vm);
                if touches(from) || touches(to) {
                    charged += r.cost;
                    switches += 1;
                }
            }
            (Actor::Gear2, Action::Hypercall { code, arg, .. })
                if r.cause == Cause::Irq && *code == inject && *arg == vm as u64 =>
            {
                charged += r.cost;
            }
            _ => {}
        }
    }
    let secs = duration_ns as f64 * 1e-9;
    let int_freq = if secs > 0.0 { interrupts as f64 / secs } else { 0.0 };
    let ws_cost = ws_cost_seconds(cost);
    OverheadReport {
        scenario: String::new(),
        vm,
        duration_ns,
        interrupts,
        int_freq,
        ws_cost,
        estimated: estimate_gear2_overhead(int_freq, ws_cost),
        measured: if duration_ns > 0 { charged as f64 / duration_ns as f64 } else { 0.0 },
        charged_ns: charged,
        world_switches: switches,
        ws_per_interrupt: if interrupts > 0 { switches as f64 / interrupts as f64 } else { 0.0 },
    }
}

/// Run `cfg` and report the overhead of its `bench.overhead_vm` (default:
/// the first secondary VM).
pub fn measure_gear2_overhead(cfg: &ScenarioConfig) -> Result<OverheadReport, ScenarioError> {
    let vm = cfg
        .bench
        .overhead_vm
        .or_else(|| cfg.vms.iter().find(|m| m.kind == crate::gear1::VmKind::Secondary).map(|m| m.vm_id))
        .ok_or_else(|| ScenarioError::Invalid("overhead needs a secondary VM".into()))?;
    let mut sys = System::new(cfg)?;
    sys.run();
    let mut r = overhead_from_trace(sys.trace(), vm, cfg.duration_ns, &cfg.cost_model);
    r.scenario = cfg.name.clone();
    Ok(r)
}
