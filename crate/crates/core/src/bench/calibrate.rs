//! Fitting the three composite-path costs that have no direct measurement.
//!
//! Three targets pin them down one at a time:
//! * forwarding one interrupt (`2·ws + hvc + vi`) must keep the device VM's
//!   overhead at the IoBound rate within the measured bound, which fixes
//!   `virq_inject_ns` as the largest value that does;
//! * the virtual IPI path then fixes `gicd_emul_ns`;
//! * the I/O-out path then fixes `gdm_user_hop_ns`.

use serde::Serialize;
use thiserror::Error;

use crate::bench::CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationTargets {
    pub ipi_ns: u64,
    pub io_out_ns: u64,
    /// Upper bound of the device VM's forwarding overhead.
    pub dvm_overhead: f64,
    /// Its interrupt rate, per second.
    pub int_freq: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        CalibrationTargets { ipi_ns: 9928, io_out_ns: 8774, dvm_overhead: 0.045, int_freq: 12346.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Fitted {
    pub virq_inject_ns: u64,
    pub gicd_emul_ns: u64,
    pub gdm_user_hop_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalibrationError {
    #[error("primitives alone already exceed the {0} target")]
    Infeasible(&'static str),
}

/// Charged time of one forwarded interrupt.
pub fn forward_path(c: &CostModel) -> u64 {
    2 * c.world_switch_ns + c.hypercall_ns + c.virq_inject_ns
}

/// Sender traps on the distributor write, Gear1 emulates it and the SGI
/// interrupts the receiver, whose interrupt is forwarded and injected.
pub fn ipi_path(c: &CostModel) -> u64 {
    c.vm_trap_ns + c.gicd_emul_ns + c.vm_trap_ns + forward_path(c)
}

/// Trapped store, switch to Gear2, notify the device VM, switch to it,
/// user-space service, ack hypercall, switch back to Gear2.
pub fn io_out_path(c: &CostModel) -> u64 {
    c.vm_trap_ns + 3 * c.world_switch_ns + 2 * c.hypercall_ns + c.virq_inject_ns + c.gdm_user_hop_ns
}

pub fn fit_composites(primitives: &CostModel, t: &CalibrationTargets) -> Result<Fitted, CalibrationError> {
    let mut c = primitives.clone();
    let budget = (t.dvm_overhead / t.int_freq * 1e9).floor() as u64;
    c.virq_inject_ns = 0;
    c.virq_inject_ns = budget.checked_sub(forward_path(&c)).ok_or(CalibrationError::Infeasible("overhead"))?;
    c.gicd_emul_ns = 0;
    c.gicd_emul_ns = t.ipi_ns.checked_sub(ipi_path(&c)).ok_or(CalibrationError::Infeasible("ipi"))?;
    c.gdm_user_hop_ns = 0;
    c.gdm_user_hop_ns = t.io_out_ns.checked_sub(io_out_path(&c)).ok_or(CalibrationError::Infeasible("io_out"))?;
    Ok(Fitted { virq_inject_ns: c.virq_inject_ns, gicd_emul_ns: c.gicd_emul_ns, gdm_user_hop_ns: c.gdm_user_hop_ns })
}

impl Fitted {
    pub fn apply(&self, c: &CostModel) -> CostModel {
        CostModel {
            virq_inject_ns: self.virq_inject_ns,
            gicd_emul_ns: self.gicd_emul_ns,
            gdm_user_hop_ns: self.gdm_user_hop_ns,
            ..c.clone()
        }
    }
}
