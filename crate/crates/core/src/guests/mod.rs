//! Synthetic guests: the workload instruction set and its interpreter,
//! interrupt-rate profiles and the cyclictest-style RT task.

mod instr;
mod os;
mod profile;
mod program;
mod rt;

pub use instr::{Instr, ParseError};
pub use os::{GuestAction, GuestEnv, GuestOs, Stall, HEARTBEAT_LAYER};
pub use profile::{make_profile, make_profile_with, ProfileKind, ProfileLayout};
pub use program::{ProgramError, ProgramText, WorkloadProgram};
pub use rt::{LatencyStats, RtProfile, RtTaskConfig, WakeModel};

/// Run the cyclictest task alone on a passthrough RTVM for `duration_ns`.
pub fn cyclictest_run(
    cfg: RtTaskConfig,
    duration_ns: u64,
) -> Result<LatencyStats, crate::bench::scenario::ScenarioError> {
    let samples = crate::bench::jitter::run_samples(&crate::bench::templates::cyclictest(cfg, duration_ns))?;
    Ok(LatencyStats::from_samples(&samples))
}
