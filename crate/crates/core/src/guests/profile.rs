use serde::{Deserialize, Serialize};

use super::instr::Instr;
use super::program::WorkloadProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    IoBound,
    CpuBound,
}

/// Where a profile finds its disk and buffer. The defaults match the
/// built-in scenario templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileLayout {
    #[serde(with = "crate::hexnum")]
    pub disk_base: u64,
    pub disk_line: u32,
    /// FIFO service time of the disk; 1e9 / 82672 = 12096 completions/s,
    /// which with the 250 Hz tick gives 12346 interrupts/s.
    pub disk_service_ns: u64,
    pub iodepth: u32,
    #[serde(with = "crate::hexnum")]
    pub buffer_ipa: u64,
    /// Cache lines the completion handler touches.
    pub buffer_lines: u32,
    pub tick_hz: u32,
    /// Main-loop compute granularity.
    pub chunk_ns: u64,
}

impl Default for ProfileLayout {
    fn default() -> Self {
        ProfileLayout {
            disk_base: 0xe680_0000,
            disk_line: 60,
            disk_service_ns: 82_672,
            iodepth: 64,
            buffer_ipa: 0x4300_0000,
            buffer_lines: 64,
            tick_hz: 250,
            chunk_ns: 1_000_000,
        }
    }
}

pub fn make_profile(kind: ProfileKind, duration_ns: u64) -> WorkloadProgram {
    make_profile_with(kind, duration_ns, &ProfileLayout::default())
}

/// IoBound keeps `iodepth` requests queued on a passthrough disk and
/// resubmits one from every completion handler; CpuBound only computes, so
/// its interrupts are the kernel tick.
pub fn make_profile_with(kind: ProfileKind, duration_ns: u64, l: &ProfileLayout) -> WorkloadProgram {
    if duration_ns == 0 {
        return WorkloadProgram::default();
    }
    let chunks = duration_ns.div_ceil(l.chunk_ns).min(u32::MAX as u64) as u32;
    let compute = |at: usize| {
        let mut v = vec![Instr::Compute(l.chunk_ns)];
        if chunks > 1 {
            v.push(Instr::LoopTo { index: at, times: chunks - 1 });
        }
        v
    };
    let submit = Instr::Mmio { addr: l.disk_base, write: true, value: 1, size: 4, blocking: false };
    match kind {
        ProfileKind::CpuBound => WorkloadProgram::new(compute(0)).with_tick(l.tick_hz),
        ProfileKind::IoBound => {
            let mut ins = vec![submit];
            if l.iodepth > 1 {
                ins.push(Instr::LoopTo { index: 0, times: l.iodepth - 1 });
            }
            let at = ins.len();
            ins.extend(compute(at));
            WorkloadProgram::new(ins).with_tick(l.tick_hz).with_handler(
                l.disk_line,
                vec![Instr::MemTouch { ipa: l.buffer_ipa, stride: 64, count: l.buffer_lines }, submit],
            )
        }
    }
}
