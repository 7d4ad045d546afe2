use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::instr::{Instr, ParseError};

/// A guest workload: main program, per-line interrupt handlers and the
/// kernel's periodic timers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkloadProgram {
    pub instructions: Vec<Instr>,
    /// Kernel scheduler tick; 0 disables it.
    pub tick_hz: u32,
    /// Handler bodies run with interrupts masked.
    pub handlers: BTreeMap<u32, Vec<Instr>>,
    /// Period of the kernel heartbeat sent to Gear2's guest watchdog.
    pub heartbeat_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("instruction {0}: {1}")]
    Parse(usize, ParseError),
    #[error("handler for line {0}, instruction {1}: {2}")]
    HandlerParse(u32, usize, ParseError),
    #[error("instruction {0}: loop target {1} must precede the loop")]
    LoopTarget(usize, usize),
    #[error("handler for line {0} may not loop")]
    HandlerLoop(u32),
}

/// Text form used in scenario files.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramText {
    #[serde(default)]
    pub instructions: Vec<String>,
    #[serde(default)]
    pub tick_hz: u32,
    #[serde(default)]
    pub handlers: BTreeMap<u32, Vec<String>>,
    #[serde(default)]
    pub heartbeat_ns: Option<u64>,
}

impl WorkloadProgram {
    pub fn new(instructions: Vec<Instr>) -> Self {
        WorkloadProgram { instructions, ..Default::default() }
    }

    pub fn with_tick(mut self, hz: u32) -> Self {
        self.tick_hz = hz;
        self
    }

    pub fn with_handler(mut self, line: u32, body: Vec<Instr>) -> Self {
        self.handlers.insert(line, body);
        self
    }

    pub fn with_heartbeat(mut self, ns: u64) -> Self {
        self.heartbeat_ns = Some(ns);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        for (i, ins) in self.instructions.iter().enumerate() {
            if let Instr::LoopTo { index, .. } = *ins {
                if index >= i {
                    return Err(ProgramError::LoopTarget(i, index));
                }
            }
        }
        for (&line, body) in &self.handlers {
            if body.iter().any(|i| matches!(i, Instr::LoopTo { .. })) {
                return Err(ProgramError::HandlerLoop(line));
            }
        }
        Ok(())
    }

    pub fn from_text(t: &ProgramText) -> Result<Self, ProgramError> {
        let instructions = t
            .instructions
            .iter()
            .enumerate()
            .map(|(i, s)| s.parse().map_err(|e| ProgramError::Parse(i, e)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut handlers = BTreeMap::new();
        for (&line, body) in &t.handlers {
            let parsed = body
                .iter()
                .enumerate()
                .map(|(i, s)| s.parse().map_err(|e| ProgramError::HandlerParse(line, i, e)))
                .collect::<Result<Vec<_>, _>>()?;
            handlers.insert(line, parsed);
        }
        let p = WorkloadProgram { instructions, tick_hz: t.tick_hz, handlers, heartbeat_ns: t.heartbeat_ns };
        p.validate()?;
        Ok(p)
    }

    pub fn to_text(&self) -> ProgramText {
        ProgramText {
            instructions: self.instructions.iter().map(|i| i.to_string()).collect(),
            tick_hz: self.tick_hz,
            handlers: self.handlers.iter().map(|(&l, b)| (l, b.iter().map(|i| i.to_string()).collect())).collect(),
            heartbeat_ns: self.heartbeat_ns,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_validation() {
        let p = WorkloadProgram::new(vec![Instr::Compute(5), Instr::Wfi, Instr::LoopTo { index: 0, times: 3 }])
            .with_tick(250)
            .with_handler(40, vec![Instr::Compute(7)]);
        assert_eq!(WorkloadProgram::from_text(&p.to_text()).unwrap(), p);

        let t = ProgramText { instructions: vec!["loop 0 1".into()], ..Default::default() };
        assert_eq!(WorkloadProgram::from_text(&t), Err(ProgramError::LoopTarget(0, 0)));
        let t = ProgramText { instructions: vec!["compute 1".into(), "bogus".into()], ..Default::default() };
        assert!(matches!(WorkloadProgram::from_text(&t), Err(ProgramError::Parse(1, _))));
    }
}
