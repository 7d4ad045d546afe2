//! Layered watchdog supervision: inside each VM (L1), Gear2 over guest VMs
//! (L2), Gear1 over Gear2 (L3) and an external controller over the whole
//! SoC (L4).

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    L1,
    L2,
    L3,
    L4,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::L1, Layer::L2, Layer::L3, Layer::L4];

    pub fn from_number(n: u64) -> Option<Layer> {
        match n {
            1 => Some(Layer::L1),
            2 => Some(Layer::L2),
            3 => Some(Layer::L3),
            4 => Some(Layer::L4),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        self as u32 + 1
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}rs", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionAction {
    RestartVm,
    RestartGear2,
    SocReset,
    LogOnly,
}

impl SupervisionAction {
    pub fn as_str(self) -> &'static str {
        match self {
            SupervisionAction::RestartVm => "restart_vm",
            SupervisionAction::RestartGear2 => "restart_gear2",
            SupervisionAction::SocReset => "soc_reset",
            SupervisionAction::LogOnly => "log_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SupervisionEvent {
    pub at: u64,
    pub layer: Layer,
    pub subject: u32,
    pub action: SupervisionAction,
    /// Raised by escalation rather than by the layer's own watchdog.
    pub escalated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Watchdog {
    pub layer: Layer,
    pub subject: u32,
    pub period: u64,
    pub last_kick: u64,
    tripped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no {0} watchdog for subject {1}")]
pub struct UnknownWatchdog(pub Layer, pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionConfig {
    pub enabled: bool,
    pub l1_period_ns: u64,
    pub l2_period_ns: u64,
    pub l3_period_ns: u64,
    pub l4_period_ns: u64,
    pub l1_action: SupervisionAction,
    pub l2_action: SupervisionAction,
    pub l3_action: SupervisionAction,
    pub l4_action: SupervisionAction,
    /// L2 failures within `escalation_window_ns` that raise an L3 event.
    pub escalation_count: u32,
    pub escalation_window_ns: u64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            enabled: false,
            l1_period_ns: 100_000_000,
            l2_period_ns: 250_000_000,
            l3_period_ns: 500_000_000,
            l4_period_ns: 1_000_000_000,
            l1_action: SupervisionAction::LogOnly,
            l2_action: SupervisionAction::LogOnly,
            l3_action: SupervisionAction::LogOnly,
            l4_action: SupervisionAction::LogOnly,
            escalation_count: 3,
            escalation_window_ns: 2_000_000_000,
        }
    }
}

impl SupervisionConfig {
    pub fn period(&self, l: Layer) -> u64 {
        match l {
            Layer::L1 => self.l1_period_ns,
            Layer::L2 => self.l2_period_ns,
            Layer::L3 => self.l3_period_ns,
            Layer::L4 => self.l4_period_ns,
        }
    }

    pub fn action(&self, l: Layer) -> SupervisionAction {
        match l {
            Layer::L1 => self.l1_action,
            Layer::L2 => self.l2_action,
            Layer::L3 => self.l3_action,
            Layer::L4 => self.l4_action,
        }
    }

    /// Spacing of check events for a layer.
    pub fn granularity(&self, l: Layer) -> u64 {
        (self.period(l) / 4).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    pub config: SupervisionConfig,
    dogs: BTreeMap<(Layer, u32), Watchdog>,
    l2_failures: VecDeque<u64>,
    escalation_subject: u32,
    events: Vec<SupervisionEvent>,
}

impl Supervisor {
    /// `escalation_subject` is the entity L3 supervises (the primary VM).
    pub fn new(config: SupervisionConfig, escalation_subject: u32) -> Self {
        Supervisor {
            config,
            dogs: BTreeMap::new(),
            l2_failures: VecDeque::new(),
            escalation_subject,
            events: Vec::new(),
        }
    }

    pub fn register(&mut self, layer: Layer, subject: u32, period: u64, now: u64) {
        self.dogs.insert((layer, subject), Watchdog { layer, subject, period, last_kick: now, tripped: false });
    }

    pub fn watchdog(&self, layer: Layer, subject: u32) -> Option<&Watchdog> {
        self.dogs.get(&(layer, subject))
    }

    pub fn watchdogs(&self) -> impl Iterator<Item = &Watchdog> {
        self.dogs.values()
    }

    pub fn events(&self) -> &[SupervisionEvent] {
        &self.events
    }

    pub fn kick(&mut self, layer: Layer, subject: u32, now: u64) -> Result<(), UnknownWatchdog> {
        let w = self.dogs.get_mut(&(layer, subject)).ok_or(UnknownWatchdog(layer, subject))?;
        w.last_kick = now;
        w.tripped = false;
        Ok(())
    }

    /// Run the checks of one layer. `can_check` tells whether the checker
    /// for a subject is itself alive.
    pub fn check_layer(
        &mut self,
        layer: Layer,
        now: u64,
        can_check: &dyn Fn(Layer, u32) -> bool,
    ) -> Vec<SupervisionEvent> {
        let mut out = Vec::new();
        let action = self.config.action(layer);
        for w in self.dogs.values_mut().filter(|w| w.layer == layer) {
            if w.tripped || !can_check(layer, w.subject) || now.saturating_sub(w.last_kick) <= w.period {
                continue;
            }
            w.tripped = true;
            out.push(SupervisionEvent { at: now, layer, subject: w.subject, action, escalated: false });
        }
        if layer == Layer::L2 && !out.is_empty() {
            for _ in &out {
                self.l2_failures.push_back(now);
            }
            let window = self.config.escalation_window_ns;
            while self.l2_failures.front().is_some_and(|&t| now.saturating_sub(t) > window) {
                self.l2_failures.pop_front();
            }
            if self.config.escalation_count > 0 && self.l2_failures.len() >= self.config.escalation_count as usize {
                self.l2_failures.clear();
                out.push(SupervisionEvent {
                    at: now,
                    layer: Layer::L3,
                    subject: self.escalation_subject,
                    action: self.config.action(Layer::L3),
                    escalated: true,
                });
            }
        }
        self.events.extend_from_slice(&out);
        out
    }

    pub fn check_all(&mut self, now: u64, can_check: &dyn Fn(Layer, u32) -> bool) -> Vec<SupervisionEvent> {
        Layer::ALL.iter().flat_map(|&l| self.check_layer(l, now, can_check)).collect()
    }
}
