//! Benchmark harness: cost model, scenarios, micro-benchmarks, the
//! forwarding-overhead estimate and measurement, and the jitter experiment.

pub mod calibrate;
mod cost;
pub mod jitter;
pub mod micro;
pub mod overhead;
pub mod report;
pub mod scenario;
pub mod templates;

pub use cost::{CostModel, CALIBRATED_GDM_USER_HOP_NS, CALIBRATED_GICD_EMUL_NS, CALIBRATED_VIRQ_INJECT_NS};
pub use jitter::{run_jitter, JitterReport};
pub use micro::{run_microbench, MicroBench};
pub use overhead::{estimate_gear2_overhead, measure_gear2_overhead, OverheadReport};
pub use scenario::ScenarioConfig;
pub use templates::JitterConfig;
