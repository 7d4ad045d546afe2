pub mod bench;
pub mod devmodel;
pub mod gear1;
pub mod gear2;
pub mod guests;
pub mod hexnum;
pub mod machine;
pub mod simcore;
pub mod supervision;
pub mod system;

pub use bench::scenario::ScenarioError;
pub use bench::{CostModel, JitterConfig, OverheadReport, ScenarioConfig};
pub use guests::{LatencyStats, RtProfile, RtTaskConfig};
pub use simcore::{trace_hash, Trace, TraceRecord};
pub use system::System;
