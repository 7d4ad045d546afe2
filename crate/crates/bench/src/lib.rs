//! Shared setup for the criterion benches.

use twogear::{ScenarioConfig, System, Trace};

/// Build and run `cfg` to completion, returning the trace.
pub fn simulate(cfg: &ScenarioConfig) -> Trace {
    let mut sys = System::new(cfg).expect("bench scenarios are valid");
    sys.run();
    sys.into_trace()
}
