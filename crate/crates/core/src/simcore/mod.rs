//! Discrete-event engine: virtual time, a seeded generator and the trace every
//! benchmark reads back.

mod engine;
mod prng;
mod time;
mod trace;

pub use engine::{EngineError, EventId, EventQueue, Scheduled};
pub use prng::Prng;
pub use time::SimTime;
pub use trace::{trace_hash, Action, Actor, Cause, ThreadTag, Trace, TraceRecord, World, EMPTY_TRACE_HASH};
