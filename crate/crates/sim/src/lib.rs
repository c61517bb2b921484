//! Deterministic discrete-event simulation of a location-independent metering
//! network: electrical attachment, per-WAN communication, backhaul, mobility
//! and link faults, plus scenario loading and metric export.

pub mod engine;
pub mod grid;
pub mod metrics;
pub mod run;
pub mod scenario;
pub mod trace;

pub use engine::{
    Counters, DeviceNode, Engine, EngineError, Envelope, Event, EventKind, Handshake, Location,
    SeqSnapshot, WanNode, HANDSHAKE_CHAIN,
};
pub use grid::{Attachment, Grid};
pub use metrics::{collect, MetricsReport};
pub use run::{build_engine, run_scenario, with_seed, write_outputs, RunOutput};
pub use scenario::{load_scenario, LatencySpec, LinkId, Scenario, ScenarioError, WanId};
pub use trace::{read_ndjson, summarize, TraceRecord, TraceSummary};
