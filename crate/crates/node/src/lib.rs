//! Protocol state machines for the two kinds of network participant.
//!
//! Both are driven one event at a time by the caller; every transition takes
//! `&mut self` plus the event and returns the messages to send.

pub mod aggregator;
pub mod device;
pub mod profile;
pub mod seq;

pub use aggregator::{
    AggregatorConfig, AggregatorDiagnostics, AggregatorState, AnomalyVerdict, BillingError,
    ElectricalModel, MembershipKind, MembershipRecord,
};
pub use device::{DeviceConfig, DeviceDiagnostics, DeviceState, Phase, ReportBias};
pub use profile::{ConsumptionProfile, ProfileError, Segment};
pub use seq::SeqTracker;
