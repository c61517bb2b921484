//! Shared vocabulary of the metering network: identifiers, simulation time,
//! meter samples, energy arithmetic, protocol messages and the hash-chained
//! ledger every aggregator writes.

pub mod codec;
pub mod energy;
pub mod ledger;
pub mod message;
pub mod types;

pub use codec::{canonical_serialize, decode_canonical, DecodeError};
pub use energy::{compute_energy, EnergyError};
pub use ledger::{verify_chain, BlockHash, ChainStatus, Ledger, LedgerBlock, LedgerFileError};
pub use message::{Destination, Message, NodeId, Outbound};
pub use types::{
    joules_to_microjoules, microjoules_to_joules, AddressError, DeviceId, MeterSample,
    NetworkAddress, SimDuration, SimTime,
};
