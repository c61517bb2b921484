use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{DeviceId, MeterSample, NetworkAddress};

/// Any participant in the metering network.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeId {
    Device(DeviceId),
    Aggregator(NetworkAddress),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Device(d) => write!(f, "{d}"),
            NodeId::Aggregator(a) => write!(f, "{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Destination {
    Node(NodeId),
    /// Whatever aggregator serves the sender's current WAN.
    Broadcast,
}

/// Protocol messages exchanged on access links (device to aggregator) and on
/// the aggregator backhaul.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    RegisterRequest {
        device: DeviceId,
        master: Option<NetworkAddress>,
    },
    RegisterResponse {
        device: DeviceId,
        addr: NetworkAddress,
    },
    RegisterReject {
        device: DeviceId,
        addr: NetworkAddress,
    },
    Report {
        device: DeviceId,
        samples: Vec<MeterSample>,
    },
    Ack {
        device: DeviceId,
        through_seq: u64,
    },
    Nack {
        device: DeviceId,
        addr: NetworkAddress,
    },
    RemoveMembership {
        device: DeviceId,
    },
    VerifyDeviceRequest {
        device: DeviceId,
        master: NetworkAddress,
        requester: NetworkAddress,
    },
    VerifyDeviceResponse {
        device: DeviceId,
        known: bool,
        from: NetworkAddress,
    },
    ForwardConsumption {
        device: DeviceId,
        master: NetworkAddress,
        from: NetworkAddress,
        samples: Vec<MeterSample>,
    },
    /// Home aggregator confirms forwarded samples up to `through_seq`.
    ForwardAck {
        device: DeviceId,
        through_seq: u64,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::RegisterRequest { .. } => "RegisterRequest",
            Message::RegisterResponse { .. } => "RegisterResponse",
            Message::RegisterReject { .. } => "RegisterReject",
            Message::Report { .. } => "Report",
            Message::Ack { .. } => "Ack",
            Message::Nack { .. } => "Nack",
            Message::RemoveMembership { .. } => "RemoveMembership",
            Message::VerifyDeviceRequest { .. } => "VerifyDeviceRequest",
            Message::VerifyDeviceResponse { .. } => "VerifyDeviceResponse",
            Message::ForwardConsumption { .. } => "ForwardConsumption",
            Message::ForwardAck { .. } => "ForwardAck",
        }
    }

    pub fn device(&self) -> DeviceId {
        match self {
            Message::RegisterRequest { device, .. }
            | Message::RegisterResponse { device, .. }
            | Message::RegisterReject { device, .. }
            | Message::Report { device, .. }
            | Message::Ack { device, .. }
            | Message::Nack { device, .. }
            | Message::RemoveMembership { device }
            | Message::VerifyDeviceRequest { device, .. }
            | Message::VerifyDeviceResponse { device, .. }
            | Message::ForwardConsumption { device, .. }
            | Message::ForwardAck { device, .. } => *device,
        }
    }

    /// Short single-line description used in traces.
    pub fn summary(&self) -> String {
        fn seqs(samples: &[MeterSample]) -> String {
            match (samples.first(), samples.last()) {
                (Some(a), Some(b)) => format!("n={} seq={}..{}", samples.len(), a.seq, b.seq),
                _ => "n=0".to_string(),
            }
        }
        match self {
            Message::RegisterRequest { device, master } => match master {
                Some(m) => format!("{device} master={m}"),
                None => format!("{device} master=-"),
            },
            Message::RegisterResponse { device, addr }
            | Message::RegisterReject { device, addr }
            | Message::Nack { device, addr } => format!("{device} addr={addr}"),
            Message::Report { device, samples } => format!("{device} {}", seqs(samples)),
            Message::Ack {
                device,
                through_seq,
            }
            | Message::ForwardAck {
                device,
                through_seq,
            } => format!("{device} through={through_seq}"),
            Message::RemoveMembership { device } => format!("{device}"),
            Message::VerifyDeviceRequest {
                device,
                master,
                requester,
            } => format!("{device} master={master} requester={requester}"),
            Message::VerifyDeviceResponse {
                device,
                known,
                from,
            } => format!("{device} known={known} from={from}"),
            Message::ForwardConsumption {
                device,
                master,
                from,
                samples,
            } => format!("{device} master={master} from={from} {}", seqs(samples)),
        }
    }
}

/// A message produced by a state machine together with where it is headed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Destination,
    pub msg: Message,
}

impl Outbound {
    pub fn to_device(device: DeviceId, msg: Message) -> Self {
        Self {
            to: Destination::Node(NodeId::Device(device)),
            msg,
        }
    }

    pub fn to_aggregator(addr: NetworkAddress, msg: Message) -> Self {
        Self {
            to: Destination::Node(NodeId::Aggregator(addr)),
            msg,
        }
    }

    pub fn broadcast(msg: Message) -> Self {
        Self {
            to: Destination::Broadcast,
            msg,
        }
    }
}
