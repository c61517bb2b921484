//! Discrete-event engine: one event queue, one seeded RNG, the electrical grid
//! and the communication topology. Device and aggregator state machines are
//! driven from here; every observable step is appended to the trace.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use gridmeter_core::{
    DeviceId, Destination, Message, NetworkAddress, NodeId, Outbound, SimDuration, SimTime,
};
use gridmeter_node::{AggregatorState, ConsumptionProfile, DeviceState, Phase};

use crate::grid::Grid;
use crate::scenario::{LatencySpec, LinkId, WanId};
use crate::trace::{kind, TraceRecord};

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Deliver {
        envelope: u64,
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    Tick {
        device: DeviceId,
        epoch: u64,
    },
    Connect {
        device: DeviceId,
        wan: WanId,
    },
    Disconnect {
        device: DeviceId,
    },
    /// Scenario-scheduled move; resolved through [`Engine::move_device`].
    Move {
        device: DeviceId,
        to_wan: WanId,
        transit: SimDuration,
    },
    Fault {
        link: LinkId,
        up: bool,
    },
    SealWindow {
        index: u64,
    },
    StopMetering,
    /// Operator action at the device's home aggregator.
    Remove {
        device: DeviceId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub at: SimTime,
    pub kind: EventKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event at {at} lies before the current time {now}")]
    PastEvent { at: SimTime, now: SimTime },
    #[error("unknown wan '{0}'")]
    UnknownWan(WanId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("{0} is in transit")]
    InTransit(DeviceId),
    #[error("duplicate {0}")]
    Duplicate(String),
}

#[derive(Debug)]
struct Queued {
    at: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so the max-heap pops the earliest (time, insertion) pair.
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Bookkeeping for one transmitted message, kept for causal analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub id: u64,
    pub kind: &'static str,
    pub sent_at: SimTime,
    pub latency: SimDuration,
    /// Envelope whose delivery caused this message to be sent.
    pub cause: Option<u64>,
}

/// Temporary-membership establishment as observed by the device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub device: DeviceId,
    pub host: NetworkAddress,
    pub home: Option<NetworkAddress>,
    pub started_at: SimTime,
    pub completed_at: SimTime,
    /// Latencies of the causal chain ending in the RegisterResponse, in send order.
    pub legs: Vec<SimDuration>,
    /// True when the chain is the full Report → Nack → RegisterRequest →
    /// VerifyDeviceRequest → VerifyDeviceResponse → RegisterResponse sequence.
    pub complete: bool,
}

impl Handshake {
    pub fn duration(&self) -> SimDuration {
        self.completed_at.saturating_since(self.started_at)
    }

    pub fn leg_sum(&self) -> SimDuration {
        self.legs
            .iter()
            .fold(SimDuration::from_micros(0), |a, b| a + *b)
    }
}

pub const HANDSHAKE_CHAIN: [&str; 6] = [
    "Report",
    "Nack",
    "RegisterRequest",
    "VerifyDeviceRequest",
    "VerifyDeviceResponse",
    "RegisterResponse",
];

/// Where a device currently is in the communication topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Wan(WanId),
    InTransit,
}

#[derive(Debug, Clone)]
pub struct DeviceNode {
    pub state: DeviceState,
    pub home_wan: WanId,
    pub location: Location,
    epoch: u64,
}

#[derive(Debug, Clone)]
pub struct WanNode {
    pub aggregator: NetworkAddress,
    pub access: LatencySpec,
    pub loss_fraction: f64,
}

/// Snapshot of a device's sequence bookkeeping taken after every event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqSnapshot {
    pub generated: u64,
    pub acked_through: u64,
    pub buffered: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub events: u64,
    pub sent: BTreeMap<&'static str, u64>,
    pub delivered: BTreeMap<&'static str, u64>,
    /// Keyed by reason: `link-down`, `in-transit`, `unreachable`.
    pub dropped: BTreeMap<&'static str, u64>,
    pub moves_ignored: u64,
}

impl Counters {
    pub fn total_dropped(&self) -> u64 {
        self.dropped.values().sum()
    }
}

pub struct Engine {
    now: SimTime,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    rng: ChaCha8Rng,
    wans: BTreeMap<WanId, WanNode>,
    wan_of_aggregator: BTreeMap<NetworkAddress, WanId>,
    aggregators: BTreeMap<NetworkAddress, AggregatorState>,
    devices: BTreeMap<DeviceId, DeviceNode>,
    backhaul: LatencySpec,
    down: BTreeSet<LinkId>,
    grid: Grid,
    window: SimDuration,
    grace: SimDuration,
    metering_end: Option<SimTime>,
    seal_limit: Option<SimTime>,
    envelopes: Vec<Envelope>,
    handshakes: Vec<Handshake>,
    counters: Counters,
    trace: Vec<TraceRecord>,
}

impl Engine {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            wans: BTreeMap::new(),
            wan_of_aggregator: BTreeMap::new(),
            aggregators: BTreeMap::new(),
            devices: BTreeMap::new(),
            backhaul: LatencySpec::Fixed { fixed_ms: 1.0 },
            down: BTreeSet::new(),
            grid: Grid::default(),
            window: SimDuration::from_secs(1),
            grace: SimDuration::from_millis(200),
            metering_end: None,
            seal_limit: None,
            envelopes: Vec::new(),
            handshakes: Vec::new(),
            counters: Counters::default(),
            trace: Vec::new(),
        }
    }

    pub fn set_backhaul(&mut self, latency: LatencySpec) {
        self.backhaul = latency;
    }

    /// Anomaly windows are evaluated and sealed at `(k+1)·window + grace`.
    pub fn set_window(&mut self, window: SimDuration, grace: SimDuration) {
        self.window = window;
        self.grace = grace;
    }

    pub fn add_wan(
        &mut self,
        id: WanId,
        aggregator: AggregatorState,
        access: LatencySpec,
        loss_fraction: f64,
    ) -> Result<(), EngineError> {
        if self.wans.contains_key(&id) || self.aggregators.contains_key(&aggregator.addr) {
            return Err(EngineError::Duplicate(format!("wan {id}")));
        }
        let addr = aggregator.addr.clone();
        self.wans.insert(
            id.clone(),
            WanNode {
                aggregator: addr.clone(),
                access,
                loss_fraction,
            },
        );
        self.wan_of_aggregator.insert(addr.clone(), id);
        self.aggregators.insert(addr, aggregator);
        Ok(())
    }

    /// Registers a device and plugs it into `home` now.
    pub fn add_device(
        &mut self,
        state: DeviceState,
        profile: ConsumptionProfile,
        home: WanId,
    ) -> Result<(), EngineError> {
        if !self.wans.contains_key(&home) {
            return Err(EngineError::UnknownWan(home));
        }
        let id = state.id;
        if self.devices.contains_key(&id) {
            return Err(EngineError::Duplicate(format!("device {id}")));
        }
        self.grid.add_device(id, profile);
        self.devices.insert(
            id,
            DeviceNode {
                state,
                home_wan: home.clone(),
                location: Location::InTransit,
                epoch: 0,
            },
        );
        self.schedule(Event {
            at: self.now,
            kind: EventKind::Connect {
                device: id,
                wan: home,
            },
        })
    }

    /// Metering stops at `end`; anomaly windows are evaluated up to there and
    /// blocks are sealed every window until `seal_limit`.
    pub fn plan_windows(&mut self, metering_end: SimTime, seal_limit: SimTime) -> Result<(), EngineError> {
        self.metering_end = Some(metering_end);
        self.seal_limit = Some(seal_limit);
        self.schedule(Event {
            at: metering_end,
            kind: EventKind::StopMetering,
        })?;
        let first = SimTime::ZERO + self.window + self.grace;
        if first <= seal_limit {
            self.schedule(Event {
                at: first,
                kind: EventKind::SealWindow { index: 0 },
            })?;
        }
        Ok(())
    }

    pub fn schedule(&mut self, event: Event) -> Result<(), EngineError> {
        if event.at < self.now {
            return Err(EngineError::PastEvent {
                at: event.at,
                now: self.now,
            });
        }
        self.queue.push(Queued {
            at: event.at,
            seq: self.next_seq,
            kind: event.kind,
        });
        self.next_seq += 1;
        Ok(())
    }

    pub fn move_device(
        &mut self,
        device: DeviceId,
        to_wan: WanId,
        transit: SimDuration,
    ) -> Result<(), EngineError> {
        if !self.wans.contains_key(&to_wan) {
            return Err(EngineError::UnknownWan(to_wan));
        }
        let node = self
            .devices
            .get(&device)
            .ok_or(EngineError::UnknownDevice(device))?;
        if node.location == Location::InTransit {
            return Err(EngineError::InTransit(device));
        }
        self.record(
            NodeId::Device(device).to_string(),
            kind::MOVE,
            format!("to={to_wan} transit_us={}", transit.as_micros()),
        );
        self.schedule(Event {
            at: self.now,
            kind: EventKind::Disconnect { device },
        })?;
        self.schedule(Event {
            at: self.now + transit,
            kind: EventKind::Connect {
                device,
                wan: to_wan,
            },
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|q| q.at)
    }

    /// Executes the next event if it is due at or before `limit`.
    pub fn step(&mut self, limit: SimTime) -> bool {
        match self.queue.peek() {
            Some(q) if q.at <= limit => {}
            _ => return false,
        }
        let q = self.queue.pop().expect("peeked");
        self.now = q.at;
        self.counters.events += 1;
        self.handle(q.kind);
        true
    }

    pub fn run_until(&mut self, end: SimTime) -> &[TraceRecord] {
        while self.step(end) {}
        if end > self.now {
            self.now = end;
        }
        &self.trace
    }

    /// Seals whatever is still pending at every aggregator.
    pub fn final_seal(&mut self) {
        let now = self.now;
        let addrs: Vec<NetworkAddress> = self.aggregators.keys().cloned().collect();
        for addr in addrs {
            self.seal_one(&addr, now);
        }
    }

    // --- accessors -------------------------------------------------------

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceRecord> {
        self.trace
    }

    pub fn devices(&self) -> &BTreeMap<DeviceId, DeviceNode> {
        &self.devices
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceNode> {
        self.devices.get(&id)
    }

    pub fn aggregators(&self) -> &BTreeMap<NetworkAddress, AggregatorState> {
        &self.aggregators
    }

    pub fn aggregator(&self, addr: &NetworkAddress) -> Option<&AggregatorState> {
        self.aggregators.get(addr)
    }

    pub fn wans(&self) -> &BTreeMap<WanId, WanNode> {
        &self.wans
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn handshakes(&self) -> &[Handshake] {
        &self.handshakes
    }

    pub fn envelopes(&self) -> &[Envelope] {
        &self.envelopes
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn is_link_up(&self, link: &LinkId) -> bool {
        !self.down.contains(link)
    }

    pub fn seq_snapshot(&self, device: DeviceId) -> Option<SeqSnapshot> {
        self.devices.get(&device).map(|d| SeqSnapshot {
            generated: d.state.generated(),
            acked_through: d.state.acked_through(),
            buffered: d.state.buffered_seqs(),
        })
    }

    // --- internals -------------------------------------------------------

    fn record(&mut self, node: String, kind: &str, detail: String) {
        self.trace.push(TraceRecord {
            t_us: self.now.as_micros(),
            node,
            kind: kind.to_string(),
            detail,
        });
    }

    fn sample_latency(&mut self, spec: &LatencySpec) -> SimDuration {
        let (lo, hi) = spec.range_us();
        let us = if lo == hi {
            lo
        } else {
            self.rng.gen_range(lo..=hi)
        };
        SimDuration::from_micros(us)
    }

    fn device_wan(&self, device: DeviceId) -> Option<&WanId> {
        match &self.devices.get(&device)?.location {
            Location::Wan(w) => Some(w),
            Location::InTransit => None,
        }
    }

    fn drop_message(&mut self, from: &NodeId, msg: &Message, reason: &'static str) {
        *self.counters.dropped.entry(reason).or_default() += 1;
        self.record(
            from.to_string(),
            kind::DROP,
            format!("{} {} reason={reason}", msg.kind(), msg.summary()),
        );
    }

    /// Resolves the link and destination for a message, or the drop reason.
    fn route(&self, from: &NodeId, to: &Destination) -> Result<(NodeId, LinkId), &'static str> {
        match (from, to) {
            (NodeId::Device(d), Destination::Broadcast) => {
                let wan = self.device_wan(*d).ok_or("in-transit")?;
                let agg = self.wans[wan].aggregator.clone();
                Ok((NodeId::Aggregator(agg), LinkId::Access(wan.clone())))
            }
            (NodeId::Device(d), Destination::Node(NodeId::Aggregator(a))) => {
                let wan = self.device_wan(*d).ok_or("in-transit")?;
                if &self.wans[wan].aggregator != a {
                    return Err("unreachable");
                }
                Ok((NodeId::Aggregator(a.clone()), LinkId::Access(wan.clone())))
            }
            (NodeId::Aggregator(a), Destination::Node(NodeId::Device(d))) => {
                let wan = self.device_wan(*d).ok_or("in-transit")?;
                if &self.wans[wan].aggregator != a {
                    return Err("unreachable");
                }
                Ok((NodeId::Device(*d), LinkId::Access(wan.clone())))
            }
            (NodeId::Aggregator(a), Destination::Node(NodeId::Aggregator(b))) => {
                if a == b || !self.aggregators.contains_key(b) {
                    return Err("unreachable");
                }
                Ok((
                    NodeId::Aggregator(b.clone()),
                    LinkId::backhaul(a.clone(), b.clone()),
                ))
            }
            _ => Err("unreachable"),
        }
    }

    /// Sends a message produced by `from`; `cause` is the envelope whose
    /// delivery triggered it.
    pub fn send(&mut self, from: NodeId, out: Outbound, cause: Option<u64>) {
        let kind_name = out.msg.kind();
        *self.counters.sent.entry(kind_name).or_default() += 1;
        let (to, link) = match self.route(&from, &out.to) {
            Ok(r) => r,
            Err(reason) => {
                self.drop_message(&from, &out.msg, reason);
                return;
            }
        };
        if self.down.contains(&link) {
            self.drop_message(&from, &out.msg, "link-down");
            return;
        }
        let spec = match &link {
            LinkId::Access(w) => self.wans[w].access.clone(),
            LinkId::Backhaul(..) => self.backhaul.clone(),
        };
        let latency = self.sample_latency(&spec);
        let id = self.envelopes.len() as u64;
        self.envelopes.push(Envelope {
            id,
            kind: kind_name,
            sent_at: self.now,
            latency,
            cause,
        });
        self.record(
            from.to_string(),
            kind::SEND,
            format!(
                "#{id} {kind_name} {} to={to} latency_us={}",
                out.msg.summary(),
                latency.as_micros()
            ),
        );
        let at = self.now + latency;
        self.schedule(Event {
            at,
            kind: EventKind::Deliver {
                envelope: id,
                from,
                to,
                msg: out.msg,
            },
        })
        .expect("latency is non-negative");
    }

    fn send_all(&mut self, from: NodeId, outs: Vec<Outbound>, cause: Option<u64>) {
        for o in outs {
            self.send(from.clone(), o, cause);
        }
    }

    fn handle(&mut self, event: EventKind) {
        match event {
            EventKind::Deliver {
                envelope,
                from,
                to,
                msg,
            } => self.deliver(envelope, from, to, msg),
            EventKind::Tick { device, epoch } => self.tick(device, epoch),
            EventKind::Connect { device, wan } => self.connect(device, wan),
            EventKind::Disconnect { device } => self.disconnect(device),
            EventKind::Move {
                device,
                to_wan,
                transit,
            } => {
                if let Err(e) = self.move_device(device, to_wan, transit) {
                    self.counters.moves_ignored += 1;
                    self.record(device.to_string(), kind::MOVE, format!("ignored: {e}"));
                }
            }
            EventKind::Fault { link, up } => {
                if up {
                    self.down.remove(&link);
                } else {
                    self.down.insert(link.clone());
                }
                self.record(
                    link.to_string(),
                    kind::FAULT,
                    if up { "up" } else { "down" }.to_string(),
                );
            }
            EventKind::SealWindow { index } => self.seal_window(index),
            EventKind::StopMetering => self.stop_metering(),
            EventKind::Remove { device } => self.remove(device),
        }
    }

    /// Delivery re-checks reachability: a device that left the WAN or a link
    /// that went down in the meantime loses the message.
    fn deliver(&mut self, envelope: u64, from: NodeId, to: NodeId, msg: Message) {
        let link = match (&from, &to) {
            (NodeId::Aggregator(a), NodeId::Aggregator(b)) => {
                Some(LinkId::backhaul(a.clone(), b.clone()))
            }
            (NodeId::Aggregator(a), NodeId::Device(_)) | (NodeId::Device(_), NodeId::Aggregator(a)) => {
                self.wan_of_aggregator.get(a).cloned().map(LinkId::Access)
            }
            _ => None,
        };
        if link.as_ref().is_some_and(|l| self.down.contains(l)) {
            self.drop_message(&from, &msg, "link-down");
            return;
        }
        if let (NodeId::Aggregator(a), NodeId::Device(d)) = (&from, &to) {
            match self.device_wan(*d) {
                None => return self.drop_message(&from, &msg, "in-transit"),
                Some(w) if &self.wans[w].aggregator != a => {
                    return self.drop_message(&from, &msg, "unreachable")
                }
                _ => {}
            }
        }
        *self.counters.delivered.entry(msg.kind()).or_default() += 1;
        self.record(
            to.to_string(),
            kind::DELIVER,
            format!("#{envelope} {} from={from}", msg.kind()),
        );
        match to {
            NodeId::Device(d) => {
                let Some(node) = self.devices.get_mut(&d) else {
                    return;
                };
                let awaiting = node.state.phase == Phase::AwaitingTempMembership;
                let is_response = matches!(msg, Message::RegisterResponse { .. });
                let outs = node.state.on_message(msg, self.now);
                if awaiting && is_response {
                    self.record_handshake(d, envelope);
                }
                self.send_all(NodeId::Device(d), outs, Some(envelope));
            }
            NodeId::Aggregator(a) => {
                let Some(agg) = self.aggregators.get_mut(&a) else {
                    return;
                };
                let outs = agg.on_message(msg, self.now);
                self.send_all(NodeId::Aggregator(a), outs, Some(envelope));
            }
        }
    }

    fn record_handshake(&mut self, device: DeviceId, response: u64) {
        let mut chain = Vec::new();
        let mut cursor = Some(response);
        while let Some(id) = cursor {
            let env = &self.envelopes[id as usize];
            chain.push(env.clone());
            cursor = env.cause;
        }
        chain.reverse();
        let kinds: Vec<&str> = chain.iter().map(|e| e.kind).collect();
        // The chain may extend further back (e.g. a Report sent in reply to
        // an earlier delivery); the handshake starts at its last Report.
        let start = kinds.iter().rposition(|k| *k == "Report").unwrap_or(0);
        let chain = &chain[start..];
        let complete = chain.iter().map(|e| e.kind).eq(HANDSHAKE_CHAIN.iter().copied());
        let node = &self.devices[&device];
        let host = node
            .state
            .current_aggregator
            .clone()
            .expect("a responded device has an aggregator");
        let hs = Handshake {
            device,
            host,
            home: node.state.master.clone(),
            started_at: chain[0].sent_at,
            completed_at: self.now,
            legs: chain.iter().map(|e| e.latency).collect(),
            complete,
        };
        self.record(
            device.to_string(),
            kind::HANDSHAKE,
            format!(
                "host={} start_us={} duration_us={} legs={} complete={}",
                hs.host,
                hs.started_at.as_micros(),
                hs.duration().as_micros(),
                hs.legs.len(),
                hs.complete
            ),
        );
        self.handshakes.push(hs);
    }

    fn trace_new_samples(&mut self, device: DeviceId, before: u64) {
        let Some(node) = self.devices.get(&device) else {
            return;
        };
        let lines: Vec<String> = node
            .state
            .buffer()
            .filter(|s| s.seq > before)
            .map(|s| {
                format!(
                    "seq={} start_us={} end_us={} uj={}",
                    s.seq,
                    s.window_start.as_micros(),
                    s.window_end.as_micros(),
                    s.energy_microjoules()
                )
            })
            .collect();
        for l in lines {
            self.record(device.to_string(), kind::SAMPLE, l);
        }
    }

    fn schedule_tick(&mut self, device: DeviceId) {
        let node = &self.devices[&device];
        let ev = Event {
            at: self.now + node.state.t_measure(),
            kind: EventKind::Tick {
                device,
                epoch: node.epoch,
            },
        };
        self.schedule(ev).expect("future tick");
    }

    fn tick(&mut self, device: DeviceId, epoch: u64) {
        let Some(node) = self.devices.get_mut(&device) else {
            return;
        };
        if node.epoch != epoch || !node.state.connected {
            return;
        }
        let before = node.state.generated();
        let profile = self.grid.profile(device).expect("profile registered");
        let outs = node.state.on_tick(profile, self.now);
        let keep_ticking = node.state.is_metering()
            || node.state.buffer().len() > 0
            || node.state.phase != Phase::Registered;
        self.trace_new_samples(device, before);
        self.send_all(NodeId::Device(device), outs, None);
        if keep_ticking {
            self.schedule_tick(device);
        }
    }

    fn connect(&mut self, device: DeviceId, wan: WanId) {
        let agg = self.wans[&wan].aggregator.clone();
        let Some(node) = self.devices.get_mut(&device) else {
            return;
        };
        node.location = Location::Wan(wan.clone());
        node.epoch += 1;
        let outs = node.state.on_connect(agg.clone(), self.now);
        self.grid.attach(device, agg.clone(), self.now);
        self.record(device.to_string(), kind::CONNECT, format!("wan={wan} aggregator={agg}"));
        self.send_all(NodeId::Device(device), outs, None);
        self.schedule_tick(device);
    }

    fn disconnect(&mut self, device: DeviceId) {
        let Some(node) = self.devices.get_mut(&device) else {
            return;
        };
        let Location::Wan(wan) = std::mem::replace(&mut node.location, Location::InTransit) else {
            return;
        };
        node.epoch += 1;
        let before = node.state.generated();
        let profile = self.grid.profile(device).expect("profile registered");
        node.state.on_disconnect(profile, self.now);
        self.trace_new_samples(device, before);
        self.grid.detach(device, self.now);
        let agg = self.wans[&wan].aggregator.clone();
        if let Some(a) = self.aggregators.get_mut(&agg) {
            a.on_device_departed(device);
        }
        self.record(device.to_string(), kind::DISCONNECT, format!("wan={wan}"));
    }

    fn stop_metering(&mut self) {
        self.grid.stop_metering(self.now);
        let ids: Vec<DeviceId> = self.devices.keys().copied().collect();
        for id in ids {
            let node = self.devices.get_mut(&id).expect("listed");
            let before = node.state.generated();
            let profile = self.grid.profile(id).expect("profile registered");
            node.state.stop_metering(profile, self.now);
            self.trace_new_samples(id, before);
        }
        self.record("engine".into(), kind::STOP, "metering stopped".into());
    }

    fn remove(&mut self, device: DeviceId) {
        let Some(home) = self.devices.get(&device).and_then(|d| d.state.master.clone()) else {
            self.record(device.to_string(), kind::REMOVAL, "ignored: no home".into());
            return;
        };
        self.record(device.to_string(), kind::REMOVAL, format!("home={home}"));
        let Some(agg) = self.aggregators.get_mut(&home) else {
            return;
        };
        let outs = agg.on_backhaul(Message::RemoveMembership { device }, self.now);
        self.send_all(NodeId::Aggregator(home), outs, None);
    }

    fn seal_one(&mut self, addr: &NetworkAddress, now: SimTime) {
        let agg = self.aggregators.get_mut(addr).expect("known aggregator");
        if agg.seal_block(now) {
            let tip = agg.ledger().tip().expect("sealed block");
            let detail = format!(
                "index={} samples={} hash={}",
                tip.index,
                tip.payload.len(),
                tip.hash.to_hex()
            );
            self.record(addr.to_string(), kind::BLOCK, detail);
        }
    }

    fn seal_window(&mut self, index: u64) {
        let now = self.now;
        let w = self.window.as_micros();
        let window_end = SimTime::from_micros((index + 1) * w);
        let evaluate = self.metering_end.is_none_or(|end| window_end <= end);
        let addrs: Vec<NetworkAddress> = self.aggregators.keys().cloned().collect();
        for addr in &addrs {
            let agg = self.aggregators.get_mut(addr).expect("listed");
            if evaluate {
                let v = agg.detect_anomaly(index, &self.grid);
                let detail = format!(
                    "window={index} reported_j={:.9} ground_truth_j={:.9} tolerance_j={:.9} members={} flagged={}",
                    v.reported_sum, v.ground_truth, v.tolerance, v.members, v.flagged
                );
                self.record(addr.to_string(), kind::VERDICT, detail);
            }
            let agg = self.aggregators.get_mut(addr).expect("listed");
            agg.expire_temporary(now);
            self.seal_one(addr, now);
            let outs = self.aggregators[addr].retransmit_forwards();
            self.send_all(NodeId::Aggregator(addr.clone()), outs, None);
        }
        let next = SimTime::from_micros((index + 2) * w) + self.grace;
        if self.seal_limit.is_none_or(|limit| next <= limit) {
            self.schedule(Event {
                at: next,
                kind: EventKind::SealWindow { index: index + 1 },
            })
            .expect("future window");
        }
    }
}
