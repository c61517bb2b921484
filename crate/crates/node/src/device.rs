//! Device-side protocol: registration, periodic metering, local buffering and
//! re-registration through a host aggregator after a Nack.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use gridmeter_core::{
    DeviceId, Message, MeterSample, NetworkAddress, Outbound, SimDuration, SimTime,
};

use crate::profile::ConsumptionProfile;

pub const DEFAULT_T_MEASURE: SimDuration = SimDuration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Unregistered,
    Registering,
    Registered,
    AwaitingTempMembership,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub t_measure: SimDuration,
    /// `None` keeps every unacknowledged sample.
    pub buffer_cap: Option<usize>,
    /// Constant error of the device's current sensor, in amperes.
    pub sensor_offset_amps: f64,
    /// How long to wait for a registration answer before asking again.
    pub register_retry: SimDuration,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            t_measure: DEFAULT_T_MEASURE,
            buffer_cap: None,
            sensor_offset_amps: 0.0,
            register_retry: SimDuration::from_secs(10),
        }
    }
}

/// Deliberate misreport: added to the first sample whose window starts at or
/// after `at`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportBias {
    pub at: SimTime,
    pub delta_joules: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceDiagnostics {
    pub unexpected_messages: u64,
    pub overflow_dropped: u64,
    pub stale_acks: u64,
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: DeviceId,
    pub phase: Phase,
    pub master: Option<NetworkAddress>,
    pub current_aggregator: Option<NetworkAddress>,
    pub connected: bool,
    pub last_sample_at: SimTime,
    pub config: DeviceConfig,
    pub diagnostics: DeviceDiagnostics,
    buffer: VecDeque<MeterSample>,
    next_seq: u64,
    acked_through: u64,
    metering: bool,
    /// When the current Registering/AwaitingTempMembership attempt was sent.
    attempt_at: SimTime,
    /// Earliest time an Unregistered device may broadcast again.
    retry_at: SimTime,
    biases: VecDeque<ReportBias>,
}

impl DeviceState {
    pub fn new(id: DeviceId, config: DeviceConfig) -> Self {
        Self {
            id,
            phase: Phase::Unregistered,
            master: None,
            current_aggregator: None,
            connected: false,
            last_sample_at: SimTime::ZERO,
            config,
            diagnostics: DeviceDiagnostics::default(),
            buffer: VecDeque::new(),
            next_seq: 1,
            acked_through: 0,
            metering: true,
            attempt_at: SimTime::ZERO,
            retry_at: SimTime::ZERO,
            biases: VecDeque::new(),
        }
    }

    pub fn with_biases(mut self, mut biases: Vec<ReportBias>) -> Self {
        biases.sort_by_key(|b| b.at);
        self.biases = biases.into();
        self
    }

    pub fn t_measure(&self) -> SimDuration {
        self.config.t_measure
    }

    /// Samples generated but not yet acknowledged, oldest first.
    pub fn buffer(&self) -> impl ExactSizeIterator<Item = &MeterSample> {
        self.buffer.iter()
    }

    pub fn buffered_seqs(&self) -> Vec<u64> {
        self.buffer.iter().map(|s| s.seq).collect()
    }

    /// Highest cumulative acknowledgement received.
    pub fn acked_through(&self) -> u64 {
        self.acked_through
    }

    /// Number of samples produced so far; their seqs are `1..=generated()`.
    pub fn generated(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn is_metering(&self) -> bool {
        self.metering
    }

    fn request(&self) -> Outbound {
        Outbound::broadcast(Message::RegisterRequest {
            device: self.id,
            master: self.master.clone(),
        })
    }

    /// Broadcasts a membership request. Only acts on an electrically
    /// connected, unregistered device.
    pub fn begin_registration(&mut self, now: SimTime) -> Vec<Outbound> {
        if self.phase != Phase::Unregistered || !self.connected {
            return Vec::new();
        }
        self.phase = Phase::Registering;
        self.attempt_at = now;
        vec![self.request()]
    }

    /// Electrical attachment to a WAN whose aggregator is `aggregator`. The
    /// aggregator found by the scan becomes the reporting target.
    pub fn on_connect(&mut self, aggregator: NetworkAddress, now: SimTime) -> Vec<Outbound> {
        self.connected = true;
        self.last_sample_at = now;
        self.current_aggregator = Some(aggregator);
        match self.phase {
            Phase::Unregistered => {
                self.retry_at = now;
                self.begin_registration(now)
            }
            Phase::Registering | Phase::AwaitingTempMembership => {
                self.attempt_at = now;
                vec![self.request()]
            }
            // Keep reporting; a foreign aggregator answers with a Nack.
            Phase::Registered => Vec::new(),
        }
    }

    /// Electrical detachment. The partial window up to `now` is closed into a
    /// final sample so no consumption goes unmetered.
    pub fn on_disconnect(&mut self, profile: &ConsumptionProfile, now: SimTime) {
        if self.connected && self.metering && now > self.last_sample_at {
            self.measure(profile, now);
        }
        self.connected = false;
    }

    /// Ends metering at `now` (close of a run). Buffered samples are still
    /// reported on later ticks.
    pub fn stop_metering(&mut self, profile: &ConsumptionProfile, now: SimTime) {
        if self.connected && self.metering && now > self.last_sample_at {
            self.measure(profile, now);
        }
        self.metering = false;
    }

    fn measure(&mut self, profile: &ConsumptionProfile, now: SimTime) {
        let from = self.last_sample_at;
        let mut energy = profile.metered_energy(from, now, self.config.sensor_offset_amps);
        while let Some(bias) = self.biases.front() {
            if bias.at > from {
                break;
            }
            energy += bias.delta_joules;
            self.biases.pop_front();
        }
        let sample = MeterSample {
            device: self.id,
            seq: self.next_seq,
            window_start: from,
            window_end: now,
            energy: energy.max(0.0),
        };
        self.next_seq += 1;
        self.last_sample_at = now;
        self.buffer.push_back(sample);
        if let Some(cap) = self.config.buffer_cap {
            while self.buffer.len() > cap {
                self.buffer.pop_front();
                self.diagnostics.overflow_dropped += 1;
            }
        }
    }

    /// Periodic timer. Closes a measurement window once `t_measure` has
    /// elapsed and, when registered, reports everything still unacknowledged.
    pub fn on_tick(&mut self, profile: &ConsumptionProfile, now: SimTime) -> Vec<Outbound> {
        if !self.connected {
            return Vec::new();
        }
        let mut out = Vec::new();
        if self.metering && now.saturating_since(self.last_sample_at) >= self.config.t_measure {
            self.measure(profile, now);
        }
        match self.phase {
            Phase::Unregistered if now >= self.retry_at => {
                out.extend(self.begin_registration(now));
            }
            Phase::Registering | Phase::AwaitingTempMembership
                if now.saturating_since(self.attempt_at) >= self.config.register_retry =>
            {
                self.attempt_at = now;
                out.push(self.request());
            }
            Phase::Registered if !self.buffer.is_empty() => {
                if let Some(agg) = &self.current_aggregator {
                    out.push(Outbound::to_aggregator(
                        agg.clone(),
                        Message::Report {
                            device: self.id,
                            samples: self.buffer.iter().cloned().collect(),
                        },
                    ));
                }
            }
            _ => {}
        }
        out
    }

    pub fn on_message(&mut self, msg: Message, now: SimTime) -> Vec<Outbound> {
        match msg {
            Message::RegisterResponse { addr, .. } => {
                self.phase = Phase::Registered;
                if self.master.is_none() {
                    self.master = Some(addr.clone());
                }
                self.current_aggregator = Some(addr);
                Vec::new()
            }
            Message::RegisterReject { .. } => {
                if self.phase != Phase::Registered {
                    self.phase = Phase::Unregistered;
                    self.retry_at = now + self.config.register_retry;
                }
                Vec::new()
            }
            Message::Ack { through_seq, .. } => {
                if through_seq > self.acked_through {
                    self.acked_through = through_seq;
                    self.buffer.retain(|s| s.seq > through_seq);
                } else {
                    self.diagnostics.stale_acks += 1;
                }
                Vec::new()
            }
            Message::Nack { addr, .. } => {
                if self.phase != Phase::Registered {
                    return Vec::new();
                }
                self.phase = Phase::AwaitingTempMembership;
                self.current_aggregator = Some(addr);
                self.attempt_at = now;
                vec![self.request()]
            }
            Message::RemoveMembership { .. } => {
                self.master = None;
                self.phase = Phase::Unregistered;
                self.retry_at = now;
                Vec::new()
            }
            _ => {
                self.diagnostics.unexpected_messages += 1;
                Vec::new()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridmeter_core::Destination;

    fn a(s: &str) -> NetworkAddress {
        NetworkAddress::new(s).unwrap()
    }

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn registered(id: u64, home: &str) -> DeviceState {
        let mut d = DeviceState::new(DeviceId(id), DeviceConfig::default());
        d.on_connect(a(home), SimTime::ZERO);
        d.on_message(
            Message::RegisterResponse {
                device: DeviceId(id),
                addr: a(home),
            },
            SimTime::ZERO,
        );
        d
    }

    #[test]
    fn fresh_device_broadcasts_without_master() {
        let mut d = DeviceState::new(DeviceId(1), DeviceConfig::default());
        assert!(d.begin_registration(SimTime::ZERO).is_empty(), "not connected yet");
        let out = d.on_connect(a("A1"), SimTime::ZERO);
        assert_eq!(
            out,
            vec![Outbound::broadcast(Message::RegisterRequest {
                device: DeviceId(1),
                master: None
            })]
        );
        assert_eq!(d.phase, Phase::Registering);
        assert!(d.begin_registration(ms(1)).is_empty());
    }

    #[test]
    fn registration_sets_master() {
        let d = registered(1, "A1");
        assert_eq!(d.phase, Phase::Registered);
        assert_eq!(d.master, Some(a("A1")));
        assert_eq!(d.current_aggregator, Some(a("A1")));
    }

    #[test]
    fn registered_device_ignores_begin_registration() {
        let mut d = registered(1, "A1");
        assert!(d.begin_registration(ms(5)).is_empty());
        assert_eq!(d.phase, Phase::Registered);
    }

    #[test]
    fn unregistered_master_is_carried() {
        let mut d = registered(1, "A1");
        d.on_message(
            Message::RegisterReject {
                device: DeviceId(1),
                addr: a("A1"),
            },
            ms(1),
        );
        assert_eq!(d.phase, Phase::Registered, "stale reject ignored");
        d.phase = Phase::Unregistered;
        assert_eq!(
            d.begin_registration(ms(2)),
            vec![Outbound::broadcast(Message::RegisterRequest {
                device: DeviceId(1),
                master: Some(a("A1"))
            })]
        );
    }

    #[test]
    fn tick_reports_one_window() {
        let mut d = registered(1, "A1");
        let p = ConsumptionProfile::constant(0.1, 5.0);
        assert!(d.on_tick(&p, ms(50)).is_empty(), "window not elapsed");
        let out = d.on_tick(&p, ms(100));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, Destination::Node(gridmeter_core::NodeId::Aggregator(a("A1"))));
        let Message::Report { samples, .. } = &out[0].msg else {
            panic!("expected report")
        };
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].seq, 1);
        assert!((samples[0].energy - 0.05).abs() < 1e-12);
    }

    #[test]
    fn buffers_while_registering() {
        let mut d = DeviceState::new(DeviceId(1), DeviceConfig::default());
        let p = ConsumptionProfile::constant(0.1, 5.0);
        d.on_connect(a("A1"), SimTime::ZERO);
        for k in 1..=3 {
            assert!(d.on_tick(&p, ms(100 * k)).is_empty());
        }
        assert_eq!(d.buffered_seqs(), vec![1, 2, 3]);
        d.on_message(
            Message::RegisterResponse {
                device: DeviceId(1),
                addr: a("A1"),
            },
            ms(350),
        );
        let out = d.on_tick(&p, ms(400));
        let Message::Report { samples, .. } = &out[0].msg else {
            panic!()
        };
        assert_eq!(samples.iter().map(|s| s.seq).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn idle_while_disconnected() {
        let mut d = registered(1, "A1");
        let p = ConsumptionProfile::constant(0.1, 5.0);
        d.on_disconnect(&p, SimTime::ZERO);
        assert_eq!(d.generated(), 0);
        for k in 1..=5 {
            assert!(d.on_tick(&p, ms(100 * k)).is_empty());
        }
        assert_eq!(d.generated(), 0);
    }

    #[test]
    fn disconnect_closes_partial_window() {
        let mut d = registered(1, "A1");
        let p = ConsumptionProfile::constant(0.1, 5.0);
        d.on_tick(&p, ms(100));
        d.on_disconnect(&p, ms(130));
        let last = d.buffer().last().unwrap();
        assert_eq!((last.window_start, last.window_end), (ms(100), ms(130)));
        assert!((last.energy - 0.5 * 0.03).abs() < 1e-12);
    }

    #[test]
    fn cumulative_ack_filters_buffer() {
        let mut d = registered(1, "A1");
        let p = ConsumptionProfile::constant(0.1, 5.0);
        for k in 1..=8 {
            d.on_tick(&p, ms(100 * k));
        }
        d.on_message(Message::Ack { device: DeviceId(1), through_seq: 5 }, ms(800));
        assert_eq!(d.buffered_seqs(), vec![6, 7, 8]);
        d.on_message(Message::Ack { device: DeviceId(1), through_seq: 7 }, ms(800));
        // set-filter oracle: keep seqs not covered by the ack
        let expected: Vec<u64> = [6u64, 7, 8].into_iter().filter(|s| *s > 7).collect();
        assert_eq!(d.buffered_seqs(), expected);
        d.on_message(Message::Ack { device: DeviceId(1), through_seq: 3 }, ms(800));
        assert_eq!(d.diagnostics.stale_acks, 1);
        assert_eq!(d.acked_through(), 7);
    }

    #[test]
    fn nack_triggers_temporary_registration() {
        let mut d = registered(1, "A1");
        d.on_disconnect(&ConsumptionProfile::default(), ms(10));
        d.on_connect(a("A2"), ms(20));
        assert_eq!(d.phase, Phase::Registered);
        let out = d.on_message(
            Message::Nack {
                device: DeviceId(1),
                addr: a("A2"),
            },
            ms(200),
        );
        assert_eq!(d.phase, Phase::AwaitingTempMembership);
        assert_eq!(
            out,
            vec![Outbound::broadcast(Message::RegisterRequest {
                device: DeviceId(1),
                master: Some(a("A1"))
            })]
        );
        // a second Nack for an older report does not restart the handshake
        assert!(d
            .on_message(Message::Nack { device: DeviceId(1), addr: a("A2") }, ms(210))
            .is_empty());
        d.on_message(
            Message::RegisterResponse {
                device: DeviceId(1),
                addr: a("A2"),
            },
            ms(400),
        );
        assert_eq!(d.master, Some(a("A1")), "home stays the master");
        assert_eq!(d.current_aggregator, Some(a("A2")));
    }

    #[test]
    fn retries_stalled_registration() {
        let cfg = DeviceConfig {
            register_retry: SimDuration::from_millis(300),
            ..DeviceConfig::default()
        };
        let mut d = DeviceState::new(DeviceId(1), cfg);
        let p = ConsumptionProfile::default();
        d.on_connect(a("A1"), SimTime::ZERO);
        assert!(d.on_tick(&p, ms(200)).is_empty());
        assert_eq!(d.on_tick(&p, ms(300)).len(), 1);
        assert!(d.on_tick(&p, ms(400)).is_empty());
    }

    #[test]
    fn removal_clears_master() {
        let mut d = registered(1, "A1");
        d.on_message(Message::RemoveMembership { device: DeviceId(1) }, ms(5));
        assert_eq!(d.master, None);
        assert_eq!(d.phase, Phase::Unregistered);
        let out = d.on_tick(&ConsumptionProfile::default(), ms(100));
        assert_eq!(
            out,
            vec![Outbound::broadcast(Message::RegisterRequest {
                device: DeviceId(1),
                master: None
            })]
        );
    }

    #[test]
    fn unexpected_messages_are_counted() {
        let mut d = registered(1, "A1");
        d.on_message(
            Message::ForwardAck {
                device: DeviceId(1),
                through_seq: 1,
            },
            ms(1),
        );
        assert_eq!(d.diagnostics.unexpected_messages, 1);
    }

    #[test]
    fn buffer_cap_drops_oldest() {
        let cfg = DeviceConfig {
            buffer_cap: Some(2),
            ..DeviceConfig::default()
        };
        let mut d = DeviceState::new(DeviceId(1), cfg);
        let p = ConsumptionProfile::constant(0.1, 5.0);
        d.on_connect(a("A1"), SimTime::ZERO);
        for k in 1..=4 {
            d.on_tick(&p, ms(100 * k));
        }
        assert_eq!(d.buffered_seqs(), vec![3, 4]);
        assert_eq!(d.diagnostics.overflow_dropped, 2);
    }

    #[test]
    fn bias_applies_once() {
        let mut d = registered(1, "A1").with_biases(vec![ReportBias {
            at: ms(150),
            delta_joules: 1.0,
        }]);
        let p = ConsumptionProfile::constant(0.1, 5.0);
        for k in 1..=4 {
            d.on_tick(&p, ms(100 * k));
        }
        let e: Vec<f64> = d.buffer().map(|s| s.energy).collect();
        assert!((e[1] - 0.05).abs() < 1e-12);
        assert!((e[2] - 1.05).abs() < 1e-12);
        assert!((e[3] - 0.05).abs() < 1e-12);
    }
}
