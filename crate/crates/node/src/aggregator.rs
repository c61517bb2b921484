//! Aggregator protocol: membership and slot admission, report intake with
//! Ack/Nack, backhaul verification and forwarding, ground-truth comparison,
//! ledger sealing and home billing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use gridmeter_core::{
    DeviceId, Ledger, Message, MeterSample, NetworkAddress, Outbound, SimDuration, SimTime,
};

use crate::seq::SeqTracker;

/// Relative slack absorbing floating-point rounding when reported pieces are
/// summed in a different order than the ground truth.
pub const ROUNDING_ALLOWANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MembershipKind {
    Permanent,
    Temporary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipRecord {
    pub device: DeviceId,
    pub kind: MembershipKind,
    /// Home aggregator; equal to the holder for permanent records.
    pub master: NetworkAddress,
    pub slot: u32,
    pub registered_at: SimTime,
    pub last_report_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    pub slot_capacity: usize,
    /// Fraction by which the aggregator's own meter is expected to exceed the
    /// reported sum (ohmic loss).
    pub expected_gap_fraction: f64,
    /// Constant error of the aggregator's current sensor, in amperes.
    pub sensor_offset_amps: f64,
    /// Worst-case sensor error of one device over one anomaly window, joules.
    pub member_error_bound: f64,
    pub nominal_voltage: f64,
    pub window: SimDuration,
    pub tolerance_slack: f64,
    /// Discard a temporary member that has not reported for this long.
    pub temp_timeout: Option<SimDuration>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            slot_capacity: 16,
            expected_gap_fraction: 0.0,
            sensor_offset_amps: 0.0,
            member_error_bound: 0.0,
            nominal_voltage: 5.0,
            window: SimDuration::from_secs(1),
            tolerance_slack: 0.0,
            temp_timeout: Some(SimDuration::from_millis(300)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyVerdict {
    pub window_start: SimTime,
    pub window_end: SimTime,
    pub reported_sum: f64,
    pub ground_truth: f64,
    pub expected_gap_fraction: f64,
    pub tolerance: f64,
    pub members: usize,
    pub flagged: bool,
}

/// Physical view of the grid used for the aggregator's own measurement.
pub trait ElectricalModel {
    /// True energy `device` drew while attached to `aggregator`'s WAN during
    /// `[from, to)`.
    fn attached_energy(
        &self,
        device: DeviceId,
        aggregator: &NetworkAddress,
        from: SimTime,
        to: SimTime,
    ) -> f64;

    fn was_attached(
        &self,
        device: DeviceId,
        aggregator: &NetworkAddress,
        from: SimTime,
        to: SimTime,
    ) -> bool;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BillingError {
    #[error("{device} is not a permanent member of {aggregator}")]
    NotHome {
        device: DeviceId,
        aggregator: NetworkAddress,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AggregatorDiagnostics {
    pub duplicate_samples: u64,
    pub rejected_reports: u64,
    pub nacks_sent: u64,
    pub register_rejects: u64,
    pub stray_messages: u64,
    pub late_samples: u64,
    pub temporary_discarded: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct PendingRegistration {
    master: NetworkAddress,
    requested_at: SimTime,
}

#[derive(Debug, Clone)]
pub struct AggregatorState {
    pub addr: NetworkAddress,
    pub config: AggregatorConfig,
    pub diagnostics: AggregatorDiagnostics,
    members: BTreeMap<DeviceId, MembershipRecord>,
    ledger: Ledger,
    pending_verifications: BTreeMap<DeviceId, PendingRegistration>,
    /// Samples accepted directly from members, for report deduplication.
    received: BTreeMap<DeviceId, SeqTracker>,
    /// Samples ledgered and billed here (own devices, local or forwarded).
    home_seen: BTreeMap<DeviceId, SeqTracker>,
    pending_batch: Vec<MeterSample>,
    billing: BTreeMap<DeviceId, Vec<MeterSample>>,
    forward_outbox: BTreeMap<DeviceId, (NetworkAddress, Vec<MeterSample>)>,
    reported_by_window: BTreeMap<u64, f64>,
    evaluated_through: Option<u64>,
    verdicts: Vec<AnomalyVerdict>,
}

impl AggregatorState {
    pub fn new(addr: NetworkAddress, config: AggregatorConfig) -> Self {
        Self {
            ledger: Ledger::with_genesis(addr.clone()),
            addr,
            config,
            diagnostics: AggregatorDiagnostics::default(),
            members: BTreeMap::new(),
            pending_verifications: BTreeMap::new(),
            received: BTreeMap::new(),
            home_seen: BTreeMap::new(),
            pending_batch: Vec::new(),
            billing: BTreeMap::new(),
            forward_outbox: BTreeMap::new(),
            reported_by_window: BTreeMap::new(),
            evaluated_through: None,
            verdicts: Vec::new(),
        }
    }

    pub fn members(&self) -> &BTreeMap<DeviceId, MembershipRecord> {
        &self.members
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn verdicts(&self) -> &[AnomalyVerdict] {
        &self.verdicts
    }

    pub fn pending_batch(&self) -> &[MeterSample] {
        &self.pending_batch
    }

    pub fn has_pending_verification(&self, device: DeviceId) -> bool {
        self.pending_verifications.contains_key(&device)
    }

    /// Samples forwarded to a home aggregator and not yet confirmed.
    pub fn unconfirmed_forwards(&self) -> usize {
        self.forward_outbox.values().map(|(_, s)| s.len()).sum()
    }

    /// Billed samples of every device, including forwarded consumption.
    pub fn billing_records(&self) -> &BTreeMap<DeviceId, Vec<MeterSample>> {
        &self.billing
    }

    fn free_slot(&self) -> Option<u32> {
        if self.members.len() >= self.config.slot_capacity {
            return None;
        }
        let mut used: Vec<u32> = self.members.values().map(|m| m.slot).collect();
        used.sort_unstable();
        let mut slot = 0;
        for u in used {
            if u != slot {
                break;
            }
            slot += 1;
        }
        Some(slot)
    }

    fn admit(
        &mut self,
        device: DeviceId,
        kind: MembershipKind,
        master: NetworkAddress,
        now: SimTime,
    ) -> Option<()> {
        let slot = self.free_slot()?;
        self.members.insert(
            device,
            MembershipRecord {
                device,
                kind,
                master,
                slot,
                registered_at: now,
                last_report_at: now,
            },
        );
        Some(())
    }

    fn reject(&mut self, device: DeviceId) -> Outbound {
        self.diagnostics.register_rejects += 1;
        Outbound::to_device(
            device,
            Message::RegisterReject {
                device,
                addr: self.addr.clone(),
            },
        )
    }

    fn respond(&self, device: DeviceId) -> Outbound {
        Outbound::to_device(
            device,
            Message::RegisterResponse {
                device,
                addr: self.addr.clone(),
            },
        )
    }

    pub fn on_register_request(
        &mut self,
        device: DeviceId,
        master: Option<NetworkAddress>,
        now: SimTime,
    ) -> Vec<Outbound> {
        // A repeated request from a member (e.g. after a late Nack) is
        // answered again and counts as a sign of life.
        if let Some(record) = self.members.get_mut(&device) {
            record.last_report_at = record.last_report_at.max(now);
            return vec![self.respond(device)];
        }
        match master {
            Some(master) if master != self.addr => {
                if self.free_slot().is_none() {
                    return vec![self.reject(device)];
                }
                // A repeated request re-sends the verification in case it was lost.
                self.pending_verifications.insert(
                    device,
                    PendingRegistration {
                        master: master.clone(),
                        requested_at: now,
                    },
                );
                vec![Outbound::to_aggregator(
                    master.clone(),
                    Message::VerifyDeviceRequest {
                        device,
                        master,
                        requester: self.addr.clone(),
                    },
                )]
            }
            _ => match self.admit(device, MembershipKind::Permanent, self.addr.clone(), now) {
                Some(()) => vec![self.respond(device)],
                None => vec![self.reject(device)],
            },
        }
    }

    fn window_index(&self, t: SimTime) -> u64 {
        t.as_micros() / self.config.window.as_micros().max(1)
    }

    /// Spreads a sample over the anomaly windows it overlaps, assuming
    /// constant power within the sample. Portions for windows already
    /// evaluated are dropped and the sample is counted as late.
    fn attribute_to_windows(&mut self, s: &MeterSample) {
        let w = self.config.window.as_micros().max(1);
        let (start, end) = (s.window_start.as_micros(), s.window_end.as_micros());
        let len = (end - start) as f64;
        let mut late = false;
        for k in self.window_index(s.window_start)..=(end - 1) / w {
            let lo = start.max(k * w);
            let hi = end.min((k + 1) * w);
            if lo >= hi {
                continue;
            }
            if self.evaluated_through.is_some_and(|e| k <= e) {
                late = true;
                continue;
            }
            *self.reported_by_window.entry(k).or_default() += s.energy * (hi - lo) as f64 / len;
        }
        if late {
            self.diagnostics.late_samples += 1;
        }
    }

    fn ledger_and_bill(&mut self, sample: MeterSample) {
        if !self.home_seen.entry(sample.device).or_default().insert(sample.seq) {
            self.diagnostics.duplicate_samples += 1;
            return;
        }
        self.billing
            .entry(sample.device)
            .or_default()
            .push(sample.clone());
        self.pending_batch.push(sample);
    }

    pub fn on_report(
        &mut self,
        device: DeviceId,
        samples: Vec<MeterSample>,
        now: SimTime,
    ) -> Vec<Outbound> {
        let Some(record) = self.members.get_mut(&device) else {
            self.diagnostics.nacks_sent += 1;
            return vec![Outbound::to_device(
                device,
                Message::Nack {
                    device,
                    addr: self.addr.clone(),
                },
            )];
        };
        let well_formed = !samples.is_empty()
            && samples
                .iter()
                .all(|s| s.device == device && s.seq > 0 && s.is_well_formed())
            && samples.windows(2).all(|w| w[0].seq < w[1].seq);
        if !well_formed {
            self.diagnostics.rejected_reports += 1;
            return Vec::new();
        }
        record.last_report_at = now;
        let kind = record.kind;
        let master = record.master.clone();
        let through_seq = samples.last().map(|s| s.seq).unwrap_or(0);

        let tracker = self.received.entry(device).or_default();
        let fresh: Vec<MeterSample> = samples
            .into_iter()
            .filter(|s| tracker.insert(s.seq))
            .collect();
        let mut out = Vec::new();
        for s in &fresh {
            self.attribute_to_windows(s);
        }
        match kind {
            MembershipKind::Permanent => {
                for s in fresh {
                    self.ledger_and_bill(s);
                }
            }
            MembershipKind::Temporary => {
                if !fresh.is_empty() {
                    let entry = self
                        .forward_outbox
                        .entry(device)
                        .or_insert_with(|| (master.clone(), Vec::new()));
                    entry.0 = master;
                    entry.1.extend(fresh);
                }
                out.extend(self.forward(device));
            }
        }
        out.push(Outbound::to_device(device, Message::Ack { device, through_seq }));
        out
    }

    fn forward(&self, device: DeviceId) -> Option<Outbound> {
        let (master, samples) = self.forward_outbox.get(&device)?;
        if samples.is_empty() {
            return None;
        }
        Some(Outbound::to_aggregator(
            master.clone(),
            Message::ForwardConsumption {
                device,
                master: master.clone(),
                from: self.addr.clone(),
                samples: samples.clone(),
            },
        ))
    }

    /// Re-sends every unconfirmed forward.
    pub fn retransmit_forwards(&self) -> Vec<Outbound> {
        self.forward_outbox
            .keys()
            .filter_map(|d| self.forward(*d))
            .collect()
    }

    pub fn on_backhaul(&mut self, msg: Message, now: SimTime) -> Vec<Outbound> {
        match msg {
            Message::VerifyDeviceRequest {
                device, requester, ..
            } => {
                let known = self
                    .members
                    .get(&device)
                    .is_some_and(|m| m.kind == MembershipKind::Permanent);
                vec![Outbound::to_aggregator(
                    requester,
                    Message::VerifyDeviceResponse {
                        device,
                        known,
                        from: self.addr.clone(),
                    },
                )]
            }
            Message::VerifyDeviceResponse { device, known, .. } => {
                let Some(pending) = self.pending_verifications.remove(&device) else {
                    self.diagnostics.stray_messages += 1;
                    return Vec::new();
                };
                if self.members.contains_key(&device) {
                    return vec![self.respond(device)];
                }
                if known
                    && self
                        .admit(device, MembershipKind::Temporary, pending.master, now)
                        .is_some()
                {
                    vec![self.respond(device)]
                } else {
                    vec![self.reject(device)]
                }
            }
            Message::ForwardConsumption {
                device,
                master,
                from,
                samples,
            } => {
                if master != self.addr || samples.is_empty() {
                    self.diagnostics.stray_messages += 1;
                    return Vec::new();
                }
                let through_seq = samples.iter().map(|s| s.seq).max().unwrap_or(0);
                for s in samples.into_iter().filter(|s| s.device == device) {
                    self.ledger_and_bill(s);
                }
                vec![Outbound::to_aggregator(
                    from,
                    Message::ForwardAck {
                        device,
                        through_seq,
                    },
                )]
            }
            Message::ForwardAck {
                device,
                through_seq,
            } => {
                if let Some((_, pending)) = self.forward_outbox.get_mut(&device) {
                    pending.retain(|s| s.seq > through_seq);
                    if pending.is_empty() {
                        self.forward_outbox.remove(&device);
                    }
                }
                Vec::new()
            }
            Message::RemoveMembership { device } => match self.members.remove(&device) {
                Some(rec) if rec.kind == MembershipKind::Permanent => {
                    vec![Outbound::to_device(
                        device,
                        Message::RemoveMembership { device },
                    )]
                }
                _ => Vec::new(),
            },
            _ => {
                self.diagnostics.stray_messages += 1;
                Vec::new()
            }
        }
    }

    /// Entry point for every delivered message.
    pub fn on_message(&mut self, msg: Message, now: SimTime) -> Vec<Outbound> {
        match msg {
            Message::RegisterRequest { device, master } => {
                self.on_register_request(device, master, now)
            }
            Message::Report { device, samples } => self.on_report(device, samples, now),
            other => self.on_backhaul(other, now),
        }
    }

    /// The device left this WAN; a temporary membership ends immediately.
    pub fn on_device_departed(&mut self, device: DeviceId) {
        self.pending_verifications.remove(&device);
        if self
            .members
            .get(&device)
            .is_some_and(|m| m.kind == MembershipKind::Temporary)
        {
            self.members.remove(&device);
            self.diagnostics.temporary_discarded += 1;
        }
    }

    /// Drops temporary members silent for longer than the configured timeout.
    pub fn expire_temporary(&mut self, now: SimTime) {
        let Some(timeout) = self.config.temp_timeout else {
            return;
        };
        let before = self.members.len();
        self.members.retain(|_, m| {
            m.kind == MembershipKind::Permanent || now.saturating_since(m.last_report_at) <= timeout
        });
        self.diagnostics.temporary_discarded += (before - self.members.len()) as u64;
    }

    /// Network-level meter reading for `[from, to)`.
    pub fn measure_ground_truth(
        &self,
        from: SimTime,
        to: SimTime,
        grid: &dyn ElectricalModel,
    ) -> f64 {
        let drawn: f64 = self
            .members
            .keys()
            .map(|d| grid.attached_energy(*d, &self.addr, from, to))
            .sum();
        let secs = to.saturating_since(from).as_secs_f64();
        let sensor = self.config.sensor_offset_amps * self.config.nominal_voltage * secs;
        (drawn * (1.0 + self.config.expected_gap_fraction) + sensor).max(0.0)
    }

    /// Compares the reported sum of window `index` against the aggregator's
    /// own measurement. Each window is evaluated at most once.
    pub fn detect_anomaly(&mut self, index: u64, grid: &dyn ElectricalModel) -> AnomalyVerdict {
        let w = self.config.window.as_micros();
        let from = SimTime::from_micros(index * w);
        let to = SimTime::from_micros((index + 1) * w);
        let reported_sum = self.reported_by_window.remove(&index).unwrap_or(0.0);
        self.reported_by_window.retain(|k, _| *k > index);
        self.evaluated_through = Some(self.evaluated_through.map_or(index, |e| e.max(index)));
        let ground_truth = self.measure_ground_truth(from, to, grid);
        let members = self
            .members
            .keys()
            .filter(|d| grid.was_attached(**d, &self.addr, from, to))
            .count();
        let tolerance = members as f64 * self.config.member_error_bound + self.config.tolerance_slack;
        let expected = reported_sum * (1.0 + self.config.expected_gap_fraction);
        let verdict = AnomalyVerdict {
            window_start: from,
            window_end: to,
            reported_sum,
            ground_truth,
            expected_gap_fraction: self.config.expected_gap_fraction,
            tolerance,
            members,
            flagged: (ground_truth - expected).abs()
                > tolerance + ROUNDING_ALLOWANCE * ground_truth.abs().max(expected.abs()),
        };
        self.verdicts.push(verdict.clone());
        verdict
    }

    /// Writes the pending batch as one block. Returns `false` if there was
    /// nothing to seal.
    pub fn seal_block(&mut self, now: SimTime) -> bool {
        if self.pending_batch.is_empty() {
            return false;
        }
        let batch = std::mem::take(&mut self.pending_batch);
        self.ledger.append_block(batch, now, self.addr.clone());
        true
    }

    /// Billable energy of a home device over `[from, to)`, prorated by window
    /// overlap.
    pub fn bill(&self, device: DeviceId, from: SimTime, to: SimTime) -> Result<f64, BillingError> {
        if !self
            .members
            .get(&device)
            .is_some_and(|m| m.kind == MembershipKind::Permanent)
        {
            return Err(BillingError::NotHome {
                device,
                aggregator: self.addr.clone(),
            });
        }
        let Some(samples) = self.billing.get(&device) else {
            return Ok(0.0);
        };
        Ok(samples
            .iter()
            .map(|s| {
                let a = s.window_start.max(from);
                let b = s.window_end.min(to);
                if a >= b {
                    0.0
                } else {
                    s.energy * b.saturating_since(a).as_micros() as f64
                        / s.window_len().as_micros() as f64
                }
            })
            .sum())
    }
}
