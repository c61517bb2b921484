//! Run metrics and their CSV / text renderings. Column order is fixed by the
//! field order of the row structs.

use std::fmt::Write as _;
use std::io;

use serde::Serialize;

use gridmeter_core::{joules_to_microjoules, NetworkAddress, SimTime};
use gridmeter_node::MembershipKind;

use crate::engine::{Engine, Location};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRow {
    pub aggregator: String,
    pub window: u64,
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub reported_j: f64,
    pub ground_truth_j: f64,
    /// `(ground_truth − reported) / reported × 100`; empty when nothing was reported.
    pub gap_percent: Option<f64>,
    pub expected_gap_percent: f64,
    pub tolerance_j: f64,
    pub members: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRow {
    pub device_id: u64,
    pub home_wan: String,
    pub home_aggregator: String,
    pub final_location: String,
    pub phase: String,
    pub samples_generated: u64,
    pub acked_through: u64,
    pub buffered: usize,
    pub overflow_dropped: u64,
    /// Energy ledgered by the home aggregator.
    pub reported_j: f64,
    /// True consumption while electrically connected.
    pub connected_true_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HandshakeRow {
    pub device_id: u64,
    pub host: String,
    pub home: String,
    pub start_us: u64,
    pub end_us: u64,
    pub duration_us: u64,
    pub leg_sum_us: u64,
    pub legs: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BillingRow {
    pub device_id: u64,
    pub period_start: u64,
    pub period_end: u64,
    pub energy_microjoule: u64,
    pub home_aggregator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterRow {
    pub counter: String,
    pub value: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub windows: Vec<WindowRow>,
    pub devices: Vec<DeviceRow>,
    pub handshakes: Vec<HandshakeRow>,
    pub billing: Vec<BillingRow>,
    pub counters: Vec<CounterRow>,
}

fn home_of(engine: &Engine, device: gridmeter_core::DeviceId) -> Option<&NetworkAddress> {
    engine.aggregators().iter().find_map(|(addr, agg)| {
        agg.members()
            .get(&device)
            .filter(|m| m.kind == MembershipKind::Permanent)
            .map(|_| addr)
    })
}

/// Collects metrics after a run. Billing periods are anomaly windows covering
/// `[0, billing_end)`.
pub fn collect(engine: &Engine, window_us: u64, billing_end: SimTime) -> MetricsReport {
    let mut report = MetricsReport::default();

    for (addr, agg) in engine.aggregators() {
        for v in agg.verdicts() {
            let gap = (v.reported_sum > 0.0)
                .then(|| (v.ground_truth - v.reported_sum) / v.reported_sum * 100.0);
            report.windows.push(WindowRow {
                aggregator: addr.to_string(),
                window: v.window_start.as_micros() / window_us.max(1),
                window_start_us: v.window_start.as_micros(),
                window_end_us: v.window_end.as_micros(),
                reported_j: v.reported_sum,
                ground_truth_j: v.ground_truth,
                gap_percent: gap,
                expected_gap_percent: v.expected_gap_fraction * 100.0,
                tolerance_j: v.tolerance,
                members: v.members,
                flagged: v.flagged,
            });
        }
    }

    for (id, node) in engine.devices() {
        let home = home_of(engine, *id);
        let reported_j = home
            .and_then(|h| engine.aggregator(h))
            .and_then(|a| a.billing_records().get(id))
            .map_or(0.0, |s| s.iter().map(|x| x.energy).sum());
        let end = engine.now();
        report.devices.push(DeviceRow {
            device_id: id.0,
            home_wan: node.home_wan.to_string(),
            home_aggregator: home.map_or(String::new(), |h| h.to_string()),
            final_location: match &node.location {
                Location::Wan(w) => w.to_string(),
                Location::InTransit => "in-transit".into(),
            },
            phase: format!("{:?}", node.state.phase),
            samples_generated: node.state.generated(),
            acked_through: node.state.acked_through(),
            buffered: node.state.buffer().len(),
            overflow_dropped: node.state.diagnostics.overflow_dropped,
            reported_j,
            connected_true_j: engine.grid().connected_energy(*id, SimTime::ZERO, end),
        });

        if let Some(h) = home {
            let agg = engine.aggregator(h).expect("home exists");
            let mut start = 0;
            while start < billing_end.as_micros() {
                let stop = (start + window_us).min(billing_end.as_micros());
                let e = agg
                    .bill(*id, SimTime::from_micros(start), SimTime::from_micros(stop))
                    .expect("permanent member");
                report.billing.push(BillingRow {
                    device_id: id.0,
                    period_start: start,
                    period_end: stop,
                    energy_microjoule: joules_to_microjoules(e),
                    home_aggregator: h.to_string(),
                });
                start = stop;
            }
        }
    }

    for hs in engine.handshakes() {
        report.handshakes.push(HandshakeRow {
            device_id: hs.device.0,
            host: hs.host.to_string(),
            home: hs.home.as_ref().map_or(String::new(), |h| h.to_string()),
            start_us: hs.started_at.as_micros(),
            end_us: hs.completed_at.as_micros(),
            duration_us: hs.duration().as_micros(),
            leg_sum_us: hs.leg_sum().as_micros(),
            legs: hs.legs.len(),
            complete: hs.complete,
        });
    }

    let c = engine.counters();
    let mut push = |name: String, value: u64| report.counters.push(CounterRow { counter: name, value });
    push("events".into(), c.events);
    for (k, v) in &c.sent {
        push(format!("sent.{k}"), *v);
    }
    for (k, v) in &c.delivered {
        push(format!("delivered.{k}"), *v);
    }
    for (k, v) in &c.dropped {
        push(format!("dropped.{k}"), *v);
    }
    push("moves_ignored".into(), c.moves_ignored);
    for (addr, agg) in engine.aggregators() {
        let d = &agg.diagnostics;
        for (k, v) in [
            ("duplicate_samples", d.duplicate_samples),
            ("rejected_reports", d.rejected_reports),
            ("nacks_sent", d.nacks_sent),
            ("register_rejects", d.register_rejects),
            ("stray_messages", d.stray_messages),
            ("late_samples", d.late_samples),
            ("temporary_discarded", d.temporary_discarded),
            ("blocks", agg.ledger().len() as u64),
        ] {
            push(format!("{addr}.{k}"), v);
        }
    }
    for (id, node) in engine.devices() {
        let d = &node.state.diagnostics;
        for (k, v) in [
            ("unexpected_messages", d.unexpected_messages),
            ("overflow_dropped", d.overflow_dropped),
            ("stale_acks", d.stale_acks),
        ] {
            push(format!("{id}.{k}"), v);
        }
    }
    report
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> io::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(io::Error::other)?;
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

pub const WINDOW_COLUMNS: [&str; 11] = [
    "aggregator",
    "window",
    "window_start_us",
    "window_end_us",
    "reported_j",
    "ground_truth_j",
    "gap_percent",
    "expected_gap_percent",
    "tolerance_j",
    "members",
    "flagged",
];

pub const BILLING_COLUMNS: [&str; 5] = [
    "device_id",
    "period_start",
    "period_end",
    "energy_microjoule",
    "home_aggregator",
];

impl MetricsReport {
    pub fn windows_csv(&self) -> io::Result<Vec<u8>> {
        to_csv(&self.windows, &WINDOW_COLUMNS)
    }

    pub fn devices_csv(&self) -> io::Result<Vec<u8>> {
        to_csv(
            &self.devices,
            &[
                "device_id",
                "home_wan",
                "home_aggregator",
                "final_location",
                "phase",
                "samples_generated",
                "acked_through",
                "buffered",
                "overflow_dropped",
                "reported_j",
                "connected_true_j",
            ],
        )
    }

    pub fn handshakes_csv(&self) -> io::Result<Vec<u8>> {
        to_csv(
            &self.handshakes,
            &[
                "device_id",
                "host",
                "home",
                "start_us",
                "end_us",
                "duration_us",
                "leg_sum_us",
                "legs",
                "complete",
            ],
        )
    }

    pub fn billing_csv(&self) -> io::Result<Vec<u8>> {
        to_csv(&self.billing, &BILLING_COLUMNS)
    }

    pub fn counters_csv(&self) -> io::Result<Vec<u8>> {
        to_csv(&self.counters, &["counter", "value"])
    }

    pub fn flagged_windows(&self) -> usize {
        self.windows.iter().filter(|w| w.flagged).count()
    }

    /// Human-readable overview.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "windows evaluated: {}", self.windows.len());
        let _ = writeln!(s, "windows flagged:   {}", self.flagged_windows());
        let gaps: Vec<f64> = self.windows.iter().filter_map(|w| w.gap_percent).collect();
        if !gaps.is_empty() {
            let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
            let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let _ = writeln!(s, "gap %:             min {min:.3}  mean {mean:.3}  max {max:.3}");
        }
        let _ = writeln!(s, "handshakes:        {}", self.handshakes.len());
        for h in &self.handshakes {
            let _ = writeln!(
                s,
                "  d{} -> {} (home {}): {:.6} s{}",
                h.device_id,
                h.host,
                h.home,
                h.duration_us as f64 / 1e6,
                if h.complete { "" } else { " (partial chain)" }
            );
        }
        let _ = writeln!(s, "devices:");
        for d in &self.devices {
            let _ = writeln!(
                s,
                "  d{} home={} samples={} acked={} buffered={} reported={:.6} J true={:.6} J",
                d.device_id,
                if d.home_aggregator.is_empty() { "-" } else { &d.home_aggregator },
                d.samples_generated,
                d.acked_through,
                d.buffered,
                d.reported_j,
                d.connected_true_j
            );
        }
        let dropped: u64 = self
            .counters
            .iter()
            .filter(|c| c.counter.starts_with("dropped."))
            .map(|c| c.value)
            .sum();
        let dups: u64 = self
            .counters
            .iter()
            .filter(|c| c.counter.ends_with(".duplicate_samples"))
            .map(|c| c.value)
            .sum();
        let _ = writeln!(s, "messages dropped:  {dropped}");
        let _ = writeln!(s, "duplicate samples: {dups}");
        s
    }
}
