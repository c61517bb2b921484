//! Scenario → engine wiring, and export of a finished run.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use gridmeter_core::{DeviceId, NetworkAddress, SimTime};
use gridmeter_node::{AggregatorConfig, AggregatorState, DeviceConfig, DeviceState, ReportBias};

use crate::engine::{Engine, EngineError, Event, EventKind};
use crate::metrics::{collect, MetricsReport};
use crate::scenario::{ms_duration, ms_time, LinkId, Scenario, WanId};
use crate::trace::write_ndjson;

pub struct RunOutput {
    pub scenario: Scenario,
    pub engine: Engine,
    pub metrics: MetricsReport,
    /// Time at which metering stopped.
    pub metering_end: SimTime,
    /// Time at which the run (including drain) ended.
    pub end: SimTime,
}

/// Aggregator settings derived from the scenario for WAN `index`.
pub fn aggregator_config(s: &Scenario, index: usize) -> AggregatorConfig {
    let w = &s.wans[index];
    let window = ms_duration(s.window_ms);
    let v = s.anomaly.nominal_voltage;
    let secs = window.as_secs_f64();
    let slowest = s
        .devices
        .iter()
        .map(|d| d.t_measure_ms)
        .fold(100.0_f64, f64::max);
    AggregatorConfig {
        slot_capacity: w.slot_capacity,
        expected_gap_fraction: w.loss_fraction,
        sensor_offset_amps: s.sensor.aggregator_offset_ma / 1000.0,
        member_error_bound: (s.sensor.device_offset_ma / 1000.0).abs() * v * secs,
        nominal_voltage: v,
        window,
        tolerance_slack: s.anomaly.slack_j + (s.sensor.aggregator_offset_ma / 1000.0).abs() * v * secs,
        temp_timeout: Some(ms_duration(s.anomaly.temp_timeout_ms.unwrap_or(3.0 * slowest))),
    }
}

/// Builds an engine with every scenario event scheduled. A zero-length run
/// gets topology only.
pub fn build_engine(s: &Scenario) -> Result<Engine, EngineError> {
    let mut engine = Engine::new(s.seed);
    engine.set_backhaul(s.links.backhaul.clone());
    engine.set_window(ms_duration(s.window_ms), ms_duration(s.grace_ms));
    for (i, w) in s.wans.iter().enumerate() {
        let addr = NetworkAddress::new(w.aggregator.clone())
            .map_err(|e| EngineError::Duplicate(e.to_string()))?;
        engine.add_wan(
            WanId(w.id.clone()),
            AggregatorState::new(addr, aggregator_config(s, i)),
            w.access.clone().unwrap_or_else(|| s.links.access.clone()),
            w.loss_fraction,
        )?;
    }
    let duration = s.duration();
    if duration == SimTime::ZERO {
        return Ok(engine);
    }
    for d in &s.devices {
        let biases = s
            .anomaly_injections
            .iter()
            .filter(|i| i.device == d.id)
            .map(|i| ReportBias {
                at: ms_time(i.at_ms),
                delta_joules: i.delta_j,
            })
            .collect();
        let config = DeviceConfig {
            t_measure: ms_duration(d.t_measure_ms),
            buffer_cap: d.buffer_cap,
            sensor_offset_amps: s.sensor.device_offset_ma / 1000.0,
            register_retry: ms_duration(d.register_retry_ms),
        };
        let profile = d
            .consumption_profile()
            .expect("validated scenario has valid profiles");
        engine.add_device(
            DeviceState::new(d.device_id(), config).with_biases(biases),
            profile,
            WanId(d.home_wan.clone()),
        )?;
    }
    for m in &s.mobility {
        engine.schedule(Event {
            at: ms_time(m.at_ms),
            kind: EventKind::Move {
                device: DeviceId(m.device),
                to_wan: WanId(m.to_wan.clone()),
                transit: ms_duration(m.transit_ms),
            },
        })?;
    }
    for f in &s.faults {
        let link = LinkId::parse(&f.link).expect("validated link");
        engine.schedule(Event {
            at: ms_time(f.at_ms),
            kind: EventKind::Fault { link, up: f.up },
        })?;
    }
    for r in &s.removals {
        engine.schedule(Event {
            at: ms_time(r.at_ms),
            kind: EventKind::Remove {
                device: DeviceId(r.device),
            },
        })?;
    }
    engine.plan_windows(duration, duration + ms_duration(s.drain_ms))?;
    Ok(engine)
}

/// Runs the scenario to `duration + drain`, seals the remaining batches and
/// collects metrics.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, EngineError> {
    let mut engine = build_engine(s)?;
    let metering_end = s.duration();
    let end = if metering_end == SimTime::ZERO {
        SimTime::ZERO
    } else {
        metering_end + ms_duration(s.drain_ms)
    };
    engine.run_until(end);
    engine.final_seal();
    let window_us = ms_duration(s.window_ms).as_micros();
    let metrics = collect(&engine, window_us, metering_end);
    Ok(RunOutput {
        scenario: s.clone(),
        engine,
        metrics,
        metering_end,
        end,
    })
}

/// Same scenario with a different seed.
pub fn with_seed(s: &Scenario, seed: u64) -> Scenario {
    Scenario { seed, ..s.clone() }
}

pub fn ledger_file_name(addr: &NetworkAddress) -> String {
    format!("ledger-{addr}.bin")
}

/// Merged index of all per-aggregator chains, ordered by creation time then
/// aggregator address. Hashes are the per-chain hashes; the index itself is
/// not chained.
pub fn chain_index_csv(engine: &Engine) -> io::Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (addr, agg) in engine.aggregators() {
        for b in agg.ledger().blocks() {
            rows.push((b.created_at, addr.clone(), b.index, b.payload.len(), b.prev_hash, b.hash));
        }
    }
    rows.sort_by(|a, b| (a.0, &a.1, a.2).cmp(&(b.0, &b.1, b.2)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["created_at_us", "aggregator", "index", "samples", "prev_hash", "hash"])
        .map_err(io::Error::other)?;
    for (t, addr, index, n, prev, hash) in rows {
        w.write_record([
            t.as_micros().to_string(),
            addr.to_string(),
            index.to_string(),
            n.to_string(),
            prev.to_hex(),
            hash.to_hex(),
        ])
        .map_err(io::Error::other)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

/// Writes trace, metrics, ledgers and the summary into `dir`. Returns the
/// written paths in a fixed order.
pub fn write_outputs(run: &RunOutput, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> io::Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let mut trace = Vec::new();
    write_ndjson(run.engine.trace(), &mut trace)?;
    put("trace.ndjson", trace)?;
    put("metrics.csv", run.metrics.windows_csv()?)?;
    put("devices.csv", run.metrics.devices_csv()?)?;
    put("handshakes.csv", run.metrics.handshakes_csv()?)?;
    put("billing.csv", run.metrics.billing_csv()?)?;
    put("counters.csv", run.metrics.counters_csv()?)?;
    for (addr, agg) in run.engine.aggregators() {
        put(&ledger_file_name(addr), agg.ledger().encode())?;
    }
    put("chain-index.csv", chain_index_csv(&run.engine)?)?;
    put("summary.txt", run.metrics.summary().into_bytes())?;
    Ok(written)
}
