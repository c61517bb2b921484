//! Declarative scenario files (JSON).
//!
//! Times and durations are milliseconds and may be fractional; they are
//! rounded to the engine's 1 µs resolution. See `docs/scenario-format.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use gridmeter_core::{DeviceId, NetworkAddress, SimDuration, SimTime};
use gridmeter_node::{ConsumptionProfile, Segment};

pub const SCHEMA: &str = "gridmeter-scenario/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: f64,
    /// Extra time after metering stops for buffered data to drain.
    #[serde(default = "defaults::drain_ms")]
    pub drain_ms: f64,
    /// Anomaly-check and block-sealing window.
    #[serde(default = "defaults::window_ms")]
    pub window_ms: f64,
    /// Delay after a window closes before it is evaluated.
    #[serde(default = "defaults::grace_ms")]
    pub grace_ms: f64,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub anomaly: AnomalySpec,
    #[serde(default)]
    pub links: LinkSpec,
    pub wans: Vec<WanSpec>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub mobility: Vec<MoveSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub anomaly_injections: Vec<InjectionSpec>,
    #[serde(default)]
    pub removals: Vec<RemovalSpec>,
}

mod defaults {
    pub fn drain_ms() -> f64 {
        5_000.0
    }
    pub fn window_ms() -> f64 {
        1_000.0
    }
    pub fn grace_ms() -> f64 {
        200.0
    }
    pub fn t_measure_ms() -> f64 {
        100.0
    }
    pub fn register_retry_ms() -> f64 {
        10_000.0
    }
    pub fn nominal_voltage() -> f64 {
        5.0
    }
    pub fn slot_capacity() -> usize {
        16
    }
    pub fn access() -> super::LatencySpec {
        super::LatencySpec::Fixed { fixed_ms: 10.0 }
    }
    pub fn backhaul() -> super::LatencySpec {
        super::LatencySpec::Fixed { fixed_ms: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    #[serde(default)]
    pub device_offset_ma: f64,
    #[serde(default)]
    pub aggregator_offset_ma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    #[serde(default = "defaults::nominal_voltage")]
    pub nominal_voltage: f64,
    #[serde(default)]
    pub slack_j: f64,
    /// Temporary members silent this long are discarded; defaults to three
    /// reporting intervals of the slowest device.
    #[serde(default)]
    pub temp_timeout_ms: Option<f64>,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            nominal_voltage: defaults::nominal_voltage(),
            slack_j: 0.0,
            temp_timeout_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencySpec {
    Fixed { fixed_ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default = "defaults::access")]
    pub access: LatencySpec,
    #[serde(default = "defaults::backhaul")]
    pub backhaul: LatencySpec,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self {
            access: defaults::access(),
            backhaul: defaults::backhaul(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WanSpec {
    pub id: String,
    pub aggregator: String,
    #[serde(default = "defaults::slot_capacity")]
    pub slot_capacity: usize,
    #[serde(default)]
    pub loss_fraction: f64,
    /// Overrides `links.access` inside this WAN.
    #[serde(default)]
    pub access: Option<LatencySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub start_ms: f64,
    pub current_a: f64,
    pub voltage_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: u64,
    pub home_wan: String,
    pub profile: Vec<SegmentSpec>,
    #[serde(default = "defaults::t_measure_ms")]
    pub t_measure_ms: f64,
    #[serde(default)]
    pub buffer_cap: Option<usize>,
    #[serde(default = "defaults::register_retry_ms")]
    pub register_retry_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveSpec {
    pub device: u64,
    pub at_ms: f64,
    pub to_wan: String,
    pub transit_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    /// `access:<wan id>` or `backhaul:<aggregator>-<aggregator>`.
    pub link: String,
    pub at_ms: f64,
    pub up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSpec {
    pub device: u64,
    pub at_ms: f64,
    pub delta_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalSpec {
    pub device: u64,
    pub at_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WanId(pub String);

impl fmt::Display for WanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkId {
    Access(WanId),
    /// Stored with the lexically smaller address first.
    Backhaul(NetworkAddress, NetworkAddress),
}

impl LinkId {
    pub fn backhaul(a: NetworkAddress, b: NetworkAddress) -> Self {
        if a <= b {
            LinkId::Backhaul(a, b)
        } else {
            LinkId::Backhaul(b, a)
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (class, rest) = s.split_once(':')?;
        match class {
            "access" if !rest.is_empty() => Some(LinkId::Access(WanId(rest.to_string()))),
            "backhaul" => {
                let (a, b) = rest.split_once('-')?;
                Some(LinkId::backhaul(
                    NetworkAddress::new(a).ok()?,
                    NetworkAddress::new(b).ok()?,
                ))
            }
            _ => None,
        }
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkId::Access(w) => write!(f, "access:{w}"),
            LinkId::Backhaul(a, b) => write!(f, "backhaul:{a}-{b}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Milliseconds to microseconds, rejecting negative and non-finite values.
fn ms_to_us(field: &str, ms: f64) -> Result<u64, ScenarioError> {
    if !ms.is_finite() || ms < 0.0 {
        return Err(invalid(field, format!("expected a non-negative time, got {ms}")));
    }
    Ok((ms * 1000.0).round() as u64)
}

pub fn ms_time(ms: f64) -> SimTime {
    SimTime::from_micros((ms * 1000.0).round() as u64)
}

pub fn ms_duration(ms: f64) -> SimDuration {
    SimDuration::from_micros((ms * 1000.0).round() as u64)
}

impl LatencySpec {
    /// Inclusive latency range in microseconds.
    pub fn range_us(&self) -> (u64, u64) {
        match *self {
            LatencySpec::Fixed { fixed_ms } => {
                let us = (fixed_ms * 1000.0).round() as u64;
                (us, us)
            }
            LatencySpec::Uniform { min_ms, max_ms } => (
                (min_ms * 1000.0).round() as u64,
                (max_ms * 1000.0).round() as u64,
            ),
        }
    }

    fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        match *self {
            LatencySpec::Fixed { fixed_ms } => {
                ms_to_us(field, fixed_ms)?;
            }
            LatencySpec::Uniform { min_ms, max_ms } => {
                let lo = ms_to_us(&format!("{field}.min_ms"), min_ms)?;
                let hi = ms_to_us(&format!("{field}.max_ms"), max_ms)?;
                if lo > hi {
                    return Err(invalid(field, "min_ms exceeds max_ms"));
                }
            }
        }
        Ok(())
    }
}

impl DeviceSpec {
    pub fn consumption_profile(&self) -> Result<ConsumptionProfile, ScenarioError> {
        let mut segments = Vec::with_capacity(self.profile.len());
        for (i, s) in self.profile.iter().enumerate() {
            let start = ms_to_us(&format!("devices[id={}].profile[{i}].start_ms", self.id), s.start_ms)?;
            segments.push(Segment {
                start: SimTime::from_micros(start),
                current: s.current_a,
                voltage: s.voltage_v,
            });
        }
        ConsumptionProfile::new(segments)
            .map_err(|e| invalid(format!("devices[id={}].profile", self.id), e.to_string()))
    }

    pub fn device_id(&self) -> DeviceId {
        DeviceId(self.id)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn duration(&self) -> SimTime {
        ms_time(self.duration_ms)
    }

    pub fn wan(&self, id: &str) -> Option<&WanSpec> {
        self.wans.iter().find(|w| w.id == id)
    }

    pub fn aggregator_of(&self, wan: &str) -> Option<NetworkAddress> {
        self.wan(wan).and_then(|w| NetworkAddress::new(w.aggregator.clone()).ok())
    }

    /// Checks references, ranges and uniqueness.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(invalid(
                "schema",
                format!("unsupported schema '{}', expected '{SCHEMA}'", self.schema),
            ));
        }
        let duration = ms_to_us("duration_ms", self.duration_ms)?;
        ms_to_us("drain_ms", self.drain_ms)?;
        if ms_to_us("window_ms", self.window_ms)? == 0 {
            return Err(invalid("window_ms", "must be positive"));
        }
        ms_to_us("grace_ms", self.grace_ms)?;
        for (name, v) in [
            ("sensor.device_offset_ma", self.sensor.device_offset_ma),
            ("sensor.aggregator_offset_ma", self.sensor.aggregator_offset_ma),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if !(self.anomaly.nominal_voltage.is_finite() && self.anomaly.nominal_voltage >= 0.0) {
            return Err(invalid("anomaly.nominal_voltage", "must be non-negative"));
        }
        if !(self.anomaly.slack_j.is_finite() && self.anomaly.slack_j >= 0.0) {
            return Err(invalid("anomaly.slack_j", "must be non-negative"));
        }
        if let Some(t) = self.anomaly.temp_timeout_ms {
            ms_to_us("anomaly.temp_timeout_ms", t)?;
        }
        self.links.access.validate("links.access")?;
        self.links.backhaul.validate("links.backhaul")?;

        let mut wan_ids = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for (i, w) in self.wans.iter().enumerate() {
            let field = format!("wans[{i}]");
            if w.id.is_empty() || !wan_ids.insert(w.id.as_str()) {
                return Err(invalid(format!("{field}.id"), format!("empty or duplicate wan id '{}'", w.id)));
            }
            let addr = NetworkAddress::new(w.aggregator.clone())
                .map_err(|e| invalid(format!("{field}.aggregator"), e.to_string()))?;
            if w.aggregator.contains('-') {
                return Err(invalid(format!("{field}.aggregator"), "addresses may not contain '-'"));
            }
            if !addrs.insert(addr) {
                return Err(invalid(format!("{field}.aggregator"), "duplicate aggregator address"));
            }
            if !(w.loss_fraction.is_finite() && w.loss_fraction >= 0.0) {
                return Err(invalid(format!("{field}.loss_fraction"), "must be non-negative"));
            }
            if let Some(l) = &w.access {
                l.validate(&format!("{field}.access"))?;
            }
        }

        let mut device_ids = BTreeMap::new();
        for (i, d) in self.devices.iter().enumerate() {
            let field = format!("devices[{i}]");
            if device_ids.insert(d.id, i).is_some() {
                return Err(invalid(format!("{field}.id"), format!("duplicate device id {}", d.id)));
            }
            if self.wan(&d.home_wan).is_none() {
                return Err(invalid(format!("{field}.home_wan"), format!("unknown wan '{}'", d.home_wan)));
            }
            if ms_to_us(&format!("{field}.t_measure_ms"), d.t_measure_ms)? == 0 {
                return Err(invalid(format!("{field}.t_measure_ms"), "must be positive"));
            }
            ms_to_us(&format!("{field}.register_retry_ms"), d.register_retry_ms)?;
            d.consumption_profile()?;
        }

        let check_device = |field: String, id: u64| {
            if device_ids.contains_key(&id) {
                Ok(())
            } else {
                Err(invalid(field, format!("unknown device {id}")))
            }
        };
        let check_time = |field: String, ms: f64| -> Result<(), ScenarioError> {
            if ms_to_us(&field, ms)? > duration {
                return Err(invalid(field, "event lies beyond duration_ms"));
            }
            Ok(())
        };
        for (i, m) in self.mobility.iter().enumerate() {
            let field = format!("mobility[{i}]");
            check_device(format!("{field}.device"), m.device)?;
            check_time(format!("{field}.at_ms"), m.at_ms)?;
            ms_to_us(&format!("{field}.transit_ms"), m.transit_ms)?;
            if self.wan(&m.to_wan).is_none() {
                return Err(invalid(format!("{field}.to_wan"), format!("unknown wan '{}'", m.to_wan)));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let field = format!("faults[{i}]");
            check_time(format!("{field}.at_ms"), f.at_ms)?;
            match LinkId::parse(&f.link) {
                Some(LinkId::Access(w)) if self.wan(&w.0).is_some() => {}
                Some(LinkId::Backhaul(a, b))
                    if self.wans.iter().any(|w| w.aggregator == a.as_str())
                        && self.wans.iter().any(|w| w.aggregator == b.as_str()) => {}
                _ => {
                    return Err(invalid(format!("{field}.link"), format!("unknown link '{}'", f.link)));
                }
            }
        }
        for (i, inj) in self.anomaly_injections.iter().enumerate() {
            let field = format!("anomaly_injections[{i}]");
            check_device(format!("{field}.device"), inj.device)?;
            check_time(format!("{field}.at_ms"), inj.at_ms)?;
            if !inj.delta_j.is_finite() {
                return Err(invalid(format!("{field}.delta_j"), "must be finite"));
            }
        }
        for (i, r) in self.removals.iter().enumerate() {
            let field = format!("removals[{i}]");
            check_device(format!("{field}.device"), r.device)?;
            check_time(format!("{field}.at_ms"), r.at_ms)?;
        }
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": "gridmeter-scenario/1",
        "duration_ms": 1000,
        "wans": [{"id": "w1", "aggregator": "A1"}],
        "devices": [{"id": 1, "home_wan": "w1", "profile": [{"start_ms": 0, "current_a": 0.1, "voltage_v": 5}]}]
    }"#;

    #[test]
    fn defaults_apply() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.window_ms, 1000.0);
        assert_eq!(s.devices[0].t_measure_ms, 100.0);
        assert_eq!(s.links.backhaul.range_us(), (1000, 1000));
        assert_eq!(s.wans[0].slot_capacity, 16);
    }

    #[test]
    fn unknown_wan_reference() {
        let text = MINIMAL.replace(r#""home_wan": "w1""#, r#""home_wan": "w9""#);
        let err = Scenario::from_json(&text).unwrap_err();
        assert_eq!(err.to_string(), "devices[0].home_wan: unknown wan 'w9'");
    }

    #[test]
    fn negative_duration() {
        let text = MINIMAL.replace(r#""duration_ms": 1000"#, r#""duration_ms": -5"#);
        let err = Scenario::from_json(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid { ref field, .. } if field == "duration_ms"));
    }

    #[test]
    fn malformed_reports_position() {
        let err = Scenario::from_json("{\n  \"schema\": ,\n}").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn wrong_schema_and_unknown_field() {
        let text = MINIMAL.replace("gridmeter-scenario/1", "gridmeter-scenario/0");
        assert!(Scenario::from_json(&text).is_err());
        let text = MINIMAL.replace(r#""duration_ms""#, r#""colour": 1, "duration_ms""#);
        assert!(matches!(Scenario::from_json(&text), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn events_must_fit_duration() {
        let text = MINIMAL.replace(
            r#""wans""#,
            r#""faults": [{"link": "access:w1", "at_ms": 5000, "up": false}], "wans""#,
        );
        let err = Scenario::from_json(&text).unwrap_err();
        assert_eq!(err.to_string(), "faults[0].at_ms: event lies beyond duration_ms");
        let text = MINIMAL.replace(
            r#""wans""#,
            r#""faults": [{"link": "backhaul:A1-A7", "at_ms": 5, "up": false}], "wans""#,
        );
        assert!(Scenario::from_json(&text).is_err());
    }

    #[test]
    fn empty_device_list_is_valid() {
        let text = r#"{"schema": "gridmeter-scenario/1", "duration_ms": 0, "wans": []}"#;
        let s = Scenario::from_json(text).unwrap();
        assert!(s.devices.is_empty());
    }

    #[test]
    fn link_ids() {
        let a = NetworkAddress::new("A2").unwrap();
        let b = NetworkAddress::new("A1").unwrap();
        assert_eq!(LinkId::backhaul(a.clone(), b.clone()), LinkId::backhaul(b, a));
        assert_eq!(LinkId::parse("backhaul:A2-A1").unwrap().to_string(), "backhaul:A1-A2");
        assert_eq!(LinkId::parse("access:w1"), Some(LinkId::Access(WanId("w1".into()))));
        assert_eq!(LinkId::parse("radio:w1"), None);
    }

    #[test]
    fn json_roundtrip() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}
