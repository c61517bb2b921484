use serde::{Deserialize, Serialize};
use thiserror::Error;

use gridmeter_core::{compute_energy, SimTime};

/// One step of a piecewise-constant load; it lasts until the next segment
/// starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: SimTime,
    pub current: f64,
    pub voltage: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("segment {index}: current and voltage must be finite and non-negative")]
    NegativeOrNonFinite { index: usize },
    #[error("segment {index} starts at or before the previous segment")]
    Unordered { index: usize },
}

/// Load a device presents whenever it is electrically attached. Before the
/// first segment the device draws nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct ConsumptionProfile {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for ConsumptionProfile {
    type Error = ProfileError;

    fn try_from(value: Vec<Segment>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ConsumptionProfile> for Vec<Segment> {
    fn from(value: ConsumptionProfile) -> Self {
        value.segments
    }
}

impl ConsumptionProfile {
    pub fn new(segments: Vec<Segment>) -> Result<Self, ProfileError> {
        for (index, s) in segments.iter().enumerate() {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(s.current) || !ok(s.voltage) {
                return Err(ProfileError::NegativeOrNonFinite { index });
            }
            if index > 0 && s.start <= segments[index - 1].start {
                return Err(ProfileError::Unordered { index });
            }
        }
        Ok(Self { segments })
    }

    pub fn constant(current: f64, voltage: f64) -> Self {
        Self::new(vec![Segment {
            start: SimTime::ZERO,
            current,
            voltage,
        }])
        .expect("constant profile must be non-negative")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Constant pieces `(from, to, current, voltage)` covering `[from, to)`.
    pub fn pieces(&self, from: SimTime, to: SimTime) -> Vec<(SimTime, SimTime, f64, f64)> {
        let mut out = Vec::new();
        if from >= to {
            return out;
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map(|n| n.start);
            let a = seg.start.max(from);
            let b = end.map_or(to, |e| e.min(to));
            if a < b {
                out.push((a, b, seg.current, seg.voltage));
            }
        }
        out
    }

    /// Energy actually drawn over `[from, to)`.
    pub fn true_energy(&self, from: SimTime, to: SimTime) -> f64 {
        self.metered_energy(from, to, 0.0)
    }

    /// Energy as read by a current sensor with a constant `offset_amps`
    /// error. Readings are clamped at zero current.
    pub fn metered_energy(&self, from: SimTime, to: SimTime, offset_amps: f64) -> f64 {
        self.pieces(from, to)
            .into_iter()
            .map(|(a, b, current, voltage)| {
                let secs = b.saturating_since(a).as_secs_f64();
                compute_energy((current + offset_amps).max(0.0), voltage, secs)
                    .expect("profile values validated at construction")
            })
            .sum()
    }

    pub fn max_voltage(&self) -> f64 {
        self.segments.iter().map(|s| s.voltage).fold(0.0, f64::max)
    }
}
