use std::collections::BTreeMap;

use gridmeter_core::{DeviceId, NetworkAddress, SimTime};
use gridmeter_node::{ConsumptionProfile, ElectricalModel};

/// Interval during which a device was plugged into a WAN. `to` is `None`
/// while the device is still attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub aggregator: NetworkAddress,
    pub from: SimTime,
    pub to: Option<SimTime>,
}

/// Electrical ground truth: which device drew power where, and when.
#[derive(Debug, Clone, Default)]
pub struct Grid {
    profiles: BTreeMap<DeviceId, ConsumptionProfile>,
    attachments: BTreeMap<DeviceId, Vec<Attachment>>,
    /// Consumption after this instant is not metered by anyone.
    metering_end: Option<SimTime>,
}

impl Grid {
    pub fn add_device(&mut self, device: DeviceId, profile: ConsumptionProfile) {
        self.profiles.insert(device, profile);
    }

    pub fn profile(&self, device: DeviceId) -> Option<&ConsumptionProfile> {
        self.profiles.get(&device)
    }

    pub fn attach(&mut self, device: DeviceId, aggregator: NetworkAddress, at: SimTime) {
        self.attachments.entry(device).or_default().push(Attachment {
            aggregator,
            from: at,
            to: None,
        });
    }

    pub fn detach(&mut self, device: DeviceId, at: SimTime) {
        if let Some(last) = self.attachments.get_mut(&device).and_then(|v| v.last_mut()) {
            if last.to.is_none() {
                last.to = Some(at);
            }
        }
    }

    pub fn stop_metering(&mut self, at: SimTime) {
        self.metering_end = Some(at);
    }

    pub fn attachments(&self, device: DeviceId) -> &[Attachment] {
        self.attachments.get(&device).map_or(&[], |v| v.as_slice())
    }

    /// Metered intervals of `device` at `aggregator` clipped to `[from, to)`.
    fn overlaps<'a>(
        &'a self,
        device: DeviceId,
        aggregator: Option<&'a NetworkAddress>,
        from: SimTime,
        to: SimTime,
    ) -> impl Iterator<Item = (SimTime, SimTime)> + 'a {
        let end = self.metering_end.map_or(to, |m| m.min(to));
        self.attachments(device)
            .iter()
            .filter(move |a| aggregator.is_none_or(|agg| &a.aggregator == agg))
            .filter_map(move |a| {
                let lo = a.from.max(from);
                let hi = a.to.map_or(end, |t| t.min(end));
                (lo < hi).then_some((lo, hi))
            })
    }

    /// True energy drawn by `device` over `[from, to)` wherever it was attached.
    pub fn connected_energy(&self, device: DeviceId, from: SimTime, to: SimTime) -> f64 {
        let Some(profile) = self.profiles.get(&device) else {
            return 0.0;
        };
        self.overlaps(device, None, from, to)
            .map(|(a, b)| profile.true_energy(a, b))
            .sum()
    }
}

impl ElectricalModel for Grid {
    fn attached_energy(
        &self,
        device: DeviceId,
        aggregator: &NetworkAddress,
        from: SimTime,
        to: SimTime,
    ) -> f64 {
        let Some(profile) = self.profiles.get(&device) else {
            return 0.0;
        };
        self.overlaps(device, Some(aggregator), from, to)
            .map(|(a, b)| profile.true_energy(a, b))
            .sum()
    }

    fn was_attached(
        &self,
        device: DeviceId,
        aggregator: &NetworkAddress,
        from: SimTime,
        to: SimTime,
    ) -> bool {
        self.overlaps(device, Some(aggregator), from, to).next().is_some()
    }
}
