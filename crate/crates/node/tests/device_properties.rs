use gridmeter_core::{DeviceId, Message, NetworkAddress, SimDuration, SimTime};
use gridmeter_node::{ConsumptionProfile, DeviceConfig, DeviceState, Segment};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Step {
    Advance(u64),
    Disconnect,
    Connect,
    Respond,
    AckLatest,
    AckPartial(u8),
    Nack,
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => (1u64..250).prop_map(Step::Advance),
        1 => Just(Step::Disconnect),
        1 => Just(Step::Connect),
        2 => Just(Step::Respond),
        2 => Just(Step::AckLatest),
        1 => any::<u8>().prop_map(Step::AckPartial),
        1 => Just(Step::Nack),
    ]
}

fn profile() -> ConsumptionProfile {
    ConsumptionProfile::new(vec![
        Segment { start: SimTime::ZERO, current: 0.1, voltage: 5.0 },
        Segment { start: SimTime::from_millis(700), current: 0.35, voltage: 5.0 },
        Segment { start: SimTime::from_millis(2300), current: 0.0, voltage: 5.0 },
        Segment { start: SimTime::from_millis(3100), current: 0.2, voltage: 4.8 },
    ])
    .unwrap()
}

/// Independent integral of the profile: 1 ms rectangle rule, exact for
/// segment boundaries on whole milliseconds.
fn integral_ms(from_us: u64, to_us: u64) -> f64 {
    let p = profile();
    let power_at = |t_us: u64| {
        let seg = p
            .segments()
            .iter()
            .rev()
            .find(|s| s.start.as_micros() <= t_us)
            .unwrap();
        seg.current * seg.voltage
    };
    let mut e = 0.0;
    let mut t = from_us;
    while t < to_us {
        let next = ((t / 1000) + 1) * 1000;
        let end = next.min(to_us);
        e += power_at(t) * (end - t) as f64 / 1e6;
        t = end;
    }
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn device_invariants(steps in prop::collection::vec(arb_step(), 1..120), offset_ua in 0u32..=500) {
        let id = DeviceId(1);
        let a1 = NetworkAddress::new("A1").unwrap();
        let offset = offset_ua as f64 * 1e-6;
        let cfg = DeviceConfig { sensor_offset_amps: offset, ..DeviceConfig::default() };
        let t_measure = cfg.t_measure.as_micros();
        let mut d = DeviceState::new(id, cfg);
        let p = profile();
        let mut now = SimTime::ZERO;
        d.on_connect(a1.clone(), now);

        let mut connected_since = Some(0u64);
        let mut connected_intervals: Vec<(u64, u64)> = Vec::new();
        let mut all_samples = Vec::new();
        let mut last_reported_max = 0u64;

        for step in steps {
            let before = d.generated();
            match step {
                Step::Advance(ms) => {
                    // tick at every t_measure boundary along the way, like the engine does
                    let target = now + SimDuration::from_millis(ms);
                    while d.connected && d.last_sample_at + SimDuration::from_micros(t_measure) <= target {
                        now = d.last_sample_at + SimDuration::from_micros(t_measure);
                        for o in d.on_tick(&p, now) {
                            if let Message::Report { samples, .. } = o.msg {
                                last_reported_max = samples.last().unwrap().seq;
                            }
                        }
                    }
                    now = target;
                    if !d.connected {
                        prop_assert!(d.on_tick(&p, now).is_empty(), "idle device must stay silent");
                        prop_assert_eq!(d.generated(), before);
                    }
                }
                Step::Disconnect => {
                    d.on_disconnect(&p, now);
                    if let Some(s) = connected_since.take() {
                        connected_intervals.push((s, now.as_micros()));
                    }
                }
                Step::Connect => {
                    if !d.connected {
                        d.on_connect(a1.clone(), now);
                        connected_since = Some(now.as_micros());
                    }
                }
                Step::Respond => {
                    d.on_message(Message::RegisterResponse { device: id, addr: a1.clone() }, now);
                }
                Step::AckLatest => {
                    d.on_message(Message::Ack { device: id, through_seq: last_reported_max }, now);
                }
                Step::AckPartial(k) => {
                    let through = last_reported_max.saturating_sub(k as u64 % 4);
                    d.on_message(Message::Ack { device: id, through_seq: through }, now);
                }
                Step::Nack => {
                    d.on_message(Message::Nack { device: id, addr: a1.clone() }, now);
                }
            }
            // record new samples as soon as they exist
            for s in d.buffer() {
                if s.seq > all_samples.len() as u64 {
                    all_samples.push(s.clone());
                }
            }

            // no loss: buffered seqs are exactly those above the cumulative ack
            let buffered = d.buffered_seqs();
            let expected: Vec<u64> = (d.acked_through() + 1..=d.generated()).collect();
            prop_assert_eq!(buffered, expected);
        }
        d.on_disconnect(&p, now);
        if let Some(s) = connected_since.take() {
            connected_intervals.push((s, now.as_micros()));
        }
        for s in d.buffer() {
            if s.seq > all_samples.len() as u64 {
                all_samples.push(s.clone());
            }
        }

        // gapless, strictly increasing sequence numbers
        prop_assert_eq!(all_samples.len() as u64, d.generated());
        for (i, s) in all_samples.iter().enumerate() {
            prop_assert_eq!(s.seq, i as u64 + 1);
            prop_assert!(s.window_start < s.window_end);
        }

        // energy conservation over connected intervals, within the sensor bound
        let truth: f64 = connected_intervals.iter().map(|&(a, b)| integral_ms(a, b)).sum();
        let metered: f64 = all_samples.iter().map(|s| s.energy).sum();
        let bound = offset * 5.0 * (t_measure as f64 / 1e6) * all_samples.len() as f64;
        prop_assert!((metered - truth).abs() <= bound + 1e-9,
            "metered {} truth {} bound {}", metered, truth, bound);
    }
}
