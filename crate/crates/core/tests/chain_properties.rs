use gridmeter_core::{
    canonical_serialize, joules_to_microjoules, microjoules_to_joules, verify_chain, BlockHash,
    ChainStatus, DeviceId, Ledger, LedgerBlock, MeterSample, NetworkAddress, SimTime,
};
use proptest::prelude::*;

fn arb_sample() -> impl Strategy<Value = MeterSample> {
    (0u64..8, 1u64..10_000, 0u64..1_000_000_000, 1u64..1_000_000, 0u64..10_000_000).prop_map(
        |(device, seq, start, len, uj)| MeterSample {
            device: DeviceId(device),
            seq,
            window_start: SimTime::from_micros(start),
            window_end: SimTime::from_micros(start + len),
            energy: microjoules_to_joules(uj),
        },
    )
}

fn arb_addr() -> impl Strategy<Value = NetworkAddress> {
    "[A-Za-z0-9_-]{1,12}".prop_map(|s| NetworkAddress::new(s).unwrap())
}

fn arb_ledger() -> impl Strategy<Value = Ledger> {
    (
        arb_addr(),
        prop::collection::vec(prop::collection::vec(arb_sample(), 0..5), 1..12),
    )
        .prop_map(|(addr, batches)| {
            let mut ledger = Ledger::new();
            for (i, batch) in batches.into_iter().enumerate() {
                ledger.append_block(batch, SimTime::from_secs(i as u64 + 1), addr.clone());
            }
            ledger
        })
}

/// Flips bits in one serialized field of `block`, leaving the structure
/// (payload count, address length) intact.
fn mutate_field(block: &mut LedgerBlock, selector: usize, byte: usize, mask: u8) {
    let mask = mask.max(1);
    let flip_u64 = |v: u64| -> u64 {
        let mut b = v.to_be_bytes();
        b[byte % 8] ^= mask;
        u64::from_be_bytes(b)
    };
    let fields = 4 + block.payload.len() * 5;
    match selector % fields {
        0 => block.index = flip_u64(block.index),
        1 => block.prev_hash.0[byte % 32] ^= mask,
        2 => block.created_at = SimTime::from_micros(flip_u64(block.created_at.as_micros())),
        3 => {
            let mut bytes = block.aggregator.as_str().as_bytes().to_vec();
            let i = byte % bytes.len();
            // stay inside ASCII so the address remains valid UTF-8
            bytes[i] ^= (mask & 0x7F).max(1);
            block.aggregator = NetworkAddress::new(String::from_utf8(bytes).unwrap()).unwrap();
        }
        n => {
            let s = &mut block.payload[(n - 4) / 5];
            match (n - 4) % 5 {
                0 => s.device = DeviceId(flip_u64(s.device.0)),
                1 => s.seq = flip_u64(s.seq),
                2 => s.window_start = SimTime::from_micros(flip_u64(s.window_start.as_micros())),
                3 => s.window_end = SimTime::from_micros(flip_u64(s.window_end.as_micros())),
                _ => {
                    // keep the mutated value well below 2^53 so it round-trips through f64
                    let uj = s.energy_microjoules();
                    let mut b = uj.to_be_bytes();
                    b[4 + byte % 4] ^= mask;
                    s.energy = microjoules_to_joules(u64::from_be_bytes(b));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn built_ledgers_verify(ledger in arb_ledger()) {
        prop_assert_eq!(verify_chain(&ledger), ChainStatus::Valid);
        prop_assert_eq!(Ledger::decode(&ledger.encode()).unwrap(), ledger);
    }

    #[test]
    fn single_field_mutation_is_detected(
        ledger in arb_ledger(),
        block_pick in any::<prop::sample::Index>(),
        selector in any::<usize>(),
        byte in any::<usize>(),
        mask in any::<u8>(),
        hit_hash in any::<bool>(),
    ) {
        let mut blocks = ledger.into_blocks();
        let target = block_pick.index(blocks.len());
        if hit_hash {
            blocks[target].hash.0[byte % 32] ^= mask.max(1);
        } else {
            mutate_field(&mut blocks[target], selector, byte, mask);
        }
        match verify_chain(&Ledger::from_blocks(blocks)) {
            ChainStatus::Invalid { index } => prop_assert!(index <= target as u64),
            ChainStatus::Valid => prop_assert!(false, "mutation of block {} went undetected", target),
        }
    }

    #[test]
    fn any_file_byte_flip_is_never_valid(ledger in arb_ledger(), pos in any::<prop::sample::Index>(), mask in 1u8..=255) {
        let mut bytes = ledger.encode();
        let i = pos.index(bytes.len());
        bytes[i] ^= mask;
        if let Ok(decoded) = Ledger::decode(&bytes) {
            prop_assert!(!verify_chain(&decoded).is_valid());
        }
    }

    #[test]
    fn serialization_is_injective(
        a in (any::<u64>(), prop::collection::vec(arb_sample(), 0..4), 0u64..1 << 40, arb_addr()),
        b in (any::<u64>(), prop::collection::vec(arb_sample(), 0..4), 0u64..1 << 40, arb_addr()),
    ) {
        let enc = |(index, payload, t, addr): &(u64, Vec<MeterSample>, u64, NetworkAddress)| {
            canonical_serialize(*index, &BlockHash::ZERO, payload, SimTime::from_micros(*t), addr)
        };
        let key = |(index, payload, t, addr): &(u64, Vec<MeterSample>, u64, NetworkAddress)| {
            let samples: Vec<_> = payload
                .iter()
                .map(|s| (s.device, s.seq, s.window_start, s.window_end, joules_to_microjoules(s.energy)))
                .collect();
            (*index, samples, *t, addr.clone())
        };
        prop_assert_eq!(enc(&a) == enc(&b), key(&a) == key(&b));
    }
}
