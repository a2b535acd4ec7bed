use proptest::prelude::*;
use tmu_core::golden::{golden_execute, read_bbox_output};
use tmu_core::rme::{assemble_stream, configure_mask, evaluate_stream, MaskConfig, Segment};
use tmu_core::tensor::{OpKind, OperatorParams, SimMemory, TensorDesc};

fn assemble_config() -> impl Strategy<Value = (MaskConfig, Vec<u8>)> {
    (1u16..=u16::MAX, 1usize..16, 16u32..33, proptest::collection::vec((0u32..5, 0u32..40, 1u32..4), 0..4))
        .prop_flat_map(|(mask, group, word, segs)| {
            let slots = Just((0..word as u16).collect::<Vec<_>>()).prop_shuffle();
            (Just(mask), Just(group), Just(word), Just(segs), slots)
        })
        .prop_flat_map(|(mask, group, word, segs, slots)| {
            let cfg = MaskConfig {
                byte_mask: mask,
                dest_map: slots[..group].to_vec(),
                word_bytes: word,
                segment_counter: segs.iter().map(|&(s, t, r)| Segment::new(s, t, r)).collect(),
                ..MaskConfig::passthrough()
            };
            let len = if cfg.segment_counter.is_empty() { 0..200usize } else {
                let l = cfg.pattern_len() as usize;
                l..l + 1
            };
            (Just(cfg), proptest::collection::vec(any::<u8>(), len))
        })
}

proptest! {
    #[test]
    fn assemble_output_length_is_predictable((cfg, input) in assemble_config()) {
        let out = assemble_stream(&cfg, &input).unwrap();
        prop_assert_eq!(out.len() as u64, cfg.predicted_output_len(input.len() as u64).unwrap());
    }

    #[test]
    fn identity_assemble_on_any_stream(input in proptest::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(assemble_stream(&MaskConfig::passthrough(), &input).unwrap(), input);
    }

    #[test]
    fn rearrange_matches_golden(h in 1u32..65, w in 1u32..65, seed in any::<u64>()) {
        let src = TensorDesc::new(h, w, 3, 0);
        let mut mem = SimMemory::new((src.byte_len() * 7) as usize);
        let img: Vec<u8> = (0..src.byte_len()).map(|i| (i.wrapping_mul(seed | 1) >> 3) as u8).collect();
        mem.write(0, &img).unwrap();
        let p = OperatorParams::default();
        let dst = golden_execute(OpKind::Rearrange, &src, &p, src.byte_len(), &mut mem).unwrap()[0];
        let cfg = configure_mask(OpKind::Rearrange, &src, &p).unwrap();
        prop_assert_eq!(assemble_stream(&cfg, &img).unwrap(), mem.tensor(&dst).unwrap());
    }
}

/// Direct filter: walk pixels, read objectness at offset 4 of each record.
fn direct_filter(src: &TensorDesc, bytes: &[u8], thr: u8) -> (u32, Vec<u8>) {
    let records = src.channels as usize / 85;
    let mut out = Vec::new();
    let mut n = 0;
    for px in 0..src.pixels() as usize {
        for r in 0..records {
            let at = px * src.channels as usize + r * 85;
            if bytes[at + 4] > thr {
                out.extend_from_slice(&bytes[at..at + 85]);
                n += 1;
            }
        }
    }
    (n, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bboxcal_matches_direct_filter(
        h in 1u32..4, w in 1u32..4, c in prop_oneof![Just(85u32), Just(170), Just(255), Just(256), Just(100)],
        thr in any::<u8>(), seed in any::<u64>(),
    ) {
        let src = TensorDesc::new(h, w, c, 0);
        let bytes: Vec<u8> = (0..src.byte_len()).map(|i| ((i ^ seed).wrapping_mul(0x9E37_79B9) >> 11) as u8).collect();
        let p = OperatorParams { threshold: Some(thr), ..Default::default() };
        let (n, records) = direct_filter(&src, &bytes, thr);
        let cfg = configure_mask(OpKind::Bboxcal, &src, &p).unwrap();
        let out = evaluate_stream(&cfg, &bytes).unwrap();
        prop_assert_eq!(&out[..4], &n.to_le_bytes());
        prop_assert_eq!(&out[4..], &records[..]);

        let mut mem = SimMemory::new(0x40000);
        mem.write(0, &bytes).unwrap();
        let dst = golden_execute(OpKind::Bboxcal, &src, &p, 0x10000, &mut mem).unwrap()[0];
        let (gn, grec) = read_bbox_output(&dst, &mem).unwrap();
        prop_assert_eq!(gn, n);
        prop_assert_eq!(grec, records);
    }
}
