use proptest::prelude::*;
use tmu_core::cases::{check_case, random_case, seeded, Limits};
use tmu_core::engine::{run_instruction, DramModel, Engine, EngineConfig};
use tmu_core::tensor::output_region;
use tmu_core::{MapMode, OpKind, Program, TmInstruction};

const BUFFERS: [u64; 3] = [1024, 4096, 64 * 1024];

fn cfg(buffer_bytes: u64) -> EngineConfig {
    EngineConfig { buffer_bytes, ..EngineConfig::default() }
}

#[test]
fn every_operator_matches_golden() {
    for (i, op) in OpKind::ALL.into_iter().enumerate() {
        let mut rng = seeded(100 + i as u64);
        for _ in 0..40 {
            let case = random_case(op, &mut rng, Limits::default());
            let out = check_case(&case, &mut rng, cfg(64 * 1024)).unwrap();
            assert!(out.matched, "{op}: {} for {:?}", out.detail, case);
        }
    }
}

#[test]
fn segmentation_does_not_change_results() {
    let lim = Limits { max_dim: 32, max_channels: 8 };
    for (i, op) in OpKind::ALL.into_iter().enumerate() {
        let mut rng = seeded(200 + i as u64);
        for _ in 0..15 {
            let case = random_case(op, &mut rng, lim);
            let instr = case.instruction(MapMode::OracleConsistent).unwrap();
            let seed_mem = case.memory(&mut rng);
            let mut results = Vec::new();
            for b in BUFFERS {
                let mut mem = seed_mem.clone();
                let rep = run_instruction(&instr, &mut mem, cfg(b)).unwrap();
                results.push((mem, rep));
            }
            for (mem, _) in &results[1..] {
                assert!(mem == &results[0].0, "{op} output depends on buffer size");
            }
            let counts: Vec<u64> = results.iter().map(|(_, r)| r.segments).collect();
            assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{op}: {counts:?}");
        }
    }
}

#[test]
fn memory_outside_outputs_is_untouched() {
    for (i, op) in OpKind::ALL.into_iter().enumerate() {
        let mut rng = seeded(300 + i as u64);
        let case = random_case(op, &mut rng, Limits::default());
        let before = case.memory(&mut rng);
        let mut mem = before.clone();
        run_instruction(&case.instruction(MapMode::OracleConsistent).unwrap(), &mut mem, cfg(4096)).unwrap();
        let region = output_region(&case.outputs());
        let (a, b) = (before.as_bytes(), mem.as_bytes());
        assert_eq!(a[..region.start as usize], b[..region.start as usize], "{op}");
        assert_eq!(a[region.end as usize..], b[region.end as usize..], "{op}");
    }
}

#[test]
fn runs_are_deterministic() {
    for (i, op) in OpKind::ALL.into_iter().enumerate() {
        let case = random_case(op, &mut seeded(400 + i as u64), Limits::default());
        let instr = case.instruction(MapMode::OracleConsistent).unwrap();
        let program = Program::new(vec![instr, TmInstruction::halt()]).unwrap();
        let mut traces = Vec::new();
        for _ in 0..2 {
            let mut mem = case.memory(&mut seeded(500));
            let mut events = Vec::new();
            let mut engine = Engine::new(&program, cfg(2048));
            engine.run(&mut mem, |e| events.push(e.to_string())).unwrap();
            traces.push((mem, events, engine.reports().to_vec()));
        }
        assert!(traces[0] == traces[1], "{op}");
    }
}

#[test]
fn cycles_respect_bandwidth_bound() {
    let dram = DramModel::default();
    for (i, op) in OpKind::ALL.into_iter().enumerate() {
        let mut rng = seeded(600 + i as u64);
        for _ in 0..10 {
            let case = random_case(op, &mut rng, Limits::default());
            let mut mem = case.memory(&mut rng);
            let r = run_instruction(&case.instruction(MapMode::OracleConsistent).unwrap(), &mut mem, cfg(8192)).unwrap();
            assert!(r.load_cycles >= r.bytes_loaded.div_ceil(dram.bytes_per_cycle as u64), "{op}");
            assert!(r.store_cycles >= r.bytes_stored.div_ceil(dram.bytes_per_cycle as u64), "{op}");
            assert_eq!(r.total_cycles, r.load_cycles + r.process_cycles + r.store_cycles + r.control_cycles);
            assert_eq!(r.segments as usize, r.per_segment.len());
            if !matches!(op, OpKind::Resize | OpKind::Img2col) {
                assert!(r.bytes_loaded >= case.src.byte_len(), "{op} skipped input bytes");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_instances_match(op_idx in 0usize..12, seed in any::<u64>(), buf in prop::sample::select(BUFFERS.to_vec())) {
        let op = OpKind::ALL[op_idx];
        let mut rng = seeded(seed);
        let case = random_case(op, &mut rng, Limits { max_dim: 24, max_channels: 8 });
        let out = check_case(&case, &mut rng, cfg(buf)).unwrap();
        prop_assert!(out.matched, "{}: {}", op, out.detail);
    }
}
