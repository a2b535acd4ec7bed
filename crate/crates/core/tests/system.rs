use proptest::prelude::*;
use tmu_core::engine::EngineConfig;
use tmu_core::system::{
    builtin_trace, run_model_trace, schedule, schedule_segments, PortModel, Shape, StageSpec, Strategy, SystemConfig,
    TraceSpec, MODELS,
};
use tmu_core::OpKind;

fn cfg(s: Strategy) -> SystemConfig {
    SystemConfig::for_strategy(s)
}

#[test]
fn strategies_leave_identical_memory() {
    for m in MODELS {
        let runs: Vec<_> = Strategy::ALL.iter().map(|&s| run_model_trace(m, 7, &cfg(s), 11).unwrap()).collect();
        for (r, _) in &runs {
            assert!(r.all_match(), "{m} {:?} oracle mismatch", r.strategy);
        }
        assert!(runs[0].1 == runs[1].1 && runs[1].1 == runs[2].1, "{m}");
        let c: Vec<u64> = runs.iter().map(|(r, _)| r.total_cycles).collect();
        assert!(c[2] < c[1] && c[1] <= c[0], "{m}: {c:?}");
    }
}

#[test]
fn model_traces_are_multi_segment() {
    for m in MODELS {
        let (r, _) = run_model_trace(m, 7, &cfg(Strategy::Serial), 1).unwrap();
        let after_stub = r.stages.windows(2).filter(|w| w[0].tpu.is_some()).map(|w| w[1].segments);
        assert!(after_stub.clone().all(|s| s >= 2), "{m}: {:?}", after_stub.collect::<Vec<_>>());
    }
}

#[test]
fn attention_uses_full_size() {
    let t = builtin_trace("attention", 7).unwrap();
    assert_eq!((t.stages[0].h, t.stages[0].w), (Some(64), Some(768)));
    assert_eq!(t.scale, 1);
    let y = builtin_trace("yolov8", 7).unwrap();
    assert_eq!(y.input.map(|s| (s.h, s.w, s.c)), Some((640, 640, 3)));
}

#[test]
fn single_segment_gains_nothing_from_prefetch() {
    let t = TraceSpec {
        name: "one".into(),
        scale: 1,
        input: Some(Shape { h: 8, w: 8, c: 16, eb: 1 }),
        stages: vec![StageSpec::op(OpKind::Transpose)],
    };
    let a = schedule(&cfg(Strategy::Serial), &t, 0).unwrap().0;
    let b = schedule(&cfg(Strategy::Prefetch), &t, 0).unwrap().0;
    assert_eq!(a.stages[0].segments, 1);
    assert_eq!(a.total_cycles, b.total_cycles);
}

#[test]
fn prefetch_rejects_single_tmu() {
    let mut c = cfg(Strategy::Prefetch);
    c.tmu_count = 1;
    assert!(c.validate().is_err());
    c.tmu_count = 3;
    assert!(c.validate().is_err());
}

#[test]
fn forwarding_hides_stub_latency() {
    let mut stub = StageSpec::tpu(40, 16, 64);
    stub.tiles = Some(10);
    stub.cycles_per_tile = Some(1000);
    let mut ps = StageSpec::op(OpKind::PixelShuffle);
    ps.s = Some(2);
    let t = TraceSpec { name: "fwd".into(), scale: 1, input: None, stages: vec![stub, ps] };
    let eng = EngineConfig { buffer_bytes: 4096, ..EngineConfig::default() };
    let split = |s| cfg(s).with_engine(eng).with_ports(PortModel::Split);
    let (pre, _) = schedule(&split(Strategy::Prefetch), &t, 5).unwrap();
    let (fwd, _) = schedule(&split(Strategy::Forwarding), &t, 5).unwrap();
    let seg = pre.stages[1].engine.as_ref().unwrap();
    assert_eq!(seg.segments, 10);
    let c = seg.per_segment[0];
    assert!(c.load_cycles.max(c.process_cycles).max(c.store_cycles) < 1000);
    let tmu_alone = pre.total_cycles - 10_000;
    let tail = c.load_cycles + c.process_cycles + c.store_cycles;
    assert_eq!(fwd.total_cycles, 10_000 + tail);
    assert_eq!(pre.total_cycles - fwd.total_cycles, tmu_alone - tail);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pipeline_law(l in 1u64..200, p in 1u64..200, s in 1u64..200, segs in 2usize..20) {
        let costs = vec![(l, p, s); segs];
        let pre = schedule_segments(&costs, &cfg(Strategy::Prefetch).with_ports(PortModel::Split)).unwrap();
        let ser = schedule_segments(&costs, &cfg(Strategy::Serial)).unwrap();
        prop_assert_eq!(pre.makespan, l + (segs as u64 - 1) * l.max(p).max(s) + p + s);
        prop_assert_eq!(ser.makespan, segs as u64 * (l + p + s));
    }

    #[test]
    fn prefetch_never_slower(costs in prop::collection::vec((0u64..300, 0u64..300, 0u64..300), 1..24), shared in any::<bool>()) {
        let ports = if shared { PortModel::Shared } else { PortModel::Split };
        let pre = schedule_segments(&costs, &cfg(Strategy::Prefetch).with_ports(ports)).unwrap();
        let ser = schedule_segments(&costs, &cfg(Strategy::Serial).with_ports(ports)).unwrap();
        prop_assert!(pre.makespan <= ser.makespan);
        let transfer: u64 = costs.iter().map(|c| c.0 + c.2).sum();
        if shared {
            prop_assert!(pre.makespan >= transfer);
        }
    }
}
