use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sched::{schedule_tasks, Task, TaskKind, Timeline};
use super::{Strategy, SystemConfig};
use crate::affine::MapMode;
use crate::cases::outputs_agree;
use crate::engine::{run_instruction, CycleReport, EngineConfig, PreparedOp};
use crate::error::{Result, TmuError};
use crate::golden::golden_execute;
use crate::isa::TmInstruction;
use crate::tensor::{output_descs, output_region, OpKind, OperatorParams, SimMemory, TensorDesc};

/// MACs the integrated TPU retires per cycle.
pub const TPU_MACS_PER_CYCLE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StageKind {
    Tpu,
    Op(OpKind),
}

impl TryFrom<String> for StageKind {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("tpu") {
            return Ok(StageKind::Tpu);
        }
        if s.eq_ignore_ascii_case("bb") {
            return Ok(StageKind::Op(OpKind::Bboxcal));
        }
        OpKind::from_mnemonic(&s)
            .or_else(|| OpKind::ALL.into_iter().find(|k| k.abbr().eq_ignore_ascii_case(&s)))
            .map(StageKind::Op)
            .ok_or_else(|| format!("unknown stage kind `{s}`"))
    }
}

impl From<StageKind> for String {
    fn from(k: StageKind) -> String {
        match k {
            StageKind::Tpu => "tpu".into(),
            StageKind::Op(op) => op.mnemonic().into(),
        }
    }
}

/// One trace stage. TPU stages use `h`, `w`, `c`, `eb` for their output
/// tensor plus the tiling fields; operator stages consume the previous
/// stage's first output and use the operator fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eb: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiles: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles_per_tile: Option<u64>,
    /// Input channels and kernel side of the convolution behind a TPU stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kx: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ky: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub py: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sx: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sy: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thr: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oh: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ow: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<u32>,
    /// Stage whose first output is the second operand; a fresh tensor otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src1: Option<usize>,
}

impl StageSpec {
    pub fn op(op: OpKind) -> Self {
        Self {
            kind: StageKind::Op(op),
            h: None,
            w: None,
            c: None,
            eb: None,
            tiles: None,
            cycles_per_tile: None,
            cin: None,
            k: None,
            s: None,
            kx: None,
            ky: None,
            px: None,
            py: None,
            sx: None,
            sy: None,
            thr: None,
            oh: None,
            ow: None,
            c1: None,
            src1: None,
        }
    }

    pub fn tpu(h: u32, w: u32, c: u32) -> Self {
        Self { kind: StageKind::Tpu, h: Some(h), w: Some(w), c: Some(c), ..Self::op(OpKind::Add) }
    }

    fn scale(mut self, s: u32) -> Self {
        self.s = Some(s);
        self
    }

    fn cin(mut self, cin: u32) -> Self {
        self.cin = Some(cin);
        self
    }

    fn c1(mut self, c1: u32) -> Self {
        self.c1 = Some(c1);
        self
    }

    fn thr(mut self, thr: u8) -> Self {
        self.thr = Some(thr);
        self
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            StageKind::Tpu => "TPU",
            StageKind::Op(op) => op.abbr(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub h: u32,
    pub w: u32,
    pub c: u32,
    #[serde(default = "one")]
    pub eb: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub name: String,
    /// Divisor applied to every spatial size.
    #[serde(default = "one")]
    pub scale: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Shape>,
    pub stages: Vec<StageSpec>,
}

impl TraceSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| TmuError::Trace(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// Operator stages in order.
    pub fn tm_ops(&self) -> Vec<OpKind> {
        self.stages
            .iter()
            .filter_map(|s| match s.kind {
                StageKind::Op(op) => Some(op),
                StageKind::Tpu => None,
            })
            .collect()
    }
}

/// Latency-only stand-in for the TPU: writes `out` in `tiles` equal
/// pieces, one every `cycles_per_tile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TpuStub {
    pub out: TensorDesc,
    pub tile_bytes: u64,
    pub tiles: u32,
    pub cycles_per_tile: u64,
}

impl TpuStub {
    pub fn new(out: TensorDesc, tiles: u32, cycles_per_tile: u64) -> Result<Self> {
        if tiles == 0 || tiles as u64 > out.byte_len() {
            return Err(TmuError::Trace(format!("{tiles} tiles for a {}-byte tensor", out.byte_len())));
        }
        Ok(Self { out, tile_bytes: out.byte_len().div_ceil(tiles as u64), tiles, cycles_per_tile })
    }

    /// Stub for a `k`×`k` convolution over `cin` input channels.
    pub fn for_conv(out: TensorDesc, cin: u32, k: u32, tiles: u32) -> Result<Self> {
        let elems = out.elems().div_ceil(tiles as u64);
        Self::new(out, tiles, (elems * (k * k * cin) as u64).div_ceil(TPU_MACS_PER_CYCLE).max(1))
    }

    pub fn total_cycles(&self) -> u64 {
        self.tiles as u64 * self.cycles_per_tile
    }

    /// Tiles that must exist before bytes below `end` of the output are valid.
    pub fn tiles_covering(&self, end: u64) -> u32 {
        let off = end.saturating_sub(self.out.base_addr).min(self.out.byte_len());
        (off.div_ceil(self.tile_bytes) as u32).clamp(1, self.tiles)
    }
}

#[derive(Debug, Clone)]
enum Resolved {
    Tpu(TpuStub),
    Tmu(TmInstruction),
}

struct Plan {
    stages: Vec<Resolved>,
    fresh: Vec<TensorDesc>,
    mem_bytes: u64,
}

struct Bump(u64);

impl Bump {
    fn take(&mut self, bytes: u64) -> u64 {
        let at = self.0;
        self.0 = (at + bytes).div_ceil(4096) * 4096;
        at
    }
}

fn resolve(spec: &TraceSpec) -> Result<Plan> {
    if spec.scale == 0 {
        return Err(TmuError::Trace("scale must be at least 1".into()));
    }
    let sc = |v: u32| (v / spec.scale).max(1);
    let mut bump = Bump(0);
    let mut fresh = Vec::new();
    let mut current = spec.input.map(|s| {
        let t = TensorDesc::new(sc(s.h), sc(s.w), s.c, 0).with_elem_bytes(s.eb);
        let at = bump.take(t.byte_len());
        fresh.push(t.at(at));
        t.at(at)
    });
    let mut firsts: Vec<Option<TensorDesc>> = Vec::new();
    let mut stages = Vec::new();
    for (i, st) in spec.stages.iter().enumerate() {
        match st.kind {
            StageKind::Tpu => {
                let (Some(h), Some(w), Some(c)) = (st.h, st.w, st.c) else {
                    return Err(TmuError::Trace(format!("stage {i}: tpu needs h, w and c")));
                };
                let t = TensorDesc::new(sc(h), sc(w), c, 0).with_elem_bytes(st.eb.unwrap_or(1));
                t.validate()?;
                let t = t.at(bump.take(t.byte_len()));
                let tiles = st.tiles.unwrap_or(8).min(t.byte_len() as u32);
                let stub = match st.cycles_per_tile {
                    Some(cyc) => TpuStub::new(t, tiles, cyc)?,
                    None => TpuStub::for_conv(t, st.cin.unwrap_or(c), st.k.unwrap_or(3), tiles)?,
                };
                stages.push(Resolved::Tpu(stub));
                firsts.push(Some(t));
                current = Some(t);
            }
            StageKind::Op(op) => {
                let src = current.ok_or_else(|| TmuError::Trace(format!("stage {i}: {op} has no input tensor")))?;
                let mut p = OperatorParams {
                    kernel: st.kx.map(|x| (x, st.ky.unwrap_or(x))),
                    padding: st.px.map(|x| (x, st.py.unwrap_or(x))),
                    stride: st.sx.map(|x| (x, st.sy.unwrap_or(x))),
                    scale: st.s,
                    threshold: st.thr,
                    out_size: st.oh.map(|h| (sc(h), sc(st.ow.unwrap_or(h)))),
                    second_source: None,
                };
                if op.needs_second_source() {
                    let b = match st.src1 {
                        Some(j) => firsts
                            .get(j)
                            .copied()
                            .flatten()
                            .filter(|_| j < i)
                            .ok_or_else(|| TmuError::Trace(format!("stage {i}: src1 {j} is not an earlier stage")))?,
                        None => {
                            let c = if op == OpKind::Route { st.c1.unwrap_or(src.channels) } else { src.channels };
                            let t = TensorDesc::new(src.height, src.width, c, 0).with_elem_bytes(src.elem_bytes);
                            let t = t.at(bump.take(t.byte_len()));
                            fresh.push(t);
                            t
                        }
                    };
                    p.second_source = Some(b);
                }
                let incompatible = |e: TmuError| TmuError::Trace(format!("stage {i} ({op}): {e}"));
                let outs = output_descs(op, &src, &p, 0).map_err(incompatible)?;
                let base = bump.take(output_region(&outs).end);
                let instr = TmInstruction::new(op, src, p, base, MapMode::OracleConsistent).map_err(incompatible)?;
                let first = instr.outputs()?[0];
                stages.push(Resolved::Tmu(instr));
                firsts.push(Some(first));
                current = Some(first);
            }
        }
    }
    Ok(Plan { stages, fresh, mem_bytes: bump.0.max(64) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub index: usize,
    pub label: &'static str,
    pub op: Option<OpKind>,
    pub start: u64,
    pub end: u64,
    pub segments: u64,
    pub engine: Option<CycleReport>,
    pub tpu: Option<TpuStub>,
    pub oracle_match: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemReport {
    pub name: String,
    pub strategy: Strategy,
    pub config: SystemConfig,
    pub total_cycles: u64,
    pub tpu_cycles: u64,
    pub stages: Vec<StageReport>,
}

impl SystemReport {
    pub fn all_match(&self) -> bool {
        self.stages.iter().all(|s| s.oracle_match != Some(false))
    }
}

fn strategy_of(cfg: &SystemConfig) -> Strategy {
    match (cfg.prefetch, cfg.forwarding) {
        (_, true) => Strategy::Forwarding,
        (true, false) => Strategy::Prefetch,
        _ => Strategy::Serial,
    }
}

/// Appends load/process/store tasks for one segmented stage and returns
/// their indices. `load_deps(k)` supplies the external dependencies of
/// segment `k`'s load.
pub fn segment_tasks(
    tasks: &mut Vec<Task>,
    stage: usize,
    costs: &[(u64, u64, u64)],
    prefetch: bool,
    load_deps: impl Fn(usize) -> Vec<usize>,
) -> Vec<[usize; 3]> {
    let mut ids: Vec<[usize; 3]> = Vec::with_capacity(costs.len());
    for (k, &(l, p, s)) in costs.iter().enumerate() {
        let e = if prefetch { (k % 2) as u32 } else { 0 };
        let base = tasks.len();
        let mut load = Task::new(TaskKind::Load, stage, k, e, l).after(load_deps(k));
        let mut proc = Task::new(TaskKind::Process, stage, k, e, p).after([base]);
        let mut store = Task::new(TaskKind::Store, stage, k, e, s).after([base + 1]);
        if let Some(prev) = k.checked_sub(1).map(|j| ids[j]) {
            if prefetch {
                load = load.after([prev[0]]);
                proc = proc.after([prev[1]]);
                store = store.after([prev[2]]);
            } else {
                load = load.after([prev[2]]);
            }
        }
        if let Some(prev2) = k.checked_sub(2).filter(|_| prefetch).map(|j| ids[j]) {
            load = load.after([prev2[1]]);
            proc = proc.after([prev2[2]]);
        }
        tasks.extend([load, proc, store]);
        ids.push([base, base + 1, base + 2]);
    }
    ids
}

/// Per-segment (load, process, store) durations of an executed stage, with
/// fetch and decode charged to the first load and branch to every store.
pub fn stage_costs(r: &CycleReport, eng: &EngineConfig) -> Vec<(u64, u64, u64)> {
    r.per_segment
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let ctrl = if k == 0 { eng.fetch_cycles + eng.decode_cycles } else { 0 };
            (c.load_cycles + ctrl, c.process_cycles, c.store_cycles + eng.branch_cycles)
        })
        .collect()
}

/// Schedules a single stage with the given per-segment costs.
pub fn schedule_segments(costs: &[(u64, u64, u64)], cfg: &SystemConfig) -> Result<Timeline> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    segment_tasks(&mut tasks, 0, costs, cfg.prefetch, |_| Vec::new());
    schedule_tasks(&tasks, cfg.ports)
}

fn stage_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Executes `spec` under `cfg`. Every operator stage is checked against the
/// golden operators on the memory it started from.
pub fn schedule(cfg: &SystemConfig, spec: &TraceSpec, seed: u64) -> Result<(SystemReport, SimMemory)> {
    cfg.validate()?;
    let plan = resolve(spec)?;
    let mut mem = SimMemory::new(plan.mem_bytes as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &plan.fresh {
        rng.fill_bytes(mem.tensor_mut(t)?);
    }

    let mut reports = Vec::new();
    let mut tasks: Vec<Task> = Vec::new();
    let mut frontier: Vec<usize> = Vec::new();
    let mut stage_tasks: Vec<Vec<usize>> = Vec::new();
    let mut prev_tiles: Option<(TpuStub, Vec<usize>)> = None;
    let eng = cfg.engine;

    for (i, st) in plan.stages.iter().enumerate() {
        match st {
            Resolved::Tpu(stub) => {
                ChaCha8Rng::seed_from_u64(stage_seed(seed, i)).fill_bytes(mem.tensor_mut(&stub.out)?);
                let mut ids = Vec::new();
                for t in 0..stub.tiles as usize {
                    let deps = if t == 0 { frontier.clone() } else { vec![ids[t - 1]] };
                    ids.push(tasks.len());
                    tasks.push(Task::new(TaskKind::Tile, i, t, u32::MAX, stub.cycles_per_tile).after(deps));
                }
                frontier = vec![*ids.last().unwrap()];
                stage_tasks.push(ids.clone());
                prev_tiles = Some((*stub, ids));
                reports.push(StageReport {
                    index: i,
                    label: "TPU",
                    op: None,
                    start: 0,
                    end: 0,
                    segments: stub.tiles as u64,
                    engine: None,
                    tpu: Some(*stub),
                    oracle_match: None,
                });
            }
            Resolved::Tmu(instr) => {
                let op = instr.op().unwrap();
                let before = mem.clone();
                let report = run_instruction(instr, &mut mem, eng)?;
                let mut golden_mem = before;
                let outs = golden_execute(op, &instr.src0, &instr.params, instr.dst.base_addr, &mut golden_mem)?;
                let (matched, _) = outputs_agree(op, &outs, &mem, &golden_mem)?;

                let costs = stage_costs(&report, &eng);
                let forward_from = prev_tiles.take().filter(|_| cfg.forwarding);
                let prepared = match &forward_from {
                    Some(_) => Some(PreparedOp::prepare(instr, eng.buffer_bytes, eng.dram)?),
                    None => None,
                };
                let barrier = frontier.clone();
                let ids = segment_tasks(&mut tasks, i, &costs, cfg.prefetch, |k| match (&forward_from, &prepared) {
                    (Some((stub, tiles)), Some(p)) => {
                        let out = stub.out.region();
                        let need = p
                            .load_runs(k)
                            .iter()
                            .filter(|r| r.addr < out.end && r.end() > out.start)
                            .map(|r| stub.tiles_covering(r.end()))
                            .max();
                        match need {
                            Some(n) => vec![tiles[n as usize - 1]],
                            None => barrier.clone(),
                        }
                    }
                    _ => barrier.clone(),
                });
                frontier = vec![ids.last().unwrap()[2]];
                stage_tasks.push(ids.iter().flatten().copied().collect());
                reports.push(StageReport {
                    index: i,
                    label: op.abbr(),
                    op: Some(op),
                    start: 0,
                    end: 0,
                    segments: report.segments,
                    engine: Some(report),
                    tpu: None,
                    oracle_match: Some(matched),
                });
            }
        }
    }

    let timeline = schedule_tasks(&tasks, cfg.ports)?;
    for (r, ids) in reports.iter_mut().zip(&stage_tasks) {
        r.start = ids.iter().map(|&t| timeline.start[t]).min().unwrap_or(0);
        r.end = ids.iter().map(|&t| timeline.end[t]).max().unwrap_or(0);
    }
    let tpu_cycles = reports.iter().filter_map(|r| r.tpu.map(|t| t.total_cycles())).sum();
    let report = SystemReport {
        name: spec.name.clone(),
        strategy: strategy_of(cfg),
        config: *cfg,
        total_cycles: timeline.makespan,
        tpu_cycles,
        stages: reports,
    };
    Ok((report, mem))
}

/// Model identifiers accepted by [`builtin_trace`].
pub const MODELS: [&str; 6] = ["espcn", "edsr", "yolov3", "yolov3-tiny", "yolov8", "attention"];

/// Operator sequences of the evaluated networks at full size, reduced by
/// `divisor`. The attention trace is already small and ignores `divisor`.
pub fn builtin_trace(name: &str, divisor: u32) -> Result<TraceSpec> {
    use OpKind::*;
    let key = name.to_ascii_lowercase();
    let img = |s: u32| Some(Shape { h: s, w: s, c: 3, eb: 1 });
    let (input, scale, stages) = match key.as_str() {
        "espcn" => (
            img(448),
            divisor,
            vec![StageSpec::op(Rearrange), StageSpec::tpu(448, 448, 27).cin(32), StageSpec::op(PixelShuffle).scale(3)],
        ),
        "edsr" => (
            img(448),
            divisor,
            vec![
                StageSpec::op(Rearrange),
                StageSpec::tpu(448, 448, 64).cin(64),
                StageSpec::op(Add),
                StageSpec::tpu(448, 448, 48).cin(64),
                StageSpec::op(PixelShuffle).scale(4),
            ],
        ),
        "yolov3" => (
            img(448),
            divisor,
            vec![
                StageSpec::op(Rearrange),
                StageSpec::tpu(224, 224, 128).cin(64),
                StageSpec::op(Upsample).scale(2),
                StageSpec::op(Route).c1(64),
                StageSpec::tpu(448, 448, 64).cin(192),
                StageSpec::op(Add),
                StageSpec::tpu(224, 224, 255).cin(64),
                StageSpec::op(Bboxcal).thr(128),
            ],
        ),
        "yolov3-tiny" => (
            img(448),
            divisor,
            vec![
                StageSpec::op(Rearrange),
                StageSpec::tpu(224, 224, 128).cin(64),
                StageSpec::op(Upsample).scale(2),
                StageSpec::op(Route).c1(64),
                StageSpec::tpu(224, 224, 255).cin(192),
                StageSpec::op(Bboxcal).thr(128),
            ],
        ),
        "yolov8" => (
            img(640),
            divisor,
            vec![
                StageSpec::op(Rearrange),
                StageSpec::tpu(320, 320, 64).cin(32),
                StageSpec::op(Split),
                StageSpec::op(Upsample).scale(2),
                StageSpec::op(Route).c1(32),
                StageSpec::op(Add),
                StageSpec::tpu(160, 160, 255).cin(64),
                StageSpec::op(Bboxcal).thr(128),
            ],
        ),
        "attention" => {
            let mut qk = StageSpec::tpu(64, 768, 1).cin(768);
            qk.eb = Some(2);
            qk.k = Some(1);
            (None, 1, vec![qk, StageSpec::op(Transpose), StageSpec::op(Route).c1(1)])
        }
        _ => return Err(TmuError::UnknownModel(name.into())),
    };
    Ok(TraceSpec { name: key, scale, input, stages })
}

pub fn run_model_trace(name: &str, divisor: u32, cfg: &SystemConfig, seed: u64) -> Result<(SystemReport, SimMemory)> {
    schedule(cfg, &builtin_trace(name, divisor)?, seed)
}
