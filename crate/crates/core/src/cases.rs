//! Random operator instances for equivalence checking.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affine::MapMode;
use crate::engine::{run_instruction, CycleReport, EngineConfig};
use crate::error::Result;
use crate::golden::{compare_tensors, golden_execute, read_bbox_output, MatchReport};
use crate::isa::TmInstruction;
use crate::tensor::{output_descs, output_region, OpKind, OperatorParams, SimMemory, TensorDesc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Limits {
    pub max_dim: u32,
    pub max_channels: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_dim: 64, max_channels: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Case {
    pub op: OpKind,
    pub src: TensorDesc,
    pub params: OperatorParams,
    pub dst_base: u64,
    pub mem_bytes: u64,
}

fn align(v: u64) -> u64 {
    v.div_ceil(64) * 64
}

fn pick<R: Rng>(rng: &mut R, lo: u32, hi: u32) -> u32 {
    rng.gen_range(lo..=hi.max(lo))
}

/// Draws a valid instance of `op` within `lim`. Box decoding needs whole
/// 85-byte records, so its channel count ignores `max_channels`.
pub fn random_case<R: Rng>(op: OpKind, rng: &mut R, lim: Limits) -> Case {
    let d = lim.max_dim;
    let cmax = lim.max_channels;
    let mut h = pick(rng, 1, d);
    let mut w = pick(rng, 1, d);
    let mut c = pick(rng, 1, cmax);
    let mut eb = 1;
    let mut p = OperatorParams::default();
    match op {
        OpKind::Rearrange | OpKind::Transpose | OpKind::Rot90 | OpKind::Upsample | OpKind::Route => {
            eb = [1, 1, 2, 4][rng.gen_range(0..4)];
        }
        _ => {}
    }
    match op {
        OpKind::Resize => {
            if rng.gen_bool(0.5) {
                let s = pick(rng, 1, 4.min(d));
                h = pick(rng, 1, d / s) * s;
                w = pick(rng, 1, d / s) * s;
                p.scale = Some(s);
            } else {
                p.out_size = Some((pick(rng, 1, d), pick(rng, 1, d)));
            }
        }
        OpKind::Bboxcal => {
            c = pick(rng, 85, 300);
            h = pick(rng, 1, d.min(16));
            w = pick(rng, 1, d.min(16));
            p.threshold = Some(rng.gen());
        }
        OpKind::Img2col => {
            let pad = (pick(rng, 0, 2), pick(rng, 0, 2));
            let k = (pick(rng, 1, 5.min(w + 2 * pad.0)), pick(rng, 1, 5.min(h + 2 * pad.1)));
            p.kernel = Some(k);
            if rng.gen_bool(0.7) {
                p.padding = Some(pad);
            } else {
                p.kernel = Some((k.0.min(w), k.1.min(h)));
            }
            if rng.gen_bool(0.7) {
                p.stride = Some((pick(rng, 1, 3), pick(rng, 1, 3)));
            }
        }
        OpKind::PixelShuffle => {
            let s = [1, 2, 2, 3, 4][rng.gen_range(0..5)];
            c = pick(rng, 1, (cmax / (s * s)).max(1)) * s * s;
            p.scale = Some(s);
        }
        OpKind::PixelUnshuffle => {
            let s = pick(rng, 1, 4.min(d));
            h = pick(rng, 1, d / s) * s;
            w = pick(rng, 1, d / s) * s;
            p.scale = Some(s);
        }
        OpKind::Upsample => p.scale = Some(pick(rng, 1, 4)),
        OpKind::Split => c = pick(rng, 1, (cmax / 2).max(1)) * 2,
        _ => {}
    }
    let src = TensorDesc::new(h, w, c, 0).with_elem_bytes(eb);
    let c1 = (op == OpKind::Route).then(|| pick(rng, 1, cmax));
    Case::new(op, src, p, c1).expect("generated case is valid")
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Case {
    /// Lays out `src`, a second operand when `op` needs one, and the
    /// outputs back to back from address 0. `c1` is the Route operand depth.
    pub fn new(op: OpKind, src: TensorDesc, mut params: OperatorParams, c1: Option<u32>) -> Result<Case> {
        let src = src.at(0);
        let mut next = align(src.byte_len());
        if op.needs_second_source() {
            let c = c1.unwrap_or(src.channels);
            let b = TensorDesc::new(src.height, src.width, c, next).with_elem_bytes(src.elem_bytes);
            next += align(b.byte_len());
            params.second_source = Some(b);
        }
        let outs = output_descs(op, &src, &params, next)?;
        let mem_bytes = align(output_region(&outs).end);
        Ok(Case { op, src, params, dst_base: next, mem_bytes })
    }

    pub fn instruction(&self, mode: MapMode) -> Result<TmInstruction> {
        TmInstruction::new(self.op, self.src, self.params, self.dst_base, mode)
    }

    /// Memory with every source filled from `rng`.
    pub fn memory<R: RngCore>(&self, rng: &mut R) -> SimMemory {
        let mut mem = SimMemory::new(self.mem_bytes as usize);
        for t in std::iter::once(&self.src).chain(self.params.second_source.as_ref()) {
            rng.fill_bytes(mem.tensor_mut(t).unwrap());
        }
        mem
    }

    pub fn outputs(&self) -> Vec<TensorDesc> {
        output_descs(self.op, &self.src, &self.params, self.dst_base).unwrap()
    }

    pub fn tolerance(&self) -> u32 {
        tolerance(self.op)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub case: Case,
    pub matched: bool,
    pub detail: String,
    pub report: Option<CycleReport>,
}

/// Runs `case` through the engine and the golden operators on the same memory.
pub fn check_case<R: RngCore>(case: &Case, rng: &mut R, cfg: EngineConfig) -> Result<CheckOutcome> {
    check_case_with(case, rng, cfg, MapMode::OracleConsistent)
}

pub fn check_case_with<R: RngCore>(case: &Case, rng: &mut R, cfg: EngineConfig, mode: MapMode) -> Result<CheckOutcome> {
    let mut engine_mem = case.memory(rng);
    let mut golden_mem = engine_mem.clone();
    let report = run_instruction(&case.instruction(mode)?, &mut engine_mem, cfg)?;
    let outs = golden_execute(case.op, &case.src, &case.params, case.dst_base, &mut golden_mem)?;
    let (matched, detail) = outputs_agree(case.op, &outs, &engine_mem, &golden_mem)?;
    Ok(CheckOutcome { case: case.clone(), matched, detail, report: Some(report) })
}

/// Allowed absolute difference per output byte.
pub fn tolerance(op: OpKind) -> u32 {
    if op == OpKind::Resize {
        1
    } else {
        0
    }
}

/// Compares the outputs `outs` of `op` between two memories.
pub fn outputs_agree(op: OpKind, outs: &[TensorDesc], ours: &SimMemory, golden: &SimMemory) -> Result<(bool, String)> {
    if op == OpKind::Bboxcal {
        let a = read_bbox_output(&outs[0], ours)?;
        let g = read_bbox_output(&outs[0], golden)?;
        return Ok((a == g, format!("{} survivors vs {} expected", a.0, g.0)));
    }
    for d in outs {
        if let MatchReport::Mismatch { at, left, right } = compare_tensors(d, ours, d, golden, tolerance(op))? {
            return Ok((false, format!("{d}: engine {left:?} vs golden {right:?} at {at:?}")));
        }
    }
    Ok((true, "match".into()))
}

/// The operator configuration table: every operator at 448x448, spatial
/// sizes divided by `scale`.
pub fn table3_cases(scale: u32) -> Vec<Case> {
    let side = (448 / scale.max(1)).max(1);
    OpKind::ALL
        .into_iter()
        .map(|op| {
            let mut p = OperatorParams::default();
            let c = match op {
                OpKind::Rearrange | OpKind::Resize => 3,
                OpKind::Bboxcal => 256,
                _ => 64,
            };
            match op {
                OpKind::Resize | OpKind::PixelShuffle | OpKind::PixelUnshuffle | OpKind::Upsample => p.scale = Some(2),
                OpKind::Bboxcal => p.threshold = Some(128),
                OpKind::Img2col => p.kernel = Some((3, 3)),
                _ => {}
            }
            let c1 = (op == OpKind::Route).then_some(64);
            Case::new(op, TensorDesc::new(side, side, c, 0), p, c1).expect("table rows are valid")
        })
        .collect()
}
