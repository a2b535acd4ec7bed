//! One tensor manipulation unit: an eight-stage FSM over a tensor buffer
//! and a commit buffer, with an analytic DRAM cost model.
//!
//! ```text
//! Fetch → Decode → TensorLoad → {FineGrainedTM | ElementWise | CoarseGrainedTM}
//!       → TensorStore → Branch → {TensorLoad | Fetch}
//! ```

pub mod dram;
pub mod elementwise;
pub mod plan;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::affine::{advance_branch, Branch, SegmentCursor};
use crate::error::{Result, TmuError};
use crate::isa::{Opcode, Program, TmInstruction};
use crate::tensor::{OpClass, OpKind, SimMemory};

pub use dram::{DramModel, Run, TransferCost};
pub use elementwise::{elementwise_process, ElemOp};
pub use plan::{Buffers, PreparedOp, SegmentCost};

pub const DEFAULT_BUFFER_BYTES: u64 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EngineConfig {
    pub dram: DramModel,
    pub buffer_bytes: u64,
    pub fetch_cycles: u64,
    pub decode_cycles: u64,
    pub branch_cycles: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { dram: DramModel::default(), buffer_bytes: DEFAULT_BUFFER_BYTES, fetch_cycles: 0, decode_cycles: 0, branch_cycles: 0 }
    }
}

impl EngineConfig {
    /// Control cycles spent on one instruction of `segments` segments.
    pub fn control_cycles(&self, segments: u64) -> u64 {
        self.fetch_cycles + self.decode_cycles + self.branch_cycles * segments
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Fetch,
    Decode,
    TensorLoad,
    FineGrainedTM,
    ElementWise,
    CoarseGrainedTM,
    TensorStore,
    Branch,
    Idle,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Fetch => "fetch",
            Stage::Decode => "decode",
            Stage::TensorLoad => "load",
            Stage::FineGrainedTM => "fine",
            Stage::ElementWise => "elementwise",
            Stage::CoarseGrainedTM => "coarse",
            Stage::TensorStore => "store",
            Stage::Branch => "branch",
            Stage::Idle => "idle",
        }
    }

    pub fn for_class(class: OpClass) -> Stage {
        match class {
            OpClass::FineGrained => Stage::FineGrainedTM,
            OpClass::ElementWise => Stage::ElementWise,
            OpClass::CoarseGrained => Stage::CoarseGrainedTM,
        }
    }
}

/// One trace record: `cycle,stage,op,addr,len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub cycle: u64,
    pub stage: Stage,
    pub op: &'static str,
    pub addr: u64,
    pub len: u64,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{:#x},{}", self.cycle, self.stage.name(), self.op, self.addr, self.len)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub op: Option<OpKind>,
    pub load_cycles: u64,
    pub process_cycles: u64,
    pub store_cycles: u64,
    pub control_cycles: u64,
    pub total_cycles: u64,
    pub bytes_loaded: u64,
    pub bytes_stored: u64,
    pub load_bursts: u64,
    pub store_bursts: u64,
    pub segments: u64,
    pub per_segment: Vec<SegmentCost>,
}

impl CycleReport {
    pub fn add_segment(&mut self, c: SegmentCost) {
        self.load_cycles += c.load_cycles;
        self.process_cycles += c.process_cycles;
        self.store_cycles += c.store_cycles;
        self.bytes_loaded += c.bytes_loaded;
        self.bytes_stored += c.bytes_stored;
        self.load_bursts += c.load_bursts;
        self.store_bursts += c.store_bursts;
        self.segments += 1;
        self.per_segment.push(c);
    }

    /// Bytes moved over the DRAM interface.
    pub fn bytes_moved(&self) -> u64 {
        self.bytes_loaded + self.bytes_stored
    }

    pub fn bytes_per_cycle(&self) -> f64 {
        if self.total_cycles == 0 {
            return 0.0;
        }
        self.bytes_moved() as f64 / self.total_cycles as f64
    }
}

/// Architectural state visible between steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    pub stage: Stage,
    pub pc: usize,
    pub cursor: Option<SegmentCursor>,
    pub cycle: u64,
}

pub struct Engine<'p> {
    pub cfg: EngineConfig,
    program: &'p Program,
    state: EngineState,
    op: Option<PreparedOp>,
    buffers: Buffers,
    current: CycleReport,
    segment: SegmentCost,
    reports: Vec<CycleReport>,
}

impl<'p> Engine<'p> {
    pub fn new(program: &'p Program, cfg: EngineConfig) -> Self {
        Self {
            cfg,
            program,
            state: EngineState { stage: Stage::Fetch, pc: 0, cursor: None, cycle: 0 },
            op: None,
            buffers: Buffers::default(),
            current: CycleReport::default(),
            segment: SegmentCost::default(),
            reports: Vec::new(),
        }
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn reports(&self) -> &[CycleReport] {
        &self.reports
    }

    fn instr(&self) -> &TmInstruction {
        &self.program.instructions()[self.state.pc]
    }

    fn mnemonic(&self) -> &'static str {
        self.op.as_ref().map_or("halt", |o| o.op.mnemonic())
    }

    fn cursor(&self) -> Result<SegmentCursor> {
        self.state.cursor.ok_or_else(|| TmuError::Engine("no active segment".into()))
    }

    /// Advances exactly one stage and returns its trace events.
    pub fn step(&mut self, mem: &mut SimMemory) -> Result<Vec<Event>> {
        let mut events = Vec::new();
        let at = self.state.cycle;
        match self.state.stage {
            Stage::Idle => return Err(TmuError::Engine("engine is idle".into())),
            Stage::Fetch => {
                let i = self.instr();
                if i.opcode == Opcode::Halt {
                    self.state.stage = Stage::Idle;
                    return Ok(events);
                }
                self.state.cycle += self.cfg.fetch_cycles;
                self.state.stage = Stage::Decode;
            }
            Stage::Decode => {
                let op = PreparedOp::prepare(self.instr(), self.cfg.buffer_bytes, self.cfg.dram)?;
                let n = op.segment_count() as u32;
                let first = op.load_runs(0).first().map_or(0, |r| r.addr);
                self.state.cursor = Some(SegmentCursor::new(n, first, self.cfg.buffer_bytes));
                self.current = CycleReport { op: Some(op.op), ..Default::default() };
                self.current.control_cycles += self.cfg.fetch_cycles + self.cfg.decode_cycles;
                self.op = Some(op);
                self.state.cycle += self.cfg.decode_cycles;
                self.state.stage = Stage::TensorLoad;
            }
            Stage::TensorLoad => {
                let k = self.cursor()?.index as usize;
                let op = self.op.as_ref().unwrap();
                let cost = op.load(k, mem, &mut self.buffers)?;
                for r in op.load_runs(k) {
                    events.push(Event { cycle: at, stage: Stage::TensorLoad, op: op.op.mnemonic(), addr: r.addr, len: r.len });
                }
                self.segment = SegmentCost {
                    load_cycles: cost.cycles,
                    bytes_loaded: cost.bytes,
                    load_bursts: cost.bursts,
                    ..Default::default()
                };
                self.state.cycle += cost.cycles;
                self.state.stage = Stage::for_class(op.op.class());
            }
            Stage::FineGrainedTM | Stage::ElementWise | Stage::CoarseGrainedTM => {
                let k = self.cursor()?.index as usize;
                let op = self.op.as_mut().unwrap();
                let cycles = op.process(k, &mut self.buffers)?;
                events.push(Event {
                    cycle: at,
                    stage: self.state.stage,
                    op: op.op.mnemonic(),
                    addr: 0,
                    len: self.buffers.commit.len() as u64,
                });
                self.segment.process_cycles = cycles;
                self.state.cycle += cycles;
                self.state.stage = Stage::TensorStore;
            }
            Stage::TensorStore => {
                let op = self.op.as_ref().unwrap();
                let cost = op.store(mem, &self.buffers, op.instr.forward)?;
                for r in PreparedOp::store_runs(&self.buffers) {
                    events.push(Event { cycle: at, stage: Stage::TensorStore, op: op.op.mnemonic(), addr: r.addr, len: r.len });
                }
                self.segment.store_cycles = cost.cycles;
                self.segment.bytes_stored = cost.bytes;
                self.segment.store_bursts = cost.bursts;
                self.current.add_segment(self.segment);
                self.state.cycle += cost.cycles;
                self.state.stage = Stage::Branch;
            }
            Stage::Branch => {
                self.state.cycle += self.cfg.branch_cycles;
                self.current.control_cycles += self.cfg.branch_cycles;
                events.push(Event { cycle: at, stage: Stage::Branch, op: self.mnemonic(), addr: 0, len: 0 });
                match advance_branch(self.cursor()?)? {
                    Branch::Next(c) => {
                        self.state.cursor = Some(c);
                        self.state.stage = Stage::TensorLoad;
                    }
                    Branch::Done => {
                        let mut r = std::mem::take(&mut self.current);
                        r.total_cycles = r.load_cycles + r.process_cycles + r.store_cycles + r.control_cycles;
                        self.reports.push(r);
                        self.op = None;
                        self.state.cursor = None;
                        self.state.pc += 1;
                        self.state.stage = Stage::Fetch;
                    }
                }
            }
        }
        Ok(events)
    }

    /// Steps until Idle; `sink` receives every event.
    pub fn run(&mut self, mem: &mut SimMemory, mut sink: impl FnMut(&Event)) -> Result<()> {
        while self.state.stage != Stage::Idle {
            for e in self.step(mem)? {
                sink(&e);
            }
        }
        Ok(())
    }
}

pub fn run_program(p: &Program, mem: &mut SimMemory, cfg: EngineConfig) -> Result<Vec<CycleReport>> {
    let mut e = Engine::new(p, cfg);
    e.run(mem, |_| {})?;
    Ok(e.reports)
}

pub fn run_instruction(i: &TmInstruction, mem: &mut SimMemory, cfg: EngineConfig) -> Result<CycleReport> {
    let p = Program::new(vec![i.clone(), TmInstruction::halt()])?;
    Ok(run_program(&p, mem, cfg)?.remove(0))
}
