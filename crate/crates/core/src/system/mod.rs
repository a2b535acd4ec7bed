//! Two-TMU system model: double-buffered prefetch, a TPU latency stub and
//! output forwarding, driven by a deterministic discrete-event loop.
//!
//! Functional execution and timing are separate. Each stage runs its
//! segments through [`PreparedOp`] once, producing per-segment costs; the
//! scheduler then places those costs on the shared resources.

mod sched;
mod trace;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{Result, TmuError};

pub use sched::{schedule_tasks, Port, Task, TaskKind, Timeline};
pub use trace::{
    builtin_trace, run_model_trace, schedule, schedule_segments, segment_tasks, stage_costs, Shape, StageKind, StageReport, StageSpec,
    SystemReport, TpuStub, TraceSpec, MODELS, TPU_MACS_PER_CYCLE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Serial,
    Prefetch,
    Forwarding,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Serial, Strategy::Prefetch, Strategy::Forwarding];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::Prefetch => "prefetch",
            Strategy::Forwarding => "forwarding",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|x| x.name() == s.to_ascii_lowercase())
    }
}

/// How the TMUs reach DRAM. `Shared` is one channel for loads and stores
/// with round-robin arbitration; `Split` gives reads and writes their own
/// channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortModel {
    Shared,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemConfig {
    pub tmu_count: u32,
    pub engine: EngineConfig,
    pub prefetch: bool,
    pub forwarding: bool,
    pub ports: PortModel,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::for_strategy(Strategy::Serial)
    }
}

impl SystemConfig {
    pub fn for_strategy(s: Strategy) -> Self {
        let (prefetch, forwarding) = match s {
            Strategy::Serial => (false, false),
            Strategy::Prefetch => (true, false),
            Strategy::Forwarding => (true, true),
        };
        Self {
            tmu_count: if prefetch { 2 } else { 1 },
            engine: EngineConfig::default(),
            prefetch,
            forwarding,
            ports: PortModel::Shared,
        }
    }

    pub fn with_engine(mut self, engine: EngineConfig) -> Self {
        self.engine = engine;
        self
    }

    pub fn with_ports(mut self, ports: PortModel) -> Self {
        self.ports = ports;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.tmu_count) {
            return Err(TmuError::InvalidParam(format!("tmu_count {} must be 1 or 2", self.tmu_count)));
        }
        if self.prefetch && self.tmu_count != 2 {
            return Err(TmuError::InvalidParam("prefetch needs two TMUs".into()));
        }
        self.engine.dram.validate()
    }
}
