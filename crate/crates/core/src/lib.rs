//! Tensor manipulation unit: address abstraction, instruction set, masking
//! engine, cycle-level engine model and a system pipeline simulator.

pub mod affine;
pub mod cases;
pub mod engine;
pub mod error;
pub mod fixture;
pub mod golden;
pub mod isa;
pub mod rme;
pub mod system;
pub mod tensor;

pub use affine::{
    advance_branch, build_affine_map, map_index, output_address, plan_operator, AffineMap, Branch,
    BurstPlan, MapMode, Rational, SegmentCursor,
};
pub use engine::{run_program, CycleReport, Engine, EngineConfig};
pub use error::{DecodeError, Result, TmuError};
pub use isa::{Program, TmInstruction};
pub use tensor::{OpClass, OpKind, OperatorParams, SimMemory, TensorDesc};
