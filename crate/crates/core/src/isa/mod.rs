//! Tensor-manipulation instruction set: instruction model, binary codec and
//! a line-oriented assembler.
//!
//! One instruction describes one whole-tensor operator. Splitting it into
//! buffer-sized pieces happens in the engine.

mod asm;
mod codec;

pub use asm::{assemble, assemble_with, disassemble, AsmError, AsmOptions};
pub use codec::{decode, decode_program, encode, encode_program, Program, MAGIC, VERSION};

use serde::Serialize;

use crate::affine::{build_affine_map, AffineMap, MapMode};
use crate::error::{Result, TmuError};
use crate::rme::{configure_mask, MaskConfig};
use crate::tensor::{output_descs, output_region, OpClass, OpKind, OperatorParams, TensorDesc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Opcode {
    Halt,
    Op(OpKind),
}

impl Opcode {
    pub fn code(self) -> u8 {
        match self {
            Opcode::Halt => 0,
            Opcode::Op(k) => k as u8 + 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Opcode> {
        match code {
            0 => Some(Opcode::Halt),
            n => OpKind::ALL.get(n as usize - 1).map(|&k| Opcode::Op(k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TmInstruction {
    pub opcode: Opcode,
    pub src0: TensorDesc,
    /// Mirrors `params.second_source`.
    pub src1: Option<TensorDesc>,
    /// First output descriptor; Split's second half follows it.
    pub dst: TensorDesc,
    pub params: OperatorParams,
    pub addr_fields: Vec<u8>,
    pub mask_fields: Vec<u8>,
    /// Forward the result to a downstream buffer instead of committing to memory.
    pub forward: bool,
}

fn empty_desc() -> TensorDesc {
    TensorDesc { height: 0, width: 0, channels: 0, elem_bytes: 0, base_addr: 0 }
}

impl TmInstruction {
    pub fn halt() -> Self {
        Self {
            opcode: Opcode::Halt,
            src0: empty_desc(),
            src1: None,
            dst: empty_desc(),
            params: OperatorParams::default(),
            addr_fields: Vec::new(),
            mask_fields: Vec::new(),
            forward: false,
        }
    }

    /// Builds a validated instruction, deriving the destination shape and
    /// the address/mask field blocks.
    pub fn new(op: OpKind, src0: TensorDesc, params: OperatorParams, dst_base: u64, mode: MapMode) -> Result<Self> {
        params.validate_for(op)?;
        let dst = output_descs(op, &src0, &params, dst_base)?[0];
        let (addr_fields, mask_fields) = match op.class() {
            OpClass::FineGrained => (Vec::new(), configure_mask(op, &src0, &params)?.serialize()),
            _ => (build_affine_map(op, &src0, &params, mode)?.encode_fields(), Vec::new()),
        };
        let i = Self {
            opcode: Opcode::Op(op),
            src0,
            src1: params.second_source,
            dst,
            params,
            addr_fields,
            mask_fields,
            forward: false,
        };
        i.validate()?;
        Ok(i)
    }

    pub fn op(&self) -> Option<OpKind> {
        match self.opcode {
            Opcode::Halt => None,
            Opcode::Op(k) => Some(k),
        }
    }

    pub fn outputs(&self) -> Result<Vec<TensorDesc>> {
        match self.op() {
            None => Ok(Vec::new()),
            Some(op) => output_descs(op, &self.src0, &self.params, self.dst.base_addr),
        }
    }

    pub fn affine_map(&self) -> Result<Option<AffineMap>> {
        if self.addr_fields.is_empty() {
            return Ok(None);
        }
        AffineMap::decode_fields(&self.addr_fields).map(Some)
    }

    pub fn mask_config(&self) -> Result<Option<MaskConfig>> {
        if self.mask_fields.is_empty() {
            return Ok(None);
        }
        MaskConfig::deserialize(&self.mask_fields).map(Some)
    }

    /// Checks the field manifest, shapes, field blocks and region overlap.
    pub fn validate(&self) -> Result<()> {
        let Some(op) = self.op() else {
            if *self != Self::halt() {
                return Err(TmuError::InvalidParam("HALT carries no operands".into()));
            }
            return Ok(());
        };
        self.params.validate_for(op)?;
        if self.src1 != self.params.second_source {
            return Err(TmuError::InvalidParam("src1 disagrees with the second-source parameter".into()));
        }
        let outs = self.outputs()?;
        if outs[0] != self.dst {
            return Err(TmuError::Shape {
                op: op.mnemonic(),
                reason: format!("destination {} does not match derived {}", self.dst, outs[0]),
            });
        }
        if let Some(b) = self.src1 {
            b.validate()?;
        }
        match op.class() {
            OpClass::FineGrained => {
                if !self.addr_fields.is_empty() {
                    return Err(TmuError::InvalidParam(format!("{op} takes no address fields")));
                }
                MaskConfig::deserialize(&self.mask_fields)?.validate()?;
            }
            _ => {
                if !self.mask_fields.is_empty() {
                    return Err(TmuError::InvalidParam(format!("{op} takes no mask fields")));
                }
                let m = AffineMap::decode_fields(&self.addr_fields)?;
                if m.op != op {
                    return Err(TmuError::InvalidParam(format!("address fields describe {}, not {op}", m.op)));
                }
            }
        }
        let out = output_region(&outs);
        for s in std::iter::once(&self.src0).chain(self.src1.as_ref()) {
            let r = s.region();
            if r.start < out.end && out.start < r.end {
                return Err(TmuError::Overlap(format!(
                    "{op}: source {s} overlaps destination [{:#x}, {:#x})",
                    out.start, out.end
                )));
            }
        }
        for d in &outs {
            if d.base_addr > u32::MAX as u64 || d.region().end > 1 << 32 {
                return Err(TmuError::InvalidParam(format!("{d} exceeds the 32-bit address field")));
            }
        }
        Ok(())
    }
}
