//! Little-endian word encoding.
//!
//! ```text
//! word 0      opcode | flags << 8 | src elem bytes << 16 | dst elem bytes << 24
//! words 1-12  src0, src1, dst descriptors: base, height, width, channels
//! word 13     parameter presence bits
//! words 14-23 kx ky px py sx sy s thr oh ow
//! then        address block, mask block: byte length, payload padded to words
//! ```
//!
//! HALT is the single word `0`.

use crate::error::{DecodeError, Result, TmuError};
use crate::tensor::{OperatorParams, TensorDesc};

use super::{Opcode, TmInstruction};

pub const MAGIC: &[u8; 4] = b"TMU1";
pub const VERSION: u8 = 1;

const FLAG_FORWARD: u32 = 1;
const FLAG_SRC1: u32 = 2;
const FIXED_WORDS: usize = 24;

const P_KERNEL: u32 = 1;
const P_PADDING: u32 = 2;
const P_STRIDE: u32 = 4;
const P_SCALE: u32 = 8;
const P_THRESHOLD: u32 = 16;
const P_OUT_SIZE: u32 = 32;

fn field32(v: u64, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| TmuError::InvalidParam(format!("{what} = {v} overflows a 32-bit field")))
}

fn put_desc(w: &mut Vec<u32>, d: Option<&TensorDesc>) -> Result<()> {
    match d {
        None => w.extend([0; 4]),
        Some(d) => {
            w.push(field32(d.base_addr, "base address")?);
            w.extend([d.height, d.width, d.channels]);
        }
    }
    Ok(())
}

fn put_block(w: &mut Vec<u32>, bytes: &[u8]) -> Result<()> {
    w.push(field32(bytes.len() as u64, "block length")?);
    for chunk in bytes.chunks(4) {
        let mut b = [0u8; 4];
        b[..chunk.len()].copy_from_slice(chunk);
        w.push(u32::from_le_bytes(b));
    }
    Ok(())
}

pub fn encode(i: &TmInstruction) -> Result<Vec<u32>> {
    if i.opcode == Opcode::Halt {
        return Ok(vec![0]);
    }
    let eb = |d: &TensorDesc| -> Result<u32> {
        u8::try_from(d.elem_bytes)
            .map(u32::from)
            .map_err(|_| TmuError::InvalidParam(format!("element size {} overflows its field", d.elem_bytes)))
    };
    let flags = if i.forward { FLAG_FORWARD } else { 0 } | if i.src1.is_some() { FLAG_SRC1 } else { 0 };
    let mut w = vec![i.opcode.code() as u32 | flags << 8 | eb(&i.src0)? << 16 | eb(&i.dst)? << 24];
    put_desc(&mut w, Some(&i.src0))?;
    put_desc(&mut w, i.src1.as_ref())?;
    put_desc(&mut w, Some(&i.dst))?;

    let p = &i.params;
    let mut present = 0;
    let mut bit = |set: bool, b: u32| if set { present |= b };
    bit(p.kernel.is_some(), P_KERNEL);
    bit(p.padding.is_some(), P_PADDING);
    bit(p.stride.is_some(), P_STRIDE);
    bit(p.scale.is_some(), P_SCALE);
    bit(p.threshold.is_some(), P_THRESHOLD);
    bit(p.out_size.is_some(), P_OUT_SIZE);
    let (kx, ky) = p.kernel.unwrap_or_default();
    let (px, py) = p.padding.unwrap_or_default();
    let (sx, sy) = p.stride.unwrap_or_default();
    let (oh, ow) = p.out_size.unwrap_or_default();
    w.push(present);
    w.extend([kx, ky, px, py, sx, sy, p.scale.unwrap_or(0), p.threshold.unwrap_or(0) as u32, oh, ow]);

    put_block(&mut w, &i.addr_fields)?;
    put_block(&mut w, &i.mask_fields)?;
    Ok(w)
}

struct Reader<'a> {
    words: &'a [u32],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u32], DecodeError> {
        let rest = self.words.len() - self.pos;
        if rest < n {
            return Err(DecodeError::Truncated { at: self.words.len(), needed: n - rest });
        }
        let s = &self.words[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn block(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.take(1)?[0] as usize;
        let avail = (self.words.len() - self.pos) * 4;
        let n = len.div_ceil(4);
        if n * 4 > avail {
            return Err(DecodeError::LengthMismatch { declared: len, available: avail });
        }
        let mut bytes: Vec<u8> = self.take(n)?.iter().flat_map(|w| w.to_le_bytes()).collect();
        if bytes[len..].iter().any(|&b| b != 0) {
            return Err(DecodeError::Field("non-zero block padding".into()));
        }
        bytes.truncate(len);
        Ok(bytes)
    }
}

fn desc(w: &[u32], eb: u32) -> TensorDesc {
    TensorDesc { base_addr: w[0] as u64, height: w[1], width: w[2], channels: w[3], elem_bytes: eb }
}

fn decode_one(r: &mut Reader) -> Result<TmInstruction, DecodeError> {
    let w0 = r.take(1)?[0];
    let opcode = Opcode::from_code(w0 as u8).ok_or(DecodeError::UnknownOpcode(w0 as u8))?;
    if opcode == Opcode::Halt {
        if w0 != 0 {
            return Err(DecodeError::Field("HALT word carries flags".into()));
        }
        return Ok(TmInstruction::halt());
    }
    let flags = w0 >> 8 & 0xFF;
    if flags & !(FLAG_FORWARD | FLAG_SRC1) != 0 {
        return Err(DecodeError::Field(format!("unknown flags {flags:#x}")));
    }
    let (seb, deb) = (w0 >> 16 & 0xFF, w0 >> 24);
    let fixed = r.take(FIXED_WORDS - 1)?;
    let src0 = desc(&fixed[0..4], seb);
    let src1 = (flags & FLAG_SRC1 != 0).then(|| desc(&fixed[4..8], seb));
    if src1.is_none() && fixed[4..8].iter().any(|&v| v != 0) {
        return Err(DecodeError::Field("src1 descriptor set without its flag".into()));
    }
    let dst = desc(&fixed[8..12], deb);
    let present = fixed[12];
    if present & !0x3F != 0 {
        return Err(DecodeError::Field(format!("unknown parameter bits {present:#x}")));
    }
    let v = &fixed[13..23];
    let has = |bit: u32| present & bit != 0;
    let pair = |bit: u32, a: u32, b: u32| has(bit).then_some((a, b));
    let threshold = match has(P_THRESHOLD).then_some(v[7]) {
        Some(t) => Some(u8::try_from(t).map_err(|_| DecodeError::Field(format!("threshold {t}")))?),
        None => None,
    };
    let params = OperatorParams {
        kernel: pair(P_KERNEL, v[0], v[1]),
        padding: pair(P_PADDING, v[2], v[3]),
        stride: pair(P_STRIDE, v[4], v[5]),
        scale: has(P_SCALE).then_some(v[6]),
        threshold,
        out_size: pair(P_OUT_SIZE, v[8], v[9]),
        second_source: src1,
    };
    let addr_fields = r.block()?;
    let mask_fields = r.block()?;
    Ok(TmInstruction {
        opcode,
        src0,
        src1,
        dst,
        params,
        addr_fields,
        mask_fields,
        forward: flags & FLAG_FORWARD != 0,
    })
}

/// Decodes exactly one instruction; trailing words are an error.
pub fn decode(words: &[u32]) -> Result<TmInstruction> {
    let mut r = Reader { words, pos: 0 };
    let i = decode_one(&mut r)?;
    if r.pos != words.len() {
        return Err(DecodeError::Field(format!("{} trailing words", words.len() - r.pos)).into());
    }
    Ok(i)
}

/// Instructions terminated by exactly one HALT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    instructions: Vec<TmInstruction>,
}

impl Program {
    pub fn new(instructions: Vec<TmInstruction>) -> Result<Self> {
        match instructions.iter().position(|i| i.opcode == Opcode::Halt) {
            None => return Err(DecodeError::MissingHalt.into()),
            Some(p) if p + 1 != instructions.len() => {
                return Err(TmuError::InvalidParam(format!("HALT at {p} is not the last instruction")))
            }
            _ => {}
        }
        for i in &instructions {
            i.validate()?;
        }
        Ok(Self { instructions })
    }

    pub fn instructions(&self) -> &[TmInstruction] {
        &self.instructions
    }

    /// Instructions before HALT.
    pub fn body(&self) -> &[TmInstruction] {
        &self.instructions[..self.instructions.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        for w in encode_program(self)? {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != VERSION {
            return Err(DecodeError::BadHeader.into());
        }
        let body = &bytes[5..];
        if !body.len().is_multiple_of(4) {
            return Err(DecodeError::Truncated { at: body.len() / 4, needed: 1 }.into());
        }
        let words: Vec<u32> = body.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        decode_program(&words)
    }
}

pub fn encode_program(p: &Program) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for i in &p.instructions {
        out.extend(encode(i)?);
    }
    Ok(out)
}

pub fn decode_program(words: &[u32]) -> Result<Program> {
    let mut r = Reader { words, pos: 0 };
    let mut v = Vec::new();
    while r.pos < words.len() {
        let i = decode_one(&mut r)?;
        let halt = i.opcode == Opcode::Halt;
        v.push(i);
        if halt {
            if r.pos != words.len() {
                return Err(DecodeError::Field("instructions after HALT".into()).into());
            }
            return Program::new(v);
        }
    }
    Err(DecodeError::MissingHalt.into())
}
