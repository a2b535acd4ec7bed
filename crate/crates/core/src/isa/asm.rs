//! Assembly text: `opcode key=value ...`, one instruction per line or
//! separated by `;`, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::affine::MapMode;
use crate::tensor::{OpKind, OperatorParams, TensorDesc};

use super::{Opcode, Program, TmInstruction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsmOptions {
    pub mode: MapMode,
}

impl Default for AsmOptions {
    fn default() -> Self {
        Self { mode: MapMode::OracleConsistent }
    }
}

const KEYS: &[&str] = &[
    "src", "src1", "dst", "h", "w", "c", "c1", "eb", "kx", "ky", "px", "py", "sx", "sy", "s", "thr",
    "oh", "ow", "fwd",
];

fn tokens(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(b)) => {
                out.push((b, &s[b..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(b) = start {
        out.push((b, &s[b..]));
    }
    out
}

fn parse_int(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

struct Stmt<'a> {
    line: usize,
    col: usize,
    op: &'a str,
    args: BTreeMap<&'a str, (u64, usize)>,
}

impl Stmt<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> AsmError {
        AsmError { line: self.line, col, message: message.into() }
    }

    fn get(&self, key: &str) -> Option<u64> {
        self.args.get(key).map(|v| v.0)
    }

    fn u32(&self, key: &str) -> Result<Option<u32>, AsmError> {
        match self.args.get(key) {
            None => Ok(None),
            Some(&(v, col)) => u32::try_from(v)
                .map(Some)
                .map_err(|_| self.err(col, format!("`{key}` = {v} overflows a 32-bit field"))),
        }
    }

    fn need(&self, key: &str) -> Result<u64, AsmError> {
        self.get(key).ok_or_else(|| self.err(self.col, format!("{}: missing `{key}`", self.op)))
    }

    fn pair(&self, a: &str, b: &str) -> Result<Option<(u32, u32)>, AsmError> {
        Ok(match (self.u32(a)?, self.u32(b)?) {
            (None, None) => None,
            (Some(x), None) => Some((x, x)),
            (None, Some(y)) => Some((y, y)),
            (Some(x), Some(y)) => Some((x, y)),
        })
    }
}

fn parse(text: &str) -> Result<Vec<Stmt<'_>>, AsmError> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap();
        let mut offset = 0;
        for part in line.split(';') {
            let toks = tokens(part);
            if let Some(&(c0, op)) = toks.first() {
                let mut st = Stmt { line: ln + 1, col: offset + c0 + 1, op, args: BTreeMap::new() };
                for &(c, t) in &toks[1..] {
                    let col = offset + c + 1;
                    let (k, v) = t
                        .split_once('=')
                        .ok_or_else(|| st.err(col, format!("expected key=value, found `{t}`")))?;
                    if !KEYS.contains(&k) {
                        return Err(st.err(col, format!("unknown key `{k}`")));
                    }
                    let n = parse_int(v).ok_or_else(|| st.err(col + k.len() + 1, format!("bad integer `{v}`")))?;
                    if st.args.insert(k, (n, col)).is_some() {
                        return Err(st.err(col, format!("duplicate key `{k}`")));
                    }
                }
                out.push(st);
            }
            offset += part.len() + 1;
        }
    }
    Ok(out)
}

fn lower(st: &Stmt, opts: AsmOptions) -> Result<TmInstruction, AsmError> {
    if st.op.eq_ignore_ascii_case("halt") {
        if let Some((k, &(_, col))) = st.args.iter().next() {
            return Err(st.err(col, format!("halt takes no operands, found `{k}`")));
        }
        return Ok(TmInstruction::halt());
    }
    let op = OpKind::from_mnemonic(st.op).ok_or_else(|| st.err(st.col, format!("unknown opcode `{}`", st.op)))?;
    let h = st.u32("h")?.ok_or_else(|| st.err(st.col, format!("{op}: missing `h`")))?;
    let w = st.u32("w")?.ok_or_else(|| st.err(st.col, format!("{op}: missing `w`")))?;
    let c = st.u32("c")?.ok_or_else(|| st.err(st.col, format!("{op}: missing `c`")))?;
    let eb = st.u32("eb")?.unwrap_or(1);
    let src0 = TensorDesc::new(h, w, c, st.need("src")?).with_elem_bytes(eb);
    let dst = st.need("dst")?;

    if op != OpKind::Route {
        if let Some(&(_, col)) = st.args.get("c1") {
            return Err(st.err(col, format!("{op}: `c1` applies to route only")));
        }
    }
    let second_source = match st.get("src1") {
        None => None,
        Some(base) => {
            let c1 = st.u32("c1")?.unwrap_or(c);
            Some(TensorDesc::new(h, w, c1, base).with_elem_bytes(eb))
        }
    };
    let threshold = match st.args.get("thr") {
        None => None,
        Some(&(v, col)) => Some(u8::try_from(v).map_err(|_| st.err(col, format!("`thr` = {v} exceeds 255")))?),
    };
    let out_size = match (st.u32("oh")?, st.u32("ow")?) {
        (None, None) => None,
        (Some(a), Some(b)) => Some((a, b)),
        _ => return Err(st.err(st.col, "`oh` and `ow` must be given together")),
    };
    let params = OperatorParams {
        kernel: st.pair("kx", "ky")?,
        padding: st.pair("px", "py")?,
        stride: st.pair("sx", "sy")?,
        scale: st.u32("s")?,
        threshold,
        out_size,
        second_source,
    };
    let mut i = TmInstruction::new(op, src0, params, dst, opts.mode).map_err(|e| st.err(st.col, format!("{op}: {e}")))?;
    i.forward = match st.args.get("fwd") {
        None | Some(&(0, _)) => false,
        Some(&(1, _)) => true,
        Some(&(v, col)) => return Err(st.err(col, format!("`fwd` must be 0 or 1, found {v}"))),
    };
    Ok(i)
}

pub fn assemble(text: &str) -> Result<Program, AsmError> {
    assemble_with(text, AsmOptions::default())
}

pub fn assemble_with(text: &str, opts: AsmOptions) -> Result<Program, AsmError> {
    let stmts = parse(text)?;
    let mut v = Vec::with_capacity(stmts.len());
    for st in &stmts {
        if v.last().is_some_and(|i: &TmInstruction| i.opcode == Opcode::Halt) {
            return Err(st.err(st.col, "instruction after HALT"));
        }
        v.push(lower(st, opts)?);
    }
    if v.last().map(|i| i.opcode) != Some(Opcode::Halt) {
        let line = text.lines().count().max(1);
        let col = text.lines().last().map_or(0, str::len) + 1;
        return Err(AsmError { line, col, message: "program is missing its terminating HALT".into() });
    }
    Program::new(v).map_err(|e| AsmError { line: 1, col: 1, message: e.to_string() })
}

/// One assembly line per instruction; reassembles to the same program.
pub fn disassemble(p: &Program) -> String {
    let mut out = String::new();
    for i in p.instructions() {
        let Some(op) = i.op() else {
            out.push_str("halt\n");
            continue;
        };
        let s = &i.src0;
        let _ = write!(out, "{} src={:#x} h={} w={} c={}", op.mnemonic(), s.base_addr, s.height, s.width, s.channels);
        if s.elem_bytes != 1 {
            let _ = write!(out, " eb={}", s.elem_bytes);
        }
        if let Some(b) = i.src1 {
            let _ = write!(out, " src1={:#x}", b.base_addr);
            if op == OpKind::Route {
                let _ = write!(out, " c1={}", b.channels);
            }
        }
        let p = &i.params;
        let pairs = [("kx", "ky", p.kernel), ("px", "py", p.padding), ("sx", "sy", p.stride), ("oh", "ow", p.out_size)];
        for (a, b, v) in pairs {
            if let Some((x, y)) = v {
                let _ = write!(out, " {a}={x} {b}={y}");
            }
        }
        if let Some(v) = p.scale {
            let _ = write!(out, " s={v}");
        }
        if let Some(v) = p.threshold {
            let _ = write!(out, " thr={v}");
        }
        let _ = write!(out, " dst={:#x}", i.dst.base_addr);
        if i.forward {
            out.push_str(" fwd=1");
        }
        out.push('\n');
    }
    out
}
