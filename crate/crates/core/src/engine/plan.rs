//! Segmentation of one instruction into buffer-sized pieces and the
//! load / process / store work of each piece.

use std::ops::Range;

use serde::Serialize;

use crate::affine::{output_address, AddressKernel, AffineMap, AuxCounter};
use crate::error::{Result, TmuError};
use crate::isa::TmInstruction;
use crate::rme::{
    assemble_stream, configure_mask_for, evaluate_records, resize_source_rows, resize_taps, EvalOutput,
};
use crate::tensor::{img2col_grid, OpKind, OperatorParams, SimMemory, TensorDesc, BBOX_HEADER};

use super::dram::{coalesce, DramModel, Run, TransferCost};
use super::elementwise::{elementwise_process, interpolate, word_cycles, ElemOp};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Granule {
    /// Source element range of one copy pass.
    Elements { part: usize, range: Range<u64> },
    /// Element range of both Add operands.
    Pairs { range: Range<u64> },
    /// Whole source pixels (Rearrange, Bboxcal).
    Pixels { range: Range<u64> },
    /// Img2col output positions with the source row spans they read.
    Windows { range: Range<u64>, rows: Vec<RowSpan> },
    /// Resize output rows and the source rows they read.
    OutRows { rows: Range<u32>, src_rows: Range<u32> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowSpan {
    y: u32,
    x: Range32,
    offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Range32 {
    start: u32,
    end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Segment {
    granule: Granule,
    loads: Vec<Run>,
}

/// Stage costs of one executed segment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SegmentCost {
    pub load_cycles: u64,
    pub process_cycles: u64,
    pub store_cycles: u64,
    pub bytes_loaded: u64,
    pub bytes_stored: u64,
    pub load_bursts: u64,
    pub store_bursts: u64,
}

/// On-chip tensor buffer and commit buffer contents.
#[derive(Debug, Clone, Default)]
pub struct Buffers {
    pub tensor: Vec<u8>,
    pub commit: Vec<u8>,
    /// Destination runs, their bytes laid out back to back in `commit`.
    pub commit_runs: Vec<Run>,
}

impl Buffers {
    fn push_commit(&mut self, addr: u64, data: &[u8]) {
        match self.commit_runs.last_mut() {
            Some(last) if last.end() == addr => last.len += data.len() as u64,
            _ => self.commit_runs.push(Run::new(addr, data.len() as u64)),
        }
        self.commit.extend_from_slice(data);
    }

    fn clear_commit(&mut self) {
        self.commit.clear();
        self.commit_runs.clear();
    }
}

struct Pass {
    map: AffineMap,
    kernel: AddressKernel,
    src: TensorDesc,
}

/// A decoded instruction split into segments, ready to run.
pub struct PreparedOp {
    pub instr: TmInstruction,
    pub op: OpKind,
    pub outputs: Vec<TensorDesc>,
    passes: Vec<Pass>,
    segments: Vec<Segment>,
    buffer_bytes: u64,
    dram: DramModel,
    bbox_count: u32,
    bbox_written: u64,
}

fn overflow(need: u64, capacity: u64) -> TmuError {
    TmuError::BufferOverflow { need, capacity }
}

fn chunks(total: u64, per: u64) -> impl Iterator<Item = Range<u64>> {
    (0..total.div_ceil(per)).map(move |k| k * per..((k + 1) * per).min(total))
}

/// Largest `end` in `(start, limit]` with `fits(start..end)`, for monotone `fits`.
fn grow(start: u64, limit: u64, fits: impl Fn(u64) -> bool) -> Option<u64> {
    if !fits(start + 1) {
        return None;
    }
    let (mut lo, mut hi) = (start + 1, limit);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(lo)
}

/// Source row spans read by Img2col output positions `range`.
fn window_rows(src: &TensorDesc, p: &OperatorParams, ow: u32, range: Range<u64>) -> Vec<RowSpan> {
    let (kx, ky) = p.kernel.unwrap();
    let (px, py) = p.padding_or_default();
    let (sx, sy) = p.stride_or_default();
    let mut spans: Vec<Option<Range32>> = Vec::new();
    let mut first_y = None;
    let (j0, j1) = ((range.start / ow as u64) as u32, ((range.end - 1) / ow as u64) as u32);
    for j in j0..=j1 {
        let ia = if j == j0 { (range.start % ow as u64) as u32 } else { 0 };
        let ib = if j == j1 { ((range.end - 1) % ow as u64) as u32 + 1 } else { ow };
        let xa = (ia as i64 * sx as i64 - px as i64).max(0);
        let xb = ((ib - 1) as i64 * sx as i64 - px as i64 + kx as i64).min(src.width as i64);
        if xa >= xb {
            continue;
        }
        let ya = (j as i64 * sy as i64 - py as i64).max(0);
        let yb = (j as i64 * sy as i64 - py as i64 + ky as i64).min(src.height as i64);
        for y in ya..yb {
            let base = *first_y.get_or_insert(y);
            let idx = (y - base) as usize;
            if spans.len() <= idx {
                spans.resize(idx + 1, None);
            }
            let s = spans[idx].get_or_insert(Range32 { start: xa as u32, end: xb as u32 });
            s.start = s.start.min(xa as u32);
            s.end = s.end.max(xb as u32);
        }
    }
    let base = first_y.unwrap_or(0) as u32;
    let mut offset = 0;
    let pix = src.pixel_bytes();
    spans
        .into_iter()
        .enumerate()
        .filter_map(|(k, s)| s.map(|x| (base + k as u32, x)))
        .map(|(y, x)| {
            let r = RowSpan { y, x, offset };
            offset += (x.end - x.start) as u64 * pix;
            r
        })
        .collect()
}

fn span_bytes(rows: &[RowSpan], src: &TensorDesc) -> u64 {
    rows.iter().map(|r| (r.x.end - r.x.start) as u64 * src.pixel_bytes()).sum()
}

impl PreparedOp {
    pub fn prepare(instr: &TmInstruction, buffer_bytes: u64, dram: DramModel) -> Result<Self> {
        instr.validate()?;
        dram.validate()?;
        let op = instr.op().ok_or_else(|| TmuError::Engine("HALT has no work".into()))?;
        let src = instr.src0;
        let outputs = instr.outputs()?;
        let mut passes = Vec::new();
        if let Some(map) = instr.affine_map()? {
            if op == OpKind::Route {
                let second = instr.src1.unwrap();
                for (m, s) in map.route_passes(&src, &second).into_iter().zip([src, second]) {
                    passes.push(Pass { kernel: m.compile(), map: m, src: s });
                }
            } else {
                passes.push(Pass { kernel: map.compile(), map, src });
            }
        }
        let cap = buffer_bytes;
        let mut segments = Vec::new();
        match op {
            OpKind::Add => {
                let per = cap / 2;
                if per == 0 {
                    return Err(overflow(2, cap));
                }
                let b = instr.src1.unwrap();
                for range in chunks(src.elems(), per) {
                    let len = range.end - range.start;
                    let loads = vec![Run::new(src.base_addr + range.start, len), Run::new(b.base_addr + range.start, len)];
                    segments.push(Segment { granule: Granule::Pairs { range }, loads });
                }
            }
            OpKind::Rearrange | OpKind::Bboxcal => {
                let pix = src.pixel_bytes();
                let per = cap / pix;
                if per == 0 {
                    return Err(overflow(pix, cap));
                }
                for range in chunks(src.pixels(), per) {
                    let loads = vec![Run::new(src.base_addr + range.start * pix, (range.end - range.start) * pix)];
                    segments.push(Segment { granule: Granule::Pixels { range }, loads });
                }
            }
            OpKind::Img2col => {
                let (ow, oh) = img2col_grid(&src, &instr.params)?;
                let total = ow as u64 * oh as u64;
                let mut start = 0;
                while start < total {
                    let fits = |end: u64| span_bytes(&window_rows(&src, &instr.params, ow, start..end), &src) <= cap;
                    let end = grow(start, total, fits).ok_or_else(|| {
                        let need = span_bytes(&window_rows(&src, &instr.params, ow, start..start + 1), &src);
                        overflow(need, cap)
                    })?;
                    let rows = window_rows(&src, &instr.params, ow, start..end);
                    let loads = rows
                        .iter()
                        .map(|r| Run::new(src.addr(r.x.start, r.y, 0), (r.x.end - r.x.start) as u64 * src.pixel_bytes()))
                        .collect();
                    segments.push(Segment { granule: Granule::Windows { range: start..end, rows }, loads });
                    start = end;
                }
            }
            OpKind::Resize => {
                let dst = outputs[0];
                let row_bytes = src.width as u64 * src.pixel_bytes();
                let mut start = 0u32;
                while start < dst.height {
                    let need = |end: u64| resize_source_rows(src.height, dst.height, start..end as u32).len() as u64 * row_bytes;
                    let end = grow(start as u64, dst.height as u64, |e| need(e) <= cap)
                        .ok_or_else(|| overflow(need(start as u64 + 1), cap))? as u32;
                    let src_rows = resize_source_rows(src.height, dst.height, start..end);
                    let loads = vec![Run::new(
                        src.base_addr + src_rows.start as u64 * row_bytes,
                        src_rows.len() as u64 * row_bytes,
                    )];
                    segments.push(Segment { granule: Granule::OutRows { rows: start..end, src_rows }, loads });
                    start = end;
                }
            }
            _ => {
                for (part, pass) in passes.iter().enumerate() {
                    let eb = pass.src.elem_bytes as u64;
                    let per = cap / eb;
                    if per == 0 {
                        return Err(overflow(eb, cap));
                    }
                    for range in chunks(pass.src.elems(), per) {
                        let loads = vec![Run::new(pass.src.base_addr + range.start * eb, (range.end - range.start) * eb)];
                        segments.push(Segment { granule: Granule::Elements { part, range }, loads });
                    }
                }
            }
        }
        Ok(Self {
            instr: instr.clone(),
            op,
            outputs,
            passes,
            segments,
            buffer_bytes,
            dram,
            bbox_count: 0,
            bbox_written: 0,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn load_runs(&self, k: usize) -> &[Run] {
        &self.segments[k].loads
    }

    /// TensorLoad: fills the tensor buffer with segment `k`.
    pub fn load(&self, k: usize, mem: &SimMemory, buf: &mut Buffers) -> Result<TransferCost> {
        let seg = &self.segments[k];
        buf.tensor.clear();
        for r in &seg.loads {
            buf.tensor.extend_from_slice(mem.read(r.addr, r.len)?);
        }
        let need = buf.tensor.len() as u64;
        if need > self.buffer_bytes {
            return Err(overflow(need, self.buffer_bytes));
        }
        Ok(self.dram.cost_uncoalesced(&seg.loads))
    }

    /// Middle stage: fills the commit buffer; returns process cycles.
    pub fn process(&mut self, k: usize, buf: &mut Buffers) -> Result<u64> {
        buf.clear_commit();
        let loaded = buf.tensor.len() as u64;
        let dst = self.outputs[0];
        let last = k + 1 == self.segments.len();
        match &self.segments[k].granule {
            Granule::Elements { part, range } => {
                let pass = &self.passes[*part];
                scatter(pass, range.clone(), dst.base_addr, buf)?;
                let stored = buf.commit.len() as u64;
                Ok(match self.op {
                    OpKind::Rot90 => word_cycles(loaded) + word_cycles(stored),
                    _ => word_cycles(stored),
                })
            }
            Granule::Pairs { range } => {
                let n = (range.end - range.start) as usize;
                let (a, b) = buf.tensor.split_at(n);
                let out = elementwise_process(ElemOp::Add, a, b)?;
                buf.commit_runs.push(Run::new(dst.base_addr + range.start, n as u64));
                buf.commit = out;
                Ok(word_cycles(n as u64))
            }
            Granule::Pixels { range } => {
                let src = self.instr.src0;
                let pixels = (range.end - range.start) as u32;
                let cfg = configure_mask_for(self.op, &src, &self.instr.params, pixels)?;
                if self.op == OpKind::Rearrange {
                    let out = assemble_stream(&cfg, &buf.tensor)?;
                    let at = dst.base_addr + range.start * dst.pixel_bytes();
                    let cycles = word_cycles(out.len() as u64);
                    buf.commit_runs.push(Run::new(at, out.len() as u64));
                    buf.commit = out;
                    return Ok(cycles);
                }
                let EvalOutput::Survivors { count, payload } = evaluate_records(&cfg, &buf.tensor)? else {
                    return Err(TmuError::Engine("box filter produced an extremum".into()));
                };
                let at = dst.base_addr + BBOX_HEADER as u64 + self.bbox_written;
                self.bbox_count += count;
                self.bbox_written += payload.len() as u64;
                if !payload.is_empty() {
                    buf.push_commit(at, &payload);
                }
                if last {
                    buf.push_commit(dst.base_addr, &self.bbox_count.to_le_bytes());
                }
                Ok(word_cycles(loaded))
            }
            Granule::Windows { range, rows } => {
                let src = self.instr.src0;
                let p = &self.instr.params;
                let (ow, _) = img2col_grid(&src, p)?;
                let (kx, ky) = p.kernel.unwrap();
                let (px, py) = p.padding_or_default();
                let (sx, sy) = p.stride_or_default();
                let pix = src.pixel_bytes() as usize;
                let first = rows.first().map_or(0, |r| r.y);
                let mut by_row: Vec<Option<&RowSpan>> = Vec::new();
                for r in rows {
                    let i = (r.y - first) as usize;
                    if by_row.len() <= i {
                        by_row.resize(i + 1, None);
                    }
                    by_row[i] = Some(r);
                }
                let mut out = Vec::with_capacity((range.end - range.start) as usize * dst.pixel_bytes() as usize);
                let zeros = vec![0u8; pix];
                for pos in range.clone() {
                    let (i, j) = ((pos % ow as u64) as i64, (pos / ow as u64) as i64);
                    for v in 0..ky as i64 {
                        for u in 0..kx as i64 {
                            let xi = i * sx as i64 - px as i64 + u;
                            let yi = j * sy as i64 - py as i64 + v;
                            let inside = (0..src.width as i64).contains(&xi) && (0..src.height as i64).contains(&yi);
                            if !inside {
                                out.extend_from_slice(&zeros);
                                continue;
                            }
                            let span = by_row
                                .get((yi as u32).wrapping_sub(first) as usize)
                                .copied()
                                .flatten()
                                .filter(|r| r.x.start as i64 <= xi && (xi as u32) < r.x.end)
                                .ok_or_else(|| TmuError::Engine(format!("window tap ({xi}, {yi}) not loaded")))?;
                            let off = span.offset as usize + (xi as usize - span.x.start as usize) * pix;
                            out.extend_from_slice(&buf.tensor[off..off + pix]);
                        }
                    }
                }
                let cycles = word_cycles(out.len() as u64);
                buf.commit_runs.push(Run::new(dst.base_addr + range.start * dst.pixel_bytes(), out.len() as u64));
                buf.commit = out;
                Ok(cycles)
            }
            Granule::OutRows { rows, src_rows } => {
                let src = self.instr.src0;
                let taps = resize_taps(&src, dst.height, dst.width, rows.clone(), &buf.tensor, src_rows.start)?;
                let out: Vec<u8> = taps.iter().map(interpolate).collect();
                let at = dst.base_addr + rows.start as u64 * dst.width as u64 * dst.pixel_bytes();
                let cycles = word_cycles(loaded) + word_cycles(out.len() as u64);
                buf.commit_runs.push(Run::new(at, out.len() as u64));
                buf.commit = out;
                Ok(cycles)
            }
        }
    }

    /// TensorStore: drains the commit buffer to memory. With `forward` set
    /// the data also leaves through the forward port, which costs bus
    /// cycles only.
    pub fn store(&self, mem: &mut SimMemory, buf: &Buffers, forward: bool) -> Result<TransferCost> {
        let mut off = 0usize;
        for r in &buf.commit_runs {
            mem.write(r.addr, &buf.commit[off..off + r.len as usize])?;
            off += r.len as usize;
        }
        if forward {
            let bytes = buf.commit.len() as u64;
            return Ok(TransferCost { bytes, bursts: 0, cycles: word_cycles(bytes) });
        }
        Ok(self.dram.cost(&buf.commit_runs))
    }

    pub fn store_runs(buf: &Buffers) -> Vec<Run> {
        coalesce(&buf.commit_runs)
    }

    /// Load, process and store of segment `k`.
    pub fn execute_segment(&mut self, k: usize, mem: &mut SimMemory, buf: &mut Buffers) -> Result<SegmentCost> {
        let l = self.load(k, mem, buf)?;
        let p = self.process(k, buf)?;
        let s = self.store(mem, buf, self.instr.forward)?;
        Ok(SegmentCost {
            load_cycles: l.cycles,
            process_cycles: p,
            store_cycles: s.cycles,
            bytes_loaded: l.bytes,
            bytes_stored: s.bytes,
            load_bursts: l.bursts,
            store_bursts: s.bursts,
        })
    }
}

fn exact_error(map: &AffineMap, idx: [u32; 3], aux: [i64; 2], base: u64, eb: u32) -> TmuError {
    match map.apply(idx, aux).and_then(|o| output_address(map, o, base, eb)) {
        Err(e) => e,
        Ok(a) => TmuError::Engine(format!("address kernel disagrees with exact map at {idx:?} (exact {a:#x})")),
    }
}

/// Copies source elements `range` from the tensor buffer to their mapped destinations.
fn scatter(pass: &Pass, range: Range<u64>, base: u64, buf: &mut Buffers) -> Result<()> {
    let src = &pass.src;
    let eb = src.elem_bytes;
    let m = &pass.map;
    let reps: Vec<[i64; 2]> = match m.aux {
        AuxCounter::Replicate { s } => (0..s as i64).flat_map(|dy| (0..s as i64).map(move |dx| [dx, dy])).collect(),
        _ => Vec::new(),
    };
    let tensor = std::mem::take(&mut buf.tensor);
    let mut emit = |e: u64, idx: [u32; 3], aux: [i64; 2]| -> Result<()> {
        let lin = pass
            .kernel
            .linear(idx[0], idx[1], idx[2], aux)
            .ok_or_else(|| exact_error(m, idx, aux, base, eb))?;
        let off = ((e - range.start) * eb as u64) as usize;
        buf.push_commit(base + lin * eb as u64, &tensor[off..off + eb as usize]);
        Ok(())
    };
    let single = [m.derived_aux([0, 0, 0])];
    let mut result = Ok(());
    let ch = src.channels as u64;
    let mut e = range.start;
    'outer: while e < range.end {
        let (x, y, c0) = src.coords(e);
        let c1 = (ch - c0 as u64).min(range.end - e) as u32 + c0;
        let reps: &[[i64; 2]] = if reps.is_empty() { &single } else { &reps };
        for &rep in reps {
            for c in c0..c1 {
                let idx = [x, y, c];
                let aux = if m.replication() > 1 { rep } else { m.derived_aux(idx) };
                if let Err(err) = emit(e + (c - c0) as u64, idx, aux) {
                    result = Err(err);
                    break 'outer;
                }
            }
        }
        e += (c1 - c0) as u64;
    }
    buf.tensor = tensor;
    result
}
