//! Reconfigurable masking engine for byte-level manipulation.
//!
//! The input stream passes three steps. Segment counters pick valid
//! transfers out of it, each `(skip, take, repeat)` triple meaning "skip
//! `skip` bytes then take `take` bytes, `repeat` times". Each take is
//! split into bus beats and `byte_mask` selects positions within a beat.
//! Last, the selected bytes go either to the assemble register (grouped
//! by `dest_map` into output words) or to the evaluation unit.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmuError};
use crate::tensor::{
    bbox_records_per_pixel, output_descs, OpKind, OperatorParams, TensorDesc,
    BBOX_OBJECTNESS, BBOX_RECORD, BUS_BYTES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Assemble,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalOp {
    ThresholdGreater,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub skip: u32,
    pub take: u32,
    pub repeat: u32,
}

impl Segment {
    pub const fn new(skip: u32, take: u32, repeat: u32) -> Self {
        Self { skip, take, repeat }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub scheme: Scheme,
    /// Empty means the whole input is one take.
    pub segment_counter: Vec<Segment>,
    pub byte_mask: u16,
    /// Target slot of each selected byte; its length is the group size.
    pub dest_map: Vec<u16>,
    /// Bytes per assembled output word.
    pub word_bytes: u32,
    pub eval_op: EvalOp,
    pub eval_operand: u8,
    pub record_stride: u32,
    pub eval_offset: u32,
}

impl MaskConfig {
    pub fn passthrough() -> Self {
        Self {
            scheme: Scheme::Assemble,
            segment_counter: Vec::new(),
            byte_mask: 0xFFFF,
            dest_map: (0..BUS_BYTES as u16).collect(),
            word_bytes: BUS_BYTES as u32,
            eval_op: EvalOp::ThresholdGreater,
            eval_operand: 0,
            record_stride: 1,
            eval_offset: 0,
        }
    }

    pub fn evaluate(op: EvalOp, operand: u8, record_stride: u32, eval_offset: u32) -> Self {
        Self {
            scheme: Scheme::Evaluate,
            dest_map: Vec::new(),
            eval_op: op,
            eval_operand: operand,
            record_stride,
            eval_offset,
            ..Self::passthrough()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.byte_mask == 0 {
            return Err(TmuError::Mask("byte mask selects nothing".into()));
        }
        match self.scheme {
            Scheme::Assemble => {
                if self.dest_map.is_empty() {
                    return Err(TmuError::Mask("assemble needs a destination map".into()));
                }
                let mut seen = vec![false; self.word_bytes as usize];
                for &s in &self.dest_map {
                    let slot = seen
                        .get_mut(s as usize)
                        .ok_or_else(|| TmuError::Mask(format!("slot {s} outside {}-byte word", self.word_bytes)))?;
                    if *slot {
                        return Err(TmuError::Mask(format!("destination slot {s} used twice")));
                    }
                    *slot = true;
                }
            }
            Scheme::Evaluate => {
                if self.record_stride == 0 || self.eval_offset >= self.record_stride {
                    return Err(TmuError::Mask(format!(
                        "evaluated byte {} outside record stride {}",
                        self.eval_offset, self.record_stride
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn pattern_len(&self) -> u64 {
        self.segment_counter
            .iter()
            .map(|s| s.repeat as u64 * (s.skip as u64 + s.take as u64))
            .sum()
    }

    fn takes(&self, input_len: u64) -> Result<Vec<(u64, u64)>> {
        if self.segment_counter.is_empty() {
            return Ok(vec![(0, input_len)]);
        }
        if self.pattern_len() != input_len {
            return Err(TmuError::Mask(format!(
                "input of {input_len} bytes does not match segment pattern of {} bytes",
                self.pattern_len()
            )));
        }
        let mut pos = 0u64;
        let mut out = Vec::new();
        for s in &self.segment_counter {
            for _ in 0..s.repeat {
                pos += s.skip as u64;
                if s.take > 0 {
                    out.push((pos, s.take as u64));
                }
                pos += s.take as u64;
            }
        }
        Ok(out)
    }

    fn beat_selected(&self, beat_len: u64) -> u64 {
        let bits = if beat_len >= 16 { 0xFFFF } else { (1u32 << beat_len) - 1 };
        (self.byte_mask as u32 & bits).count_ones() as u64
    }

    /// Bytes surviving segment counters and byte mask.
    pub fn selected_len(&self, input_len: u64) -> Result<u64> {
        let mut n = 0;
        for (_, len) in self.takes(input_len)? {
            let full = len / BUS_BYTES as u64;
            n += full * self.beat_selected(16) + self.beat_selected(len % BUS_BYTES as u64);
        }
        Ok(n)
    }

    pub fn predicted_output_len(&self, input_len: u64) -> Result<u64> {
        let sel = self.selected_len(input_len)?;
        let group = self.dest_map.len() as u64;
        let rem = (sel % group) as usize;
        let tail = if rem == 0 {
            0
        } else {
            *self.dest_map[..rem].iter().max().unwrap() as u64 + 1
        };
        Ok(sel / group * self.word_bytes as u64 + tail)
    }

    fn select(&self, input: &[u8]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (start, len) in self.takes(input.len() as u64)? {
            let take = &input[start as usize..(start + len) as usize];
            for beat in take.chunks(BUS_BYTES) {
                for (i, &b) in beat.iter().enumerate() {
                    if self.byte_mask >> i & 1 == 1 {
                        out.push(b);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut v = Vec::new();
        let put = |v: &mut Vec<u8>, x: u32| v.extend_from_slice(&x.to_le_bytes());
        v.push(self.scheme as u8);
        v.push(self.eval_op as u8);
        v.push(self.eval_operand);
        v.push(0);
        put(&mut v, self.byte_mask as u32);
        put(&mut v, self.word_bytes);
        put(&mut v, self.record_stride);
        put(&mut v, self.eval_offset);
        put(&mut v, self.segment_counter.len() as u32);
        for s in &self.segment_counter {
            put(&mut v, s.skip);
            put(&mut v, s.take);
            put(&mut v, s.repeat);
        }
        put(&mut v, self.dest_map.len() as u32);
        for &d in &self.dest_map {
            v.extend_from_slice(&d.to_le_bytes());
        }
        v
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let bad = || TmuError::Mask(format!("malformed mask block of {} bytes", bytes.len()));
        let mut pos = 4usize;
        let word = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(bad)?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let head = bytes.get(..4).ok_or_else(bad)?;
        let scheme = match head[0] {
            0 => Scheme::Assemble,
            1 => Scheme::Evaluate,
            _ => return Err(bad()),
        };
        let eval_op = match head[1] {
            0 => EvalOp::ThresholdGreater,
            1 => EvalOp::Max,
            2 => EvalOp::Min,
            _ => return Err(bad()),
        };
        let byte_mask = u16::try_from(word(&mut pos)?).map_err(|_| bad())?;
        let word_bytes = word(&mut pos)?;
        let record_stride = word(&mut pos)?;
        let eval_offset = word(&mut pos)?;
        let n = word(&mut pos)? as usize;
        let mut segment_counter = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            segment_counter.push(Segment::new(word(&mut pos)?, word(&mut pos)?, word(&mut pos)?));
        }
        let n = word(&mut pos)? as usize;
        let tail = bytes.get(pos..).ok_or_else(bad)?;
        if tail.len() != 2 * n {
            return Err(bad());
        }
        let dest_map = tail.chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok(Self {
            scheme,
            segment_counter,
            byte_mask,
            dest_map,
            word_bytes,
            eval_op,
            eval_operand: head[2],
            record_stride,
            eval_offset,
        })
    }
}

/// Incremental assemble register.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembleState {
    pub word: Vec<u8>,
    pub fill: usize,
    pub committed: u64,
}

impl AssembleState {
    pub fn new(word_bytes: u32) -> Self {
        Self { word: vec![0; word_bytes as usize], fill: 0, committed: 0 }
    }

    pub fn push(&mut self, cfg: &MaskConfig, byte: u8, out: &mut Vec<u8>) {
        self.word[cfg.dest_map[self.fill] as usize] = byte;
        self.fill += 1;
        if self.fill == cfg.dest_map.len() {
            out.extend_from_slice(&self.word);
            self.word.fill(0);
            self.fill = 0;
            self.committed += 1;
        }
    }

    /// Emits a partial word up to its highest written slot.
    pub fn flush(&mut self, cfg: &MaskConfig, out: &mut Vec<u8>) {
        if self.fill == 0 {
            return;
        }
        let hi = *cfg.dest_map[..self.fill].iter().max().unwrap() as usize;
        out.extend_from_slice(&self.word[..=hi]);
        self.word.fill(0);
        self.fill = 0;
        self.committed += 1;
    }
}

pub fn assemble_stream(cfg: &MaskConfig, input: &[u8]) -> Result<Vec<u8>> {
    if cfg.scheme != Scheme::Assemble {
        return Err(TmuError::Mask("configuration is not an assemble scheme".into()));
    }
    cfg.validate()?;
    let mut st = AssembleState::new(cfg.word_bytes);
    let mut out = Vec::new();
    for b in cfg.select(input)? {
        st.push(cfg, b, &mut out);
    }
    st.flush(cfg, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalOutput {
    Survivors { count: u32, payload: Vec<u8> },
    Extremum { value: u8, index: u32 },
}

/// Evaluation without the flush header, for accumulation across segments.
pub fn evaluate_records(cfg: &MaskConfig, input: &[u8]) -> Result<EvalOutput> {
    if cfg.scheme != Scheme::Evaluate {
        return Err(TmuError::Mask("configuration is not an evaluate scheme".into()));
    }
    cfg.validate()?;
    let sel = cfg.select(input)?;
    let stride = cfg.record_stride as usize;
    if sel.len() % stride != 0 {
        return Err(TmuError::Mask(format!(
            "record stride {stride} does not divide {} selected bytes",
            sel.len()
        )));
    }
    let key = |r: &[u8]| r[cfg.eval_offset as usize];
    Ok(match cfg.eval_op {
        EvalOp::ThresholdGreater => {
            let mut payload = Vec::new();
            let mut count = 0u32;
            for r in sel.chunks(stride).filter(|r| key(r) > cfg.eval_operand) {
                payload.extend_from_slice(r);
                count += 1;
            }
            EvalOutput::Survivors { count, payload }
        }
        EvalOp::Max | EvalOp::Min => {
            let mut best: Option<(u8, u32)> = None;
            for (i, r) in sel.chunks(stride).enumerate() {
                let v = key(r);
                let better = match best {
                    None => true,
                    Some((b, _)) if cfg.eval_op == EvalOp::Max => v > b,
                    Some((b, _)) => v < b,
                };
                if better {
                    best = Some((v, i as u32));
                }
            }
            let (value, index) =
                best.ok_or_else(|| TmuError::Mask("extremum over an empty stream".into()))?;
            EvalOutput::Extremum { value, index }
        }
    })
}

/// Threshold: 4-byte LE count then surviving records. Max/min: value then 4-byte LE index.
pub fn evaluate_stream(cfg: &MaskConfig, input: &[u8]) -> Result<Vec<u8>> {
    Ok(match evaluate_records(cfg, input)? {
        EvalOutput::Survivors { count, payload } => {
            let mut v = count.to_le_bytes().to_vec();
            v.extend(payload);
            v
        }
        EvalOutput::Extremum { value, index } => {
            let mut v = vec![value];
            v.extend_from_slice(&index.to_le_bytes());
            v
        }
    })
}

/// Segment counters taking the box records of `pixels` consecutive pixels.
pub fn bbox_segments(channels: u32, records: u32, pixels: u32) -> Vec<Segment> {
    let take = records * BBOX_RECORD as u32;
    let rest = channels - take;
    if rest == 0 {
        return vec![Segment::new(0, take * pixels, 1)];
    }
    let mut v = vec![Segment::new(0, take, 1)];
    if pixels > 1 {
        v.push(Segment::new(rest, take, pixels - 1));
    }
    v.push(Segment::new(rest, 0, 1));
    v
}

/// Configuration for a fine-grained operator over `pixels` source pixels.
pub fn configure_mask_for(op: OpKind, src: &TensorDesc, params: &OperatorParams, pixels: u32) -> Result<MaskConfig> {
    match op {
        OpKind::Rearrange => {
            let dst = output_descs(op, src, params, 0)?[0];
            let take = src.pixel_bytes() as u32;
            Ok(MaskConfig {
                segment_counter: vec![Segment::new(0, take, pixels)],
                dest_map: (0..take as u16).collect(),
                word_bytes: dst.pixel_bytes() as u32,
                ..MaskConfig::passthrough()
            })
        }
        OpKind::Bboxcal => {
            output_descs(op, src, params, 0)?;
            let thr = params.threshold.ok_or(TmuError::MissingParam { op, field: "thr" })?;
            let mut cfg = MaskConfig::evaluate(EvalOp::ThresholdGreater, thr, BBOX_RECORD as u32, BBOX_OBJECTNESS as u32);
            cfg.segment_counter = bbox_segments(src.channels, bbox_records_per_pixel(src), pixels);
            Ok(cfg)
        }
        OpKind::Resize => {
            output_descs(op, src, params, 0)?;
            // Four neighbour bytes per output element, routed to the interpolation unit.
            Ok(MaskConfig {
                dest_map: (0..4).collect(),
                word_bytes: 4,
                ..MaskConfig::passthrough()
            })
        }
        _ => Err(TmuError::Unsupported(op)),
    }
}

pub fn configure_mask(op: OpKind, src: &TensorDesc, params: &OperatorParams) -> Result<MaskConfig> {
    configure_mask_for(op, src, params, src.pixels() as u32)
}

/// Source coordinate for one output position, Q8 fixed point with half-pixel centres.
fn resize_src_q8(d: u32, in_len: u32, out_len: u32) -> (u32, u32, u32) {
    let (d, i, o) = (d as u64, in_len as u64, out_len as u64);
    let centre = ((2 * d + 1) * i * 128 * 2 + o) / (2 * o);
    let max = (i - 1) * 256;
    let p = centre.saturating_sub(128).min(max);
    let lo = (p >> 8) as u32;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, (p & 0xFF) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeTap {
    /// `[top-left, top-right, bottom-left, bottom-right]`.
    pub p: [u8; 4],
    pub fx: u32,
    pub fy: u32,
}

/// Gathers the neighbour quadruple for every element of output rows `rows`.
/// `slab` holds source rows starting at `first_row`.
pub fn resize_taps(
    src: &TensorDesc,
    out_h: u32,
    out_w: u32,
    rows: std::ops::Range<u32>,
    slab: &[u8],
    first_row: u32,
) -> Result<Vec<ResizeTap>> {
    let need = resize_source_rows(src.height, out_h, rows.clone());
    let row_bytes = src.width as u64 * src.pixel_bytes();
    if need.start < first_row || (need.end - first_row) as u64 * row_bytes > slab.len() as u64 {
        return Err(TmuError::Mask(format!("source rows {need:?} not held in the loaded slab")));
    }
    let at = |x: u32, y: u32, c: u32| slab[src.offset(x, y - first_row, c) as usize];
    let mut taps = Vec::with_capacity(rows.len() * (out_w * src.channels) as usize);
    for oy in rows {
        let (y0, y1, fy) = resize_src_q8(oy, src.height, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = resize_src_q8(ox, src.width, out_w);
            for c in 0..src.channels {
                taps.push(ResizeTap {
                    p: [at(x0, y0, c), at(x1, y0, c), at(x0, y1, c), at(x1, y1, c)],
                    fx,
                    fy,
                });
            }
        }
    }
    Ok(taps)
}

/// Source rows touched by output rows `rows`.
pub fn resize_source_rows(src_h: u32, out_h: u32, rows: std::ops::Range<u32>) -> std::ops::Range<u32> {
    let first = resize_src_q8(rows.start, src_h, out_h).0;
    let last = resize_src_q8(rows.end - 1, src_h, out_h).1;
    first..last + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::golden::resize_coord_q8;

    #[test]
    fn passthrough_is_identity() {
        let cfg = MaskConfig::passthrough();
        let input: Vec<u8> = (0..32).collect();
        assert_eq!(assemble_stream(&cfg, &input).unwrap(), input);
        assert_eq!(assemble_stream(&cfg, &input[..5]).unwrap(), &input[..5]);
    }

    #[test]
    fn rearrange_two_pixels() {
        let src = TensorDesc::new(1, 2, 3, 0);
        let cfg = configure_mask(OpKind::Rearrange, &src, &OperatorParams::default()).unwrap();
        assert_eq!(cfg.segment_counter, vec![Segment::new(0, 3, 2)]);
        assert_eq!(cfg.dest_map, vec![0, 1, 2]);
        let out = assemble_stream(&cfg, &[1, 2, 3, 4, 5, 6]).unwrap();
        let mut expect = vec![0u8; 32];
        expect[..3].copy_from_slice(&[1, 2, 3]);
        expect[16..19].copy_from_slice(&[4, 5, 6]);
        assert_eq!(out, expect);
    }

    #[test]
    fn every_other_byte_emits_after_two_words() {
        let cfg = MaskConfig { byte_mask: 0x5555, ..MaskConfig::passthrough() };
        let input: Vec<u8> = (0..32).collect();
        let mut st = AssembleState::new(16);
        let mut out = Vec::new();
        for b in cfg.select(&input[..16]).unwrap() {
            st.push(&cfg, b, &mut out);
        }
        assert_eq!(cfg.selected_len(16).unwrap(), 8);
        assert!(out.is_empty());
        for b in cfg.select(&input[16..]).unwrap() {
            st.push(&cfg, b, &mut out);
        }
        assert_eq!(out, (0..32).step_by(2).collect::<Vec<u8>>());
        assert_eq!(st.committed, 1);
    }

    #[test]
    fn bbox_threshold_example() {
        let mut input = vec![0u8; 3 * 85];
        for (r, obj) in [200u8, 50, 130].into_iter().enumerate() {
            input[r * 85] = r as u8;
            input[r * 85 + 4] = obj;
        }
        let src = TensorDesc::new(1, 1, 255, 0);
        let p = OperatorParams { threshold: Some(128), ..Default::default() };
        let cfg = configure_mask(OpKind::Bboxcal, &src, &p).unwrap();
        assert_eq!((cfg.eval_operand, cfg.record_stride), (128, 85));
        let out = evaluate_stream(&cfg, &input).unwrap();
        assert_eq!(&out[..4], &2u32.to_le_bytes());
        assert_eq!(out.len(), 4 + 2 * 85);
        assert_eq!((out[4], out[4 + 85]), (0, 2));
    }

    #[test]
    fn threshold_all_below_is_empty() {
        let cfg = MaskConfig::evaluate(EvalOp::ThresholdGreater, 200, 1, 0);
        assert_eq!(evaluate_stream(&cfg, &[1, 2, 3]).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn extremum() {
        let max = MaskConfig::evaluate(EvalOp::Max, 0, 1, 0);
        assert_eq!(evaluate_records(&max, &[3, 9, 1]).unwrap(), EvalOutput::Extremum { value: 9, index: 1 });
        let min = MaskConfig::evaluate(EvalOp::Min, 0, 1, 0);
        assert_eq!(evaluate_stream(&min, &[3, 9, 1]).unwrap(), vec![1, 2, 0, 0, 0]);
    }

    #[test]
    fn config_errors() {
        let dup = MaskConfig { dest_map: vec![0, 0], ..MaskConfig::passthrough() };
        assert!(assemble_stream(&dup, &[1, 2]).is_err());
        let src = TensorDesc::new(1, 2, 3, 0);
        let cfg = configure_mask(OpKind::Rearrange, &src, &OperatorParams::default()).unwrap();
        assert!(assemble_stream(&cfg, &[1, 2, 3, 4, 5]).is_err());
        let ev = MaskConfig::evaluate(EvalOp::ThresholdGreater, 0, 2, 0);
        assert!(evaluate_stream(&ev, &[1, 2, 3]).is_err());
        assert!(matches!(
            configure_mask(OpKind::Transpose, &src, &OperatorParams::default()),
            Err(TmuError::Unsupported(_))
        ));
    }

    #[test]
    fn bboxcal_with_leftover_channels() {
        let segs = bbox_segments(256, 3, 4);
        let cfg = MaskConfig { segment_counter: segs, ..MaskConfig::evaluate(EvalOp::ThresholdGreater, 0, 85, 4) };
        assert_eq!(cfg.pattern_len(), 4 * 256);
        assert_eq!(cfg.selected_len(4 * 256).unwrap(), 4 * 255);
    }

    #[test]
    fn serialization_round_trip() {
        let src = TensorDesc::new(2, 2, 256, 0);
        let p = OperatorParams { threshold: Some(7), ..Default::default() };
        for cfg in [MaskConfig::passthrough(), configure_mask(OpKind::Bboxcal, &src, &p).unwrap()] {
            assert_eq!(MaskConfig::deserialize(&cfg.serialize()).unwrap(), cfg);
        }
        assert!(MaskConfig::deserialize(&[0, 0]).is_err());
    }

    #[test]
    fn resize_coordinates_agree_with_reference() {
        for (i, o) in [(4, 2), (2, 4), (7, 3), (448, 224), (5, 5), (1, 3)] {
            for d in 0..o {
                assert_eq!(resize_src_q8(d, i, o), resize_coord_q8(d, i, o), "{d} {i}->{o}");
            }
        }
    }
}
