//! Tensors in simulated byte-addressable memory.
//!
//! Every feature map is stored row-major with channels innermost:
//! `offset(x, y, c) = ((y * width + x) * channels + c) * elem_bytes`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmuError};

/// Bus width of the TMU's AXI interface in bytes (128-bit bus).
pub const BUS_BYTES: usize = 16;

/// Elements per YOLO detection record: 4 box + 1 objectness + 80 class scores.
pub const BBOX_RECORD: usize = 85;

/// Offset of the objectness score inside a detection record.
pub const BBOX_OBJECTNESS: usize = 4;

/// Bytes of the little-endian survivor count that prefixes Bboxcal output.
pub const BBOX_HEADER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorDesc {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub elem_bytes: u32,
    pub base_addr: u64,
}

impl TensorDesc {
    pub fn new(height: u32, width: u32, channels: u32, base_addr: u64) -> Self {
        Self { height, width, channels, elem_bytes: 1, base_addr }
    }

    pub fn with_elem_bytes(mut self, elem_bytes: u32) -> Self {
        self.elem_bytes = elem_bytes;
        self
    }

    pub fn at(mut self, base_addr: u64) -> Self {
        self.base_addr = base_addr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.elem_bytes == 0 {
            return Err(TmuError::Shape {
                op: "tensor",
                reason: format!("all dimensions must be >= 1, got {self}"),
            });
        }
        Ok(())
    }

    pub fn elems(&self) -> u64 {
        self.height as u64 * self.width as u64 * self.channels as u64
    }

    pub fn pixels(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub fn byte_len(&self) -> u64 {
        self.elems() * self.elem_bytes as u64
    }

    pub fn pixel_bytes(&self) -> u64 {
        self.channels as u64 * self.elem_bytes as u64
    }

    pub fn region(&self) -> Range<u64> {
        self.base_addr..self.base_addr + self.byte_len()
    }

    /// Byte offset of element `(x, y, c)` relative to `base_addr`.
    #[inline]
    pub fn offset(&self, x: u32, y: u32, c: u32) -> u64 {
        ((y as u64 * self.width as u64 + x as u64) * self.channels as u64 + c as u64)
            * self.elem_bytes as u64
    }

    #[inline]
    pub fn addr(&self, x: u32, y: u32, c: u32) -> u64 {
        self.base_addr + self.offset(x, y, c)
    }

    /// Inverse of [`TensorDesc::offset`] on element granularity.
    pub fn coords(&self, elem_index: u64) -> (u32, u32, u32) {
        let c = elem_index % self.channels as u64;
        let pixel = elem_index / self.channels as u64;
        let x = pixel % self.width as u64;
        let y = pixel / self.width as u64;
        (x as u32, y as u32, c as u32)
    }

    pub fn same_shape(&self, other: &TensorDesc) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.elem_bytes == other.elem_bytes
    }

    pub fn overlaps(&self, other: &TensorDesc) -> bool {
        let (a, b) = (self.region(), other.region());
        a.start < b.end && b.start < a.end
    }
}

impl fmt::Display for TensorDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)?;
        if self.elem_bytes != 1 {
            write!(f, "(e{})", self.elem_bytes)?;
        }
        write!(f, "@{:#x}", self.base_addr)
    }
}

/// Zero-initialized simulated DRAM. Accesses outside the capacity are errors.
#[derive(Clone, PartialEq, Eq)]
pub struct SimMemory {
    bytes: Vec<u8>,
}

impl fmt::Debug for SimMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimMemory").field("capacity", &self.bytes.len()).finish()
    }
}

impl SimMemory {
    pub fn new(capacity: usize) -> Self {
        Self { bytes: vec![0; capacity] }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn capacity(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn check(&self, addr: u64, len: u64) -> Result<Range<usize>> {
        match addr.checked_add(len) {
            Some(end) if end <= self.capacity() => Ok(addr as usize..end as usize),
            _ => Err(TmuError::OutOfBounds { addr, len, capacity: self.capacity() }),
        }
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<&[u8]> {
        let r = self.check(addr, len)?;
        Ok(&self.bytes[r])
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        let r = self.check(addr, data.len() as u64)?;
        self.bytes[r].copy_from_slice(data);
        Ok(())
    }

    pub fn fill(&mut self, addr: u64, len: u64, value: u8) -> Result<()> {
        let r = self.check(addr, len)?;
        self.bytes[r].fill(value);
        Ok(())
    }

    pub fn check_tensor(&self, t: &TensorDesc) -> Result<()> {
        t.validate()?;
        self.check(t.base_addr, t.byte_len()).map(|_| ())
    }

    pub fn tensor(&self, t: &TensorDesc) -> Result<&[u8]> {
        self.read(t.base_addr, t.byte_len())
    }

    pub fn tensor_mut(&mut self, t: &TensorDesc) -> Result<&mut [u8]> {
        let r = self.check(t.base_addr, t.byte_len())?;
        Ok(&mut self.bytes[r])
    }
}

/// The twelve tensor-manipulation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Rearrange,
    Resize,
    Bboxcal,
    Img2col,
    Transpose,
    Rot90,
    PixelShuffle,
    PixelUnshuffle,
    Upsample,
    Route,
    Split,
    Add,
}

/// Which middle stage of the execution model an operator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    FineGrained,
    ElementWise,
    CoarseGrained,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Rearrange,
        OpKind::Resize,
        OpKind::Bboxcal,
        OpKind::Img2col,
        OpKind::Transpose,
        OpKind::Rot90,
        OpKind::PixelShuffle,
        OpKind::PixelUnshuffle,
        OpKind::Upsample,
        OpKind::Route,
        OpKind::Split,
        OpKind::Add,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::Rearrange => "rearrange",
            OpKind::Resize => "resize",
            OpKind::Bboxcal => "bboxcal",
            OpKind::Img2col => "img2col",
            OpKind::Transpose => "transpose",
            OpKind::Rot90 => "rot90",
            OpKind::PixelShuffle => "pixelshuffle",
            OpKind::PixelUnshuffle => "pixelunshuffle",
            OpKind::Upsample => "upsample",
            OpKind::Route => "route",
            OpKind::Split => "split",
            OpKind::Add => "add",
        }
    }

    /// Two-letter abbreviation used in the operator and model tables.
    pub fn abbr(self) -> &'static str {
        match self {
            OpKind::Rearrange => "RR",
            OpKind::Resize => "RS",
            OpKind::Bboxcal => "BC",
            OpKind::Img2col => "IC",
            OpKind::Transpose => "TS",
            OpKind::Rot90 => "RT",
            OpKind::PixelShuffle => "PS",
            OpKind::PixelUnshuffle => "PU",
            OpKind::Upsample => "US",
            OpKind::Route => "RO",
            OpKind::Split => "SL",
            OpKind::Add => "AD",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<OpKind> {
        let s = s.to_ascii_lowercase();
        OpKind::ALL
            .into_iter()
            .find(|op| op.mnemonic() == s || op.abbr().eq_ignore_ascii_case(&s))
    }

    pub fn class(self) -> OpClass {
        match self {
            OpKind::Rearrange | OpKind::Resize | OpKind::Bboxcal => OpClass::FineGrained,
            OpKind::Add => OpClass::ElementWise,
            _ => OpClass::CoarseGrained,
        }
    }

    pub fn is_coarse(self) -> bool {
        self.class() == OpClass::CoarseGrained || self == OpKind::Add
    }

    pub fn needs_second_source(self) -> bool {
        matches!(self, OpKind::Route | OpKind::Add)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Operator parameters. Only the fields an operator consumes are set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorParams {
    /// `(x_k, y_k)`
    pub kernel: Option<(u32, u32)>,
    /// `(x_p, y_p)`
    pub padding: Option<(u32, u32)>,
    /// `(x_s, y_s)`
    pub stride: Option<(u32, u32)>,
    pub scale: Option<u32>,
    pub threshold: Option<u8>,
    /// Explicit Resize target `(height, width)`; defaults to `H/s x W/s`.
    pub out_size: Option<(u32, u32)>,
    pub second_source: Option<TensorDesc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Kernel,
    Padding,
    Stride,
    Scale,
    Threshold,
    OutSize,
    SecondSource,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Kernel => "kernel",
            Field::Padding => "padding",
            Field::Stride => "stride",
            Field::Scale => "scale",
            Field::Threshold => "threshold",
            Field::OutSize => "out_size",
            Field::SecondSource => "second_source",
        }
    }
}

/// Required and optional parameter fields per operator.
pub fn field_manifest(op: OpKind) -> (&'static [Field], &'static [Field]) {
    use Field::*;
    match op {
        OpKind::Rearrange | OpKind::Transpose | OpKind::Rot90 | OpKind::Split => (&[], &[]),
        OpKind::Resize => (&[], &[Scale, OutSize]),
        OpKind::Bboxcal => (&[Threshold], &[]),
        OpKind::Img2col => (&[Kernel], &[Padding, Stride]),
        OpKind::PixelShuffle | OpKind::PixelUnshuffle | OpKind::Upsample => (&[Scale], &[]),
        OpKind::Route | OpKind::Add => (&[SecondSource], &[]),
    }
}

impl OperatorParams {
    pub fn has(&self, field: Field) -> bool {
        match field {
            Field::Kernel => self.kernel.is_some(),
            Field::Padding => self.padding.is_some(),
            Field::Stride => self.stride.is_some(),
            Field::Scale => self.scale.is_some(),
            Field::Threshold => self.threshold.is_some(),
            Field::OutSize => self.out_size.is_some(),
            Field::SecondSource => self.second_source.is_some(),
        }
    }

    /// Checks the field manifest of `op`: every required field present, no foreign field set.
    pub fn validate_for(&self, op: OpKind) -> Result<()> {
        let (required, optional) = field_manifest(op);
        for &f in required {
            if !self.has(f) {
                return Err(TmuError::MissingParam { op, field: f.name() });
            }
        }
        use Field::*;
        for f in [Kernel, Padding, Stride, Scale, Threshold, OutSize, SecondSource] {
            if self.has(f) && !required.contains(&f) && !optional.contains(&f) {
                return Err(TmuError::UnexpectedParam { op, field: f.name() });
            }
        }
        if op == OpKind::Resize && self.scale.is_none() && self.out_size.is_none() {
            return Err(TmuError::MissingParam { op, field: "scale" });
        }
        if matches!(self.scale, Some(0)) {
            return Err(TmuError::InvalidParam("scale must be positive".into()));
        }
        if let Some((sx, sy)) = self.stride {
            if sx == 0 || sy == 0 {
                return Err(TmuError::InvalidParam("stride must be >= 1".into()));
            }
        }
        if let Some((kx, ky)) = self.kernel {
            if kx == 0 || ky == 0 {
                return Err(TmuError::InvalidParam("kernel must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn scale_factor(&self) -> u32 {
        self.scale.unwrap_or(1)
    }

    pub fn stride_or_default(&self) -> (u32, u32) {
        self.stride.unwrap_or((1, 1))
    }

    pub fn padding_or_default(&self) -> (u32, u32) {
        self.padding.unwrap_or((0, 0))
    }
}

fn shape_err(op: OpKind, reason: impl Into<String>) -> TmuError {
    TmuError::Shape { op: op.mnemonic(), reason: reason.into() }
}

fn require_int8(op: OpKind, src: &TensorDesc) -> Result<()> {
    if src.elem_bytes != 1 {
        return Err(shape_err(op, format!("requires 1-byte elements, got {}", src.elem_bytes)));
    }
    Ok(())
}

/// Img2col output grid `(width, height)` for a source tensor.
pub fn img2col_grid(src: &TensorDesc, params: &OperatorParams) -> Result<(u32, u32)> {
    let op = OpKind::Img2col;
    let (kx, ky) = params.kernel.ok_or(TmuError::MissingParam { op, field: "kernel" })?;
    let (px, py) = params.padding_or_default();
    let (sx, sy) = params.stride_or_default();
    let padded_w = src.width as i64 + 2 * px as i64;
    let padded_h = src.height as i64 + 2 * py as i64;
    if (kx as i64) > padded_w || (ky as i64) > padded_h {
        return Err(shape_err(op, format!("kernel {kx}x{ky} larger than padded input")));
    }
    let ow = (padded_w - kx as i64) / sx as i64 + 1;
    let oh = (padded_h - ky as i64) / sy as i64 + 1;
    Ok((ow as u32, oh as u32))
}

/// Resize target `(height, width)`.
pub fn resize_target(src: &TensorDesc, params: &OperatorParams) -> Result<(u32, u32)> {
    let op = OpKind::Resize;
    if let Some((h, w)) = params.out_size {
        if h == 0 || w == 0 {
            return Err(shape_err(op, "target size must be >= 1"));
        }
        return Ok((h, w));
    }
    let s = params.scale.ok_or(TmuError::MissingParam { op, field: "scale" })?;
    if !src.height.is_multiple_of(s) || !src.width.is_multiple_of(s) {
        return Err(shape_err(op, format!("{src} not divisible by scale {s}")));
    }
    Ok((src.height / s, src.width / s))
}

/// Detection records held by each pixel of a Bboxcal input.
pub fn bbox_records_per_pixel(src: &TensorDesc) -> u32 {
    src.channels / BBOX_RECORD as u32
}

/// Output descriptors an operator produces at `dst_base`.
///
/// Split yields two descriptors laid out back to back; every other operator
/// yields one. The Bboxcal descriptor is the worst-case capacity (header plus
/// every record surviving).
pub fn output_descs(
    op: OpKind,
    src: &TensorDesc,
    params: &OperatorParams,
    dst_base: u64,
) -> Result<Vec<TensorDesc>> {
    src.validate()?;
    params.validate_for(op)?;
    let eb = src.elem_bytes;
    let out = |h: u32, w: u32, c: u32| TensorDesc {
        height: h,
        width: w,
        channels: c,
        elem_bytes: eb,
        base_addr: dst_base,
    };
    let d = match op {
        OpKind::Rearrange => {
            if !(BUS_BYTES as u32).is_multiple_of(eb) {
                return Err(shape_err(op, "element width must divide the bus width"));
            }
            let bytes = src.channels * eb;
            let padded = bytes.div_ceil(BUS_BYTES as u32) * BUS_BYTES as u32;
            out(src.height, src.width, padded / eb)
        }
        OpKind::Resize => {
            require_int8(op, src)?;
            let (h, w) = resize_target(src, params)?;
            out(h, w, src.channels)
        }
        OpKind::Bboxcal => {
            require_int8(op, src)?;
            let r = bbox_records_per_pixel(src);
            if r == 0 {
                return Err(shape_err(op, format!("{} channels hold no {BBOX_RECORD}-element record", src.channels)));
            }
            let cap = BBOX_HEADER as u64 + src.pixels() * r as u64 * BBOX_RECORD as u64;
            let cap = u32::try_from(cap).map_err(|_| shape_err(op, "output capacity overflow"))?;
            out(1, 1, cap)
        }
        OpKind::Img2col => {
            let (ow, oh) = img2col_grid(src, params)?;
            let (kx, ky) = params.kernel.unwrap();
            out(oh, ow, kx * ky * src.channels)
        }
        OpKind::Transpose | OpKind::Rot90 => out(src.width, src.height, src.channels),
        OpKind::PixelShuffle => {
            let s = params.scale_factor();
            if !src.channels.is_multiple_of(s * s) {
                return Err(shape_err(op, format!("channels {} not divisible by s^2 = {}", src.channels, s * s)));
            }
            out(src.height * s, src.width * s, src.channels / (s * s))
        }
        OpKind::PixelUnshuffle => {
            let s = params.scale_factor();
            if !src.height.is_multiple_of(s) || !src.width.is_multiple_of(s) {
                return Err(shape_err(op, format!("{src} not divisible by scale {s}")));
            }
            out(src.height / s, src.width / s, src.channels * s * s)
        }
        OpKind::Upsample => {
            let s = params.scale_factor();
            out(src.height * s, src.width * s, src.channels)
        }
        OpKind::Route => {
            let b = params.second_source.unwrap();
            b.validate()?;
            if b.height != src.height || b.width != src.width || b.elem_bytes != eb {
                return Err(shape_err(op, format!("sources {src} and {b} differ in H, W or element width")));
            }
            out(src.height, src.width, src.channels + b.channels)
        }
        OpKind::Split => {
            if !src.channels.is_multiple_of(2) {
                return Err(shape_err(op, format!("odd channel count {}", src.channels)));
            }
            let half = out(src.height, src.width, src.channels / 2);
            let second = half.at(dst_base + half.byte_len());
            return Ok(vec![half, second]);
        }
        OpKind::Add => {
            require_int8(op, src)?;
            let b = params.second_source.unwrap();
            if !b.same_shape(src) {
                return Err(shape_err(op, format!("sources {src} and {b} differ in shape")));
            }
            out(src.height, src.width, src.channels)
        }
    };
    Ok(vec![d])
}

/// Total destination extent as one contiguous region.
pub fn output_region(descs: &[TensorDesc]) -> Range<u64> {
    let start = descs.iter().map(|d| d.base_addr).min().unwrap_or(0);
    let end = descs.iter().map(|d| d.region().end).max().unwrap_or(0);
    start..end
}
