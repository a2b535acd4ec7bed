//! Unified affine address abstraction for coarse-grained operators.
//!
//! Each operator is described by a rational matrix `A` and offset `B` that
//! map a source index to an output index `(x_o, y_o, c_o)`:
//!
//! ```text
//! (x_o, y_o, c_o)ᵀ = A · (x_i, y_i, c_i, aux₀, aux₁)ᵀ + B
//! addr_out = addr_base + ((y_o + x_o) · C_o + c_o) · elem_bytes
//! ```
//!
//! `y_o` is pre-multiplied by the output row pitch, so `y_o + x_o` is the
//! output pixel index and `C_o` the channel block per pixel. The two
//! auxiliary columns carry phase or replication counters for operators
//! whose channel or spatial index splits (PixelShuffle, PixelUnshuffle,
//! Upsample, Split); they are zero for the rest.
//!
//! Two families of matrices are available. [`MapMode::PaperLiteral`]
//! reproduces the published table entries verbatim. [`MapMode::OracleConsistent`]
//! carries the corrections needed for the mapping to agree with the golden
//! operators on arbitrary shapes.

use num_integer::Integer;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Result, TmuError};
use crate::tensor::{img2col_grid, output_descs, OpKind, OperatorParams, TensorDesc, BUS_BYTES};

pub type Rational = Ratio<i64>;

pub const COLS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapMode {
    PaperLiteral,
    OracleConsistent,
}

/// Source of the two auxiliary columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuxCounter {
    None,
    /// `(dx, dy) = (c mod s, (c / s) mod s)`.
    ChannelPhase { s: u32 },
    /// `(dx, dy) = (x mod s, y mod s)`.
    SpatialPhase { s: u32 },
    /// `(dx, dy)` ranges freely over `[0, s)²`; one source element has `s²` images.
    Replicate { s: u32 },
    /// `aux₀ = c / half`.
    ChannelHalf { half: u32 },
    /// Literal Route: `aux₀` is the second source's channel index.
    SecondSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineMap {
    pub op: OpKind,
    pub mode: MapMode,
    pub a: [[Rational; COLS]; 3],
    pub b: [Rational; 3],
    /// `C_o`: channel block count used for linearization.
    pub out_channels: u32,
    /// Output row pitch folded into `y_o`.
    pub out_width: u32,
    pub out_width_scaled: bool,
    pub aux: AuxCounter,
    /// Source extent `(width, height, channels)`.
    pub src_extent: [u32; 3],
    /// Destination extent in elements.
    pub dst_elems: u64,
}

fn r(n: i64) -> Rational {
    Rational::from_integer(n)
}

fn q(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

fn zero_rows() -> [[Rational; COLS]; 3] {
    [[r(0); COLS]; 3]
}

/// Builds the A/B pair for a coarse-grained operator.
pub fn build_affine_map(
    op: OpKind,
    src: &TensorDesc,
    params: &OperatorParams,
    mode: MapMode,
) -> Result<AffineMap> {
    if matches!(op, OpKind::Rearrange | OpKind::Resize | OpKind::Bboxcal) {
        return Err(TmuError::Unsupported(op));
    }
    let outs = output_descs(op, src, params, 0)?;
    let dst = outs[0];
    let (w, h, c) = (src.width as i64, src.height as i64, src.channels as i64);
    let s = params.scale_factor() as i64;
    let mut a = zero_rows();
    let mut b = [r(0); 3];
    let mut aux = AuxCounter::None;
    let dst_elems: u64 = outs.iter().map(|d| d.elems()).sum();
    let mut out_channels = dst.channels;
    let mut out_width = dst.width as i64;

    match (op, mode) {
        (OpKind::Img2col, _) => {
            let (kx, ky) = params.kernel.unwrap();
            let (px, py) = params.padding_or_default();
            let (sx, sy) = params.stride_or_default();
            let (kx, ky, px, py, sx, sy) =
                (kx as i64, ky as i64, px as i64, py as i64, sx as i64, sy as i64);
            a[0][0] = q(1, sx);
            a[1][1] = q(w, sy);
            a[2][2] = r(1);
            b[0] = q(2 * px - kx, sx) + r(1);
            b[1] = q(2 * py - ky, sy) + r(1);
            out_width = w;
        }
        (OpKind::Transpose, MapMode::PaperLiteral) => {
            a[0][1] = r(1);
            a[1][0] = r(w);
            a[2][2] = r(1);
            out_width = w;
        }
        (OpKind::Transpose, MapMode::OracleConsistent) => {
            a[0][1] = r(1);
            a[1][0] = r(h);
            a[2][2] = r(1);
        }
        (OpKind::Rot90, MapMode::PaperLiteral) => {
            a[0][1] = r(-1);
            a[1][0] = r(w);
            a[2][2] = r(1);
            b[0] = r(w);
            out_width = w;
        }
        (OpKind::Rot90, MapMode::OracleConsistent) => {
            // x_o = y_i, y_o = H·((W-1) - x_i)
            a[0][1] = r(1);
            a[1][0] = r(-h);
            a[2][2] = r(1);
            b[1] = r(h * (w - 1));
        }
        (OpKind::PixelShuffle, MapMode::PaperLiteral) => {
            a[0][0] = r(1);
            a[1][1] = r(s * w);
            a[2][2] = q(1, s);
            out_width = s * w;
        }
        (OpKind::PixelShuffle, MapMode::OracleConsistent) => {
            let wo = s * w;
            a[0][0] = r(s);
            a[0][3] = r(1);
            a[1][1] = r(s * wo);
            a[1][4] = r(wo);
            a[2][2] = q(1, s * s);
            a[2][3] = q(-1, s * s);
            a[2][4] = q(-1, s);
            aux = AuxCounter::ChannelPhase { s: s as u32 };
        }
        (OpKind::PixelUnshuffle, MapMode::PaperLiteral) => {
            a[0][0] = r(s);
            a[1][1] = r(w);
            a[2][2] = r(1);
            out_width = w;
        }
        (OpKind::PixelUnshuffle, MapMode::OracleConsistent) => {
            let wo = w / s;
            a[0][0] = q(1, s);
            a[0][3] = q(-1, s);
            a[1][1] = q(wo, s);
            a[1][4] = q(-wo, s);
            a[2][2] = r(s * s);
            a[2][3] = r(1);
            a[2][4] = r(s);
            aux = AuxCounter::SpatialPhase { s: s as u32 };
        }
        (OpKind::Upsample, MapMode::PaperLiteral) => {
            a[0][0] = r(s);
            a[1][1] = r(s * s * w);
            a[2][2] = r(1);
            out_width = s * w;
        }
        (OpKind::Upsample, MapMode::OracleConsistent) => {
            let wo = s * w;
            a[0][0] = r(s);
            a[0][3] = r(1);
            a[1][1] = r(s * wo);
            a[1][4] = r(wo);
            a[2][2] = r(1);
            aux = AuxCounter::Replicate { s: s as u32 };
        }
        (OpKind::Route, MapMode::PaperLiteral) => {
            a[0][0] = r(1);
            a[1][1] = r(w);
            a[2][2] = r(1);
            a[2][3] = r(1);
            aux = AuxCounter::SecondSource;
        }
        (OpKind::Route, MapMode::OracleConsistent) | (OpKind::Add, _) => {
            a[0][0] = r(1);
            a[1][1] = r(w);
            a[2][2] = r(1);
        }
        (OpKind::Split, MapMode::PaperLiteral) => {
            a[0][0] = r(1);
            a[1][1] = r(w);
            a[2][2] = q(1, 2);
        }
        (OpKind::Split, MapMode::OracleConsistent) => {
            // The second half is stacked below the first as extra rows.
            let half = c / 2;
            a[0][0] = r(1);
            a[1][1] = r(w);
            a[1][3] = r(h * w);
            a[2][2] = r(1);
            a[2][3] = r(-half);
            aux = AuxCounter::ChannelHalf { half: half as u32 };
            out_channels = half as u32;
        }
        (OpKind::Rearrange | OpKind::Resize | OpKind::Bboxcal, _) => unreachable!(),
    }

    Ok(AffineMap {
        op,
        mode,
        a,
        b,
        out_channels,
        out_width: out_width as u32,
        out_width_scaled: true,
        aux,
        src_extent: [src.width, src.height, src.channels],
        dst_elems,
    })
}

impl AffineMap {
    /// Copy-pass maps for Route: the second pass shifts `c_o` by the first
    /// source's channel count and walks the second source.
    pub fn route_passes(&self, first: &TensorDesc, second: &TensorDesc) -> [AffineMap; 2] {
        let mut p0 = self.clone();
        p0.src_extent = [first.width, first.height, first.channels];
        let mut p1 = p0.clone();
        p1.b[2] += r(first.channels as i64);
        p1.src_extent = [second.width, second.height, second.channels];
        [p0, p1]
    }

    /// Auxiliary counters derived from a source index.
    pub fn derived_aux(&self, idx: [u32; 3]) -> [i64; 2] {
        let [x, y, c] = idx.map(|v| v as i64);
        match self.aux {
            AuxCounter::ChannelPhase { s } => {
                let s = s as i64;
                [c % s, (c / s) % s]
            }
            AuxCounter::SpatialPhase { s } => {
                let s = s as i64;
                [x % s, y % s]
            }
            AuxCounter::ChannelHalf { half } => [c / half as i64, 0],
            AuxCounter::None | AuxCounter::Replicate { .. } | AuxCounter::SecondSource => [0, 0],
        }
    }

    /// Number of output images per source element.
    pub fn replication(&self) -> u32 {
        match self.aux {
            AuxCounter::Replicate { s } => s * s,
            _ => 1,
        }
    }

    fn check_extent(&self, idx: [u32; 3]) -> Result<()> {
        if idx.iter().zip(self.src_extent).any(|(&i, e)| i >= e) {
            return Err(TmuError::IndexOutOfRange {
                index: idx.map(|v| v as u64),
                extent: self.src_extent.map(|v| v as u64),
            });
        }
        Ok(())
    }

    /// Exact `A·v + B` with explicit auxiliary counters.
    pub fn apply(&self, idx: [u32; 3], aux: [i64; 2]) -> Result<[i64; 3]> {
        self.check_extent(idx)?;
        let v = [idx[0] as i64, idx[1] as i64, idx[2] as i64, aux[0], aux[1]];
        let mut out = [0i64; 3];
        for (row, o) in out.iter_mut().enumerate() {
            let mut acc = self.b[row];
            for (col, &vi) in v.iter().enumerate() {
                acc += self.a[row][col] * vi;
            }
            if !acc.is_integer() {
                return Err(TmuError::NonIntegral { component: row, value: acc.to_string() });
            }
            *o = acc.to_integer();
        }
        Ok(out)
    }

    /// All output indices a source element maps to.
    pub fn images(&self, idx: [u32; 3]) -> Result<Vec<[i64; 3]>> {
        match self.aux {
            AuxCounter::Replicate { s } => {
                let s = s as i64;
                let mut v = Vec::with_capacity((s * s) as usize);
                for dy in 0..s {
                    for dx in 0..s {
                        v.push(self.apply(idx, [dx, dy])?);
                    }
                }
                Ok(v)
            }
            _ => Ok(vec![self.apply(idx, self.derived_aux(idx))?]),
        }
    }

    /// Integer form of `output_address ∘ map_index` over a common denominator.
    pub fn compile(&self) -> AddressKernel {
        let co = r(self.out_channels as i64);
        let coef: Vec<Rational> = (0..COLS)
            .map(|j| co * (self.a[0][j] + self.a[1][j]) + self.a[2][j])
            .collect();
        let constant = co * (self.b[0] + self.b[1]) + self.b[2];
        let den = coef
            .iter()
            .chain(std::iter::once(&constant))
            .fold(1i64, |acc, v| acc.lcm(v.denom()));
        let scale = |v: &Rational| (v * den).to_integer();
        AddressKernel {
            coef: [scale(&coef[0]), scale(&coef[1]), scale(&coef[2]), scale(&coef[3]), scale(&coef[4])],
            constant: scale(&constant),
            den,
            dst_elems: self.dst_elems,
        }
    }

    /// Matrices as exact `"num/den"` strings.
    pub fn to_json(&self) -> Value {
        let frac = |v: &Rational| format!("{}/{}", v.numer(), v.denom());
        json!({
            "op": self.op.mnemonic(),
            "mode": match self.mode {
                MapMode::PaperLiteral => "paper-literal",
                MapMode::OracleConsistent => "oracle-consistent",
            },
            "a": self.a.iter().map(|row| row.iter().map(frac).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "b": self.b.iter().map(frac).collect::<Vec<_>>(),
            "out_channels": self.out_channels,
            "out_width": self.out_width,
            "out_width_scaled": self.out_width_scaled,
            "aux": serde_json::to_value(self.aux).unwrap(),
        })
    }
}

impl AffineMap {
    /// Binary form carried in an instruction's address-field block.
    pub fn encode_fields(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(40 + 18 * 16);
        let (tag, arg) = match self.aux {
            AuxCounter::None => (0u8, 0u32),
            AuxCounter::ChannelPhase { s } => (1, s),
            AuxCounter::SpatialPhase { s } => (2, s),
            AuxCounter::Replicate { s } => (3, s),
            AuxCounter::ChannelHalf { half } => (4, half),
            AuxCounter::SecondSource => (5, 0),
        };
        v.push(self.op as u8);
        v.push(self.mode as u8);
        v.push(tag);
        v.push(self.out_width_scaled as u8);
        for w in [arg, self.out_channels, self.out_width] {
            v.extend_from_slice(&w.to_le_bytes());
        }
        for w in self.src_extent {
            v.extend_from_slice(&w.to_le_bytes());
        }
        v.extend_from_slice(&self.dst_elems.to_le_bytes());
        for x in self.a.iter().flatten().chain(self.b.iter()) {
            v.extend_from_slice(&x.numer().to_le_bytes());
            v.extend_from_slice(&x.denom().to_le_bytes());
        }
        v
    }

    pub fn decode_fields(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| TmuError::Decode(crate::error::DecodeError::Field(format!("address block: {what}")));
        if bytes.len() != 36 + 18 * 16 {
            return Err(bad("wrong length"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let i64_at = |i: usize| i64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let op = *OpKind::ALL.get(bytes[0] as usize).ok_or_else(|| bad("operator"))?;
        let mode = match bytes[1] {
            0 => MapMode::PaperLiteral,
            1 => MapMode::OracleConsistent,
            _ => return Err(bad("mode")),
        };
        let arg = u32_at(4);
        let aux = match bytes[2] {
            0 => AuxCounter::None,
            1 => AuxCounter::ChannelPhase { s: arg },
            2 => AuxCounter::SpatialPhase { s: arg },
            3 => AuxCounter::Replicate { s: arg },
            4 => AuxCounter::ChannelHalf { half: arg },
            5 => AuxCounter::SecondSource,
            _ => return Err(bad("aux counter")),
        };
        if matches!(aux, AuxCounter::ChannelPhase { s: 0 } | AuxCounter::SpatialPhase { s: 0 } | AuxCounter::ChannelHalf { half: 0 }) {
            return Err(bad("zero aux parameter"));
        }
        let mut vals = [r(0); 18];
        for (k, v) in vals.iter_mut().enumerate() {
            let (n, d) = (i64_at(36 + 16 * k), i64_at(44 + 16 * k));
            if d <= 0 {
                return Err(bad("denominator"));
            }
            *v = q(n, d);
        }
        let mut a = zero_rows();
        for (k, v) in vals[..15].iter().enumerate() {
            a[k / COLS][k % COLS] = *v;
        }
        Ok(AffineMap {
            op,
            mode,
            a,
            b: [vals[15], vals[16], vals[17]],
            out_channels: u32_at(8),
            out_width: u32_at(12),
            out_width_scaled: bytes[3] != 0,
            aux,
            src_extent: [u32_at(16), u32_at(20), u32_at(24)],
            dst_elems: u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
        })
    }
}

/// `map_index`: the output index of one source element.
pub fn map_index(m: &AffineMap, idx: [u32; 3]) -> Result<[i64; 3]> {
    m.apply(idx, m.derived_aux(idx))
}

/// `addr_base + ((y_o + x_o)·C_o + c_o)·elem_bytes`, bounded by the destination extent.
pub fn output_address(m: &AffineMap, out_idx: [i64; 3], base: u64, elem_bytes: u32) -> Result<u64> {
    let lin = (out_idx[1] + out_idx[0]) * m.out_channels as i64 + out_idx[2];
    let len = m.dst_elems * elem_bytes as u64;
    if lin < 0 || lin as u64 >= m.dst_elems {
        let addr = base as i64 + lin * elem_bytes as i64;
        return Err(TmuError::AddressOutOfRange { addr: addr.max(0) as u64, base, len });
    }
    Ok(base + lin as u64 * elem_bytes as u64)
}

/// Integer address generator: `lin = (Σ coefⱼ·vⱼ + constant) / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressKernel {
    pub coef: [i64; COLS],
    pub constant: i64,
    pub den: i64,
    pub dst_elems: u64,
}

impl AddressKernel {
    #[inline]
    pub fn linear(&self, x: u32, y: u32, c: u32, aux: [i64; 2]) -> Option<u64> {
        let acc = self.coef[0] * x as i64
            + self.coef[1] * y as i64
            + self.coef[2] * c as i64
            + self.coef[3] * aux[0]
            + self.coef[4] * aux[1]
            + self.constant;
        if acc % self.den != 0 {
            return None;
        }
        let lin = acc / self.den;
        (lin >= 0 && (lin as u64) < self.dst_elems).then_some(lin as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Burst {
    /// `None` marks a zero-fill (Img2col padding).
    pub src: Option<u64>,
    pub dst: u64,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BurstPlan {
    pub bursts: Vec<Burst>,
    pub burst_bytes: u32,
}

impl BurstPlan {
    pub fn new(burst_bytes: u32) -> Self {
        Self { bursts: Vec::new(), burst_bytes }
    }

    pub fn total_bytes(&self) -> u64 {
        self.bursts.iter().map(|b| b.len as u64).sum()
    }

    fn push(&mut self, src: Option<u64>, dst: u64, len: u32) {
        if let Some(last) = self.bursts.last_mut() {
            let src_next = match (last.src, src) {
                (Some(a), Some(b)) => a + last.len as u64 == b,
                (None, None) => true,
                _ => false,
            };
            if src_next && last.dst + last.len as u64 == dst && last.len + len <= self.burst_bytes {
                last.len += len;
                return;
            }
        }
        self.bursts.push(Burst { src, dst, len });
    }

    fn extend(&mut self, other: BurstPlan) {
        self.bursts.extend(other.bursts);
    }
}

/// Walks the source c-innermost, then x, then y, and groups contiguous
/// source/destination runs into bursts of at most `burst_bytes`.
pub fn enumerate_bursts(m: &AffineMap, src: &TensorDesc, dst_base: u64) -> Result<BurstPlan> {
    enumerate_bursts_with(m, src, dst_base, BUS_BYTES as u32)
}

pub fn enumerate_bursts_with(
    m: &AffineMap,
    src: &TensorDesc,
    dst_base: u64,
    burst_bytes: u32,
) -> Result<BurstPlan> {
    let eb = src.elem_bytes;
    let mut plan = BurstPlan::new(burst_bytes);
    let reps: Vec<[i64; 2]> = match m.aux {
        AuxCounter::Replicate { s } => (0..s as i64)
            .flat_map(|dy| (0..s as i64).map(move |dx| [dx, dy]))
            .collect(),
        _ => vec![[0, 0]],
    };
    for y in 0..src.height {
        for x in 0..src.width {
            for rep in &reps {
                for c in 0..src.channels {
                    let idx = [x, y, c];
                    let aux = match m.aux {
                        AuxCounter::Replicate { .. } => *rep,
                        _ => m.derived_aux(idx),
                    };
                    let out = m.apply(idx, aux)?;
                    let dst = output_address(m, out, dst_base, eb)?;
                    plan.push(Some(src.addr(x, y, c)), dst, eb);
                }
            }
        }
    }
    Ok(plan)
}

/// Img2col gather plan: one entry per output window tap, zero-fill where
/// the tap falls in the padding. Grid shape comes from the affine map.
pub fn enumerate_img2col_bursts(
    m: &AffineMap,
    src: &TensorDesc,
    params: &OperatorParams,
    dst_base: u64,
) -> Result<BurstPlan> {
    let (ow, oh) = img2col_grid(src, params)?;
    // The map evaluated at the input extent reproduces the grid width.
    let at_extent = m.a[0][0] * src.width as i64 + m.b[0];
    debug_assert_eq!(at_extent.floor().to_integer(), ow as i64);
    let (kx, ky) = params.kernel.unwrap();
    let (px, py) = params.padding_or_default();
    let (sx, sy) = params.stride_or_default();
    let block = src.pixel_bytes() as u32;
    let out_pixel = m.out_channels as u64 * src.elem_bytes as u64;
    let mut plan = BurstPlan::new(BUS_BYTES as u32);
    for j in 0..oh {
        for i in 0..ow {
            let pix = dst_base + (j as u64 * ow as u64 + i as u64) * out_pixel;
            for v in 0..ky {
                for u in 0..kx {
                    let xi = (i * sx) as i64 - px as i64 + u as i64;
                    let yi = (j * sy) as i64 - py as i64 + v as i64;
                    let inside =
                        (0..src.width as i64).contains(&xi) && (0..src.height as i64).contains(&yi);
                    let tap = pix + (v * kx + u) as u64 * block as u64;
                    let mut off = 0;
                    while off < block {
                        let len = (block - off).min(BUS_BYTES as u32);
                        let s = inside.then(|| src.addr(xi as u32, yi as u32, 0) + off as u64);
                        plan.push(s, tap + off as u64, len);
                        off += len;
                    }
                }
            }
        }
    }
    Ok(plan)
}

/// Full burst plan for a coarse-grained operator (both Route passes).
pub fn plan_operator(
    op: OpKind,
    src: &TensorDesc,
    params: &OperatorParams,
    dst_base: u64,
    mode: MapMode,
) -> Result<BurstPlan> {
    let m = build_affine_map(op, src, params, mode)?;
    match op {
        OpKind::Img2col => enumerate_img2col_bursts(&m, src, params, dst_base),
        OpKind::Route => {
            let second = params.second_source.unwrap();
            let [p0, p1] = m.route_passes(src, &second);
            let mut plan = enumerate_bursts(&p0, src, dst_base)?;
            plan.extend(enumerate_bursts(&p1, &second, dst_base)?);
            Ok(plan)
        }
        _ => enumerate_bursts(&m, src, dst_base),
    }
}

/// Segment cursor for the Branch stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentCursor {
    pub index: u32,
    pub total: u32,
    pub base: u64,
    pub segment_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Next(SegmentCursor),
    Done,
}

impl SegmentCursor {
    pub fn new(total: u32, base: u64, segment_bytes: u64) -> Self {
        Self { index: 0, total, base, segment_bytes }
    }
}

pub fn advance_branch(state: SegmentCursor) -> Result<Branch> {
    if state.index >= state.total {
        return Err(TmuError::CursorDone);
    }
    let index = state.index + 1;
    if index == state.total {
        return Ok(Branch::Done);
    }
    Ok(Branch::Next(SegmentCursor {
        index,
        base: state.base + state.segment_bytes,
        ..state
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::golden::golden_execute;
    use crate::tensor::SimMemory;
    use proptest::prelude::*;

    fn ints(m: &AffineMap) -> Vec<Vec<i64>> {
        m.a.iter().map(|row| row[..3].iter().map(|v| v.to_integer()).collect()).collect()
    }

    #[test]
    fn transpose_literal_matrix() {
        let src = TensorDesc::new(4, 4, 1, 0);
        let m = build_affine_map(OpKind::Transpose, &src, &OperatorParams::default(), MapMode::PaperLiteral).unwrap();
        assert_eq!(ints(&m), vec![vec![0, 1, 0], vec![4, 0, 0], vec![0, 0, 1]]);
        assert!(m.b.iter().all(|v| *v == r(0)));
        assert_eq!(map_index(&m, [1, 0, 0]).unwrap(), [0, 4, 0]);
    }

    #[test]
    fn add_and_unshuffle_literal_matrices() {
        let src = TensorDesc::new(3, 7, 2, 0);
        let b = src.at(1000);
        let p = OperatorParams { second_source: Some(b), ..Default::default() };
        let m = build_affine_map(OpKind::Add, &src, &p, MapMode::PaperLiteral).unwrap();
        assert_eq!(ints(&m), vec![vec![1, 0, 0], vec![0, 7, 0], vec![0, 0, 1]]);

        let src = TensorDesc::new(448, 448, 64, 0);
        let p = OperatorParams { scale: Some(2), ..Default::default() };
        let m = build_affine_map(OpKind::PixelUnshuffle, &src, &p, MapMode::PaperLiteral).unwrap();
        assert_eq!(ints(&m), vec![vec![2, 0, 0], vec![0, 448, 0], vec![0, 0, 1]]);

        let src = TensorDesc::new(4, 4, 1, 0);
        let m = build_affine_map(OpKind::PixelUnshuffle, &src, &p, MapMode::PaperLiteral).unwrap();
        let out = map_index(&m, [1, 1, 0]).unwrap();
        assert_eq!(out, [2, 4, 0]);
        // The literal reading lands at (4 + 2)·C_o with C_o = 4, past the 16-byte extent.
        assert_eq!((out[0] + out[1]) * m.out_channels as i64, 24);
        assert!(output_address(&m, out, 0, 1).is_err());
        let m = build_affine_map(OpKind::PixelUnshuffle, &src, &p, MapMode::OracleConsistent).unwrap();
        assert_eq!(output_address(&m, map_index(&m, [1, 1, 0]).unwrap(), 0, 1).unwrap(), 3);
    }

    #[test]
    fn identity_maps_origin_to_base() {
        let src = TensorDesc::new(1, 1, 1, 0);
        let p = OperatorParams { second_source: Some(src.at(8)), ..Default::default() };
        let m = build_affine_map(OpKind::Add, &src, &p, MapMode::OracleConsistent).unwrap();
        assert_eq!(map_index(&m, [0, 0, 0]).unwrap(), [0, 0, 0]);
        assert_eq!(output_address(&m, [0, 0, 0], 0x40, 1).unwrap(), 0x40);
    }

    #[test]
    fn transpose_two_by_two_addresses_match_golden() {
        let src = TensorDesc::new(2, 2, 1, 0);
        let m = build_affine_map(OpKind::Transpose, &src, &OperatorParams::default(), MapMode::OracleConsistent).unwrap();
        let out = map_index(&m, [1, 0, 0]).unwrap();
        assert_eq!(out, [0, 2, 0]);
        assert_eq!(output_address(&m, out, 0, 1).unwrap(), 2);

        let mut mem = SimMemory::new(64);
        mem.write(0, &[1, 2, 3, 4]).unwrap();
        golden_execute(OpKind::Transpose, &src, &OperatorParams::default(), 32, &mut mem).unwrap();
        let mut scattered = [0u8; 4];
        for y in 0..2 {
            for x in 0..2 {
                let a = output_address(&m, map_index(&m, [x, y, 0]).unwrap(), 0, 1).unwrap();
                scattered[a as usize] = mem.read(src.addr(x, y, 0), 1).unwrap()[0];
            }
        }
        assert_eq!(&scattered, mem.read(32, 4).unwrap());
    }

    #[test]
    fn unsupported_and_out_of_range() {
        let src = TensorDesc::new(2, 2, 3, 0);
        assert!(matches!(
            build_affine_map(OpKind::Rearrange, &src, &OperatorParams::default(), MapMode::OracleConsistent),
            Err(TmuError::Unsupported(_))
        ));
        let m = build_affine_map(OpKind::Transpose, &src, &OperatorParams::default(), MapMode::OracleConsistent).unwrap();
        assert!(matches!(map_index(&m, [2, 0, 0]), Err(TmuError::IndexOutOfRange { .. })));
    }

    #[test]
    fn literal_pixel_shuffle_is_non_integral() {
        let src = TensorDesc::new(2, 2, 4, 0);
        let p = OperatorParams { scale: Some(2), ..Default::default() };
        let m = build_affine_map(OpKind::PixelShuffle, &src, &p, MapMode::PaperLiteral).unwrap();
        assert!(matches!(map_index(&m, [0, 0, 1]), Err(TmuError::NonIntegral { component: 2, .. })));
    }

    #[test]
    fn burst_examples() {
        let one = TensorDesc::new(1, 1, 16, 0);
        let p = OperatorParams { second_source: Some(one.at(16)), ..Default::default() };
        let plan = plan_operator(OpKind::Add, &one, &p, 0, MapMode::OracleConsistent).unwrap();
        assert_eq!(plan.bursts, vec![Burst { src: Some(0), dst: 0, len: 16 }]);

        let t = TensorDesc::new(2, 2, 8, 0);
        let plan = plan_operator(OpKind::Transpose, &t, &OperatorParams::default(), 0x100, MapMode::OracleConsistent).unwrap();
        let got: Vec<_> = plan.bursts.iter().map(|b| (b.src.unwrap(), b.dst, b.len)).collect();
        assert_eq!(got, vec![(0, 0x100, 8), (8, 0x110, 8), (16, 0x108, 8), (24, 0x118, 8)]);

        let a = TensorDesc::new(1, 1, 16, 0);
        let b = TensorDesc::new(1, 1, 16, 0x40);
        let p = OperatorParams { second_source: Some(b), ..Default::default() };
        let plan = plan_operator(OpKind::Route, &a, &p, 0x100, MapMode::OracleConsistent).unwrap();
        assert_eq!(plan.bursts.len(), 2);
        assert_eq!(plan.bursts[1], Burst { src: Some(0x40), dst: 0x110, len: 16 });
    }

    #[test]
    fn full_width_bursts_except_row_tail() {
        let t = TensorDesc::new(3, 5, 40, 0);
        let plan = plan_operator(OpKind::Transpose, &t, &OperatorParams::default(), 0, MapMode::OracleConsistent).unwrap();
        // 40-byte channel blocks split 16 + 16 + 8.
        for chunk in plan.bursts.chunks(3) {
            assert_eq!(chunk.iter().map(|b| b.len).collect::<Vec<_>>(), vec![16, 16, 8]);
        }
    }

    #[test]
    fn img2col_plan_covers_destination_once() {
        let src = TensorDesc::new(5, 6, 3, 0);
        let p = OperatorParams { kernel: Some((3, 2)), padding: Some((1, 1)), stride: Some((2, 1)), ..Default::default() };
        let dst = output_descs(OpKind::Img2col, &src, &p, 0x1000).unwrap()[0];
        let plan = plan_operator(OpKind::Img2col, &src, &p, 0x1000, MapMode::OracleConsistent).unwrap();
        assert_eq!(plan.total_bytes(), dst.byte_len());
        let mut hits = vec![0u32; dst.byte_len() as usize];
        let mut reads = vec![0u32; src.byte_len() as usize];
        for b in &plan.bursts {
            for k in 0..b.len as u64 {
                hits[(b.dst + k - 0x1000) as usize] += 1;
                if let Some(s) = b.src {
                    reads[(s + k) as usize] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        // Source read count equals the number of in-bounds window taps.
        let (ow, oh) = (dst.width, dst.height);
        let mut taps = 0u32;
        for j in 0..oh {
            for i in 0..ow {
                for v in 0..2i64 {
                    for u in 0..3i64 {
                        let xi = i as i64 * 2 - 1 + u;
                        let yi = j as i64 - 1 + v;
                        if (0..6).contains(&xi) && (0..5).contains(&yi) {
                            taps += 3;
                        }
                    }
                }
            }
        }
        assert_eq!(reads.iter().sum::<u32>(), taps);
    }

    #[test]
    fn fields_round_trip() {
        let src = TensorDesc::new(4, 6, 8, 0);
        let p = OperatorParams { scale: Some(2), ..Default::default() };
        for mode in [MapMode::PaperLiteral, MapMode::OracleConsistent] {
            let m = build_affine_map(OpKind::PixelShuffle, &src, &p, mode).unwrap();
            assert_eq!(AffineMap::decode_fields(&m.encode_fields()).unwrap(), m);
        }
        assert!(AffineMap::decode_fields(&[0; 8]).is_err());
    }

    #[test]
    fn branch_cursor() {
        assert_eq!(advance_branch(SegmentCursor::new(1, 0, 64)).unwrap(), Branch::Done);
        let c = SegmentCursor::new(3, 0x100, 64);
        let Branch::Next(n) = advance_branch(c).unwrap() else { panic!() };
        assert_eq!((n.index, n.base), (1, 0x140));
        let last = SegmentCursor { index: 2, ..c };
        assert_eq!(advance_branch(last).unwrap(), Branch::Done);
        let past = SegmentCursor { index: 3, ..c };
        assert_eq!(advance_branch(past), Err(TmuError::CursorDone));
    }

    #[test]
    fn json_dump_uses_exact_fractions() {
        let src = TensorDesc::new(8, 8, 2, 0);
        let p = OperatorParams { kernel: Some((3, 3)), stride: Some((2, 2)), ..Default::default() };
        let m = build_affine_map(OpKind::Img2col, &src, &p, MapMode::PaperLiteral).unwrap();
        let j = m.to_json();
        assert_eq!(j["a"][0][0], "1/2");
        assert_eq!(j["a"][1][1], "4/1");
        assert_eq!(j["b"][0], "-1/2");
    }

    proptest! {
        #[test]
        fn kernel_agrees_with_rational_route(
            a in proptest::collection::vec((-20i64..20, 1i64..7), 15),
            b in proptest::collection::vec((-20i64..20, 1i64..7), 3),
            co in 1u32..8,
            x in 0u32..6, y in 0u32..6, c in 0u32..6, a0 in 0i64..3, a1 in 0i64..3,
        ) {
            let mut m = AffineMap {
                op: OpKind::Transpose,
                mode: MapMode::OracleConsistent,
                a: zero_rows(),
                b: [r(0); 3],
                out_channels: co,
                out_width: 1,
                out_width_scaled: true,
                aux: AuxCounter::None,
                src_extent: [6, 6, 6],
                dst_elems: u64::MAX / 4,
            };
            for (k, (n, d)) in a.iter().enumerate() {
                m.a[k / COLS][k % COLS] = q(*n, *d);
            }
            for (k, (n, d)) in b.iter().enumerate() {
                m.b[k] = q(*n, *d);
            }
            let kernel = m.compile();
            let exact = m.apply([x, y, c], [a0, a1]);
            let lin_exact = {
                let v = [x as i64, y as i64, c as i64, a0, a1];
                let mut acc = (m.b[0] + m.b[1]) * co as i64 + m.b[2];
                for (j, vj) in v.into_iter().enumerate() {
                    acc += ((m.a[0][j] + m.a[1][j]) * co as i64 + m.a[2][j]) * vj;
                }
                acc
            };
            match kernel.linear(x, y, c, [a0, a1]) {
                Some(lin) => prop_assert_eq!(r(lin as i64), lin_exact),
                None => prop_assert!(!lin_exact.is_integer() || lin_exact < r(0)),
            }
            if let Ok(out) = exact {
                let lin = (out[0] + out[1]) * co as i64 + out[2];
                prop_assert_eq!(r(lin), lin_exact);
            }
        }
    }
}
