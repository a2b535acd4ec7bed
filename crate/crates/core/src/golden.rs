//! Golden reference for all twelve operators, written directly from each
//! operator's per-element definition. Nothing here touches the address
//! matrices, the masking engine, or the cycle model.

use serde::Serialize;

use crate::error::{Result, TmuError};
use crate::tensor::{
    bbox_records_per_pixel, output_descs, OpKind, OperatorParams, SimMemory,
    TensorDesc, BBOX_HEADER, BBOX_OBJECTNESS, BBOX_RECORD,
};

/// Pixel-center source coordinate in Q8 with its two neighbours and weight.
///
/// Half-pixel centers: `src = (dst + 0.5) * in / out - 0.5`, rounded half-up
/// to 1/256 and clamped to the valid range.
pub fn resize_coord_q8(dst: u32, in_len: u32, out_len: u32) -> (u32, u32, u32) {
    let num = (2 * dst as i64 + 1) * in_len as i64 * 256;
    let den = 2 * out_len as i64;
    let q = (2 * num + den).div_euclid(2 * den) - 128;
    let q = q.clamp(0, (in_len as i64 - 1) * 256);
    let i0 = (q >> 8) as u32;
    let frac = (q & 0xff) as u32;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, frac)
}

/// Q8 bilinear blend of four neighbours, rounded half-up.
pub fn bilinear_q8(p00: u8, p10: u8, p01: u8, p11: u8, fx: u32, fy: u32) -> u8 {
    let (wx0, wy0) = (256 - fx, 256 - fy);
    let acc = p00 as u32 * wx0 * wy0
        + p10 as u32 * fx * wy0
        + p01 as u32 * wx0 * fy
        + p11 as u32 * fx * fy;
    ((acc + 32768) >> 16) as u8
}

/// Runs `op` on `src` by definition and writes the result at `dst_base`.
pub fn golden_execute(
    op: OpKind,
    src: &TensorDesc,
    params: &OperatorParams,
    dst_base: u64,
    mem: &mut SimMemory,
) -> Result<Vec<TensorDesc>> {
    mem.check_tensor(src)?;
    if let Some(b) = &params.second_source {
        mem.check_tensor(b)?;
    }
    let outs = output_descs(op, src, params, dst_base)?;
    for o in &outs {
        mem.check_tensor(o)?;
    }
    let input = mem.tensor(src)?.to_vec();
    let eb = src.elem_bytes as usize;
    let elem = |x: u32, y: u32, c: u32| {
        let o = src.offset(x, y, c) as usize;
        &input[o..o + eb]
    };
    let dst = outs[0];

    match op {
        OpKind::Rearrange => {
            let mut out = vec![0u8; dst.byte_len() as usize];
            let (pin, pout) = (src.pixel_bytes() as usize, dst.pixel_bytes() as usize);
            for p in 0..src.pixels() as usize {
                out[p * pout..p * pout + pin].copy_from_slice(&input[p * pin..(p + 1) * pin]);
            }
            mem.write(dst.base_addr, &out)?;
        }
        OpKind::Resize => {
            let mut out = vec![0u8; dst.byte_len() as usize];
            for oy in 0..dst.height {
                let (y0, y1, fy) = resize_coord_q8(oy, src.height, dst.height);
                for ox in 0..dst.width {
                    let (x0, x1, fx) = resize_coord_q8(ox, src.width, dst.width);
                    for c in 0..src.channels {
                        let v = bilinear_q8(
                            elem(x0, y0, c)[0],
                            elem(x1, y0, c)[0],
                            elem(x0, y1, c)[0],
                            elem(x1, y1, c)[0],
                            fx,
                            fy,
                        );
                        out[dst.offset(ox, oy, c) as usize] = v;
                    }
                }
            }
            mem.write(dst.base_addr, &out)?;
        }
        OpKind::Bboxcal => {
            let thr = params.threshold.unwrap();
            let per_pixel = bbox_records_per_pixel(src) as usize;
            let stride = src.pixel_bytes() as usize;
            let mut payload = Vec::new();
            let mut count = 0u32;
            for p in 0..src.pixels() as usize {
                for r in 0..per_pixel {
                    let rec = &input[p * stride + r * BBOX_RECORD..p * stride + (r + 1) * BBOX_RECORD];
                    if rec[BBOX_OBJECTNESS] > thr {
                        payload.extend_from_slice(rec);
                        count += 1;
                    }
                }
            }
            mem.write(dst.base_addr, &count.to_le_bytes())?;
            mem.write(dst.base_addr + BBOX_HEADER as u64, &payload)?;
        }
        OpKind::Img2col => {
            let (kx, ky) = params.kernel.unwrap();
            let (px, py) = params.padding_or_default();
            let (sx, sy) = params.stride_or_default();
            let mut out = vec![0u8; dst.byte_len() as usize];
            for j in 0..dst.height {
                for i in 0..dst.width {
                    for v in 0..ky {
                        for u in 0..kx {
                            let xi = (i * sx) as i64 - px as i64 + u as i64;
                            let yi = (j * sy) as i64 - py as i64 + v as i64;
                            let inside = (0..src.width as i64).contains(&xi)
                                && (0..src.height as i64).contains(&yi);
                            for c in 0..src.channels {
                                let co = (v * kx + u) * src.channels + c;
                                let o = dst.offset(i, j, co) as usize;
                                if inside {
                                    out[o..o + eb].copy_from_slice(elem(xi as u32, yi as u32, c));
                                }
                            }
                        }
                    }
                }
            }
            mem.write(dst.base_addr, &out)?;
        }
        OpKind::Transpose | OpKind::Rot90 | OpKind::PixelShuffle | OpKind::PixelUnshuffle
        | OpKind::Upsample => {
            let s = params.scale_factor();
            let mut out = vec![0u8; dst.byte_len() as usize];
            for yo in 0..dst.height {
                for xo in 0..dst.width {
                    for co in 0..dst.channels {
                        let (xi, yi, ci) = match op {
                            OpKind::Transpose => (yo, xo, co),
                            // x_o = y_i, y_o = (W - 1) - x_i
                            OpKind::Rot90 => (src.width - 1 - yo, xo, co),
                            OpKind::PixelShuffle => {
                                let (dx, dy) = (xo % s, yo % s);
                                (xo / s, yo / s, co * s * s + dy * s + dx)
                            }
                            OpKind::PixelUnshuffle => {
                                let (c, phase) = (co / (s * s), co % (s * s));
                                (xo * s + phase % s, yo * s + phase / s, c)
                            }
                            OpKind::Upsample => (xo / s, yo / s, co),
                            _ => unreachable!(),
                        };
                        let o = dst.offset(xo, yo, co) as usize;
                        out[o..o + eb].copy_from_slice(elem(xi, yi, ci));
                    }
                }
            }
            mem.write(dst.base_addr, &out)?;
        }
        OpKind::Route => {
            let b = params.second_source.unwrap();
            let second = mem.tensor(&b)?.to_vec();
            let (pa, pb) = (src.pixel_bytes() as usize, b.pixel_bytes() as usize);
            let mut out = Vec::with_capacity(dst.byte_len() as usize);
            for p in 0..src.pixels() as usize {
                out.extend_from_slice(&input[p * pa..(p + 1) * pa]);
                out.extend_from_slice(&second[p * pb..(p + 1) * pb]);
            }
            mem.write(dst.base_addr, &out)?;
        }
        OpKind::Split => {
            let half = outs[0].pixel_bytes() as usize;
            let (mut lo, mut hi) = (Vec::new(), Vec::new());
            for px in input.chunks_exact(2 * half) {
                lo.extend_from_slice(&px[..half]);
                hi.extend_from_slice(&px[half..]);
            }
            mem.write(outs[0].base_addr, &lo)?;
            mem.write(outs[1].base_addr, &hi)?;
        }
        OpKind::Add => {
            let b = params.second_source.unwrap();
            let other = mem.tensor(&b)?.to_vec();
            let out: Vec<u8> = input
                .iter()
                .zip(&other)
                .map(|(&a, &b)| (a as i8).saturating_add(b as i8) as u8)
                .collect();
            mem.write(dst.base_addr, &out)?;
        }
    }
    Ok(outs)
}

/// Outcome of an element-wise tensor comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum MatchReport {
    Match { max_diff: u32 },
    Mismatch { at: (u32, u32, u32), left: Vec<u8>, right: Vec<u8> },
}

impl MatchReport {
    pub fn is_match(&self) -> bool {
        matches!(self, MatchReport::Match { .. })
    }
}

/// Compares two tensors elementwise. With `tol > 0` single-byte elements
/// are compared as unsigned magnitudes; multi-byte elements must match exactly.
pub fn compare_tensors(
    a: &TensorDesc,
    a_mem: &SimMemory,
    b: &TensorDesc,
    b_mem: &SimMemory,
    tol: u32,
) -> Result<MatchReport> {
    if !a.same_shape(b) {
        return Err(TmuError::Shape {
            op: "compare",
            reason: format!("{a} vs {b}"),
        });
    }
    let (x, y) = (a_mem.tensor(a)?, b_mem.tensor(b)?);
    let eb = a.elem_bytes as usize;
    let mut max_diff = 0;
    for (i, (ea, ebv)) in x.chunks_exact(eb).zip(y.chunks_exact(eb)).enumerate() {
        let diff = if eb == 1 {
            (ea[0] as i32 - ebv[0] as i32).unsigned_abs()
        } else if ea == ebv {
            0
        } else {
            u32::MAX
        };
        if diff > tol {
            return Ok(MatchReport::Mismatch {
                at: a.coords(i as u64),
                left: ea.to_vec(),
                right: ebv.to_vec(),
            });
        }
        max_diff = max_diff.max(diff);
    }
    Ok(MatchReport::Match { max_diff })
}

/// Reads a Bboxcal result: survivor count and packed records.
pub fn read_bbox_output(dst: &TensorDesc, mem: &SimMemory) -> Result<(u32, Vec<u8>)> {
    let head = mem.read(dst.base_addr, BBOX_HEADER as u64)?;
    let count = u32::from_le_bytes(head.try_into().unwrap());
    let body = mem.read(dst.base_addr + BBOX_HEADER as u64, count as u64 * BBOX_RECORD as u64)?;
    Ok((count, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_with(data: &[u8], cap: usize) -> SimMemory {
        let mut m = SimMemory::new(cap);
        m.write(0, data).unwrap();
        m
    }

    #[test]
    fn transpose_two_by_two() {
        let mut m = mem_with(&[1, 2, 3, 4], 64);
        let src = TensorDesc::new(2, 2, 1, 0);
        let out = golden_execute(OpKind::Transpose, &src, &OperatorParams::default(), 32, &mut m).unwrap();
        assert_eq!(m.tensor(&out[0]).unwrap(), &[1, 3, 2, 4]);
    }

    #[test]
    fn pixel_shuffle_channel_order() {
        let mut m = mem_with(b"abcd", 64);
        let src = TensorDesc::new(1, 1, 4, 0);
        let p = OperatorParams { scale: Some(2), ..Default::default() };
        let out = golden_execute(OpKind::PixelShuffle, &src, &p, 16, &mut m).unwrap()[0];
        assert_eq!((out.height, out.width, out.channels), (2, 2, 1));
        assert_eq!(m.tensor(&out).unwrap(), b"abcd");
        // 1x1x8 with s=2 keeps two output channels per position.
        let mut m = mem_with(&[0, 1, 2, 3, 4, 5, 6, 7], 64);
        let src = TensorDesc::new(1, 1, 8, 0);
        let out = golden_execute(OpKind::PixelShuffle, &src, &p, 16, &mut m).unwrap()[0];
        assert_eq!(m.tensor(&out).unwrap(), &[0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn rearrange_pads_with_zero() {
        let rgb: Vec<u8> = (1..=12).collect();
        let mut m = mem_with(&rgb, 256);
        m.fill(64, 64, 0xee).unwrap();
        let src = TensorDesc::new(2, 2, 3, 0);
        let out = golden_execute(OpKind::Rearrange, &src, &OperatorParams::default(), 64, &mut m).unwrap()[0];
        let bytes = m.tensor(&out).unwrap();
        assert_eq!(bytes.len(), 64);
        assert_eq!(&bytes[..3], &[1, 2, 3]);
        assert!(bytes[3..16].iter().all(|&b| b == 0));
        assert_eq!(&bytes[16..19], &[4, 5, 6]);
    }

    #[test]
    fn rearrange_table_three_shape() {
        let mut m = SimMemory::new(448 * 448 * 19);
        let src = TensorDesc::new(448, 448, 3, 0);
        let out = golden_execute(OpKind::Rearrange, &src, &OperatorParams::default(), 448 * 448 * 3, &mut m)
            .unwrap()[0];
        assert_eq!((out.height, out.width, out.channels), (448, 448, 16));
    }

    #[test]
    fn add_saturates() {
        let mut m = mem_with(&[1, 2, 3, 4, 100, 0x80], 64);
        let a = TensorDesc::new(1, 1, 2, 0);
        let b = TensorDesc::new(1, 1, 2, 2);
        let p = OperatorParams { second_source: Some(b), ..Default::default() };
        let out = golden_execute(OpKind::Add, &a, &p, 32, &mut m).unwrap()[0];
        assert_eq!(m.tensor(&out).unwrap(), &[4, 6]);
        let a = TensorDesc::new(1, 1, 1, 4);
        let p = OperatorParams { second_source: Some(a), ..Default::default() };
        let out = golden_execute(OpKind::Add, &a, &p, 40, &mut m).unwrap()[0];
        assert_eq!(m.tensor(&out).unwrap(), &[127]);
    }

    #[test]
    fn bboxcal_filters_on_objectness() {
        let mut data = vec![0u8; 3 * 85];
        for (r, obj) in [200u8, 50, 130].iter().enumerate() {
            data[r * 85] = r as u8 + 1;
            data[r * 85 + 4] = *obj;
        }
        let mut m = mem_with(&data, 2048);
        let src = TensorDesc::new(1, 3, 85, 0);
        let p = OperatorParams { threshold: Some(128), ..Default::default() };
        let out = golden_execute(OpKind::Bboxcal, &src, &p, 512, &mut m).unwrap()[0];
        let (n, recs) = read_bbox_output(&out, &m).unwrap();
        assert_eq!(n, 2);
        assert_eq!(recs[0], 1);
        assert_eq!(recs[85], 3);
    }

    #[test]
    fn missing_second_source_is_rejected() {
        let mut m = SimMemory::new(64);
        let src = TensorDesc::new(1, 1, 4, 0);
        assert!(golden_execute(OpKind::Route, &src, &OperatorParams::default(), 32, &mut m).is_err());
    }

    #[test]
    fn out_of_memory_region_is_rejected() {
        let mut m = SimMemory::new(8);
        let src = TensorDesc::new(2, 2, 4, 0);
        assert!(matches!(
            golden_execute(OpKind::Transpose, &src, &OperatorParams::default(), 0, &mut m),
            Err(TmuError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn compare_reports_first_mismatch() {
        let a = mem_with(&[5, 6, 7, 8], 8);
        let mut b = a.clone();
        let t = TensorDesc::new(2, 2, 1, 0);
        assert!(compare_tensors(&t, &a, &t, &b, 0).unwrap().is_match());
        b.write(0, &[6]).unwrap();
        let r = compare_tensors(&t, &a, &t, &b, 0).unwrap();
        assert_eq!(r, MatchReport::Mismatch { at: (0, 0, 0), left: vec![5], right: vec![6] });
        assert!(compare_tensors(&t, &a, &t, &b, 1).unwrap().is_match());
        let u = TensorDesc::new(1, 4, 1, 0);
        assert!(compare_tensors(&t, &a, &u, &b, 0).is_err());
    }

    #[test]
    fn resize_factor_two_is_box_average() {
        assert_eq!(resize_coord_q8(0, 4, 2), (0, 1, 128));
        assert_eq!(resize_coord_q8(1, 4, 2), (2, 3, 128));
        assert_eq!(bilinear_q8(10, 20, 30, 40, 128, 128), 25);
    }
}
