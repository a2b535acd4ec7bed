//! Lane-parallel int8 unit used by Add and by Resize interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmuError};
use crate::rme::ResizeTap;
use crate::tensor::BUS_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

/// Saturating int8 lanes; costs one cycle per bus word.
pub fn elementwise_process(op: ElemOp, a: &[u8], b: &[u8]) -> Result<Vec<u8>> {
    if a.len() != b.len() {
        return Err(TmuError::LaneMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as i8, y as i8);
            let v = match op {
                ElemOp::Add => x.saturating_add(y),
                ElemOp::Sub => x.saturating_sub(y),
                ElemOp::Mul => x.saturating_mul(y),
            };
            v as u8
        })
        .collect())
}

pub fn word_cycles(bytes: u64) -> u64 {
    bytes.div_ceil(BUS_BYTES as u64)
}

/// Separable Q8 interpolation: horizontal blend of each row pair, then vertical.
pub fn interpolate(t: &ResizeTap) -> u8 {
    let (fx, fy) = (t.fx as u64, t.fy as u64);
    let [p00, p10, p01, p11] = t.p.map(u64::from);
    let top = p00 * (256 - fx) + p10 * fx;
    let bottom = p01 * (256 - fx) + p11 * fx;
    ((top * (256 - fy) + bottom * fy + (1 << 15)) >> 16) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::golden::bilinear_q8;

    fn b(v: &[i8]) -> Vec<u8> {
        v.iter().map(|&x| x as u8).collect()
    }

    #[test]
    fn lanes() {
        assert_eq!(elementwise_process(ElemOp::Add, &b(&[100]), &b(&[100])).unwrap(), b(&[127]));
        assert_eq!(elementwise_process(ElemOp::Add, &b(&[1, 2, 3]), &b(&[4, 5, 6])).unwrap(), b(&[5, 7, 9]));
        assert_eq!(elementwise_process(ElemOp::Mul, &b(&[-2]), &b(&[64])).unwrap(), b(&[-128]));
        assert_eq!(elementwise_process(ElemOp::Mul, &b(&[-3]), &b(&[64])).unwrap(), b(&[-128]));
        assert_eq!(elementwise_process(ElemOp::Sub, &b(&[-100]), &b(&[100])).unwrap(), b(&[-128]));
        assert!(matches!(
            elementwise_process(ElemOp::Add, &[1], &[1, 2]),
            Err(TmuError::LaneMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn mul_matches_scalar_reference() {
        for x in i8::MIN..=i8::MAX {
            for y in [-128i8, -64, -2, -1, 0, 1, 2, 64, 127] {
                let exact = (x as i32 * y as i32).clamp(-128, 127) as i8;
                assert_eq!(elementwise_process(ElemOp::Mul, &[x as u8], &[y as u8]).unwrap(), vec![exact as u8]);
            }
        }
    }

    #[test]
    fn interpolation_agrees_with_reference() {
        let mut s = 1u32;
        for _ in 0..5000 {
            s = s.wrapping_mul(1_103_515_245).wrapping_add(12345);
            let p = s.to_le_bytes();
            let (fx, fy) = ((s >> 5) % 256, (s >> 17) % 256);
            let t = ResizeTap { p, fx, fy };
            assert_eq!(interpolate(&t), bilinear_q8(p[0], p[1], p[2], p[3], fx, fy));
        }
    }
}
