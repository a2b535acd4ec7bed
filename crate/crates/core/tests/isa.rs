use std::path::Path;

use proptest::prelude::*;
use tmu_core::affine::MapMode;
use tmu_core::error::{DecodeError, TmuError};
use tmu_core::isa::{
    assemble, assemble_with, decode, decode_program, disassemble, encode, encode_program, AsmOptions, Opcode,
    Program, TmInstruction,
};
use tmu_core::tensor::{OpKind, OperatorParams, TensorDesc};

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)).unwrap()
}

#[test]
fn minimal_program() {
    let p = assemble("transpose src=0x0 h=2 w=2 c=1 dst=0x100; halt").unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p.instructions()[1].opcode, Opcode::Halt);
    let t = &p.instructions()[0];
    assert_eq!((t.dst.height, t.dst.width, t.dst.channels, t.dst.base_addr), (2, 2, 1, 0x100));
}

#[test]
fn pixelshuffle_row_shape() {
    let p = assemble("pixelshuffle src=0x0 h=448 w=448 c=64 s=2 dst=0x200000; halt").unwrap_err();
    // 448·448·64 source bytes reach past 0x200000.
    assert!(p.message.contains("overlaps"), "{p}");
    let p = assemble("pixelshuffle src=0x0 h=448 w=448 c=64 s=2 dst=0x1000000; halt").unwrap();
    let d = p.instructions()[0].dst;
    assert_eq!((d.height, d.width, d.channels), (896, 896, 16));
}

#[test]
fn missing_halt_is_reported() {
    let e = assemble("route src=0x0 src1=0x100 h=1 w=1 c=16 c1=16 dst=0x300").unwrap_err();
    assert!(e.message.contains("HALT"), "{e}");
    assert_eq!(e.line, 1);
}

#[test]
fn diagnostics_carry_line_and_column() {
    let e = assemble("# header\ntranspose src=0 h=2 w=2 c=1 dst=0x100 bogus=3\nhalt").unwrap_err();
    assert_eq!((e.line, e.col), (2, 39));
    let e = assemble("halt; frobnicate src=0").unwrap_err();
    assert_eq!((e.line, e.col), (1, 7));
    let e = assemble("nosuchop src=0\nhalt").unwrap_err();
    assert!(e.message.contains("unknown opcode"));
    let e = assemble("bboxcal src=0 h=1 w=1 c=85 dst=0x1000\nhalt").unwrap_err();
    assert!(e.message.contains("threshold"), "{e}");
    let e = assemble("transpose src=0 h=2 w=2 c=1 s=2 dst=0x100\nhalt").unwrap_err();
    assert!(e.message.contains("not accepted"), "{e}");
    let e = assemble("transpose src=0 h=2 w=2 c=1 dst=0x2\nhalt").unwrap_err();
    assert!(e.message.contains("overlap"), "{e}");
    let e = assemble("transpose src=0 h=2 w=2 c=1 dst=0x100 h=3\nhalt").unwrap_err();
    assert!(e.message.contains("duplicate"));
}

#[test]
fn table_rows_assemble() {
    let p = assemble(&fixture("fixtures/table3.tmasm")).unwrap();
    assert_eq!(p.body().len(), 12);
    let mut ops: Vec<_> = p.body().iter().map(|i| i.op().unwrap()).collect();
    ops.sort();
    assert_eq!(ops, OpKind::ALL.to_vec());
}

#[test]
fn assembly_is_deterministic_and_disassembles() {
    let text = fixture("fixtures/table3.tmasm");
    let a = encode_program(&assemble(&text).unwrap()).unwrap();
    let b = encode_program(&assemble(&text).unwrap()).unwrap();
    assert_eq!(a, b);
    let p = assemble(&text).unwrap();
    assert_eq!(assemble(&disassemble(&p)).unwrap(), p);
    let lit = AsmOptions { mode: MapMode::PaperLiteral };
    let q = assemble_with(&text, lit).unwrap();
    assert_ne!(encode_program(&q).unwrap(), a);
    assert_eq!(assemble_with(&disassemble(&q), lit).unwrap(), q);
}

#[test]
fn golden_encoding_snapshot() {
    let p = assemble("transpose src=0x0 h=2 w=2 c=1 dst=0x100; halt").unwrap();
    let hex: String = p.to_bytes().unwrap().iter().map(|b| format!("{b:02x}")).collect();
    if std::env::var_os("TMU_RECORD_GOLDEN").is_some() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transpose_2x2.hex");
        std::fs::write(path, format!("{hex}\n")).unwrap();
    }
    let golden = fixture("golden/transpose_2x2.hex");
    assert_eq!(hex, golden.trim());
    assert_eq!(Program::from_bytes(&p.to_bytes().unwrap()).unwrap(), p);
}

#[test]
fn halt_encoding() {
    assert_eq!(encode(&TmInstruction::halt()).unwrap(), vec![0]);
    assert_eq!(decode(&[0]).unwrap(), TmInstruction::halt());
}

#[test]
fn decode_errors() {
    let p = assemble("transpose src=0x0 h=2 w=2 c=1 dst=0x100; halt").unwrap();
    let mut w = encode(&p.instructions()[0]).unwrap();
    let full = w.clone();
    w[0] = (w[0] & !0xFF) | 0xFF;
    assert_eq!(decode(&w), Err(TmuError::Decode(DecodeError::UnknownOpcode(0xFF))));
    assert!(matches!(decode(&full[..13]), Err(TmuError::Decode(DecodeError::Truncated { .. }))));
    let mut long = full.clone();
    long[24] = 4096;
    assert!(matches!(decode(&long), Err(TmuError::Decode(DecodeError::LengthMismatch { .. }))));
    assert!(matches!(decode_program(&full), Err(TmuError::Decode(DecodeError::MissingHalt))));
    assert!(matches!(Program::from_bytes(b"TMU2\x01"), Err(TmuError::Decode(DecodeError::BadHeader))));
}

#[test]
fn field_overflow() {
    let src = TensorDesc::new(1, 1, 16, 0x1_0000_0000);
    assert!(TmInstruction::new(OpKind::Transpose, src, OperatorParams::default(), 0x2_0000_0000, MapMode::OracleConsistent).is_err());
}

fn valid_instruction() -> impl Strategy<Value = TmInstruction> {
    let op = proptest::sample::select(OpKind::ALL.to_vec());
    (op, 1u32..9, 1u32..9, 1u32..5, any::<u8>(), 1u32..3, 0u32..2, 1u32..3, any::<bool>(), 0u32..3, any::<bool>())
        .prop_filter_map("shape not valid for operator", |(op, h, w, c, thr, s, pad, st, lit, ebsel, fwd)| {
            let mut src = TensorDesc::new(h, w, c, 0x40);
            let mut p = OperatorParams::default();
            let eb = [1, 2, 4][ebsel as usize];
            match op {
                OpKind::Rearrange | OpKind::Transpose | OpKind::Rot90 | OpKind::Route | OpKind::Img2col
                | OpKind::Upsample | OpKind::Split | OpKind::PixelShuffle | OpKind::PixelUnshuffle => {
                    src = src.with_elem_bytes(eb)
                }
                _ => {}
            }
            match op {
                OpKind::Resize => {
                    src.height *= s;
                    src.width *= s;
                    if pad == 1 {
                        p.out_size = Some((h + 1, w));
                    } else {
                        p.scale = Some(s);
                    }
                }
                OpKind::Bboxcal => {
                    src.channels = 85 * c;
                    p.threshold = Some(thr);
                }
                OpKind::Img2col => {
                    p.kernel = Some((s.min(w), 1));
                    p.padding = (pad == 1).then_some((pad, 0));
                    p.stride = (st == 2).then_some((st, 1));
                }
                OpKind::PixelShuffle => {
                    src.channels = c * s * s;
                    p.scale = Some(s);
                }
                OpKind::PixelUnshuffle => {
                    src.height *= s;
                    src.width *= s;
                    p.scale = Some(s);
                }
                OpKind::Upsample => p.scale = Some(s),
                OpKind::Split => src.channels *= 2,
                OpKind::Route | OpKind::Add => {
                    let c1 = if op == OpKind::Route { c + 1 } else { src.channels };
                    p.second_source = Some(TensorDesc::new(src.height, src.width, c1, 0x20000).with_elem_bytes(src.elem_bytes));
                }
                OpKind::Rearrange | OpKind::Transpose | OpKind::Rot90 => {}
            }
            let mode = if lit { MapMode::PaperLiteral } else { MapMode::OracleConsistent };
            let mut i = TmInstruction::new(op, src, p, 0x40000, mode).ok()?;
            i.forward = fwd;
            Some(i)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_round_trip(i in valid_instruction()) {
        let w = encode(&i).unwrap();
        prop_assert_eq!(decode(&w).unwrap(), i);
    }

    #[test]
    fn program_bytes_round_trip(body in proptest::collection::vec(valid_instruction(), 0..4)) {
        let mut v = body;
        v.push(TmInstruction::halt());
        let p = Program::new(v).unwrap();
        prop_assert_eq!(Program::from_bytes(&p.to_bytes().unwrap()).unwrap(), p.clone());
        let oracle = p.body().iter().all(|i| {
            i.affine_map().unwrap().is_none_or(|m| m.mode == MapMode::OracleConsistent)
        });
        if oracle {
            prop_assert_eq!(assemble(&disassemble(&p)).unwrap(), p);
        }
    }
}
