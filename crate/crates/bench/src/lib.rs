//! Inputs shared by the criterion benchmarks under `benches/`.

use tmu_core::cases::{seeded, table3_cases, Case};
use tmu_core::{MapMode, SimMemory, TmInstruction};

pub struct Prepared {
    pub case: Case,
    pub instr: TmInstruction,
    pub mem: SimMemory,
}

/// One ready-to-run instance of every operator at `448 / scale` resolution.
pub fn prepared(scale: u32, seed: u64) -> Vec<Prepared> {
    let mut rng = seeded(seed);
    table3_cases(scale)
        .into_iter()
        .map(|case| {
            let instr = case.instruction(MapMode::OracleConsistent).expect("table cases are valid");
            let mem = case.memory(&mut rng);
            Prepared { case, instr, mem }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn covers_every_operator() {
        let p = super::prepared(14, 1);
        assert_eq!(p.len(), 12);
    }
}
